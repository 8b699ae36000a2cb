import pytest
import torch

from nextscale_seg.ablation import base_schedule, build_variant, variant_name, variant_transforms
from nextscale_seg.config import AblationConfig, parse_config
from nextscale_seg.errors import ConfigurationError

from .conftest import tiny_config_dict


def _named(models):
    return {"{}.{}".format(module_name, name): p for module_name, module in models.modules().items()
            for name, p in module.named_parameters()}


def test_full_model(tiny_config):
    models = build_variant(AblationConfig(), tiny_config)
    assert models.name == "full"
    assert models.schedule.resolutions == ((2, 2), (3, 3), (4, 4))
    assert models.token_budget() == dict(single_scale=16, multi_scale=29, tokens=29, decode_steps=3)
    assert models.image_encoder.adapter.use_svd


def test_single_scale(tiny_config):
    models = build_variant(AblationConfig(single_scale=True), tiny_config)
    assert models.name == "single-scale"
    assert models.schedule.K == 1
    assert models.token_budget() == dict(single_scale=16, multi_scale=29, tokens=16, decode_steps=1)


def test_next_token(tiny_config):
    models = build_variant(AblationConfig(single_scale=True, next_token=True), tiny_config)
    assert models.name == "single-scale+next-token"
    assert models.segmentor.next_token
    assert models.token_budget()["decode_steps"] == 16


def test_next_token_requires_single_scale(tiny_config):
    with pytest.raises(ConfigurationError, match="single_scale"):
        variant_transforms(AblationConfig(next_token=True))
    with pytest.raises(ConfigurationError):
        build_variant(AblationConfig(next_token=True), tiny_config)


def test_variant_names():
    assert variant_name(AblationConfig(svd_adapter=True)) == "mlp-adapter"
    assert variant_name(AblationConfig(single_scale=True, svd_adapter=True)) == "single-scale+mlp-adapter"


def test_single_scale_only_drops_refiners(tiny_config):
    full = _named(build_variant(AblationConfig(), tiny_config))
    single = _named(build_variant(AblationConfig(single_scale=True), tiny_config))
    assert set(full) - set(single) == {"autoencoder.refiners.{}.{}".format(k, kind) for k in (1, 2)
                                       for kind in ("weight", "bias")}
    assert set(single) <= set(full)
    for name, p in single.items():
        if name.startswith(("autoencoder.", "image_encoder.")):
            assert torch.equal(p, full[name]), name


def test_mlp_adapter_shares_every_weight(tiny_config):
    full = _named(build_variant(AblationConfig(), tiny_config))
    mlp = build_variant(AblationConfig(svd_adapter=True), tiny_config)
    assert not mlp.image_encoder.adapter.use_svd
    named = _named(mlp)
    assert named.keys() == full.keys()
    assert all(torch.equal(p, full[name]) for name, p in named.items())


def test_parameter_counts(tiny_config):
    models = build_variant(AblationConfig(), tiny_config)
    counts = models.parameter_counts()
    assert counts["total"] == sum(p.numel() for p in _named(models).values())
    assert counts["autoencoder"] == sum(p.numel() for p in models.autoencoder.parameters())


def test_explicit_scales():
    raw = tiny_config_dict()
    raw["model"]["scales"] = [[1, 1], [4, 4]]
    config = parse_config(raw)
    assert base_schedule(config.model).resolutions == ((1, 1), (4, 4))
    raw["model"]["scales"] = [[1, 1], [2, 2]]
    with pytest.raises(ConfigurationError, match="model.scales"):
        base_schedule(parse_config(raw).model)


def test_rank_too_large():
    raw = tiny_config_dict()
    raw["model"]["svd_rank"] = 9
    with pytest.raises(ConfigurationError, match="model.svd_rank"):
        build_variant(AblationConfig(), parse_config(raw))


def test_dtype(tiny_config):
    models = build_variant(AblationConfig(), tiny_config, dtype=torch.float64)
    assert all(p.dtype == torch.float64 for p in _named(models).values())
