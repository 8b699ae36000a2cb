"""
Desk-scale training runs on a 64x64 synthetic set. They take tens of minutes on a few CPU cores and only run with
`pytest -m slow`.
"""
import math

import numpy as np
import pytest
import torch

from nextscale_seg.ablation import build_variant
from nextscale_seg.config import parse_config
from nextscale_seg.data_synth import SegmentationDataset, generate_dataset
from nextscale_seg.evaluation import evaluate_dataset
from nextscale_seg.trainer import evaluate_autoencoder, train_stage1, train_stage2

SEEDS = (0, 1, 2)
SAMPLE_COUNTS = (1, 4, 8, 16)
VARIANTS = {"full": {}, "next_token": {"single_scale": True, "next_token": True}}


def desk_config_dict(seed=0, **ablation):
    return {
        "dataset": {"image_size": 64, "annotators": 4, "train": 400, "val": 50, "test": 50, "seed": 0},
        "model": {"codebook_size": 512, "code_dim": 32, "latent_size": 16, "num_scales": 8, "ae_hidden": 32,
                  "image_feature_dim": 64, "svd_rank": 4, "adapter_hidden": 128, "width": 128, "depth": 4,
                  "heads": 4},
        "stage1": {"stage": 1, "epochs": 30, "batch_size": 32, "lr": 1e-3, "seed": seed},
        "stage2": {"stage": 2, "epochs": 40, "batch_size": 16, "lr": 3e-4, "weight_decay": 0.05, "seed": seed},
        "sampling": {"n": 16, "seed": seed},
        "metrics": {"sample_counts": list(SAMPLE_COUNTS), "annotators": 4},
        "ablation": ablation,
    }


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    generate_dataset(parse_config(desk_config_dict()).dataset, out)
    return out


@pytest.fixture(scope="module")
def stage1_runs(desk_data):
    """(variant, seed) -> (config, models, held-out reconstruction Dice) after stage 1."""
    train, val, test = (SegmentationDataset(desk_data, split) for split in ("train", "val", "test"))
    runs = {}
    for name, flags in VARIANTS.items():
        for seed in SEEDS:
            config = parse_config(desk_config_dict(seed, **flags))
            models = build_variant(config.ablation, config)
            train_stage1(config, train, models.autoencoder, val)
            models.autoencoder.eval()
            runs[name, seed] = config, models, evaluate_autoencoder(models.autoencoder, test, config.stage1)[1]
    return runs


@pytest.fixture(scope="module")
def stage2_reports(stage1_runs, desk_data):
    """(variant, seed) -> MetricReport on the test split."""
    train, val = SegmentationDataset(desk_data, "train"), SegmentationDataset(desk_data, "val")
    reports = {}
    for key, (config, models, _) in stage1_runs.items():
        train_stage2(config, train, models.autoencoder, models.image_encoder, models.segmentor, val)
        reports[key] = evaluate_dataset(desk_data, config, models=models.eval())
    return reports


@pytest.mark.slow
def test_held_out_reconstruction(stage1_runs):
    for seed in SEEDS:
        assert stage1_runs["full", seed][2] >= 0.95


@pytest.mark.slow
def test_multi_scale_reconstructs_at_least_as_well_as_single_scale(stage1_runs):
    multi = np.mean([stage1_runs["full", seed][2] for seed in SEEDS])
    single = np.mean([stage1_runs["next_token", seed][2] for seed in SEEDS])
    assert multi >= single


@pytest.mark.slow
def test_partial_error_shrinks_with_more_scales(stage1_runs, desk_data):
    autoencoder = stage1_runs["full", 0][1].autoencoder
    masks = SegmentationDataset(desk_data, "test").masks
    with torch.no_grad():
        m = autoencoder.encode(masks.reshape(-1, *masks.shape[-2:]))
        sums = autoencoder.partial_dequantize(autoencoder.quantize_pyramid(m))
    errors = torch.stack([(m - m_hat).flatten(1).norm(dim=1) for m_hat in sums], dim=1)
    non_increasing = (errors[:, 1:] <= errors[:, :-1]).all(dim=1)
    assert non_increasing.double().mean().item() >= 0.9


@pytest.mark.slow
def test_segmentor_memorizes_one_sample(tmp_path):
    raw = desk_config_dict()
    raw["dataset"].update(annotators=1, train=1, val=0, test=0)
    raw["metrics"]["annotators"] = 1
    raw["stage2"].update(epochs=2000, batch_size=1, lr=1e-3, max_steps=2000)
    config = parse_config(raw)
    generate_dataset(config.dataset, tmp_path)
    data = SegmentationDataset(tmp_path, "train")
    models = build_variant(config.ablation, config)
    result = train_stage2(config, data, models.autoencoder, models.image_encoder, models.segmentor)
    assert result.steps <= 2000
    assert result.best < 0.05 * math.log(config.model.codebook_size)


@pytest.mark.slow
def test_consensus_matches_the_majority_vote(stage2_reports):
    assert np.mean([stage2_reports["full", seed].dice for seed in SEEDS]) >= 0.80


@pytest.mark.slow
def test_next_scale_beats_next_token(stage2_reports):
    wins = sum(stage2_reports["full", seed].ged[16] < stage2_reports["next_token", seed].ged[16] for seed in SEEDS)
    assert wins >= 2


@pytest.mark.slow
def test_ged_falls_with_more_samples(stage2_reports):
    ged = [np.mean([stage2_reports["full", seed].ged[n] for seed in SEEDS]) for n in SAMPLE_COUNTS]
    assert all(a > b for a, b in zip(ged, ged[1:]))
