"""
Model wiring for the full model and its ablation arms. Every arm is a transform of the shared build settings, so
variants differ from the full model only in the components their flag names.
"""
import logging

from dataclasses import dataclass, field

import torch

from .autoencoder import MaskAutoencoder, ScaleSchedule
from .checkpoint import load_checkpoint
from .config import AblationConfig, parse_config
from .errors import ConfigurationError
from .image_adapter import ImageEncoder
from .segmentor import NextScaleSegmentor
from .trainer import derive_seed

logger = logging.getLogger(__name__)


# region Transforms


class VariantTransform:

    def apply(self, settings):
        raise NotImplementedError()


class SingleScaleTransform(VariantTransform):
    """One token map at the latent resolution (K = 1)."""

    def apply(self, settings):
        settings["schedule"] = ScaleSchedule.single(settings["schedule"].base[0])
        return settings


class NextTokenTransform(VariantTransform):
    """Decode the single token map one token at a time in row-major order."""

    def apply(self, settings):
        if settings["schedule"].K != 1:
            raise ConfigurationError("ablation.next_token requires ablation.single_scale")
        settings["next_token"] = True
        return settings


class MlpAdapterTransform(VariantTransform):
    """Drop the SVD branch of the image adapter."""

    def apply(self, settings):
        settings["use_svd"] = False
        return settings


def variant_transforms(flags):
    if flags.next_token and not flags.single_scale:
        raise ConfigurationError("ablation.next_token requires ablation.single_scale")
    transforms = []
    if flags.single_scale:
        transforms.append(SingleScaleTransform())
    if flags.next_token:
        transforms.append(NextTokenTransform())
    if flags.svd_adapter:
        transforms.append(MlpAdapterTransform())
    return transforms


def variant_name(flags):
    names = [name for name, on in (("single-scale", flags.single_scale), ("next-token", flags.next_token),
                                   ("mlp-adapter", flags.svd_adapter)) if on]
    return "+".join(names) if names else "full"


# endregion

# region Building


def base_schedule(model_config):
    if model_config.scales:
        schedule = ScaleSchedule(tuple(tuple(s) for s in model_config.scales))
    else:
        schedule = ScaleSchedule.default(model_config.latent_size, model_config.num_scales)
    if schedule.base != (model_config.latent_size, model_config.latent_size):
        raise ConfigurationError("model.scales must end at the latent resolution {}".format(model_config.latent_size))
    return schedule


@dataclass
class VariantModels:
    autoencoder: MaskAutoencoder
    image_encoder: ImageEncoder
    segmentor: NextScaleSegmentor
    flags: AblationConfig = field(default_factory=AblationConfig)
    # Schedule of the full model; the single-scale arm reports its token budget against it.
    reference_schedule: ScaleSchedule = None

    @property
    def name(self):
        return variant_name(self.flags)

    @property
    def schedule(self):
        return self.autoencoder.schedule

    def modules(self):
        return dict(autoencoder=self.autoencoder, image_encoder=self.image_encoder, segmentor=self.segmentor)

    def parameter_counts(self):
        counts = {name: sum(p.numel() for p in module.parameters()) for name, module in self.modules().items()}
        counts["total"] = sum(counts.values())
        return counts

    def token_budget(self):
        schedule = self.schedule
        reference = self.reference_schedule or schedule
        h, w = schedule.base
        return dict(single_scale=h * w, multi_scale=reference.token_count, tokens=schedule.token_count,
                    decode_steps=self.segmentor.num_groups)

    def eval(self):
        for module in self.modules().values():
            module.eval()
        return self


def build_variant(flags, config, dtype=torch.float32):
    """
    Build the autoencoder, image encoder and segmentor of one variant. Initialization draws from RNG streams derived
    from the stage seeds, so two variants share every weight their flags leave untouched.
    :param flags: AblationConfig
    :param config: RunConfig
    :return: VariantModels
    """
    mc, ds = config.model, config.dataset
    reference = base_schedule(mc)
    settings = dict(schedule=reference, next_token=False, use_svd=True)
    for transform in variant_transforms(flags):
        settings = transform.apply(settings)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(config.stage1.seed, "init:autoencoder"))
        autoencoder = MaskAutoencoder(image_size=ds.image_size, latent_size=mc.latent_size, code_dim=mc.code_dim,
                                      codebook_size=mc.codebook_size, hidden=mc.ae_hidden, schedule=settings["schedule"],
                                      codebook_seed=mc.codebook_seed)
        torch.manual_seed(derive_seed(config.stage2.seed, "init:image_encoder"))
        try:
            image_encoder = ImageEncoder(image_size=ds.image_size, latent_size=mc.latent_size,
                                         in_channels=ds.image_channels, feature_dim=mc.image_feature_dim,
                                         hidden=mc.ae_hidden, adapter_hidden=mc.adapter_hidden, out_dim=mc.width,
                                         rank=mc.svd_rank, use_svd=settings["use_svd"],
                                         freeze_backbone=mc.freeze_backbone)
        except ConfigurationError as ex:
            raise ConfigurationError("model.svd_rank: {}".format(ex))
        torch.manual_seed(derive_seed(config.stage2.seed, "init:segmentor"))
        segmentor = NextScaleSegmentor(autoencoder, num_classes=ds.num_classes, num_image_tokens=image_encoder.num_tokens,
                                       width=mc.width, depth=mc.depth, heads=mc.heads, mlp_ratio=mc.mlp_ratio,
                                       next_token=settings["next_token"])
    models = VariantModels(autoencoder.to(dtype), image_encoder.to(dtype), segmentor.to(dtype), flags=flags,
                           reference_schedule=reference)
    logger.debug("built variant %s: %s", models.name, models.parameter_counts())
    return models


def load_models(path, config=None, expected_stage=2):
    """
    Rebuild the models stored in a checkpoint.
    :param config: RunConfig; the checkpoint's config echo is used when None
    :return: (VariantModels, Checkpoint)
    """
    checkpoint = load_checkpoint(path, expected_stage=expected_stage)
    config = config if config is not None else parse_config(checkpoint.config)
    models = build_variant(config.ablation, config)
    for name, module in models.modules().items():
        if name in checkpoint.states:
            checkpoint.restore(name, module)
    return models.eval(), checkpoint

# endregion
