import logging

from dataclasses import dataclass, field
from typing import List

import torch

from tqdm import tqdm

from .autoencoder import TokenPyramid
from .errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)


@dataclass
class SampleSet:
    """N soft masks [N, H, W] with the token pyramids that produced them and the seed of every rollout."""
    masks: torch.Tensor
    pyramids: List[TokenPyramid] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.masks.dim() != 3 or self.masks.shape[0] < 1:
            raise InvalidInputError("a sample set needs masks [N >= 1, H, W], got {}".format(list(self.masks.shape)))

    def __len__(self):
        return self.masks.shape[0]

    def binary(self):
        return binarize(self.masks)

    def ledger(self):
        return [dict(sample=i, seed=seed) for i, seed in enumerate(self.seeds)]


def binarize(mask):
    """Threshold at 0.5; exactly 0.5 maps to foreground."""
    return (mask >= 0.5).to(mask.dtype)


def check_models(models):
    encoder, segmentor = models.image_encoder, models.segmentor
    if segmentor.autoencoder is not models.autoencoder:
        raise ConfigurationError("the segmentor was built on a different autoencoder")
    if encoder.out_dim != segmentor.width or encoder.num_tokens != segmentor.num_image_tokens:
        raise ConfigurationError("image encoder output [{}, {}] does not match segmentor prefix [{}, {}]".format(
            encoder.num_tokens, encoder.out_dim, segmentor.num_image_tokens, segmentor.width))


def _image_embedding(image, models):
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return models.image_encoder(image)


def _rollout(embedding, class_id, models, seed, temperature, top_k):
    generator = torch.Generator().manual_seed(int(seed))
    pyramid = models.segmentor.generate(class_id, embedding, temperature=temperature, generator=generator, top_k=top_k)
    soft = models.autoencoder.decode(models.autoencoder.dequantize_pyramid(pyramid))
    return soft[0, 0], pyramid


@torch.no_grad()
def segment(image, class_id, models, seed=0, temperature=1.0, top_k=0):
    """
    One autoregressive rollout decoded to a soft mask.
    :param image: tensor [C_img, H, W]
    :return: (soft mask [H, W], TokenPyramid)
    """
    check_models(models)
    return _rollout(_image_embedding(image, models), class_id, models, seed, temperature, top_k)


@torch.no_grad()
def sample_masks(image, class_id, models, n=16, temperature=1.0, base_seed=0, top_k=0, progress=False):
    """
    N independent rollouts; sample i uses seed base_seed + i and its own generator, so every sample can be
    reproduced from its seed alone.
    :return: SampleSet
    """
    if n < 1:
        raise InvalidInputError("sample count must be >= 1, got {}".format(n))
    check_models(models)
    embedding = _image_embedding(image, models)
    masks, pyramids, seeds = [], [], []
    for i in tqdm(range(n), desc="sampling", disable=not progress):
        seed = base_seed + i
        mask, pyramid = _rollout(embedding, class_id, models, seed, temperature, top_k)
        masks.append(mask)
        pyramids.append(pyramid)
        seeds.append(seed)
    logger.debug("drew %d samples for class %s", n, class_id)
    return SampleSet(masks=torch.stack(masks), pyramids=pyramids, seeds=seeds)


def aggregate(samples):
    """
    Pixel-wise mean of the soft samples, and its binarization.
    :return: (soft mask [H, W], binary mask [H, W])
    """
    masks = samples.masks if isinstance(samples, SampleSet) else samples
    if masks is None or masks.dim() != 3 or masks.shape[0] == 0:
        raise InvalidInputError("cannot aggregate an empty sample set")
    # Sorting along N makes the float sum independent of sample order.
    soft = torch.sort(masks.double(), dim=0).values.mean(dim=0).clamp(0.0, 1.0).to(masks.dtype)
    return soft, binarize(soft)
