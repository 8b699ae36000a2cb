import logging
import math

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codebook import Codebook, lookup, quantize
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

# Side lengths the default schedule picks from; base 16 gives 1, 2, 3, 4, 6, 8, 12, 16.
_canonical_sides = (1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128)


# region Scale schedule


@dataclass(frozen=True)
class ScaleSchedule:
    resolutions: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        resolutions = tuple((int(h), int(w)) for h, w in self.resolutions)
        object.__setattr__(self, "resolutions", resolutions)
        if not resolutions:
            raise InvalidInputError("a scale schedule needs at least one scale")
        for (h0, w0), (h1, w1) in zip(resolutions, resolutions[1:]):
            if h1 < h0 or w1 < w0:
                raise InvalidInputError("scale resolutions must be non-decreasing: {}".format(list(resolutions)))
        if min(min(hw) for hw in resolutions) < 1:
            raise InvalidInputError("scale resolutions must be positive")

    @classmethod
    def default(cls, base, num_scales=None):
        sides = [s for s in _canonical_sides if s < base] + [base]
        if num_scales is not None:
            if num_scales > len(sides):
                raise InvalidInputError("cannot build {} scales up to base {}".format(num_scales, base))
            sides = sides[len(sides) - num_scales:]
        return cls(tuple((s, s) for s in sides))

    @classmethod
    def single(cls, base):
        return cls(((base, base),))

    @property
    def K(self):
        return len(self.resolutions)

    @property
    def base(self):
        return self.resolutions[-1]

    @property
    def sizes(self):
        return [h * w for h, w in self.resolutions]

    @property
    def token_count(self):
        return sum(self.sizes)

    @property
    def offsets(self):
        """(begin, end) of every scale in the flattened token sequence."""
        spans, cursor = [], 0
        for size in self.sizes:
            spans.append((cursor, cursor + size))
            cursor += size
        return spans

    def scale_ids(self):
        return torch.cat([torch.full((size,), k, dtype=torch.long) for k, size in enumerate(self.sizes)])

    def __len__(self):
        return self.K

    def __iter__(self):
        return iter(self.resolutions)


def interpolate(raster, target):
    """
    Channel-wise bilinear interpolation with corner-aligned sampling; exact identity when the shape is unchanged.
    :param raster: tensor [B, d, h, w] (or [d, h, w])
    :param target: (h', w')
    """
    target = (int(target[0]), int(target[1]))
    if min(target) < 1:
        raise InvalidInputError("target size must be positive, got {}".format(target))
    if tuple(raster.shape[-2:]) == target:
        return raster
    batched = raster.dim() == 4
    out = F.interpolate(raster if batched else raster.unsqueeze(0), size=target, mode="bilinear", align_corners=True)
    return out if batched else out[0]


# endregion

# region Token pyramid


class TokenPyramid:
    """Ordered multi-scale token maps, coarsest first. Each map is a long tensor [B, h_k, w_k]."""

    def __init__(self, maps):
        self.maps = [m.long() for m in maps]

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, k):
        return self.maps[k]

    @property
    def batch_size(self):
        return self.maps[0].shape[0]

    @property
    def resolutions(self):
        return [tuple(m.shape[-2:]) for m in self.maps]

    def truncate(self, k):
        return TokenPyramid(self.maps[:k])

    def select(self, index):
        return TokenPyramid([m[index] for m in self.maps])

    def flatten(self):
        return torch.cat([m.reshape(m.shape[0], -1) for m in self.maps], dim=1)

    @classmethod
    def from_flat(cls, flat, schedule):
        maps = [flat[:, b:e].reshape(-1, h, w) for (b, e), (h, w) in zip(schedule.offsets, schedule.resolutions)]
        return cls(maps)

    @classmethod
    def concat(cls, pyramids):
        return cls([torch.cat(maps, dim=0) for maps in zip(*[p.maps for p in pyramids])])

    def equal(self, other):
        return len(self) == len(other) and all(torch.equal(a, b) for a, b in zip(self.maps, other.maps))

    def __repr__(self):
        return "TokenPyramid(B={}, resolutions={})".format(self.batch_size, self.resolutions)


# endregion

# region Convolutional stacks


def _groups(channels):
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups


def _norm(channels):
    return nn.GroupNorm(_groups(channels), channels)


def downsampling_stages(image_size, latent_size):
    ratio = image_size // latent_size
    if image_size % latent_size or ratio & (ratio - 1):
        raise InvalidInputError("image size {} must be latent size {} times a power of two".format(image_size, latent_size))
    return int(math.log2(ratio))


class ConvEncoder(nn.Module):
    """Stem convolution followed by stride-2 stages (GroupNorm + SiLU + conv) and a 1x1 projection."""

    def __init__(self, in_channels, hidden, out_dim, num_down):
        super().__init__()
        channels = [hidden * 2 ** i for i in range(num_down + 1)]
        layers = [nn.Conv2d(in_channels, channels[0], 3, padding=1)]
        for c_in, c_out in zip(channels, channels[1:]):
            layers += [_norm(c_in), nn.SiLU(), nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)]
        layers += [_norm(channels[-1]), nn.SiLU(), nn.Conv2d(channels[-1], out_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    """Mirror of ConvEncoder using nearest upsampling; outputs one logit channel."""

    def __init__(self, in_dim, hidden, out_channels, num_up):
        super().__init__()
        channels = [hidden * 2 ** i for i in range(num_up, -1, -1)]
        layers = [nn.Conv2d(in_dim, channels[0], 3, padding=1)]
        for c_in, c_out in zip(channels, channels[1:]):
            layers += [_norm(c_in), nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(c_in, c_out, 3, padding=1)]
        layers += [_norm(channels[-1]), nn.SiLU(), nn.Conv2d(channels[-1], out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _refiner(dim, kind):
    if kind == "identity":
        return nn.Identity()
    conv = nn.Conv2d(dim, dim, 3, padding=1)
    with torch.no_grad():
        nn.init.dirac_(conv.weight)
        conv.bias.zero_()
    return conv


# endregion

# region Autoencoder


class MaskAutoencoder(nn.Module):
    """
    Multi-scale residual quantized mask autoencoder. Works on one binary mask channel at a time: [B, 1, H, W] masks
    are encoded to [B, d, h_K, w_K] latents, quantized into K token maps and decoded back to probabilities.
    """

    def __init__(self, image_size=64, latent_size=16, code_dim=32, codebook_size=512, hidden=32, schedule=None,
                 codebook_seed=0, refiner="conv"):
        super().__init__()
        self.schedule = schedule if schedule is not None else ScaleSchedule.default(latent_size)
        if self.schedule.base != (latent_size, latent_size):
            raise InvalidInputError("last scale {} must equal the latent resolution {}".format(
                self.schedule.base, (latent_size, latent_size)))
        num_down = downsampling_stages(image_size, latent_size)
        self.image_size, self.latent_size, self.code_dim = image_size, latent_size, code_dim
        self.encoder = ConvEncoder(1, hidden, code_dim, num_down)
        self.decoder = ConvDecoder(code_dim, hidden, 1, num_down)
        self.codebook = Codebook(codebook_size, code_dim, seed=codebook_seed)
        self.refiners = nn.ModuleList([_refiner(code_dim, refiner) for _ in range(self.schedule.K)])

    @property
    def latent_shape(self):
        return (self.code_dim, self.latent_size, self.latent_size)

    # region Validation

    def as_mask(self, mask):
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        if mask.dim() != 4 or tuple(mask.shape[1:]) != (1, self.image_size, self.image_size):
            raise InvalidInputError("expected mask [B, 1, {0}, {0}], got {1}".format(self.image_size, list(mask.shape)))
        if not ((mask == 0) | (mask == 1)).all():
            raise InvalidInputError("mask must be binary")
        return mask.to(self.codebook.vectors.dtype)

    def _check_feature(self, feature):
        if feature.dim() != 4 or tuple(feature.shape[1:]) != self.latent_shape:
            raise InvalidInputError("expected feature [B, {}], got {}".format(
                ", ".join(str(s) for s in self.latent_shape), list(feature.shape)))
        if not torch.isfinite(feature).all():
            raise InvalidInputError("feature contains non-finite entries")

    def _check_pyramid(self, pyramid):
        if len(pyramid) == 0 or len(pyramid) > self.schedule.K:
            raise InvalidInputError("pyramid has {} scales, schedule has {}".format(len(pyramid), self.schedule.K))
        expected = list(self.schedule.resolutions[:len(pyramid)])
        if pyramid.resolutions != expected:
            raise InvalidInputError("pyramid resolutions {} do not match schedule {}".format(pyramid.resolutions, expected))

    # endregion

    def encode(self, mask):
        return self.encoder(self.as_mask(mask))

    def scale_contribution(self, k, tokens):
        """phi_k(interpolate(lookup(r_k), h_K, w_K)) for the 0-based scale index k."""
        z = interpolate(lookup(tokens, self.codebook), self.schedule.base)
        return self.refiners[k](z)

    def quantize_pyramid(self, feature, return_residual=False):
        """
        Residual multi-scale quantization. The residual is kept as m minus the running sum of the scale
        contributions, so it shares one accumulation order with dequantize_pyramid.
        :param feature: latent [B, d, h_K, w_K]
        :param return_residual: also return the residual left after the last scale
        :return: TokenPyramid (and residual)
        """
        self._check_feature(feature)
        with torch.no_grad():
            m = feature.detach()
            m_hat = torch.zeros_like(m)
            rest = m
            maps = []
            for k, resolution in enumerate(self.schedule):
                tokens = quantize(interpolate(rest, resolution), self.codebook)
                maps.append(tokens)
                m_hat = m_hat + self.scale_contribution(k, tokens)
                rest = m - m_hat
        pyramid = TokenPyramid(maps)
        return (pyramid, rest) if return_residual else pyramid

    def partial_dequantize(self, pyramid):
        """Cumulative dequantized features after each scale of the (possibly truncated) pyramid."""
        self._check_pyramid(pyramid)
        m_hat = None
        sums = []
        for k, tokens in enumerate(pyramid):
            contribution = self.scale_contribution(k, tokens)
            m_hat = torch.zeros_like(contribution) + contribution if m_hat is None else m_hat + contribution
            sums.append(m_hat)
        return sums

    def dequantize_pyramid(self, pyramid):
        return self.partial_dequantize(pyramid)[-1]

    def decode_logits(self, feature):
        self._check_feature(feature)
        return self.decoder(feature)

    def decode(self, feature):
        return torch.sigmoid(self.decode_logits(feature))

    def reconstruct(self, mask, scales=None):
        """decode(dequantize(quantize(encode(mask)))), optionally truncated to the first `scales` scales."""
        pyramid = self.quantize_pyramid(self.encode(mask))
        if scales is not None:
            pyramid = pyramid.truncate(scales)
        return self.decode(self.dequantize_pyramid(pyramid))

    def forward(self, mask):
        m = self.encode(mask)
        pyramid = self.quantize_pyramid(m)
        m_hat = self.dequantize_pyramid(pyramid)
        return dict(feature=m, dequantized=m_hat, pyramid=pyramid)

# endregion
