import torch
import torch.nn as nn

from .autoencoder import ConvEncoder, downsampling_stages
from .errors import ConfigurationError, InvalidInputError


def svd_branch(features, rank):
    """
    Best rank-r approximation U_r S_r V_r^T of a token x channel matrix. The sign of every left singular vector is
    fixed so that its largest-magnitude entry is positive.
    :param features: tensor [T, d] or batch [B, T, d]
    :param rank: r with 1 <= r <= min(T, d)
    :return: tensor of the same shape
    """
    if not torch.isfinite(features).all():
        raise InvalidInputError("features contain non-finite entries")
    T, d = features.shape[-2:]
    if not 1 <= rank <= min(T, d):
        raise InvalidInputError("rank must be in [1, {}], got {}".format(min(T, d), rank))
    U, S, Vh = torch.linalg.svd(features, full_matrices=False)
    U, S, Vh = U[..., :rank], S[..., :rank], Vh[..., :rank, :]
    pivot = U.abs().argmax(dim=-2, keepdim=True)
    signs = torch.sign(torch.gather(U, -2, pivot))
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    U = U * signs
    Vh = Vh * signs.transpose(-1, -2)
    return (U * S.unsqueeze(-2)) @ Vh


class SvdAdapter(nn.Module):
    """
    f = proj(MLP(e) + SVD_r(e)) for flattened backbone features e [B, T, d_e]. The SVD branch is a stop-gradient:
    it adds to the forward value only.
    """

    def __init__(self, feature_dim, hidden, out_dim, rank=4, use_svd=True):
        super().__init__()
        self.rank, self.use_svd = rank, use_svd
        self.mlp = nn.Sequential(nn.Linear(feature_dim, hidden), nn.GELU(), nn.Linear(hidden, feature_dim))
        self.proj = nn.Linear(feature_dim, out_dim)

    def forward(self, tokens):
        out = self.mlp(tokens)
        if self.use_svd:
            out = out + svd_branch(tokens.detach(), self.rank)
        return self.proj(out)

    def extra_repr(self):
        return "rank={}, use_svd={}".format(self.rank, self.use_svd)


class ImageEncoder(nn.Module):
    """Trainable convolutional backbone (stand-in for a pretrained foundation encoder) followed by the adapter."""

    def __init__(self, image_size=64, latent_size=16, in_channels=1, feature_dim=64, hidden=32, adapter_hidden=128,
                 out_dim=128, rank=4, use_svd=True, freeze_backbone=False):
        super().__init__()
        tokens = latent_size * latent_size
        if not 1 <= rank <= min(tokens, feature_dim):
            raise ConfigurationError("svd rank must be in [1, {}], got {}".format(min(tokens, feature_dim), rank))
        self.image_size, self.latent_size, self.in_channels = image_size, latent_size, in_channels
        self.feature_dim, self.out_dim = feature_dim, out_dim
        self.backbone = ConvEncoder(in_channels, hidden, feature_dim, downsampling_stages(image_size, latent_size))
        self.adapter = SvdAdapter(feature_dim, adapter_hidden, out_dim, rank=rank, use_svd=use_svd)
        if freeze_backbone:
            self.backbone.requires_grad_(False)

    @property
    def num_tokens(self):
        return self.latent_size * self.latent_size

    def encode_image(self, image):
        """
        :param image: tensor [B, C_img, H, W] (or [C_img, H, W])
        :return: feature raster [B, d_e, h_K, w_K]
        """
        if image.dim() == 3:
            image = image.unsqueeze(0)
        expected = (self.in_channels, self.image_size, self.image_size)
        if image.dim() != 4 or tuple(image.shape[1:]) != expected:
            raise InvalidInputError("expected image [B, {}], got {}".format(", ".join(str(s) for s in expected), list(image.shape)))
        if not torch.isfinite(image).all():
            raise InvalidInputError("image contains non-finite entries")
        return self.backbone(image.to(self.adapter.proj.weight.dtype))

    def adapt(self, features):
        """
        :param features: raster [B, d_e, h_K, w_K] from encode_image
        :return: image embedding [B, T_f, d_f]
        """
        tokens = features.flatten(2).transpose(1, 2)
        return self.adapter(tokens)

    def forward(self, image):
        return self.adapt(self.encode_image(image))
