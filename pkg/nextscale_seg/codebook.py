import torch
import torch.nn as nn

from more_itertools import chunked

from .errors import InvalidInputError

# Rows of the distance matrix evaluated at once; bounds memory at rows * V * d.
QUANTIZE_CHUNK = 1024


class Codebook(nn.Module):
    """
    The learnable code matrix Z with V vectors of dimension d. Entries are initialized uniformly in [-1/V, 1/V]
    from a dedicated seed so that construction never touches the global RNG.
    """

    def __init__(self, size=512, dim=32, seed=0):
        super().__init__()
        if size < 2:
            raise InvalidInputError("codebook size must be >= 2, got {}".format(size))
        if dim < 1:
            raise InvalidInputError("code dimension must be >= 1, got {}".format(dim))
        self.size, self.dim = size, dim
        self.embedding = nn.Embedding(size, dim)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.embedding.weight.uniform_(-1.0 / size, 1.0 / size, generator=generator)

    @property
    def vectors(self):
        return self.embedding.weight

    def quantize(self, feature):
        return quantize(feature, self)

    def lookup(self, tokens):
        return lookup(tokens, self)

    def extra_repr(self):
        return "V={}, d={}".format(self.size, self.dim)


def quantize(feature, codebook):
    """
    Nearest-code quantization of every cell of a feature raster.
    :param feature: tensor [B, d, h, w] (or [d, h, w])
    :param codebook: Codebook
    :return: long tensor [B, h, w] (or [h, w]) of code indices; ties go to the lowest index
    """
    batched = feature.dim() == 4
    if not batched:
        feature = feature.unsqueeze(0)
    if feature.dim() != 4 or feature.shape[1] != codebook.dim:
        raise InvalidInputError("expected feature [B, {}, h, w], got {}".format(codebook.dim, list(feature.shape)))
    if not torch.isfinite(feature).all():
        raise InvalidInputError("feature contains non-finite entries")
    B, d, h, w = feature.shape
    with torch.no_grad():
        flat = feature.detach().permute(0, 2, 3, 1).reshape(-1, d)
        vectors = codebook.vectors.detach().to(flat.dtype)
        indices = []
        for rows in chunked(range(flat.shape[0]), QUANTIZE_CHUNK):
            part = flat[rows[0]:rows[-1] + 1]
            # Exact squared distances, no ||x||^2 + ||z||^2 - 2xz expansion (it breaks ties).
            dist = (part.unsqueeze(1) - vectors.unsqueeze(0)).pow(2).sum(-1)
            # argmin returns the first minimal index.
            indices.append(torch.argmin(dist, dim=1))
        tokens = torch.cat(indices).view(B, h, w) if indices else flat.new_zeros((B, h, w), dtype=torch.long)
    return tokens if batched else tokens[0]


def lookup(tokens, codebook):
    """
    Replace every index by its codebook row.
    :param tokens: long tensor [B, h, w] (or [h, w])
    :return: tensor [B, d, h, w] (or [d, h, w])
    """
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= codebook.size):
        raise IndexError("token index out of range [0, {})".format(codebook.size))
    vectors = codebook.embedding(tokens.long())
    return vectors.movedim(-1, -3).contiguous()


def _l2(value, dim=None):
    # Norm with a zero (sub)gradient at the origin instead of NaN.
    squared = value.pow(2).sum() if dim is None else value.pow(2).sum(dim=dim)
    positive = squared > 0
    safe = torch.where(positive, squared, torch.ones_like(squared))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(squared))


def quantization_loss(pre_quant, post_quant, beta=0.25, dim=None):
    """
    Quantization constraint ||m - sg(m_hat)||_2 + beta * ||sg(m) - m_hat||_2. The first term only reaches the
    encoder path, the second only the codebook path.
    :param pre_quant: continuous feature m
    :param post_quant: dequantized feature m_hat
    :param beta: commitment weight (>= 0)
    :param dim: dimensions to take the norm over; None takes it over the whole tensor. Per-sample norms are averaged.
    :return: scalar tensor
    """
    if pre_quant.shape != post_quant.shape:
        raise InvalidInputError("shape mismatch: {} vs {}".format(list(pre_quant.shape), list(post_quant.shape)))
    if beta < 0:
        raise InvalidInputError("beta must be >= 0, got {}".format(beta))
    encoder_term = _l2(pre_quant - post_quant.detach(), dim)
    codebook_term = _l2(pre_quant.detach() - post_quant, dim)
    return (encoder_term + beta * codebook_term).mean()


def straight_through(pre_quant, post_quant):
    """Forward value of post_quant, identity Jacobian with respect to pre_quant."""
    return pre_quant + (post_quant - pre_quant).detach()
