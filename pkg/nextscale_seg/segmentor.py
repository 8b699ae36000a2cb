import logging
import math

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import TokenPyramid, interpolate
from .errors import InvalidInputError, StateError

logger = logging.getLogger(__name__)

# Below this temperature sampling degenerates to argmax.
GREEDY_TEMPERATURE = 1e-6


# region Attention mask


def block_causal_mask(group_ids, num_prefix):
    """
    Boolean attention mask over [prefix, tokens]. Prefix rows see the prefix only; a token of group g sees the prefix
    and every token of a group <= g.
    :param group_ids: long tensor [T], non-decreasing group index per token
    :param num_prefix: number of conditioning prefix positions T_f
    :return: bool tensor [T_f + T, T_f + T], True where attention is allowed
    """
    T = group_ids.shape[0]
    allowed = torch.zeros(num_prefix + T, num_prefix + T, dtype=torch.bool)
    allowed[:, :num_prefix] = True
    allowed[num_prefix:, num_prefix:] = group_ids.view(T, 1) >= group_ids.view(1, T)
    return allowed


def _additive(allowed, dtype):
    bias = torch.zeros(allowed.shape, dtype=dtype)
    return bias.masked_fill(~allowed, -math.inf)


# endregion

# region Blocks


class SelfAttention(nn.Module):

    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise InvalidInputError("heads ({}) must divide width ({})".format(heads, width))
        self.heads, self.head_dim = heads, width // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, bias=None, past=None):
        """
        :param x: [B, L, C]
        :param bias: additive mask [L, L_total] (None when every key is visible)
        :param past: cached (k, v), each [B, H, L_past, head_dim]
        :return: output [B, L, C] and the (k, v) including past
        """
        B, L, C = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4).unbind(0)
        if past is not None:
            k = torch.cat((past[0], k), dim=2)
            v = torch.cat((past[1], v), dim=2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            attn = attn + bias
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, L, C)
        return self.proj(out), (k, v)


class AdaLNBlock(nn.Module):
    """Pre-norm transformer block whose layer norms take scale, shift and gate from the class condition."""

    def __init__(self, width, cond_dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.width = width
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        hidden = round(width * mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.ada_lin = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * width))

    def forward(self, x, cond, bias=None, past=None):
        gamma1, gamma2, scale1, scale2, shift1, shift2 = self.ada_lin(cond).view(-1, 1, 6, self.width).unbind(2)
        h, kv = self.attn(self.norm(x) * (scale1 + 1) + shift1, bias=bias, past=past)
        x = x + h * gamma1
        x = x + self.ffn(self.norm(x) * (scale2 + 1) + shift2) * gamma2
        return x, kv


class AdaLNBeforeHead(nn.Module):

    def __init__(self, width, cond_dim):
        super().__init__()
        self.width = width
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada_lin = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * width))

    def forward(self, x, cond):
        scale, shift = self.ada_lin(cond).view(-1, 1, 2, self.width).unbind(2)
        return self.norm(x) * (scale + 1) + shift


# endregion

# region Decoding cache


@dataclass(frozen=True)
class DecodingCache:
    """Per-rollout state of incremental decoding. Steps return a new cache; a cache must not be shared across samplers."""
    class_id: torch.Tensor
    cond: torch.Tensor
    past: Tuple[Tuple[torch.Tensor, torch.Tensor], ...]
    groups_emitted: int
    dequantized: Optional[torch.Tensor] = None

    @property
    def batch_size(self):
        return self.class_id.shape[0]


# endregion


class NextScaleSegmentor(nn.Module):
    """
    Autoregressive transformer over token pyramids. Conditioning: the class through AdaLN, the image embedding as
    prefix tokens attended by every position. The token stream is split into groups decoded jointly: one group per
    scale (next-scale prediction) or one group per token in raster order (next-token baseline).
    """

    def __init__(self, autoencoder, num_classes=1, num_image_tokens=256, width=128, depth=6, heads=4, mlp_ratio=4.0,
                 next_token=False):
        super().__init__()
        # Kept out of the module tree: the autoencoder is frozen and checkpointed separately.
        self.ae_proxy = (autoencoder,)
        self.schedule = autoencoder.schedule
        self.next_token = next_token
        if next_token and self.schedule.K != 1:
            raise InvalidInputError("next-token decoding needs a single-scale schedule, got K={}".format(self.schedule.K))
        self.num_classes, self.num_image_tokens, self.width = num_classes, num_image_tokens, width
        self.vocab_size = autoencoder.codebook.size
        T = self.schedule.token_count
        self.group_sizes = [1] * T if next_token else list(self.schedule.sizes)
        spans, cursor = [], 0
        for size in self.group_sizes:
            spans.append((cursor, cursor + size))
            cursor += size
        self.group_spans = spans

        init_std = math.sqrt(1 / width / 3)
        self.word_embed = nn.Linear(autoencoder.code_dim, width)
        self.class_emb = nn.Embedding(num_classes, width)
        self.pos_start = nn.Parameter(torch.empty(1, self.group_sizes[0], width))
        self.pos = nn.Parameter(torch.empty(1, T, width))
        self.lvl_embed = nn.Embedding(self.schedule.K, width)
        self.image_pos = nn.Parameter(torch.empty(1, num_image_tokens, width))
        for tensor in (self.class_emb.weight, self.pos_start, self.pos, self.lvl_embed.weight, self.image_pos):
            nn.init.trunc_normal_(tensor.data, mean=0, std=init_std)
        self.blocks = nn.ModuleList([AdaLNBlock(width, width, heads, mlp_ratio) for _ in range(depth)])
        self.head_norm = AdaLNBeforeHead(width, width)
        self.head = nn.Linear(width, self.vocab_size)

        group_ids = torch.cat([torch.full((size,), g, dtype=torch.long) for g, size in enumerate(self.group_sizes)])
        self.register_buffer("group_ids", group_ids, persistent=False)
        self.register_buffer("scale_ids", self.schedule.scale_ids(), persistent=False)
        self.register_buffer("attn_allowed", block_causal_mask(group_ids, num_image_tokens), persistent=False)

    @property
    def autoencoder(self):
        return self.ae_proxy[0]

    @property
    def num_groups(self):
        return len(self.group_sizes)

    # region Validation

    def _class_ids(self, class_id, batch_size):
        if isinstance(class_id, int):
            class_id = torch.full((batch_size,), class_id, dtype=torch.long)
        class_id = torch.as_tensor(class_id, dtype=torch.long).reshape(-1)
        if class_id.numel() == 1 and batch_size > 1:
            class_id = class_id.expand(batch_size)
        if class_id.numel() != batch_size:
            raise InvalidInputError("got {} class ids for a batch of {}".format(class_id.numel(), batch_size))
        if (class_id < 0).any() or (class_id >= self.num_classes).any():
            raise InvalidInputError("class id out of range [0, {})".format(self.num_classes))
        return class_id.to(self.pos.device)

    def _check_image(self, image):
        expected = (self.num_image_tokens, self.width)
        if image.dim() != 3 or tuple(image.shape[1:]) != expected:
            raise InvalidInputError("expected image embedding [B, {}, {}], got {}".format(*expected, list(image.shape)))

    # endregion

    # region Embeddings

    def _start_tokens(self, cond, image):
        n = self.group_sizes[0]
        start = self.pos_start + (cond + image.mean(dim=1)).unsqueeze(1)
        return start + self.pos[:, :n] + self.lvl_embed(self.scale_ids[:n])

    def _prefix(self, image):
        return image + self.image_pos

    def _teacher_inputs(self, pyramid):
        """Continuous inputs [B, T - n_1, d] of every position after the first group."""
        ae = self.autoencoder
        if self.next_token:
            flat = pyramid.flatten()
            return ae.codebook.embedding(flat[:, :-1])
        with torch.no_grad():
            partial = ae.partial_dequantize(pyramid)
        pieces = [interpolate(partial[k - 1], resolution).flatten(2).transpose(1, 2)
                  for k, resolution in enumerate(self.schedule.resolutions) if k > 0]
        return torch.cat(pieces, dim=1) if pieces else partial[0].new_zeros(pyramid.batch_size, 0, ae.code_dim)

    def _logits(self, h, cond):
        return self.head(self.head_norm(h, cond))

    # endregion

    def forward_teacher_forced(self, pyramid, class_id, image):
        """
        :param pyramid: TokenPyramid of the target mask
        :param class_id: int or long tensor [B]
        :param image: image embedding [B, T_f, d_f]
        :return: logits [B, T, V]; row t holds p(token_t | earlier groups, class, image)
        """
        self._check_image(image)
        if pyramid.resolutions != list(self.schedule.resolutions):
            raise InvalidInputError("pyramid resolutions {} do not match schedule {}".format(
                pyramid.resolutions, list(self.schedule.resolutions)))
        B = pyramid.batch_size
        cond = self.class_emb(self._class_ids(class_id, B))
        n = self.group_sizes[0]
        rest = self.word_embed(self._teacher_inputs(pyramid).to(self.pos.dtype))
        rest = rest + self.pos[:, n:] + self.lvl_embed(self.scale_ids[n:])
        x = torch.cat((self._prefix(image), self._start_tokens(cond, image), rest), dim=1)
        bias = _additive(self.attn_allowed, x.dtype).to(x.device)
        for block in self.blocks:
            x, _ = block(x, cond, bias=bias)
        return self._logits(x[:, self.num_image_tokens:], cond)

    def start_decoding(self, class_id, image):
        """
        The start step of incremental decoding: runs the prefix and the start group.
        :return: logits of the first group [B, n_1, V] and the decoding cache
        """
        self._check_image(image)
        B = image.shape[0]
        class_id = self._class_ids(class_id, B)
        cond = self.class_emb(class_id)
        x = torch.cat((self._prefix(image), self._start_tokens(cond, image)), dim=1)
        length = x.shape[1]
        bias = _additive(self.attn_allowed[:length, :length], x.dtype).to(x.device)
        past = []
        for block in self.blocks:
            x, kv = block(x, cond, bias=bias)
            past.append(kv)
        logits = self._logits(x[:, self.num_image_tokens:], cond)
        return logits, DecodingCache(class_id=class_id, cond=cond, past=tuple(past), groups_emitted=1)

    def incremental_decode_step(self, cache, tokens):
        """
        Feed the tokens of the group whose logits were emitted last and get the logits of the next group.
        :param cache: DecodingCache from start_decoding or a previous step
        :param tokens: long tensor holding that group's tokens ([B, h_k, w_k] or [B, n])
        :return: logits [B, n_next, V] and the updated cache
        """
        g = cache.groups_emitted
        if g >= self.num_groups:
            raise StateError("all {} groups have been decoded".format(self.num_groups))
        B = cache.batch_size
        tokens = tokens.long()
        if tokens.shape[0] != B or tokens[0].numel() != self.group_sizes[g - 1]:
            raise StateError("expected {} tokens per sample for group {}, got shape {}".format(
                self.group_sizes[g - 1], g - 1, list(tokens.shape)))
        ae = self.autoencoder
        dequantized = cache.dequantized
        if self.next_token:
            feature = ae.codebook.embedding(tokens.reshape(B, 1))
        else:
            h, w = self.schedule.resolutions[g - 1]
            with torch.no_grad():
                contribution = ae.scale_contribution(g - 1, tokens.reshape(B, h, w))
                dequantized = torch.zeros_like(contribution) + contribution if dequantized is None else dequantized + contribution
            feature = interpolate(dequantized, self.schedule.resolutions[g]).flatten(2).transpose(1, 2)
        begin, end = self.group_spans[g]
        x = self.word_embed(feature.to(self.pos.dtype)) + self.pos[:, begin:end] + self.lvl_embed(self.scale_ids[begin:end])
        past = []
        for block, kv in zip(self.blocks, cache.past):
            x, kv = block(x, cache.cond, past=kv)
            past.append(kv)
        logits = self._logits(x, cache.cond)
        return logits, replace(cache, past=tuple(past), groups_emitted=g + 1, dequantized=dequantized)

    @torch.no_grad()
    def generate(self, class_id, image, temperature=1.0, generator=None, top_k=0):
        """
        Sample a full token pyramid with incremental decoding.
        :return: TokenPyramid
        """
        logits, cache = self.start_decoding(class_id, image)
        sampled = []
        for g in range(self.num_groups):
            tokens = sample_next_scale(logits, temperature, generator, top_k=top_k)
            sampled.append(tokens)
            if g + 1 < self.num_groups:
                logits, cache = self.incremental_decode_step(cache, tokens)
        return TokenPyramid.from_flat(torch.cat(sampled, dim=1), self.schedule)

    def sequence_nll(self, pyramid, class_id, image):
        return sequence_nll(pyramid, class_id, image, self)


def sample_next_scale(logits, temperature=1.0, rng=None, top_k=0):
    """
    Draw every token independently from softmax(logits / temperature).
    :param logits: [..., n, V]
    :param temperature: > 0; below 1e-6 the draw is an argmax
    :param rng: torch.Generator, int seed or None (global RNG)
    :param top_k: keep only the k largest logits per row (0 disables)
    :return: long tensor [..., n]
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0, got {}".format(temperature))
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite entries")
    if temperature < GREEDY_TEMPERATURE:
        return logits.argmax(dim=-1)
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    V = logits.shape[-1]
    scaled = logits.detach() / temperature
    if top_k:
        kth = scaled.topk(min(top_k, V), dim=-1).values[..., -1:]
        scaled = scaled.masked_fill(scaled < kth, -math.inf)
    probs = scaled.softmax(dim=-1).reshape(-1, V)
    return torch.multinomial(probs, num_samples=1, generator=rng).view(logits.shape[:-1])


def per_position_nll(pyramid, class_id, image, model):
    logits = model.forward_teacher_forced(pyramid, class_id, image)
    targets = pyramid.flatten()
    return F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")


def sequence_nll(pyramid, class_id, image, model):
    """Mean categorical cross-entropy over all T positions, i.e. -(1/T) log p(r_1, ..., r_K | class, image)."""
    return per_position_nll(pyramid, class_id, image, model).mean()


def per_scale_nll(pyramid, class_id, image, model):
    nll = per_position_nll(pyramid, class_id, image, model)
    return [nll[:, begin:end].mean() for begin, end in model.schedule.offsets]
