"""Sidekick, expert and text encoders at toy scale.

Both video encoders are patchify + spatio-temporal transformer stacks that
read out one feature per clip (mean over tokens, then a projection). The
sidekick adds a strided 3-D convolution that shrinks the token grid before
block ``pool_index``, and encodes only every ``tau``-th clip; the features
of the skipped clips come from a small FFN over the two nearest encoded
neighbours.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .config import DataConfig, EncoderConfig
from .numerics import LayerNorm, Linear, ShapeError, linear, softmax_attention


@dataclass
class ClipFeatureSeq:
    features: torch.Tensor
    source: str = "dense"
    origin: list[int] = field(default_factory=list)


@dataclass
class QueryFeatures:
    cls: torch.Tensor
    tokens: torch.Tensor


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention + GELU FFN (4x hidden)."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim)
        self.out = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim)
        self.ff2 = Linear(4 * dim, dim)

    def attend(self, x, key_mask=None, window=None, bias=None):
        *lead, n, d = x.shape
        h = self.n_heads
        qkv = self.qkv(self.norm1(x)).reshape(*lead, n, 3, h, d // h)
        q, k, v = (qkv[..., i, :, :].transpose(-2, -3) for i in range(3))
        if key_mask is not None:
            key_mask = key_mask.unsqueeze(-2)
        y = softmax_attention(q, k, v, window=window, key_mask=key_mask, bias=bias)
        return self.out(y.transpose(-2, -3).reshape(*lead, n, d))

    def forward(self, x, key_mask=None, window=None, bias=None):
        x = x + self.attend(x, key_mask, window, bias)
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


def patchify(clip: torch.Tensor, patch: Sequence[int], weight: torch.Tensor,
             bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``[..., L, H, W, Cin]`` -> ``[..., (L/pl)(H/ph)(W/pw), C]``, tokens in (l, h, w) order."""
    pl, ph, pw = patch
    *lead, L, H, W, cin = clip.shape
    if L % pl or H % ph or W % pw:
        raise ShapeError(f"patchify: clip {L}x{H}x{W} not divisible by patch {tuple(patch)}")
    x = clip.reshape(*lead, L // pl, pl, H // ph, ph, W // pw, pw, cin)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6)
    x = x.reshape(*lead, (L // pl) * (H // ph) * (W // pw), pl * ph * pw * cin)
    return linear(x, weight, bias)


def conv_pool(tokens: torch.Tensor, kernel: torch.Tensor, factor: int,
              bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Strided 3-D convolution (kernel = stride = factor) on ``[..., L, H, W, C]``.

    ``kernel`` is ``[Cout, Cin, f, f, f]``.
    """
    *lead, L, H, W, C = tokens.shape
    if L % factor or H % factor or W % factor:
        raise ShapeError(f"conv_pool: grid {L}x{H}x{W} not divisible by factor {factor}")
    x = tokens.reshape(-1, L, H, W, C).permute(0, 4, 1, 2, 3)
    y = F.conv3d(x, kernel, bias=bias, stride=factor)
    y = y.permute(0, 2, 3, 4, 1)
    return y.reshape(*lead, *y.shape[1:])


class ConvPool(nn.Module):
    def __init__(self, dim: int, factor: int):
        super().__init__()
        self.factor = factor
        # start as a channel-wise average, plus a small random mix
        avg = torch.eye(dim)[:, :, None, None, None].expand(dim, dim, factor, factor, factor) / factor ** 3
        bound = 0.1 * math.sqrt(6.0 / (2 * dim * factor ** 3))
        self.weight = nn.Parameter(avg + torch.empty_like(avg).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, grid):
        return conv_pool(grid, self.weight, self.factor, self.bias)


class VideoEncoder(nn.Module):
    """Clip encoder ``[B, L, H, W, Cin] -> [B, C]``; pooling only when ``pool_factor > 1``."""

    def __init__(self, enc: EncoderConfig, data: DataConfig, n_blocks: int,
                 pool_factor: int = 1, pool_index: int = 1):
        super().__init__()
        self.patch = tuple(enc.patch)
        self.grid = enc.grid(data)
        pl, ph, pw = self.patch
        C = enc.d_model
        self.patch_proj = Linear(pl * ph * pw * data.channels, C)
        self.pos = nn.Parameter(torch.randn(math.prod(self.grid), C) * 0.02)
        self.pool_index = pool_index
        self.pool = ConvPool(C, pool_factor) if pool_factor > 1 else None
        self.blocks = nn.ModuleList(TransformerBlock(C, enc.n_heads) for _ in range(n_blocks))
        self.proj = Linear(C, C)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        B = clips.shape[0]
        C = self.pos.shape[1]
        x = patchify(clips, self.patch, self.patch_proj.weight, self.patch_proj.bias) + self.pos
        grid = self.grid
        for b, block in enumerate(self.blocks, start=1):
            if self.pool is not None and b == self.pool_index:
                x = self.pool(x.reshape(B, *grid, C))
                grid = tuple(x.shape[1:4])
                x = x.reshape(B, -1, C)
            x = block(x)
        return self.proj(x.mean(dim=1))


def sample_indices(T: int, tau: int) -> list[int]:
    """Clips ``0, tau, 2tau, ...`` plus the last clip when the stride skips it."""
    if T < 1:
        raise ShapeError("cannot sample an empty video")
    idx = list(range(0, T, tau))
    if idx[-1] != T - 1:
        idx.append(T - 1)
    return idx


class InterpFFN(nn.Module):
    """Features of the clips between two encoded neighbours, one output head per offset."""

    def __init__(self, dim: int, tau: int):
        super().__init__()
        self.tau = tau
        self.fc1 = Linear(2 * dim, 2 * dim)
        self.fc2 = Linear(2 * dim, max(tau - 1, 1) * dim)

    def forward(self, left, right):
        h = F.gelu(self.fc1(torch.cat([left, right], dim=-1)))
        return self.fc2(h).reshape(*left.shape[:-1], max(self.tau - 1, 1), left.shape[-1])


class Sidekick(nn.Module):
    def __init__(self, enc: EncoderConfig, data: DataConfig):
        super().__init__()
        self.tau = enc.tau
        self.encoder = VideoEncoder(enc, data, enc.sidekick_blocks, enc.pool_factor, enc.pool_index)
        self.interp = InterpFFN(enc.d_model, enc.tau) if enc.tau > 1 else None

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        return self.encode_many([video])[0]

    def encode_many(self, videos: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Dense ``[T_i, C]`` features for each video; one encoder call for the batch."""
        if any(v.shape[0] == 0 for v in videos):
            raise ShapeError("sidekick_encode: empty video")
        picks = [sample_indices(v.shape[0], self.tau) for v in videos]
        clips = torch.cat([v[idx] for v, idx in zip(videos, picks)])
        enc = self.encoder(clips)
        out, start = [], 0
        for v, idx in zip(videos, picks):
            f = enc[start:start + len(idx)]
            start += len(idx)
            out.append(self._fill(v.shape[0], idx, f))
        return out

    def _fill(self, T: int, idx: list[int], f: torch.Tensor) -> torch.Tensor:
        if len(idx) == T:
            return f
        gaps = [(k, idx[k + 1] - idx[k]) for k in range(len(idx) - 1) if idx[k + 1] - idx[k] > 1]
        left = torch.stack([f[k] for k, _ in gaps])
        right = torch.stack([f[k + 1] for k, _ in gaps])
        mids = self.interp(left, right)  # [P, tau-1, C]
        rows = torch.cat([f, mids.reshape(-1, f.shape[-1])])
        where = [0] * T
        for k, t in enumerate(idx):
            where[t] = k
        per = mids.shape[1]
        for p, (k, gap) in enumerate(gaps):
            for o in range(1, gap):
                where[idx[k] + o] = len(idx) + p * per + (o - 1)
        return rows[torch.tensor(where)]


def sidekick_encode(model: Sidekick, video: torch.Tensor) -> ClipFeatureSeq:
    T = video.shape[0]
    return ClipFeatureSeq(model(video), "dense", list(range(T)))


def expert_encode(model: VideoEncoder, clips: torch.Tensor, origin: Optional[list[int]] = None) -> ClipFeatureSeq:
    if clips.shape[0] < 1:
        raise ShapeError("expert_encode: need at least one clip")
    return ClipFeatureSeq(model(clips), "salient", list(origin or range(clips.shape[0])))


class TextEncoder(nn.Module):
    """Token embedding + position + one self-attention block; position 0 is CLS."""

    def __init__(self, enc: EncoderConfig, vocab: int):
        super().__init__()
        C = enc.d_model
        self.vocab = vocab
        self.embed = nn.Parameter(torch.randn(vocab, C) * 0.5)
        self.cls = nn.Parameter(torch.randn(C) * 0.5)
        self.pos = nn.Parameter(torch.randn(enc.text_max_len, C) * 0.5)
        self.block = TransformerBlock(C, enc.n_heads)
        self.norm = LayerNorm(C)
        self.proj = Linear(C, C)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``ids [B, N]`` -> (cls ``[B, C]``, tokens ``[B, N, C]``)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        if ids.shape[-1] < 1:
            raise ShapeError("text_encode: need at least one token")
        if ids.shape[-1] + 1 > self.pos.shape[0]:
            raise ShapeError(f"text_encode: {ids.shape[-1]} tokens exceed max length {self.pos.shape[0] - 1}")
        if (ids < 0).any() or (ids >= self.vocab).any():
            bad = ids[(ids < 0) | (ids >= self.vocab)][0].item()
            raise ValueError(f"text_encode: token id {bad} outside vocabulary of {self.vocab}")
        B, N = ids.shape
        x = torch.cat([self.cls.expand(B, 1, -1), self.embed[ids]], dim=1) + self.pos[: N + 1]
        y = self.proj(self.norm(self.block(x)))
        return y[:, 0], y[:, 1:]


def text_encode(model: TextEncoder, ids: Sequence[int]) -> QueryFeatures:
    cls, tokens = model(torch.as_tensor([list(ids)]))
    return QueryFeatures(cls[0], tokens[0])


class EncoderSuite(nn.Module):
    """The three encoders saved and loaded as one checkpoint."""

    def __init__(self, enc: EncoderConfig, data: DataConfig):
        super().__init__()
        self.sidekick = Sidekick(enc, data)
        self.expert = VideoEncoder(enc, data, enc.expert_blocks)
        self.text = TextEncoder(enc, data.vocab)
        self.expert.requires_grad_(False)
