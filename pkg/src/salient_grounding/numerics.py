"""Tensor primitives and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects and parameters live on
``nn.Module`` instances; autograd supplies analytic gradients and
:func:`grad_check` verifies them against central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import nn
from torch.nn import functional as F


class ShapeError(ValueError):
    pass


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``y = x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input has {x.shape[-1]} features but weight expects "
            f"{weight.shape[0]} (x {tuple(x.shape)}, W {tuple(weight.shape)})"
        )
    if bias is not None and bias.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: bias {tuple(bias.shape)} does not match W out dim {weight.shape[1]}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


class Linear(nn.Module):
    """Dense layer, weight ``[in, out]`` uniform in +-sqrt(6/(in+out)), zero bias."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = nn.Parameter(torch.empty(d_in, d_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.weight + self.bias


def window_mask(n: int, window: int, device=None) -> torch.Tensor:
    """Boolean ``[n, n]`` mask, True where ``|i - j| <= window``."""
    idx = torch.arange(n, device=device)
    return (idx[:, None] - idx[None, :]).abs() <= window


def softmax_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: Optional[int] = None,
    key_mask: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention over the last two dims.

    ``q`` is ``[..., n, d]``, ``k``/``v`` are ``[..., m, d]``. ``window``
    limits each query to keys within +-window positions (needs n == m).
    ``key_mask`` (``[..., m]``, True = valid) hides keys; a query with no
    visible key gets a zero output row. ``bias`` is added to the logits.
    """
    n, d = q.shape[-2], q.shape[-1]
    m = k.shape[-2]
    if k.shape[-1] != d or v.shape[-2] != m:
        raise ShapeError(f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} disagree")
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias
    allowed = None
    if window is not None:
        if n != m:
            raise ShapeError(f"attention: windowed attention needs n == m, got {n} and {m}")
        allowed = window_mask(n, window, device=q.device)
    if key_mask is not None:
        km = key_mask[..., None, :].bool()
        allowed = km if allowed is None else (allowed & km)
    if allowed is None:
        return torch.softmax(logits, dim=-1) @ v
    logits = logits.masked_fill(~allowed, float("-inf"))
    # fully-masked rows would be NaN under softmax
    empty = ~allowed.any(-1, keepdim=True)
    logits = logits.masked_fill(empty, 0.0)
    weights = torch.softmax(logits, dim=-1).masked_fill(empty, 0.0)
    return weights @ v


def conv1d(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, dilation: int = 1,
           bias: Optional[torch.Tensor] = None, groups: int = 1) -> torch.Tensor:
    """Cross-correlation over time with zero "same" padding.

    ``x`` is ``[..., T, Cin]`` and ``kernel`` is ``[k, Cin/groups, Cout]``.
    Output length is ``ceil(T / stride)``; tap ``i`` of output ``t`` reads
    input ``t*stride + (i - (k-1)//2) * dilation``.
    """
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv1d: stride and dilation must be >= 1, got {stride}, {dilation}")
    k, cin_g, cout = kernel.shape
    if x.shape[-1] != cin_g * groups:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel {cin_g} x groups {groups}")
    lead = x.shape[:-2]
    T = x.shape[-2]
    xt = x.reshape(-1, T, x.shape[-1]).transpose(1, 2)
    left = (k - 1) // 2 * dilation
    t_out = -(-T // stride)
    # right pad so the last tap of the last output exists
    right = max(0, (t_out - 1) * stride + (k - 1) * dilation - left - (T - 1))
    xt = F.pad(xt, (left, right))
    w = kernel.permute(2, 1, 0)
    y = F.conv1d(xt, w, bias=bias, stride=stride, dilation=dilation, groups=groups)
    y = y[..., :t_out].transpose(1, 2)
    return y.reshape(*lead, t_out, cout)


class Conv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, dilation: int = 1,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.dilation, self.groups = stride, dilation, groups
        bound = math.sqrt(6.0 / (k * c_in // groups + k * c_out // groups))
        self.weight = nn.Parameter(torch.empty(k, c_in // groups, c_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x):
        return conv1d(x, self.weight, self.stride, self.dilation, self.bias, self.groups)


def linear_interpolate(x: torch.Tensor, target_len: int) -> torch.Tensor:
    """Align-corners linear resampling along dim -2 (``[..., n, C]`` -> ``[..., m, C]``)."""
    n = x.shape[-2]
    if n < 2:
        raise ShapeError(f"linear_interpolate: need at least 2 input positions, got {n}")
    if target_len < 2:
        raise ShapeError(f"linear_interpolate: target length must be >= 2, got {target_len}")
    if target_len == n:
        return x
    j = torch.arange(target_len, dtype=torch.float64)
    pos = j * (n - 1) / (target_len - 1)
    lo = pos.floor().long().clamp(max=n - 2)
    frac = (pos - lo).to(x.dtype)[:, None]
    return x[..., lo, :] * (1 - frac) + x[..., lo + 1, :] * frac


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3
    failure: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e <= self.tol for e in self.errors.values())

    def __str__(self):
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        if self.failure:
            lines.append(f"  failure: {self.failure}")
        for name, err in self.errors.items():
            lines.append(f"  {name:<50s} {err:.3e}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module | dict[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-3,
    coords_per_param: int = 32,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter
    values. Up to ``coords_per_param`` coordinates per parameter are probed;
    the relative error of a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    named = {k: v for k, v in named.items() if v.requires_grad}
    report = GradCheckReport(tol=tol)
    for p in named.values():
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None

    loss = loss_fn()
    if not torch.isfinite(loss):
        report.failure = "non-finite loss at the base point"
        return report
    analytic = torch.autograd.grad(loss, list(named.values()), allow_unused=True)

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for (name, p), g in zip(named.items(), analytic):
            g = torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1)
            flat = p.view(-1)
            count = min(coords_per_param, flat.numel())
            idx = torch.randperm(flat.numel(), generator=gen)[:count]
            worst = 0.0
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    report.failure = f"non-finite loss while perturbing {name}[{i}]"
                    return report
                numeric = (up - down) / (2 * eps)
                a = g[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                worst = max(worst, err)
            report.errors[name] = worst
    return report
