"""Multi-resolution grounding head.

Query-aware aggregation fuses dense sidekick features, zero-padded expert
features and saliency scores, cross-attends to the query tokens, and
builds a feature pyramid with local-window attention. Multi-scale
refinement turns every level into a per-position confidence, expands all
of them to full length, runs a dilated temporal conv stack over the stack
of confidences and average-pools the result back onto each level. Shared
heads then classify and regress spans at every level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import GrounderConfig
from .encoders import TransformerBlock
from .numerics import Conv1d, LayerNorm, Linear, ShapeError, linear_interpolate, softmax_attention


@dataclass
class MomentProposal:
    t_s: float
    t_e: float
    score: float
    level: int = 0


@dataclass
class GrounderBatch:
    dense: torch.Tensor        # [B, T, C]
    salient: torch.Tensor      # [B, T, C], zero rows where not selected
    saliency: torch.Tensor     # [B, T]
    mask: torch.Tensor         # [B, T] bool, True on real clips
    q_tokens: torch.Tensor     # [B, N+1, C], CLS first
    lengths: list[int]
    spans: Optional[torch.Tensor] = None  # [B, 2] ground truth in clip units


def pad_salient(salient: torch.Tensor, selected: Sequence[int], T: int) -> torch.Tensor:
    """Scatter ``[M, C]`` expert features to their clip rows of a zero ``[T, C]``."""
    selected = list(selected)
    if len(set(selected)) != len(selected):
        raise ValueError("pad_salient: duplicate selected indices")
    if len(selected) != salient.shape[0]:
        raise ShapeError(f"pad_salient: {len(selected)} indices for {salient.shape[0]} feature rows")
    if any(t < 0 or t >= T for t in selected):
        raise ShapeError(f"pad_salient: selected index outside [0, {T})")
    out = salient.new_zeros(T, salient.shape[-1])
    if selected:
        out[torch.tensor(selected)] = salient
    return out


def padded_length(T: int, levels: int) -> int:
    step = 2 ** levels
    return -(-T // step) * step


def collate(items: Sequence[dict], levels: int, dtype=torch.float32) -> GrounderBatch:
    """Stack per-query dicts (dense, salient_padded, saliency, q_tokens[, span]) with right padding."""
    T_pad = max(padded_length(it["dense"].shape[0], levels) for it in items)
    B = len(items)
    C = items[0]["dense"].shape[1]
    N1 = max(it["q_tokens"].shape[0] for it in items)
    if any(it["q_tokens"].shape[0] != N1 for it in items):
        raise ShapeError("collate: queries in one batch must have the same token count")
    dense = torch.zeros(B, T_pad, C, dtype=dtype)
    salient = torch.zeros(B, T_pad, C, dtype=dtype)
    sal = torch.zeros(B, T_pad, dtype=dtype)
    mask = torch.zeros(B, T_pad, dtype=torch.bool)
    lengths = []
    for b, it in enumerate(items):
        T = it["dense"].shape[0]
        dense[b, :T] = torch.as_tensor(it["dense"], dtype=dtype)
        salient[b, :T] = torch.as_tensor(it["salient"], dtype=dtype)
        sal[b, :T] = torch.as_tensor(it["saliency"], dtype=dtype)
        mask[b, :T] = True
        lengths.append(T)
    q = torch.stack([torch.as_tensor(it["q_tokens"], dtype=dtype) for it in items])
    spans = None
    if all("span" in it for it in items):
        spans = torch.tensor([list(it["span"]) for it in items], dtype=dtype)
    return GrounderBatch(dense, salient, sal, mask, q, lengths, spans)


class CrossAttention(nn.Module):
    """Clip positions attend to query tokens; residual + FFN."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm_x = LayerNorm(dim)
        self.norm_t = LayerNorm(dim)
        self.q = Linear(dim, dim)
        self.kv = Linear(dim, 2 * dim)
        self.out = Linear(dim, dim)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim)
        self.ff2 = Linear(4 * dim, dim)

    def attend(self, x, text):
        B, T, C = x.shape
        h = self.n_heads
        q = self.q(self.norm_x(x)).reshape(B, T, h, C // h).transpose(1, 2)
        kv = self.kv(self.norm_t(text)).reshape(B, text.shape[1], 2, h, C // h)
        k, v = kv[:, :, 0].transpose(1, 2), kv[:, :, 1].transpose(1, 2)
        return softmax_attention(q, k, v).transpose(1, 2).reshape(B, T, C)

    def forward(self, x, text):
        x = x + self.out(self.attend(x, text))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class LocalBlock(nn.Module):
    """Windowed self-attention block with a learned relative-position bias."""

    def __init__(self, dim: int, n_heads: int, window: int):
        super().__init__()
        self.window = window
        self.block = TransformerBlock(dim, n_heads)
        self.rel = nn.Parameter(torch.zeros(n_heads, 2 * window + 1))

    def forward(self, x, mask):
        n = x.shape[-2]
        idx = torch.arange(n)
        rel = (idx[None, :] - idx[:, None]).clamp(-self.window, self.window) + self.window
        bias = self.rel[:, rel]
        return self.block(x, key_mask=mask, window=self.window, bias=bias) * mask[..., None]


def expand(prob: torch.Tensor, T: int) -> torch.Tensor:
    """``[B, n]`` confidences -> ``[B, T, 1]`` by align-corners interpolation (a single value broadcasts)."""
    prob = prob[..., None]
    if prob.shape[1] == 1:
        return prob.expand(-1, T, -1)
    return linear_interpolate(prob, T)


def avg_pool(h: torch.Tensor, factor: int) -> torch.Tensor:
    """Non-overlapping temporal mean of ``[B, T, C]`` over windows of ``factor``."""
    B, T, C = h.shape
    if T % factor:
        raise ShapeError(f"avg_pool: length {T} not divisible by {factor}")
    return h.reshape(B, T // factor, factor, C).mean(2)


class Grounder(nn.Module):
    def __init__(self, cfg: GrounderConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        L, h = cfg.levels, cfg.n_heads
        w = cfg.attn_window // 2
        self.in_proj = Linear(2 * dim + 1, dim)
        self.cross = CrossAttention(dim, h)
        self.late = Linear(dim, dim)
        self.local = nn.ModuleList(LocalBlock(dim, h, w) for _ in range(L + 1))
        self.down = nn.ModuleList(Conv1d(dim, dim, k=2, stride=2, groups=dim) for _ in range(L))
        self.level_norm = LayerNorm(dim)
        # refinement
        self.transform1 = Linear(dim, dim)
        self.transform2 = Linear(dim, 1)
        self.agg_in = Conv1d(L + 1, dim, k=1)
        self.agg_dil = nn.ModuleList(Conv1d(dim, dim, k=3, dilation=2 ** i) for i in range(cfg.mtr_layers))
        self.agg_mix = nn.ModuleList(Conv1d(dim, dim, k=1) for _ in range(cfg.mtr_layers))
        # heads, shared over levels
        self.cls1 = Conv1d(2 * dim, dim, k=3)
        self.cls2 = Conv1d(dim, 1, k=3)
        self.reg1 = Conv1d(2 * dim, dim, k=3)
        self.reg2 = Conv1d(dim, 2, k=3)
        self.reg_scale = nn.Parameter(torch.ones(L + 1))
        prior = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
        with torch.no_grad():
            self.cls2.bias.fill_(prior)
            self.transform2.bias.fill_(prior)

    # -- query-aware aggregation
    def fuse_qta(self, batch: GrounderBatch) -> torch.Tensor:
        cfg = self.cfg
        dense = batch.dense if cfg.use_dense else torch.zeros_like(batch.dense)
        salient = batch.salient if cfg.use_salient else torch.zeros_like(batch.salient)
        sal = batch.saliency if cfg.use_saliency else torch.zeros_like(batch.saliency)
        fc = torch.cat([dense, salient, sal[..., None]], dim=-1)
        x = self.in_proj(fc)
        if cfg.use_qta:
            x = self.cross(x, batch.q_tokens)
        else:
            # late fusion: broadcast the query CLS onto every clip
            x = x + self.late(batch.q_tokens[:, 0])[:, None]
        return x * batch.mask[..., None]

    def build_pyramid(self, x: torch.Tensor, mask: torch.Tensor):
        levels, masks = [], []
        for l in range(self.cfg.levels + 1):
            if l > 0:
                x = self.down[l - 1](x)
                mask = mask[:, ::2]
                x = x * mask[..., None]
            x = self.local[l](x, mask)
            levels.append(x)
            masks.append(mask)
        return [self.level_norm(z) * m[..., None] for z, m in zip(levels, masks)], masks

    def mtr(self, levels, masks):
        """Returns (refined levels ``[B, T/2^l, 2C]``, confidence logits per level)."""
        T = levels[0].shape[1]
        p_logits = [self.transform2(F.gelu(self.transform1(z)))[..., 0] for z in levels]
        if not self.cfg.use_mtr:
            return [torch.cat([z, torch.zeros_like(z)], -1) for z in levels], p_logits
        expanded = [expand(torch.sigmoid(p) * m, T) for p, m in zip(p_logits, masks)]
        mask0 = masks[0][..., None]
        h = self.agg_in(torch.cat(expanded, -1)) * mask0
        for dil, mix in zip(self.agg_dil, self.agg_mix):
            h = (h + mix(F.gelu(dil(h)))) * mask0
        refined = []
        for l, z in enumerate(levels):
            refined.append(torch.cat([z, avg_pool(h, 2 ** l)], -1))
        return refined, p_logits

    def heads(self, refined, masks):
        logits, dists = [], []
        for l, (z, m) in enumerate(zip(refined, masks)):
            mm = m[..., None]
            c = self.cls2(F.gelu(self.cls1(z * mm)) * mm)[..., 0]
            r = F.softplus(self.reg2(F.gelu(self.reg1(z * mm)) * mm)) * self.reg_scale[l]
            logits.append(c)
            dists.append(r)
        return logits, dists

    def forward(self, batch: GrounderBatch) -> dict:
        x = self.fuse_qta(batch)
        levels, masks = self.build_pyramid(x, batch.mask)
        refined, p_logits = self.mtr(levels, masks)
        logits, dists = self.heads(refined, masks)
        return {"logits": logits, "dists": dists, "p_logits": p_logits, "masks": masks}


# ---------------------------------------------------------------- losses

def focal_loss(logits, labels, alpha: Optional[float] = 0.25, gamma: float = 2.0, num_pos=None):
    """Sigmoid focal loss summed over elements, divided by max(1, positives)."""
    labels = labels.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p_t = p * labels + (1 - p) * (1 - labels)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = loss * (alpha * labels + (1 - alpha) * (1 - labels))
    if num_pos is None:
        num_pos = labels.sum()
    return loss.sum() / torch.clamp(torch.as_tensor(num_pos, dtype=logits.dtype), min=1.0)


def diou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-span 1-D Distance-IoU loss for ``[..., 2]`` (start, end) pairs."""
    ps, pe = pred[..., 0], pred[..., 1]
    gs, ge = gt[..., 0], gt[..., 1]
    inter = (torch.minimum(pe, ge) - torch.maximum(ps, gs)).clamp(min=0)
    union = (pe - ps) + (ge - gs) - inter
    iou = inter / union
    hull = torch.maximum(pe, ge) - torch.minimum(ps, gs)
    center = ((ps + pe) - (gs + ge)) / 2
    return 1 - iou + (center / hull) ** 2


def level_range(l: int, levels: int, r0: float) -> tuple[float, float]:
    lo = 0.0 if l == 0 else 2 ** (l - 1) * r0
    hi = math.inf if l == levels else 2 ** l * r0
    return lo, hi


def assign_targets(spans: torch.Tensor, masks, levels: int, r0: float):
    """Per level: (positive mask, inside-span mask, target distances in stride units)."""
    out = []
    s = spans[:, 0:1]
    e = spans[:, 1:2]
    for l, m in enumerate(masks):
        stride = 2 ** l
        centre = torch.arange(m.shape[1], dtype=spans.dtype)[None] * stride
        inside = (centre >= s) & (centre < e) & m
        d_s, d_e = centre - s, e - centre
        reach = torch.maximum(d_s, d_e)
        lo, hi = level_range(l, levels, r0)
        pos = inside & (reach > lo) & (reach <= hi)
        out.append((pos, inside, torch.stack([d_s, d_e], -1) / stride))
    return out


def decode_spans(dists: torch.Tensor, level: int) -> torch.Tensor:
    """``[..., n, 2]`` stride-unit distances -> unclamped ``[..., n, 2]`` spans in clips."""
    stride = 2 ** level
    centre = torch.arange(dists.shape[-2], dtype=dists.dtype) * stride
    return torch.stack([centre - dists[..., 0] * stride, centre + dists[..., 1] * stride], -1)


def grounding_loss(out: dict, batch: GrounderBatch, cfg: GrounderConfig) -> tuple[torch.Tensor, dict]:
    targets = assign_targets(batch.spans, out["masks"], cfg.levels, cfg.r0)
    num_pos = sum(int(p.sum()) for p, _, _ in targets)
    cls_logits = torch.cat([lg[m] for lg, m in zip(out["logits"], out["masks"])])
    cls_labels = torch.cat([p[m] for (p, _, _), m in zip(targets, out["masks"])])
    l_cls = focal_loss(cls_logits, cls_labels, cfg.focal_alpha, cfg.focal_gamma, num_pos)

    preds, gts = [], []
    for l, ((pos, _, _), d) in enumerate(zip(targets, out["dists"])):
        if pos.any():
            spans = decode_spans(d, l)
            preds.append(spans[pos])
            gts.append(batch.spans[:, None, :].expand(-1, pos.shape[1], -1)[pos])
    l_reg = diou_loss(torch.cat(preds), torch.cat(gts)).mean() if preds else cls_logits.sum() * 0
    total = l_cls + cfg.diou_weight * l_reg
    stats = {"focal": l_cls.item(), "diou": l_reg.item(), "num_pos": num_pos}
    if cfg.use_mtr:
        # the confidence FFN is trained with focal loss on "inside the moment" labels
        p_logits = torch.cat([pl[m] for pl, m in zip(out["p_logits"], out["masks"])])
        p_labels = torch.cat([ins[m] for (_, ins, _), m in zip(targets, out["masks"])])
        l_aux = focal_loss(p_logits, p_labels, cfg.focal_alpha, cfg.focal_gamma)
        total = total + l_aux
        stats["confidence"] = l_aux.item()
    stats["total"] = total.item()
    return total, stats


# ---------------------------------------------------------------- inference

def temporal_iou(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def soft_nms(proposals: Sequence[MomentProposal], sigma: float = 0.9, score_floor: float = 1e-3,
             keep: int = 5) -> list[MomentProposal]:
    """Gaussian Soft-NMS: take the best, decay the rest by ``exp(-iou^2 / sigma)``."""
    pool = [MomentProposal(p.t_s, p.t_e, p.score, p.level) for p in proposals]
    kept: list[MomentProposal] = []
    while pool and len(kept) < keep:
        best = max(range(len(pool)), key=lambda i: (pool[i].score, -i))
        top = pool.pop(best)
        kept.append(top)
        survivors = []
        for p in pool:
            iou = temporal_iou((top.t_s, top.t_e), (p.t_s, p.t_e))
            p.score *= math.exp(-(iou * iou) / sigma) if sigma > 0 else (0.0 if iou > 0 else 1.0)
            if p.score >= score_floor:
                survivors.append(p)
        pool = survivors
    return kept


def decode_proposals(out: dict, b: int, T: int, cfg: GrounderConfig) -> list[MomentProposal]:
    cands = []
    for l, (lg, d, m) in enumerate(zip(out["logits"], out["dists"], out["masks"])):
        valid = m[b]
        scores = torch.sigmoid(lg[b][valid])
        spans = decode_spans(d[b], l)[valid].clamp(0, T)
        for (ts, te), sc in zip(spans.tolist(), scores.tolist()):
            if te > ts:
                cands.append(MomentProposal(ts, te, sc, l))
    cands.sort(key=lambda p: -p.score)
    return cands[: cfg.pre_nms]


@torch.no_grad()
def ground(model: Grounder, batch: GrounderBatch) -> list[list[MomentProposal]]:
    """Top-K proposals per batch item after Soft-NMS."""
    cfg = model.cfg
    out = model(batch)
    return [soft_nms(decode_proposals(out, b, T, cfg), cfg.nms_sigma, cfg.score_floor, cfg.top_k)
            for b, T in enumerate(batch.lengths)]


def proposals_array(props: Sequence[MomentProposal]) -> np.ndarray:
    return np.array([[p.t_s, p.t_e, p.score] for p in props], dtype=np.float64).reshape(-1, 3)
