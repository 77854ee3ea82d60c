"""Saliency scores, top-c% clip selection and the sidekick training losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .evalbench import selection_count
from .numerics import ShapeError

log = logging.getLogger(__name__)


@dataclass
class SaliencyMap:
    scores: torch.Tensor
    ratio: float
    selected: list[int]


@dataclass
class ContrastivePairing:
    """Per query: positive clips, negative clips, and batch queries usable as text negatives."""
    positives: list[list[int]]
    negatives: list[list[int]]
    text_negatives: list[list[int]] = field(default_factory=list)

    def validate(self):
        for b, (p, n) in enumerate(zip(self.positives, self.negatives)):
            if set(p) & set(n):
                raise ValueError(f"query {b}: positive and negative clips overlap")


def compute_saliency(dense: torch.Tensor, q_cls: torch.Tensor) -> torch.Tensor:
    if dense.shape[-1] != q_cls.shape[-1]:
        raise ShapeError(f"saliency: feature dim {dense.shape[-1]} != query dim {q_cls.shape[-1]}")
    return dense @ q_cls


def select_top_c(scores, ratio: float, T: int | None = None) -> list[int]:
    """Indices of the ``ceil(ratio*T)`` highest scores, ties to the lower index, sorted."""
    s = torch.as_tensor(scores).detach().reshape(-1).tolist()
    T = len(s) if T is None else T
    if T != len(s):
        raise ShapeError(f"select_top_c: {len(s)} scores for T={T}")
    M = selection_count(ratio, T)
    ranked = sorted(range(T), key=lambda t: (-s[t], t))
    return sorted(ranked[:M])


def saliency_map(dense: torch.Tensor, q_cls: torch.Tensor, ratio: float) -> SaliencyMap:
    scores = compute_saliency(dense, q_cls)
    return SaliencyMap(scores, ratio, select_top_c(scores, ratio))


def saliency_loss(
    dense: Sequence[torch.Tensor],
    q_cls: torch.Tensor,
    pairing: ContrastivePairing,
    temperature: float = 0.07,
) -> tuple[torch.Tensor, dict]:
    """Symmetric InfoNCE between clips and query CLS vectors.

    ``dense[b]`` holds the clip features of query ``b``'s video. The
    text side contrasts each positive clip against the negative clips of
    the same video; the video side contrasts the matching query against
    ``pairing.text_negatives[b]``. Each side averages over positives, then
    over queries, and the two sides are averaged.
    """
    text_terms, video_terms = [], []
    skipped = 0
    for b, feats in enumerate(dense):
        pos, neg = pairing.positives[b], pairing.negatives[b]
        if not pos:
            skipped += 1
            continue
        s = (feats @ q_cls[b]) / temperature
        if neg:
            sn = s[neg]
            lse = torch.logsumexp(torch.cat([s[pos][:, None], sn.expand(len(pos), -1)], dim=1), dim=1)
            text_terms.append((lse - s[pos]).mean())
        else:
            skipped += 1
            log.warning("query %d has no negative clips; text-side term skipped", b)
        tneg = pairing.text_negatives[b] if pairing.text_negatives else []
        if tneg:
            logits = feats[pos] @ torch.cat([q_cls[b:b + 1], q_cls[tneg]]).T / temperature
            video_terms.append((torch.logsumexp(logits, dim=1) - logits[:, 0]).mean())
    text_side = torch.stack(text_terms).mean() if text_terms else None
    video_side = torch.stack(video_terms).mean() if video_terms else None
    sides = [t for t in (text_side, video_side) if t is not None]
    if not sides:
        raise ValueError("saliency_loss: no query had both positives and negatives")
    loss = torch.stack(sides).mean()
    stats = {
        "text": text_side.item() if text_side is not None else float("nan"),
        "video": video_side.item() if video_side is not None else float("nan"),
        "skipped": skipped,
    }
    return loss, stats


def distill_loss(dense: torch.Tensor, expert: torch.Tensor) -> torch.Tensor:
    """Mean over clips of the squared distance to (constant) expert features."""
    if dense.shape != expert.shape:
        raise ShapeError(f"distill_loss: sidekick {tuple(dense.shape)} vs expert {tuple(expert.shape)}")
    return ((dense - expert.detach()) ** 2).sum(-1).mean()


@dataclass
class SidekickBatch:
    videos: list[torch.Tensor]
    expert: list[torch.Tensor]
    query_video: list[int]
    query_ids: torch.Tensor
    pairing: ContrastivePairing


def sidekick_loss(sidekick, text, batch: SidekickBatch, w_sal=1.0, w_dist=0.75, temperature=0.07):
    dense = sidekick.encode_many(batch.videos)
    cls, _ = text(batch.query_ids)
    l_sal, sal_stats = saliency_loss([dense[v] for v in batch.query_video], cls, batch.pairing, temperature)
    l_dist = torch.stack([distill_loss(d, e) for d, e in zip(dense, batch.expert)]).mean()
    total = w_sal * l_sal + w_dist * l_dist
    return total, {"saliency": l_sal.item(), "distill": l_dist.item(), **sal_stats}


def sidekick_train_step(sidekick, text, batch: SidekickBatch, optimizer, w_sal=1.0, w_dist=0.75,
                        temperature=0.07) -> dict:
    """One optimizer step on ``w_sal * L_saliency + w_dist * L_distill``."""
    optimizer.zero_grad()
    total, stats = sidekick_loss(sidekick, text, batch, w_sal, w_dist, temperature)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite sidekick loss {total.item()} ({stats})")
    total.backward()
    optimizer.step()
    stats["total"] = total.item()
    return stats
