"""Recall metrics, selection baselines and analytic encoder FLOPs.

FLOPs are 2 x multiply-accumulates of the matrix products and
convolutions; softmax, normalisation and activations are not counted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import DataConfig, EncoderConfig

KS = (1, 5)
THETAS = (0.3, 0.5)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    if a[1] <= a[0] or b[1] <= b[0]:
        raise ValueError(f"iou: zero-length or reversed span {a if a[1] <= a[0] else b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def recall_at(predictions: Sequence[Sequence[Sequence[float]]], gts: Sequence[Sequence[float]],
              k: int, theta: float) -> float:
    """Percent of queries with some top-k prediction at IoU >= theta.

    ``predictions[i]`` is the ranked list of ``(t_s, t_e[, score])`` for
    query ``i``; a query without predictions is a miss.
    """
    if len(predictions) != len(gts):
        raise ValueError(f"recall_at: {len(predictions)} prediction lists for {len(gts)} queries")
    if not gts:
        return 0.0
    hits = 0
    for preds, gt in zip(predictions, gts):
        if any(iou(p[:2], gt) >= theta for p in list(preds)[:k]):
            hits += 1
    return 100.0 * hits / len(gts)


@dataclass
class EvalReport:
    recalls: dict[tuple[int, float], float] = field(default_factory=dict)
    n_queries: int = 0

    @property
    def avg(self) -> float:
        return float(np.mean(list(self.recalls.values()))) if self.recalls else 0.0

    def check(self) -> list[str]:
        """Violations of the recall orderings (empty when consistent)."""
        bad = []
        ks = sorted({k for k, _ in self.recalls})
        ths = sorted({t for _, t in self.recalls})
        for t in ths:
            for k1, k2 in zip(ks, ks[1:]):
                if self.recalls[(k1, t)] > self.recalls[(k2, t)]:
                    bad.append(f"R{k1}@{t} > R{k2}@{t}")
        for k in ks:
            for t1, t2 in zip(ths, ths[1:]):
                if self.recalls[(k, t1)] < self.recalls[(k, t2)]:
                    bad.append(f"R{k}@{t1} < R{k}@{t2}")
        return bad

    def table(self) -> str:
        cols = [f"R{k}@{t}" for k, t in self.recalls]
        head = " | ".join(f"{c:>7s}" for c in cols + ["AVG"])
        row = " | ".join(f"{v:7.2f}" for v in list(self.recalls.values()) + [self.avg])
        return f"{head}\n{row}\nqueries: {self.n_queries}"

    def key_values(self) -> str:
        lines = [f"R{k}@{t}={v:.4f}" for (k, t), v in self.recalls.items()]
        lines += [f"AVG={self.avg:.4f}", f"queries={self.n_queries}"]
        return "\n".join(lines)

    def csv(self) -> str:
        return "k,theta,recall\n" + "".join(f"{k},{t},{v:.6f}\n" for (k, t), v in self.recalls.items())

    @classmethod
    def from_key_values(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, val = line.split("=", 1)
            if key.startswith("R") and "@" in key:
                k, t = key[1:].split("@")
                rep.recalls[(int(k), float(t))] = float(val)
            elif key == "queries":
                rep.n_queries = int(val)
        return rep


def evaluate(predictions, gts, ks=KS, thetas=THETAS) -> EvalReport:
    rep = EvalReport(n_queries=len(gts))
    for k in ks:
        for t in thetas:
            rep.recalls[(k, t)] = recall_at(predictions, gts, k, t)
    return rep


def selection_recall(selected: Sequence[Sequence[int]], spans: Sequence[Sequence[float]]) -> float:
    """Mean over queries of the percent of ground-truth clips that were selected."""
    total = 0.0
    for sel, (s, e) in zip(selected, spans):
        gt = set(range(int(math.floor(s)), int(math.ceil(e))))
        if not gt or e <= s:
            raise ValueError(f"selection_recall: empty ground-truth span ({s}, {e})")
        total += 100.0 * len(gt & set(sel)) / len(gt)
    return total / len(spans) if spans else 0.0


def selection_count(ratio: float, T: int) -> int:
    if ratio <= 0 or ratio > 1:
        raise ValueError(f"selection ratio must lie in (0, 1], got {ratio}")
    # round first so that 0.3 * 10 counts as 3, not 3.0000000000000004
    return min(T, math.ceil(round(ratio * T, 9)))


def baseline_select(T: int, ratio: float, mode: str, seed: int = 0) -> list[int]:
    M = selection_count(ratio, T)
    if mode == "random":
        rng = np.random.default_rng(seed)
        return sorted(rng.choice(T, size=M, replace=False).tolist())
    if mode == "uniform":
        return [(j * T) // M for j in range(M)]
    raise ValueError(f"baseline_select: unknown mode {mode!r} (random, uniform)")


def expected_random_recall(lengths: Sequence[int], ratio: float) -> float:
    """Exact mean selection recall of the random baseline over queries on videos of ``lengths``.

    Drawing M of T clips uniformly selects each clip with probability M/T,
    so every ground-truth span is covered M/T in expectation.
    """
    if not lengths:
        return 0.0
    return float(np.mean([100.0 * selection_count(ratio, T) / T for T in lengths]))


# ---------------------------------------------------------------- FLOPs

def block_macs(n: int, d: int) -> int:
    """Attention projections 4nd^2, scores and mixing 2n^2d, FFN 8nd^2."""
    return 4 * n * d * d + 2 * n * n * d + 8 * n * d * d


def clip_macs(enc: EncoderConfig, data: DataConfig, n_blocks: int, pool_factor: int = 1,
              pool_index: int = 1) -> int:
    pl, ph, pw = enc.patch
    d = enc.d_model
    grid = enc.grid(data)
    n = math.prod(grid)
    macs = n * (pl * ph * pw * data.channels) * d  # patchify
    for b in range(1, n_blocks + 1):
        if pool_factor > 1 and b == pool_index:
            n //= pool_factor ** 3
            macs += n * pool_factor ** 3 * d * d  # strided 3-D conv
        macs += block_macs(n, d)
    return macs + d * d  # readout projection


def sidekick_clip_flops(enc: EncoderConfig, data: DataConfig) -> int:
    return 2 * clip_macs(enc, data, enc.sidekick_blocks, enc.pool_factor, enc.pool_index)


def expert_clip_flops(enc: EncoderConfig, data: DataConfig) -> int:
    return 2 * clip_macs(enc, data, enc.expert_blocks)


def sampled_count(T: int, tau: int) -> int:
    n = -(-T // tau)
    return n + (1 if (T - 1) % tau else 0)


def interp_flops(enc: EncoderConfig, T: int) -> int:
    """Interpolation FFN: one pass per gap that has clips missing between its ends."""
    tau, d = enc.tau, enc.d_model
    if tau == 1 or T < 2:
        return 0
    gaps = (T - 1) // tau
    last = (T - 1) % tau  # short tail gap, skipped by the sidekick when no clip is missing
    gaps += last > 1
    per_gap = (2 * d) * (2 * d) + (2 * d) * ((tau - 1) * d)
    return 2 * gaps * per_gap


def flops_encoder(enc: EncoderConfig, data: DataConfig, T: int, tau: int | None = None) -> int:
    """Sidekick FLOPs for a ``T``-clip video (encoded clips plus interpolation)."""
    if tau is not None and tau != enc.tau:
        enc = EncoderConfig(**{**vars(enc), "tau": tau})
    return sampled_count(T, enc.tau) * sidekick_clip_flops(enc, data) + interp_flops(enc, T)


def compose_total(d_full: float, e_full: float, ratio: float) -> float:
    if d_full < 0 or e_full < 0:
        raise ValueError("compose_total: costs must be non-negative")
    return d_full + ratio * e_full


@dataclass
class ComputeProfile:
    sidekick_clip: float
    expert_clip: float
    d_full: float
    e_full: float

    def total(self, ratio: float) -> float:
        return compose_total(self.d_full, self.e_full, ratio)

    def rows(self, ratios: Sequence[float]) -> list[tuple[str, str, float, float]]:
        """(sidekick share, expert share, total, reduction vs expert-only %)."""
        out = [("100%", "0%", self.d_full, 100 * (1 - self.d_full / self.e_full) if self.e_full else 0.0),
               ("0%", "100%", self.e_full, 0.0)]
        for c in ratios:
            tot = self.total(c)
            out.append(("100%", f"{round(100 * c)}%", tot, 100 * (1 - tot / self.e_full) if self.e_full else 0.0))
        return out


def compute_profile(enc: EncoderConfig, data: DataConfig, T: int) -> ComputeProfile:
    return ComputeProfile(
        sidekick_clip=float(sidekick_clip_flops(enc, data)),
        expert_clip=float(expert_clip_flops(enc, data)),
        d_full=float(flops_encoder(enc, data, T)),
        e_full=float(T * expert_clip_flops(enc, data)),
    )


# printed encoder totals (TFLOPs) and derived rows used as a regression fixture
PUBLISHED_COMPUTE = {
    "ego4d-nlq": {"d_full": 21.6, "e_full": 668.2, "rows": {0.3: 222.1, 0.5: 355.7}},
    "ego4d-goalstep": {"d_full": 64.8, "e_full": 2071.8, "rows": {0.3: 686.3, 0.5: 1100.7}},
}
