"""Seeded synthetic videos with planted query moments.

Background clips are dim uniform noise. A planted span of concept ``v``
paints its clips with that concept's colour prototype plus Gaussian noise
of scale ``noise``: every pixel by default, or a static square of side
``object_size`` at a random position. Each video carries ``spans_per_video``
non-overlapping spans of distinct concepts; every span is one query whose
token ids name the concept.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .config import DataConfig, RunConfig

BACKGROUND_MAX = 0.4
PROTO_LOW = 0.45
MIN_PROTO_GAP = 0.15


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    qid: str
    video: int
    concept: int
    tokens: tuple[int, ...]
    span: tuple[int, int]
    split: str


@dataclass
class Dataset:
    videos: list[np.ndarray]
    queries: list[Query]
    prototypes: np.ndarray
    concept_tokens: np.ndarray
    cfg: DataConfig

    def split(self, name: str) -> list[Query]:
        return [q for q in self.queries if q.split == name]


def concept_bank(cfg: DataConfig) -> tuple[np.ndarray, np.ndarray]:
    """Colour prototypes ``[V, Cin]`` and distinct token sequences ``[V, N]``."""
    rng = np.random.default_rng([cfg.seed, 0xC0C0])
    min_gap = max(4 * cfg.noise, MIN_PROTO_GAP)
    protos: list[np.ndarray] = []
    for _ in range(100_000):
        cand = rng.uniform(PROTO_LOW, 1.0, size=cfg.channels)
        if all(np.linalg.norm(cand - p) > min_gap for p in protos):
            protos.append(cand)
            if len(protos) == cfg.n_concepts:
                break
    else:
        raise DataError(f"cannot place {cfg.n_concepts} prototypes {min_gap:.3f} apart; "
                        "lower data.n_concepts or data.noise")
    seqs: list[tuple[int, ...]] = []
    while len(seqs) < cfg.n_concepts:
        s = tuple(int(t) for t in rng.integers(0, cfg.vocab, size=cfg.query_len))
        if s not in seqs:
            seqs.append(s)
    return np.stack(protos).astype(np.float32), np.array(seqs, dtype=np.int64)


def _span_length(frac: float, T: int, cfg: DataConfig) -> int:
    length = max(cfg.min_span, int(round(frac * T)))
    if length > T:
        raise DataError(f"span of {length} clips does not fit a {T}-clip video")
    return length


def make_video(index: int, cfg: DataConfig, prototypes: np.ndarray):
    """One video plus its planted ``(concept, start, end)`` spans."""
    rng = np.random.default_rng([cfg.seed, index])
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    shape = (T, cfg.frames, cfg.height, cfg.width, cfg.channels)
    video = rng.uniform(0.0, BACKGROUND_MAX, size=shape)
    concepts = rng.choice(cfg.n_concepts, size=cfg.spans_per_video, replace=False)
    taken = np.zeros(T, dtype=bool)
    spans = []
    for c in concepts:
        frac = rng.uniform(cfg.span_frac_min, cfg.span_frac_max)
        length = _span_length(frac, T, cfg)
        for _ in range(1000):
            s = int(rng.integers(0, T - length + 1))
            # keep one background clip between spans
            lo, hi = max(0, s - 1), min(T, s + length + 1)
            if not taken[lo:hi].any():
                break
        else:
            raise DataError(f"video {index}: no room for {cfg.spans_per_video} spans in {T} clips")
        taken[s:s + length] = True
        noise = rng.standard_normal((length,) + shape[1:]) * cfg.noise
        planted = np.clip(prototypes[c] + noise, 0.0, 1.0)
        if cfg.object_size and cfg.object_size < max(cfg.height, cfg.width):
            k = cfg.object_size
            y, x = (int(v) for v in rng.integers(0, [cfg.height - k + 1, cfg.width - k + 1]))
            video[s:s + length, :, y:y + k, x:x + k] = planted[:, :, y:y + k, x:x + k]
        else:
            video[s:s + length] = planted
        spans.append((int(c), s, s + length))
    return video.astype(np.float32), spans


def generate(cfg: DataConfig) -> Dataset:
    cfg.validate()
    prototypes, tokens = concept_bank(cfg)
    n_val = max(1, int(round(cfg.val_frac * cfg.n_videos)))
    order = np.random.default_rng([cfg.seed, 0x5E1]).permutation(cfg.n_videos)
    val_videos = set(order[:n_val].tolist())
    videos, queries = [], []
    for i in range(cfg.n_videos):
        video, spans = make_video(i, cfg, prototypes)
        videos.append(video)
        for k, (c, s, e) in enumerate(spans):
            queries.append(Query(
                qid=f"q{i:05d}_{k}", video=i, concept=c, tokens=tuple(int(t) for t in tokens[c]),
                span=(s, e), split="val" if i in val_videos else "train"))
    return Dataset(videos, queries, prototypes, tokens, cfg)


def gt_clips(span: tuple[float, float], T: int) -> list[int]:
    """Clips overlapping ``span`` by any amount."""
    s, e = span
    return [t for t in range(T) if t < e and t + 1 > s]


def positive_clips(span: tuple[float, float], T: int) -> list[int]:
    """Clips whose unit interval overlaps ``span`` by at least half."""
    s, e = span
    return [t for t in range(T) if min(t + 1, e) - max(t, s) >= 0.5]


# ---------------------------------------------------------------- files

def write_dataset(ds: Dataset, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "videos": out_dir / "videos.dcf",
        "queries": out_dir / "queries.tsv",
        "manifest": out_dir / "manifest.txt",
    }
    records = {"concepts/prototypes": ds.prototypes, "concepts/tokens": ds.concept_tokens}
    for i, v in enumerate(ds.videos):
        records[f"video/{i:05d}"] = v
    container.write(paths["videos"], records)

    rows = ["qid\tvideo\tconcept\tsplit\tt_s\tt_e\ttokens"]
    for q in ds.queries:
        rows.append(f"{q.qid}\t{q.video}\t{q.concept}\t{q.split}\t{q.span[0]}\t{q.span[1]}\t"
                    + ",".join(map(str, q.tokens)))
    paths["queries"].write_text("\n".join(rows) + "\n", encoding="utf-8")

    cfg = ds.cfg
    lengths = [v.shape[0] for v in ds.videos]
    manifest = {
        "seed": cfg.seed,
        "n_videos": len(ds.videos),
        "n_queries_train": len(ds.split("train")),
        "n_queries_val": len(ds.split("val")),
        "t_min": min(lengths),
        "t_max": max(lengths),
        "n_concepts": cfg.n_concepts,
        "noise": cfg.noise,
        "clip_frames": cfg.frames,
        "clip_seconds": cfg.clip_seconds,
        "clip_stride_seconds": cfg.clip_stride_seconds,
        "videos_file": paths["videos"].name,
        "queries_file": paths["queries"].name,
        "videos_sha256": hashlib.sha256(paths["videos"].read_bytes()).hexdigest(),
    }
    manifest.update({f"config.{k}": v for k, v in vars(cfg).items()})
    paths["manifest"].write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return paths


def read_manifest(path: str | Path) -> dict[str, str]:
    items = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            items[k] = v
    return items


def read_queries(path: str | Path) -> list[Query]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: query table not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    out = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{n}: expected 7 tab-separated fields, got {len(parts)}")
        qid, video, concept, split, ts, te, toks = parts
        out.append(Query(qid, int(video), int(concept), tuple(int(t) for t in toks.split(",")),
                         (int(ts), int(te)), split))
    return out


def load_dataset(data_dir: str | Path, cfg: RunConfig | DataConfig | None = None) -> Dataset:
    data_dir = Path(data_dir)
    records = container.read(data_dir / "videos.dcf")
    queries = read_queries(data_dir / "queries.tsv")
    n = sum(1 for k in records if k.startswith("video/"))
    videos = [records[f"video/{i:05d}"] for i in range(n)]
    for q in queries:
        if not 0 <= q.video < n:
            raise DataError(f"{data_dir / 'queries.tsv'}: query {q.qid} refers to missing video {q.video}")
    data_cfg = cfg.data if isinstance(cfg, RunConfig) else cfg
    return Dataset(videos, queries, records["concepts/prototypes"],
                   records["concepts/tokens"].astype(np.int64), data_cfg or DataConfig())


def expected_span_bounds(T: int, cfg: DataConfig) -> tuple[int, int]:
    lo = max(cfg.min_span, math.floor(cfg.span_frac_min * T) - 1)
    hi = max(cfg.min_span, math.ceil(cfg.span_frac_max * T) + 1)
    return lo, hi
