import hashlib

import numpy as np
import pytest

from salient_grounding import synthdata
from salient_grounding.config import ConfigError, DataConfig
from salient_grounding.synthdata import DataError


def small(**kw):
    base = dict(n_videos=12, t_min=16, t_max=40, n_concepts=5, vocab=10, query_len=2)
    base.update(kw)
    return DataConfig(**base)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_same_seed_gives_byte_identical_files(tmp_path):
    for sub in ("a", "b"):
        synthdata.write_dataset(synthdata.generate(small(seed=4)), tmp_path / sub)
    for name in ("videos.dcf", "queries.tsv", "manifest.txt"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_different_seed_changes_videos():
    a = synthdata.generate(small(seed=1))
    b = synthdata.generate(small(seed=2))
    assert not np.array_equal(a.videos[0][:16], b.videos[0][:16])


def test_video_bytes_do_not_depend_on_dataset_size():
    # per-video seeds: video i is the same whether 5 or 12 videos are made
    a = synthdata.generate(small(n_videos=5))
    b = synthdata.generate(small(n_videos=12))
    assert all(np.array_equal(a.videos[i], b.videos[i]) for i in range(5))


def test_zero_noise_plants_exact_prototype():
    ds = synthdata.generate(small(noise=0.0))
    for q in ds.queries[:10]:
        s, e = q.span
        clip = ds.videos[q.video][s:e]
        assert np.array_equal(clip, np.broadcast_to(ds.prototypes[q.concept], clip.shape))


def test_object_mode_only_touches_a_square():
    ds = synthdata.generate(small(noise=0.0, object_size=2))
    q = ds.queries[0]
    clip = ds.videos[q.video][q.span[0]]
    hit = np.all(clip == ds.prototypes[q.concept], axis=-1)  # [L, H, W]
    assert hit.any(axis=0).sum() == 4
    assert (clip[~hit] <= synthdata.BACKGROUND_MAX).all()


def test_prototypes_are_separated():
    cfg = small(noise=0.03)
    protos, tokens = synthdata.concept_bank(cfg)
    d = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
    assert d[~np.eye(len(protos), dtype=bool)].min() > 4 * cfg.noise
    assert len({tuple(t) for t in tokens}) == cfg.n_concepts


def test_spans_respect_fraction_bounds_in_every_sample():
    cfg = small(n_videos=40, t_min=20, t_max=200, span_frac_min=0.03, span_frac_max=0.09)
    ds = synthdata.generate(cfg)
    for q in ds.queries:
        T = ds.videos[q.video].shape[0]
        s, e = q.span
        lo, hi = synthdata.expected_span_bounds(T, cfg)
        assert 0 <= s < e <= T
        assert lo <= e - s <= hi
        assert cfg.span_frac_min * T - 1 <= e - s <= cfg.span_frac_max * T + 1 or e - s == cfg.min_span


def test_spans_of_one_video_do_not_touch():
    ds = synthdata.generate(small(spans_per_video=3, t_min=30))
    by_video = {}
    for q in ds.queries:
        by_video.setdefault(q.video, []).append(q.span)
    for spans in by_video.values():
        spans.sort()
        assert all(a[1] < b[0] for a, b in zip(spans, spans[1:]))


def test_span_longer_than_video_rejected():
    with pytest.raises(DataError, match="does not fit"):
        synthdata.generate(small(t_min=8, t_max=8, min_span=9))


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        small(n_concepts=1).validate()
    with pytest.raises(ConfigError):
        small(t_min=4).validate()


def test_linear_probe_separates_planted_clips():
    ds = synthdata.generate(DataConfig(n_videos=60))
    X, y = [], []
    for i, v in enumerate(ds.videos):
        planted = np.zeros(v.shape[0], dtype=bool)
        for q in ds.queries:
            if q.video == i:
                planted[q.span[0]:q.span[1]] = True
        X.append(v.reshape(v.shape[0], -1, v.shape[-1]).mean(1))
        y.append(planted)
    X, y = np.concatenate(X), np.concatenate(y)
    # least-squares linear probe on mean pixel colour, trained on half, tested on the rest
    A = np.c_[X, np.ones(len(X))]
    half = len(X) // 2
    w, *_ = np.linalg.lstsq(A[:half], np.where(y[:half], 1.0, -1.0), rcond=None)
    # balanced threshold, since planted clips are rare
    scores = A[half:] @ w
    acc = ((scores > 0) == y[half:]).mean()
    assert acc >= 0.95


def test_splits_are_disjoint():
    ds = synthdata.generate(small(n_videos=20))
    train = {(q.video, q.span) for q in ds.split("train")}
    val = {(q.video, q.span) for q in ds.split("val")}
    assert train and val and not (train & val)
    assert not ({q.video for q in ds.split("train")} & {q.video for q in ds.split("val")})


def test_load_dataset_round_trip(tmp_path):
    ds = synthdata.generate(small())
    synthdata.write_dataset(ds, tmp_path)
    back = synthdata.load_dataset(tmp_path, ds.cfg)
    assert back.queries == ds.queries
    assert all(np.array_equal(a, b) for a, b in zip(back.videos, ds.videos))
    man = synthdata.read_manifest(tmp_path / "manifest.txt")
    assert man["videos_sha256"] == digest(tmp_path / "videos.dcf")
    assert int(man["n_queries_train"]) + int(man["n_queries_val"]) == len(ds.queries)


def test_missing_query_table_is_reported(tmp_path):
    with pytest.raises(DataError, match="not found"):
        synthdata.read_queries(tmp_path / "queries.tsv")


def test_positive_and_gt_clips():
    assert synthdata.gt_clips((2, 5), 10) == [2, 3, 4]
    assert synthdata.gt_clips((2.5, 4.2), 10) == [2, 3, 4]
    assert synthdata.positive_clips((2.5, 4.2), 10) == [2, 3]
