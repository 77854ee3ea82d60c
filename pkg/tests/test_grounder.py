import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from salient_grounding import grounder as gr
from salient_grounding.config import GrounderConfig
from salient_grounding.grounder import MomentProposal
from salient_grounding.numerics import ShapeError, grad_check, linear_interpolate

pytestmark = pytest.mark.usefixtures("float64")

C = 8


def make_item(T, n_tokens=3, seed=0, span=None, ratio=0.5):
    g = torch.Generator().manual_seed(seed)
    dense = torch.randn(T, C, generator=g)
    sel = sorted(torch.randperm(T, generator=g)[: max(1, int(ratio * T))].tolist())
    salient = gr.pad_salient(torch.randn(len(sel), C, generator=g), sel, T)
    item = {"dense": dense, "salient": salient, "saliency": torch.randn(T, generator=g),
            "q_tokens": torch.randn(n_tokens + 1, C, generator=g)}
    if span is not None:
        item["span"] = span
    return item


def model(levels=2, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = GrounderConfig(levels=levels, mtr_layers=3, **kw)
    return gr.Grounder(cfg, C)


# ---------------------------------------------------------------- padding and fusion

def test_pad_salient_examples():
    F_S = torch.randn(3, C)
    out = gr.pad_salient(F_S, [0, 1, 2], 3)
    assert torch.equal(out, F_S)
    out = gr.pad_salient(F_S[:1], [0], 3)
    assert out[1:].abs().sum() == 0
    with pytest.raises(ValueError, match="duplicate"):
        gr.pad_salient(F_S[:2], [1, 1], 3)
    with pytest.raises(ShapeError):
        gr.pad_salient(F_S[:1], [3], 3)


@settings(max_examples=100, deadline=None)
@given(T=st.integers(1, 30), data=st.data())
def test_pad_salient_nonzero_rows_are_the_selection(T, data):
    sel = data.draw(st.lists(st.integers(0, T - 1), unique=True, min_size=1, max_size=T))
    F_S = torch.rand(len(sel), C) + 0.1  # strictly non-zero rows
    out = gr.pad_salient(F_S, sel, T)
    nonzero = set(torch.nonzero(out.abs().sum(1)).reshape(-1).tolist())
    assert nonzero == set(sel)
    unselected = [t for t in range(T) if t not in sel]
    assert out[unselected].abs().sum() == 0
    assert torch.equal(out[sel], F_S)


def test_fuse_output_shape_for_any_query_length():
    m = model()
    for n in (1, 2, 7):
        batch = gr.collate([make_item(12, n_tokens=n)], 2, torch.float64)
        assert m.fuse_qta(batch).shape == (1, 12 if 12 % 4 == 0 else 16, C)


def test_identical_query_tokens_add_one_vector_everywhere():
    m = model()
    item = make_item(8)
    item["q_tokens"] = item["q_tokens"][:1].expand(4, -1).clone()
    batch = gr.collate([item], 2, torch.float64)
    x = m.in_proj(torch.cat([batch.dense, batch.salient, batch.saliency[..., None]], -1))
    added = m.cross.attend(x, batch.q_tokens)
    torch.testing.assert_close(added, added[:, :1].expand_as(added), rtol=0, atol=1e-12)


def test_saliency_channel_is_live():
    m = model()
    batch = gr.collate([make_item(8)], 2, torch.float64)
    a = m.fuse_qta(batch)
    batch.saliency = torch.zeros_like(batch.saliency)
    assert not torch.allclose(a, m.fuse_qta(batch))


# ---------------------------------------------------------------- pyramid

@pytest.mark.parametrize("T,levels,lengths", [(64, 3, [64, 32, 16, 8]), (60, 3, [64, 32, 16, 8]), (5, 1, [6, 3])])
def test_pyramid_lengths_and_padding(T, levels, lengths):
    m = model(levels=levels)
    batch = gr.collate([make_item(T)], levels, torch.float64)
    assert batch.mask.shape[1] == lengths[0]
    assert int(batch.mask.sum()) == T
    pyr, masks = m.build_pyramid(m.fuse_qta(batch), batch.mask)
    assert [z.shape[1] for z in pyr] == lengths
    assert [int(mk.shape[1]) for mk in masks] == lengths
    for z, mk in zip(pyr, masks):
        assert z[~mk].abs().sum() == 0


def test_pyramid_keeps_constant_input_constant():
    m = model(levels=3)
    with torch.no_grad():
        for conv in m.down:
            conv.weight.fill_(0.5)
            conv.bias.zero_()
    x = torch.full((1, 16, C), 0.3) + torch.arange(C) * 0.1
    mask = torch.ones(1, 16, dtype=torch.bool)
    pyr, _ = m.build_pyramid(x, mask)
    for z in pyr:
        torch.testing.assert_close(z, z[:, :1].expand_as(z), rtol=0, atol=1e-12)


def test_downsampling_average_conserves_constant():
    m = model(levels=2)
    conv = m.down[0]
    with torch.no_grad():
        conv.weight.fill_(0.5)
        conv.bias.zero_()
    x = torch.full((1, 8, C), 1.7)
    torch.testing.assert_close(conv(x), torch.full((1, 4, C), 1.7), rtol=0, atol=1e-15)


# ---------------------------------------------------------------- refinement

def test_mtr_shapes():
    torch.manual_seed(0)
    m = gr.Grounder(GrounderConfig(levels=3, mtr_layers=8), 32)
    item = {"dense": torch.randn(64, 32), "salient": torch.zeros(64, 32), "saliency": torch.randn(64),
            "q_tokens": torch.randn(4, 32)}
    batch = gr.collate([item], 3, torch.float64)
    pyr, masks = m.build_pyramid(m.fuse_qta(batch), batch.mask)
    refined, p = m.mtr(pyr, masks)
    assert [r.shape[1:] for r in refined] == [(64, 64), (32, 64), (16, 64), (8, 64)]
    assert [x.shape[1] for x in p] == [64, 32, 16, 8]


def test_constant_confidence_expands_to_constant():
    for n in (1, 2, 5, 16):
        out = gr.expand(torch.full((2, n), 0.42), 16)
        torch.testing.assert_close(out, torch.full((2, 16, 1), 0.42), rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 16), r=st.integers(1, 8), seed=st.integers(0, 1000))
def test_expansion_reproduces_values_at_anchor_positions(n, r, seed):
    p = torch.rand(1, n, generator=torch.Generator().manual_seed(seed))
    T = (n - 1) * r + 1  # anchors of an n-point level land on every r-th clip
    out = gr.expand(p, T)[0, :, 0]
    torch.testing.assert_close(out[::r], p[0], rtol=0, atol=1e-9)


def test_avg_pool_matches_window_mean_loop():
    h = torch.randn(2, 16, 3)
    for f in (1, 2, 4, 8):
        out = gr.avg_pool(h, f)
        for b in range(2):
            for j in range(16 // f):
                ref = sum(h[b, j * f + i] for i in range(f)) / f
                torch.testing.assert_close(out[b, j], ref, rtol=0, atol=1e-12)


def test_mtr_off_appends_zero_block():
    m = model(use_mtr=False)
    batch = gr.collate([make_item(8)], 2, torch.float64)
    pyr, masks = m.build_pyramid(m.fuse_qta(batch), batch.mask)
    refined, _ = m.mtr(pyr, masks)
    for r in refined:
        assert r[..., C:].abs().sum() == 0


# ---------------------------------------------------------------- heads, decoding, losses

def test_decode_by_hand():
    d = torch.zeros(5, 2)
    d[4] = torch.tensor([1.0, 2.0])
    assert gr.decode_spans(d, 1)[4].tolist() == [6.0, 12.0]


def test_heads_shapes_and_non_negative_distances():
    m = model(levels=2)
    batch = gr.collate([make_item(12), make_item(7, seed=1)], 2, torch.float64)
    out = m(batch)
    assert [lg.shape for lg in out["logits"]] == [(2, 12), (2, 6), (2, 3)]
    assert all((d >= 0).all() for d in out["dists"])


def test_degenerate_span_dropped_at_decode():
    cfg = GrounderConfig(levels=1)
    out = {"logits": [torch.zeros(1, 2), torch.zeros(1, 1)],
           "dists": [torch.zeros(1, 2, 2), torch.tensor([[[0.0, 1.0]]])],
           "masks": [torch.ones(1, 2, dtype=torch.bool), torch.ones(1, 1, dtype=torch.bool)]}
    props = gr.decode_proposals(out, 0, 2, cfg)
    assert [(p.t_s, p.t_e) for p in props] == [(0.0, 2.0)]


def test_focal_loss_examples():
    v = gr.focal_loss(torch.tensor([0.0]), torch.tensor([1.0]))
    assert v.item() == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-12)
    assert v.item() == pytest.approx(0.04332, abs=1e-5)
    sat = gr.focal_loss(torch.tensor([40.0, -40.0]), torch.tensor([1.0, 0.0]))
    assert sat.item() < 1e-12


def test_focal_loss_reduces_to_bce():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(20, generator=g)
    labels = (torch.rand(20, generator=g) > 0.5).double()
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels, reduction="sum")
    got = gr.focal_loss(logits, labels, alpha=1.0, gamma=0.0)
    # alpha=1 zeroes the negative terms, so compare against the positive half of BCE
    pos_bce = torch.nn.functional.binary_cross_entropy_with_logits(logits[labels == 1], labels[labels == 1],
                                                                   reduction="sum")
    torch.testing.assert_close(got, pos_bce / labels.sum(), rtol=0, atol=1e-12)
    torch.testing.assert_close(gr.focal_loss(logits, labels, alpha=None, gamma=0.0), bce / labels.sum(),
                               rtol=0, atol=1e-12)


def test_diou_examples():
    t = torch.tensor
    assert gr.diou_loss(t([0.0, 2.0]), t([0.0, 2.0])).item() == 0.0
    assert gr.diou_loss(t([0.0, 2.0]), t([2.0, 4.0])).item() == pytest.approx(1.25)
    # concentric: only 1 - IoU remains
    assert gr.diou_loss(t([1.0, 3.0]), t([0.0, 4.0])).item() == pytest.approx(0.5)


def test_target_assignment_rule():
    spans = torch.tensor([[2.0, 6.0]])
    masks = [torch.ones(1, 8, dtype=torch.bool), torch.ones(1, 4, dtype=torch.bool),
             torch.ones(1, 2, dtype=torch.bool)]
    tg = gr.assign_targets(spans, masks, 2, 4.0)
    # level 0 centres 2..5 inside; reach max(c-2, 6-c) = 4,3,3,4 all in (0, 4]
    assert tg[0][0][0].tolist() == [False, False, True, True, True, True, False, False]
    # level 1 centres 0,2,4,6: 2 and 4 inside, reach 4 is not in (4, 8]
    assert tg[1][0][0].tolist() == [False, False, False, False]
    assert tg[1][1][0].tolist() == [False, True, True, False]
    assert gr.level_range(2, 2, 4.0) == (8.0, math.inf)


# ---------------------------------------------------------------- soft-NMS

def P(ts, te, s):
    return MomentProposal(ts, te, s)


def test_soft_nms_examples():
    out = gr.soft_nms([P(0, 2, 0.9), P(5, 7, 0.8)])
    assert [(p.t_s, p.score) for p in out] == [(0, 0.9), (5, 0.8)]
    out = gr.soft_nms([P(0, 2, 0.9), P(0, 2, 0.8)], sigma=0.5)
    assert out[1].score == pytest.approx(0.8 * math.exp(-2), abs=1e-12)
    assert out[1].score == pytest.approx(0.1083, abs=1e-4)
    assert gr.soft_nms([]) == []


def test_soft_nms_small_sigma_is_hard_nms_for_duplicates():
    out = gr.soft_nms([P(0, 2, 0.9), P(0, 2, 0.8), P(3, 4, 0.5)], sigma=1e-6)
    assert [(p.t_s, p.t_e) for p in out] == [(0, 2), (3, 4)]
    out = gr.soft_nms([P(0, 2, 0.9), P(1, 3, 0.8)], sigma=0.0)
    assert len(out) == 1


def brute_soft_nms(items, sigma, floor, keep):
    scores = [s for _, _, s in items]
    alive = list(range(len(items)))
    out = []
    while alive and len(out) < keep:
        best = alive[0]
        for i in alive:
            if scores[i] > scores[best]:
                best = i
        out.append((items[best][0], items[best][1], scores[best]))
        alive.remove(best)
        nxt = []
        for i in alive:
            a, b = items[best][:2], items[i][:2]
            inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
            iou = inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)
            scores[i] = scores[i] * math.exp(-iou ** 2 / sigma)
            if scores[i] >= floor:
                nxt.append(i)
        alive = nxt
    return out


def random_proposals(rng, n):
    out = []
    for _ in range(n):
        s = rng.randint(0, 10)
        out.append((float(s), float(s + rng.randint(1, 5)), round(rng.random(), 3)))
    return out


def test_soft_nms_matches_brute_force_on_random_instances():
    rng = random.Random(0)
    for trial in range(1000):
        items = random_proposals(rng, rng.randint(0, 9))
        sigma = rng.choice([0.1, 0.5, 0.9])
        keep = rng.randint(1, 6)
        got = gr.soft_nms([P(*it) for it in items], sigma, 1e-3, keep)
        ref = brute_soft_nms(items, sigma, 1e-3, keep)
        assert [(p.t_s, p.t_e) for p in got] == [r[:2] for r in ref], trial
        np.testing.assert_allclose([p.score for p in got], [r[2] for r in ref], rtol=0, atol=1e-9)
        assert all(a.score >= b.score for a, b in zip(got, got[1:]))


# ---------------------------------------------------------------- end to end

@settings(max_examples=10, deadline=None)
@given(T=st.integers(3, 40), seed=st.integers(0, 100))
def test_untrained_model_emits_valid_proposals(T, seed):
    m = model(levels=2, seed=seed)
    batch = gr.collate([make_item(T, seed=seed)], 2, torch.float64)
    props = gr.ground(m, batch)[0]
    assert len(props) == m.cfg.top_k
    for p in props:
        assert 0 <= p.t_s < p.t_e <= T
        assert 0 <= p.score <= 1


def test_grounding_loss_gradients():
    torch.manual_seed(0)
    cfg = GrounderConfig(levels=2, mtr_layers=3)
    m = gr.Grounder(cfg, C)
    batch = gr.collate([make_item(8, span=(2.0, 5.0)), make_item(6, seed=1, span=(0.0, 3.0))], 2,
                       torch.float64)
    rep = grad_check(lambda: gr.grounding_loss(m(batch), batch, cfg)[0], m, coords_per_param=6)
    assert rep.passed, str(rep)


def test_interpolation_is_the_shared_primitive():
    p = torch.rand(3, 4)
    torch.testing.assert_close(gr.expand(p, 10), linear_interpolate(p[..., None], 10), rtol=0, atol=0)
