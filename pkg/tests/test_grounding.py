"""Grounding tests: head behaviors, dense target assignment (decode inverts
assign), temporal IoU vs. a grid oracle, and the loss hand values."""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drn import autodiff as ad
from drn import grounding as gr
from drn.config import ModelConfig
from drn.grounding import (
    BatchTargets,
    GroundingHeads,
    assign_targets,
    build_geometry,
    centerness_target,
    decode_boxes,
    temporal_iou,
)


def head_cfg(**kw):
    defaults = dict(channels=6, feature_dim=6, word_dim=4, lstm_hidden=3,
                    levels=3, segments=16, vocab_size=8)
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_heads(seed=0, **kw):
    return GroundingHeads(head_cfg(**kw), np.random.default_rng(seed))


def pyramid_for(cfg, seed=1):
    rng = np.random.default_rng(seed)
    sizes = [cfg.segments // 2**i for i in range(cfg.levels)]
    return [ad.constant(rng.normal(size=(2, t, cfg.channels)).astype(np.float32)) for t in sizes]


GEOM16 = build_geometry(16, 3)


def one_sample_targets(geom, gt, selected=None):
    ta = assign_targets(geom, gt)
    sel = ta.positive if selected is None else selected
    return BatchTargets(
        match_labels=sel[None, :].astype(np.float32),
        selected=sel[None, :],
        distances=sel[None, :, None] * ta.distances[None, :, :],
        n_pos=np.asarray([int(sel.sum())]),
        gt_boxes=np.asarray([gt], dtype=np.float64),
    )


# -- heads -----------------------------------------------------------------------


def test_location_head_zero_raw_output_gives_stride_distances():
    heads = make_heads()
    for blk in (heads.loc_conv1, heads.loc_conv2):
        blk.w.data = np.zeros_like(blk.w.data)
        blk.b.data = np.zeros_like(blk.b.data)
    cfg = head_cfg()
    out = heads(pyramid_for(cfg), (1, 2, 4))
    expected = np.concatenate([np.full((2, 16, 2), 1.0), np.full((2, 8, 2), 2.0), np.full((2, 4, 2), 4.0)], axis=1)
    np.testing.assert_allclose(out.distances.data, expected, rtol=1e-6)


def test_location_head_bias_log_two_three():
    heads = make_heads()
    for blk in (heads.loc_conv1, heads.loc_conv2):
        blk.w.data = np.zeros_like(blk.w.data)
        blk.b.data = np.zeros_like(blk.b.data)
    heads.loc_conv2.b.data = np.log(np.asarray([2.0, 3.0], dtype=np.float32))
    cfg = head_cfg(levels=1)
    heads2 = make_heads(levels=1)
    heads2.loc_conv1.w.data = np.zeros_like(heads2.loc_conv1.w.data)
    heads2.loc_conv1.b.data = np.zeros_like(heads2.loc_conv1.b.data)
    heads2.loc_conv2.w.data = np.zeros_like(heads2.loc_conv2.w.data)
    heads2.loc_conv2.b.data = np.log(np.asarray([2.0, 3.0], dtype=np.float32))
    out = heads2(pyramid_for(cfg)[:1], (1,))
    np.testing.assert_allclose(out.distances.data[:, :, 0], 2.0, rtol=1e-6)
    np.testing.assert_allclose(out.distances.data[:, :, 1], 3.0, rtol=1e-6)


def test_distances_strictly_positive():
    heads = make_heads(3)
    out = heads(pyramid_for(head_cfg(), seed=4), (1, 2, 4))
    assert (out.distances.data > 0).all()


def test_matching_head_zero_logit_gives_half():
    heads = make_heads()
    for blk in (heads.match_conv1, heads.match_conv2):
        blk.w.data = np.zeros_like(blk.w.data)
        blk.b.data = np.zeros_like(blk.b.data)
    out = heads(pyramid_for(head_cfg()), (1, 2, 4))
    np.testing.assert_allclose(out.match_prob.data, 0.5, rtol=1e-6)


def test_matching_probability_in_open_interval():
    heads = make_heads(5)
    out = heads(pyramid_for(head_cfg(), seed=6), (1, 2, 4))
    assert ((out.match_prob.data > 0) & (out.match_prob.data < 1)).all()


def test_matching_head_monotone_in_final_logit():
    heads = make_heads(7)
    out_lo = heads(pyramid_for(head_cfg(), seed=8), (1, 2, 4)).match_prob.data
    heads.match_conv2.b.data = heads.match_conv2.b.data + 2.0
    out_hi = heads(pyramid_for(head_cfg(), seed=8), (1, 2, 4)).match_prob.data
    assert (out_hi > out_lo).all()


def test_quality_head_shapes_and_range():
    heads = make_heads(9)
    out = heads(pyramid_for(head_cfg(), seed=10), (1, 2, 4))
    assert out.quality.shape == (2, 16 + 8 + 4)
    assert ((out.quality.data > 0) & (out.quality.data < 1)).all()


def test_quality_head_zero_final_preactivation_gives_half():
    heads = make_heads(11)
    heads.quality_conv3.w.data = np.zeros_like(heads.quality_conv3.w.data)
    heads.quality_conv3.b.data = np.zeros_like(heads.quality_conv3.b.data)
    out = heads(pyramid_for(head_cfg(), seed=12), (1, 2, 4))
    np.testing.assert_allclose(out.quality.data, 0.5, rtol=1e-6)


def test_quality_head_none_mode():
    heads = make_heads(13, quality_head="none")
    out = heads(pyramid_for(head_cfg(), seed=14), (1, 2, 4))
    assert out.quality is None
    assert not any(n.startswith("quality") for n, _ in heads.named_params())


# -- geometry / assignment -----------------------------------------------------------


def test_assign_targets_example_gt_3_10():
    geom = build_geometry(32, 3)
    ta = assign_targets(geom, (3.0, 10.0))
    idx7 = np.where(geom.flat_coords == 7.0)[0][0]  # level-1 coord 7
    assert ta.positive[idx7]
    np.testing.assert_allclose(ta.distances[idx7], [4.0, 3.0])
    idx2 = np.where(geom.flat_coords == 2.5)[0][0]
    assert not ta.positive[idx2]
    # telescoping: d_s + d_e equals the gt length at every positive
    np.testing.assert_allclose(ta.distances[ta.positive].sum(axis=1), 7.0)


def test_assign_targets_strict_interior():
    geom = build_geometry(32, 1)
    ta = assign_targets(geom, (3.5, 9.5))  # boundaries coincide with coords
    coords = geom.flat_coords
    assert not ta.positive[coords == 3.5].any()
    assert not ta.positive[coords == 9.5].any()
    assert ta.positive[(coords > 3.5) & (coords < 9.5)].all()


def test_assign_targets_all_levels_contribute():
    geom = build_geometry(32, 3)
    ta = assign_targets(geom, (4.0, 20.0))
    offsets = np.cumsum([0] + list(geom.sizes))
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        assert ta.positive[lo:hi].any(), "every level should own positives for a long gt"


def test_assign_targets_degenerate_gt():
    with pytest.raises(ValueError):
        assign_targets(GEOM16, (5.0, 5.0))


@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 30.0), st.floats(0.5, 12.0), st.floats(0.1, 4.0))
def test_positive_count_monotone_under_gt_growth(start, length, grow):
    geom = build_geometry(32, 3)
    end = min(start + length, 32.0)
    if end - start < 0.25:
        return
    small = assign_targets(geom, (start, end)).n_pos
    big_start = max(0.0, start - grow)
    big_end = min(32.0, end + grow)
    big = assign_targets(geom, (big_start, big_end)).n_pos
    assert big >= small


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decode_inverts_assignment(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([8, 16, 32, 64, 128]))
    levels = int(rng.integers(1, 4))
    geom = build_geometry(k, levels)
    start = rng.uniform(0, k - 0.5)
    end = rng.uniform(start + 0.5, k)
    ta = assign_targets(geom, (start, end))
    if ta.n_pos == 0:
        return
    boxes = decode_boxes(ta.distances[ta.positive], geom.flat_coords[ta.positive], k)
    np.testing.assert_allclose(boxes[:, 0], start, atol=1e-5)
    np.testing.assert_allclose(boxes[:, 1], end, atol=1e-5)


# -- temporal IoU ----------------------------------------------------------------------


def test_tiou_hand_values():
    assert temporal_iou([2.0, 7.0], [2.0, 7.0]) == pytest.approx(1.0)
    assert temporal_iou([0.0, 1.0], [2.0, 3.0]) == pytest.approx(0.0)
    assert temporal_iou([0.0, 10.0], [5.0, 15.0]) == pytest.approx(1.0 / 3.0)


def test_tiou_zero_length_union():
    assert temporal_iou([2.0, 2.0], [2.0, 2.0]) == pytest.approx(0.0)


def grid_iou_oracle(a, b, step=1e-3):
    lo = min(a[0], b[0])
    hi = max(a[1], b[1])
    if hi <= lo:
        return 0.0
    grid = np.arange(lo, hi, step)
    in_a = (grid >= a[0]) & (grid < a[1])
    in_b = (grid >= b[0]) & (grid < b[1])
    union = np.logical_or(in_a, in_b).sum()
    if union == 0:
        return 0.0
    return np.logical_and(in_a, in_b).sum() / union


def test_tiou_matches_grid_oracle_1000_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a = np.sort(rng.uniform(0, 32, size=2))
        b = np.sort(rng.uniform(0, 32, size=2))
        if a[1] - a[0] < 0.05 or b[1] - b[0] < 0.05:
            continue
        assert abs(temporal_iou(a, b) - grid_iou_oracle(a, b)) < 2e-3


def test_tiou_symmetric_and_bounded():
    rng = np.random.default_rng(7)
    a = np.sort(rng.uniform(0, 32, size=(200, 2)), axis=1)
    b = np.sort(rng.uniform(0, 32, size=(200, 2)), axis=1)
    ab = temporal_iou(a, b)
    ba = temporal_iou(b, a)
    np.testing.assert_allclose(ab, ba)
    assert ((ab >= 0) & (ab <= 1)).all()


# -- centerness ---------------------------------------------------------------------------


def test_centerness_values():
    assert centerness_target([4.0, 4.0]) == pytest.approx(1.0)
    assert centerness_target([1.0, 4.0]) == pytest.approx(0.5)
    assert centerness_target([2.0, 8.0]) == pytest.approx(0.5)


def test_centerness_scale_invariance():
    rng = np.random.default_rng(3)
    d = rng.uniform(0.5, 10.0, size=(50, 2))
    for s in (0.25, 3.0, 17.0):
        np.testing.assert_allclose(centerness_target(d * s), centerness_target(d), rtol=1e-12)


def test_centerness_rejects_nonpositive():
    with pytest.raises(ValueError):
        centerness_target([0.0, 3.0])


# -- loss hand values ----------------------------------------------------------------------


def loc_loss_single(pred_d, target_d, geom=None):
    geom = geom or build_geometry(8, 1)
    sel = np.zeros(geom.total, dtype=bool)
    sel[3] = True
    targets = BatchTargets(
        match_labels=sel[None, :].astype(np.float32),
        selected=sel[None, :],
        distances=np.where(sel[None, :, None], np.asarray(target_d, dtype=np.float64), 0.0),
        n_pos=np.asarray([1]),
        gt_boxes=np.asarray([[0.0, 1.0]]),
    )
    dist = np.full((1, geom.total, 2), 1.0, dtype=np.float32)
    dist[0, 3] = pred_d
    return gr.loss_location(ad.constant(dist), targets).item()


def test_loss_location_perfect_prediction_is_zero():
    assert loc_loss_single([2.0, 5.0], [2.0, 5.0]) == pytest.approx(0.0, abs=1e-6)


def test_loss_location_half_iou_is_ln_two():
    # pred (2, 1.5) vs target (2, 5): I = 3.5, U = 7.0 -> tIoU 0.5
    assert loc_loss_single([2.0, 1.5], [2.0, 5.0]) == pytest.approx(np.log(2.0), rel=1e-4)


def test_loss_location_clamped_at_floor():
    val = loc_loss_single([1e-6, 1e-6], [3.0, 4.0])
    assert val == pytest.approx(-np.log(1e-6), rel=1e-3)


def test_loss_location_zero_iff_exact():
    v = loc_loss_single([2.0, 5.0001], [2.0, 5.0])
    assert v > 0


def test_loss_location_no_positives_warns_and_zero(caplog):
    geom = build_geometry(8, 1)
    targets = one_sample_targets(geom, (3.0, 3.4))  # no interior coords
    assert targets.n_pos[0] == 0
    dist = ad.constant(np.ones((1, geom.total, 2), dtype=np.float32))
    with caplog.at_level(logging.WARNING):
        val = gr.loss_location(dist, targets).item()
    assert val == 0.0
    assert "no positive" in caplog.text


def test_focal_loss_hand_values():
    probs = ad.constant(np.asarray([[0.5, 0.5]], dtype=np.float32))
    labels = np.asarray([[1.0, 0.0]], dtype=np.float32)
    per_loc = gr.focal_term(probs, labels).data[0]
    assert per_loc[0] == pytest.approx(0.25 * 0.25 * np.log(2.0), abs=1e-4)  # 0.0433
    assert per_loc[1] == pytest.approx(0.75 * 0.25 * np.log(2.0), abs=1e-4)  # 0.1300


def test_focal_loss_perfect_positive_vanishes():
    probs = ad.constant(np.asarray([[1.0]], dtype=np.float32))
    labels = np.asarray([[1.0]], dtype=np.float32)
    assert gr.focal_term(probs, labels).data[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=(1, 20)).astype(np.float32)
    y = (rng.uniform(size=(1, 20)) > 0.5).astype(np.float32)
    fl = gr.focal_term(ad.constant(p), y, alpha=0.5, gamma=0.0).data
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    np.testing.assert_allclose(fl, 0.5 * bce, rtol=1e-4, atol=1e-6)


def test_focal_loss_nonnegative():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.001, 0.999, size=(2, 30)).astype(np.float32)
    y = (rng.uniform(size=(2, 30)) > 0.5).astype(np.float32)
    assert (gr.focal_term(ad.constant(p), y).data >= 0).all()


def test_loss_matching_normalizes_by_npos():
    geom = build_geometry(8, 1)
    targets = one_sample_targets(geom, (2.0, 6.0))  # positives at 2.5..5.5 -> 4
    assert targets.n_pos[0] == 4
    probs = ad.constant(np.full((1, geom.total), 0.5, dtype=np.float32))
    val = gr.loss_matching(probs, targets).item()
    per_pos = 0.25 * 0.25 * np.log(2.0)
    per_neg = 0.75 * 0.25 * np.log(2.0)
    expected = (4 * per_pos + 4 * per_neg) / 4
    assert val == pytest.approx(expected, rel=1e-4)


def test_smooth_l1_hand_values():
    x = ad.constant(np.asarray([0.0, 0.5, 2.0, -2.0], dtype=np.float32))
    np.testing.assert_allclose(gr.smooth_l1(x).data, [0.0, 0.125, 1.5, 1.5], rtol=1e-6)


def test_loss_iou_values_and_flags():
    q = ad.constant(np.asarray([[0.75]], dtype=np.float32))
    assert gr.loss_iou(q, np.asarray([[0.25]])).item() == pytest.approx(0.125, rel=1e-5)
    q2 = ad.constant(np.asarray([[0.5, 0.5]], dtype=np.float32))
    u2 = np.asarray([[0.5, 0.5]])
    assert gr.loss_iou(q2, u2).item() == pytest.approx(0.0, abs=1e-7)
    # positives-only restriction
    u3 = np.asarray([[0.0, 0.5]])
    mask = np.asarray([[False, True]])
    assert gr.loss_iou(q2, u3, positives=mask).item() == pytest.approx(0.0, abs=1e-7)


def test_loss_centerness_hand_values():
    geom = build_geometry(8, 1)
    targets = one_sample_targets(geom, (0.0, 7.0))  # coords 0.5..6.5 positive
    sel = targets.selected[0]
    c = gr.centerness_target(targets.distances[0][sel])
    probs = np.full((1, geom.total), 0.5, dtype=np.float32)
    # prediction 0.5 everywhere: BCE per positive = -(c ln.5 + (1-c) ln.5) = ln 2
    val = gr.loss_centerness(ad.constant(probs), targets).item()
    assert val == pytest.approx(np.log(2.0), rel=1e-4)
    # exact prediction of target 1.0 -> 0
    mid = np.where(geom.flat_coords == 3.5)[0][0]
    one_sel = np.zeros(geom.total, dtype=bool)
    one_sel[mid] = True
    t1 = one_sample_targets(geom, (0.0, 7.0), selected=one_sel)
    p1 = np.full((1, geom.total), 0.5, dtype=np.float32)
    p1[0, mid] = 1.0
    assert gr.loss_centerness(ad.constant(p1), t1).item() == pytest.approx(0.0, abs=1e-4)


def test_loss_centerness_bce_target_half():
    geom = build_geometry(8, 1)
    mid = np.where(geom.flat_coords == 2.5)[0][0]
    sel = np.zeros(geom.total, dtype=bool)
    sel[mid] = True
    # gt chosen so d = (1, 4): centerness = 0.5
    targets = one_sample_targets(geom, (1.5, 6.5), selected=sel)
    probs = np.full((1, geom.total), 0.5, dtype=np.float32)
    assert gr.loss_centerness(ad.constant(probs), targets).item() == pytest.approx(np.log(2.0), rel=1e-4)


def test_iou_quality_targets_realized_iou():
    geom = build_geometry(8, 1)
    dist = np.ones((1, geom.total, 2), dtype=np.float32)
    u = gr.iou_quality_targets(dist, geom, np.asarray([[2.0, 6.0]]))
    idx = np.where(geom.flat_coords == 3.5)[0][0]
    # box (2.5, 4.5) vs gt (2, 6): I = 2, U = 2 + 4 - 2 = 4 -> 0.5
    assert u[0, idx] == pytest.approx(0.5, rel=1e-6)
    assert u.shape == (1, geom.total)
    assert ((u >= 0) & (u <= 1)).all()


# -- gradients through losses -----------------------------------------------------------


def test_loss_gradients_finite_difference():
    geom = build_geometry(8, 2)
    targets_one = assign_targets(geom, (1.0, 6.0))
    targets = BatchTargets(
        match_labels=targets_one.positive[None, :].astype(np.float32),
        selected=targets_one.positive[None, :],
        distances=targets_one.distances[None, :, :],
        n_pos=np.asarray([targets_one.n_pos]),
        gt_boxes=np.asarray([[1.0, 6.0]]),
    )
    rng = np.random.default_rng(8)

    def f_loc(d_raw):
        d = ad.exp(d_raw)  # keep distances positive like the real head
        return gr.loss_location(d, targets)

    x0 = ad.Tensor(rng.normal(size=(1, geom.total, 2)) * 0.3, dtype=np.float64)
    assert ad.finite_difference_check(f_loc, x0) < 1e-3

    def f_match(logits):
        return gr.loss_matching(ad.sigmoid(logits), targets)

    x1 = ad.Tensor(rng.normal(size=(1, geom.total)), dtype=np.float64)
    assert ad.finite_difference_check(f_match, x1) < 1e-3

    u = rng.uniform(0, 1, size=(1, geom.total))

    def f_iou(logits):
        return gr.loss_iou(ad.sigmoid(logits), u)

    x2 = ad.Tensor(rng.normal(size=(1, geom.total)), dtype=np.float64)
    assert ad.finite_difference_check(f_iou, x2) < 1e-3

    def f_center(logits):
        return gr.loss_centerness(ad.sigmoid(logits), targets)

    x3 = ad.Tensor(rng.normal(size=(1, geom.total)), dtype=np.float64)
    assert ad.finite_difference_check(f_center, x3) < 1e-3
