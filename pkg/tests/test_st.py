import numpy as np
import pytest

from webdet.autodiff import check_gradients, constant, take_rows
from webdet.errors import ConfigError, InputError
from webdet.model import feature_forward, init_params
from webdet.st import (BACKGROUND, PseudoGroundTruth, foreground_scores,
                       make_pseudo_gt, st_forward, st_loss)
from webdet.wsd import forward_wsd


def _boxes(n, rng=None, spread=80.0):
    rng = rng or np.random.default_rng(0)
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, spread, size=2)
        w, h = rng.uniform(8, 25, size=2)
        out.append([x, y, x + w, y + h])
    return np.asarray(out)


def test_pseudo_gt_argmax_by_inspection():
    det = np.array([[0.6, 0.1], [0.2, 0.3], [0.05, 0.05]])
    boxes = _boxes(3)
    pgt = make_pseudo_gt(det, boxes, thresh=0.25, rng=np.random.default_rng(0))
    assert [(c, i) for c, i, _ in pgt.boxes] == [(0, 0), (1, 1)]


def test_pseudo_gt_threshold_filters_everything():
    det = np.array([[0.6, 0.1], [0.2, 0.3], [0.05, 0.05]])
    pgt = make_pseudo_gt(det, _boxes(3), thresh=0.7, rng=np.random.default_rng(0))
    assert pgt.boxes == [] and pgt.empty


def test_pseudo_gt_matches_argmax_oracle(rng):
    for _ in range(50):
        m, c = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        det = rng.uniform(size=(m, c))
        thresh = float(rng.uniform(0.05, 0.95))
        pgt = make_pseudo_gt(det, _boxes(m, rng), thresh, rng=np.random.default_rng(0))
        expected = []
        for cls in range(c):
            best = 0
            for i in range(m):
                if det[i, cls] > det[best, cls]:
                    best = i
            if det[best, cls] >= thresh:
                expected.append((cls, best))
        assert [(cls, i) for cls, i, _ in pgt.boxes] == expected


def test_pseudo_gt_is_pure_function_of_inputs(rng):
    det = rng.uniform(size=(8, 3))
    boxes = _boxes(8, rng)
    a = make_pseudo_gt(det, boxes, 0.1, rng=np.random.default_rng(9))
    b = make_pseudo_gt(det, boxes, 0.1, rng=np.random.default_rng(9))
    assert a.boxes == b.boxes if not a.boxes else all(
        ca == cb and ia == ib and np.array_equal(xa, xb)
        for (ca, ia, xa), (cb, ib, xb) in zip(a.boxes, b.boxes))
    assert a.sampled == b.sampled


def test_pseudo_gt_sampling_rules(rng):
    from webdet.boxes import iou
    for trial in range(200):
        m = int(rng.integers(2, 14))
        det = rng.uniform(size=(m, 3))
        boxes = _boxes(m, rng)
        pgt = make_pseudo_gt(det, boxes, 0.3, pos_iou=0.5, bg_ratio=3,
                             rng=np.random.default_rng(trial), max_samples=12)
        assert len(pgt.sampled) <= 12
        pseudo = {i: c for c, i, _ in pgt.boxes}
        n_pos = sum(1 for _, lab in pgt.sampled if lab != BACKGROUND)
        n_bg = sum(1 for _, lab in pgt.sampled if lab == BACKGROUND)
        assert n_bg <= 3 * n_pos
        for idx, lab in pgt.sampled:
            best = max((iou(boxes[idx], b) for _, _, b in pgt.boxes), default=0.0)
            if lab == BACKGROUND:
                assert best < 0.5
            else:
                assert best >= 0.5
                assert 1 <= lab <= 3
        # at most one pseudo box per class
        classes = [c for c, _, _ in pgt.boxes]
        assert len(classes) == len(set(classes))


def test_st_loss_one_hot_is_zero():
    p = constant([[0.0, 1.0, 0.0]])
    assert st_loss(p, [1]).item() <= 1e-6


def test_st_loss_uniform_analytic():
    p = constant([[1 / 3, 1 / 3, 1 / 3]])
    assert st_loss(p, [2]).item() == pytest.approx(np.log(3.0), abs=1e-12)


def test_st_loss_matches_loop_oracle(rng):
    for _ in range(20):
        n, c = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        raw = rng.uniform(0.05, 1.0, size=(n, c + 1))
        p = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, c + 1, size=n)
        expected = -sum(np.log(p[i, labels[i]]) for i in range(n))
        assert st_loss(constant(p), labels).item() == pytest.approx(expected, abs=1e-12)


def test_st_loss_label_out_of_range():
    with pytest.raises(InputError):
        st_loss(constant([[0.5, 0.5]]), [2])
    with pytest.raises(InputError):
        st_loss(constant([[0.5, 0.5]]), [-1])


def test_chain_structure_three_heads_share_feature_learner():
    params = init_params(4, 6, 3, seed=0)
    st_blocks = [b for b in params.blocks if b.startswith("st")]
    assert st_blocks == ["st1", "st2", "st3"]
    # registry partition: every tensor appears in exactly one block
    seen = [n for names in params.blocks.values() for n in names]
    assert sorted(seen) == sorted(params.tensors)
    assert len(seen) == len(set(seen))
    with pytest.raises(ConfigError):
        init_params(4, 6, 4, seed=0)


def test_stream_out_of_range_rejected(rng):
    params = init_params(3, 6, 1, seed=0)
    feats = feature_forward(rng.standard_normal((4, 6)), params)
    with pytest.raises(ConfigError):
        st_forward(feats, params, 2)


def test_identical_scores_give_identical_pseudo_gt(rng):
    """Chained supervision collapses to stream 1's when the upstream head
    produces the same scores the detection path did."""
    det = rng.uniform(size=(7, 4))
    boxes = _boxes(7, rng)
    first = make_pseudo_gt(det, boxes, 0.2, rng=np.random.default_rng(4))
    chained = make_pseudo_gt(det, boxes, 0.2, rng=np.random.default_rng(4))
    assert [(c, i) for c, i, _ in first.boxes] == [(c, i) for c, i, _ in chained.boxes]
    assert first.sampled == chained.sampled


def test_foreground_scores_drop_background_and_renormalize(rng):
    raw = rng.uniform(0.01, 1.0, size=(5, 4))
    p = raw / raw.sum(axis=1, keepdims=True)
    fg = foreground_scores(p)
    assert fg.shape == (5, 3)
    np.testing.assert_allclose(fg.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fg, p[:, 1:] / p[:, 1:].sum(axis=1, keepdims=True), atol=1e-15)


def test_no_gradient_into_score_path_but_into_features(rng):
    params = init_params(3, 6, 1, seed=2)
    x = rng.standard_normal((6, 6))
    bundle = forward_wsd(x, params)
    pgt = make_pseudo_gt(bundle.det.data, _boxes(6, rng), 0.01,
                         rng=np.random.default_rng(0))
    assert not pgt.empty
    params.zero_grad()
    p_all = st_forward(bundle.feats, params, 1)
    loss = st_loss(take_rows(p_all, [i for i, _ in pgt.sampled]),
                   [lab for _, lab in pgt.sampled])
    loss.backward()
    # labels are constants: the detection heads receive nothing
    for name in params.blocks["wsd"]:
        np.testing.assert_array_equal(params.tensors[name].grad, 0.0)
    # the shared feature learner does receive gradient
    assert any(np.abs(params.tensors[n].grad).sum() > 0 for n in params.blocks["feature"])


def test_st_gradients_pass_finite_differences(rng):
    params = init_params(3, 6, 1, seed=3)
    x = rng.standard_normal((5, 6))
    bundle = forward_wsd(x, params)
    pgt = make_pseudo_gt(bundle.det.data, _boxes(5, rng), 0.01,
                         rng=np.random.default_rng(1))
    idx = [i for i, _ in pgt.sampled]
    labels = [lab for _, lab in pgt.sampled]

    def loss_fn():
        feats = feature_forward(x, params)
        return st_loss(take_rows(st_forward(feats, params, 1), idx), labels)

    checked = {n: params.tensors[n]
               for n in params.blocks["feature"] + params.blocks["st1"]}
    report = check_gradients(loss_fn, checked, eps=1e-5)
    assert report.max_rel_error < 1e-4, str(report)
