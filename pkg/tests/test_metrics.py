import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from webdet.boxes import check_box, iou, iou_matrix
from webdet.datagen import GenConfig, generate
from webdet.errors import InputError
from webdet.metrics import (Detection, average_precision, corloc, evaluate,
                            export_embedding, nms, pca_2d)
from webdet.model import init_params


def test_iou_identical_boxes():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0


def test_iou_hand_geometry():
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_disjoint():
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0


@given(st.lists(st.floats(0, 90, allow_nan=False), min_size=4, max_size=4),
       st.lists(st.floats(0, 90, allow_nan=False), min_size=4, max_size=4))
@settings(max_examples=100, deadline=None)
def test_iou_symmetric_and_bounded(a4, b4):
    a = [min(a4[0], a4[2]), min(a4[1], a4[3]), max(a4[0], a4[2]) + 1, max(a4[1], a4[3]) + 1]
    b = [min(b4[0], b4[2]), min(b4[1], b4[3]), max(b4[0], b4[2]) + 1, max(b4[1], b4[3]) + 1]
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_check_box_rejects_degenerate():
    with pytest.raises(InputError):
        check_box([5, 0, 1, 10])


def _det(bag, cls, box, score):
    return Detection(bag, cls, np.asarray(box, dtype=float), score)


def test_nms_single_detection():
    d = _det("a", 0, [0, 0, 10, 10], 0.7)
    assert nms([d], 0.3) == [d]


def test_nms_identical_boxes_keeps_higher_score():
    d1 = _det("a", 0, [0, 0, 10, 10], 0.9)
    d2 = _det("a", 0, [0, 0, 10, 10], 0.8)
    kept = nms([d2, d1], 0.3)
    assert kept == [d1]


def _brute_force_nms(dets, thresh):
    kept = []
    for d in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        cand = dets[d]
        if all(not (k.cls == cand.cls and iou(k.box, cand.box) >= thresh) for k in kept):
            kept.append(cand)
    return kept


def test_nms_matches_brute_force(rng):
    for _ in range(50):
        dets = []
        for i in range(20):
            x, y = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(5, 30, size=2)
            dets.append(_det("a", int(rng.integers(3)), [x, y, x + w, y + h],
                             float(rng.uniform())))
        got = nms(dets, 0.4)
        want = _brute_force_nms(dets, 0.4)
        assert {id(d) for d in got} == {id(d) for d in want}


def test_nms_output_subset_without_same_class_overlap(rng):
    dets = [_det("a", int(rng.integers(2)),
                 [x, y, x + w, y + h], float(rng.uniform()))
            for x, y, w, h in rng.uniform(3, 25, size=(30, 4))]
    kept = nms(dets, 0.5)
    assert all(any(d is e for e in dets) for d in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.cls == b.cls:
                assert iou(a.box, b.box) < 0.5


def test_average_precision_single_correct():
    gts = [("a", np.array([0., 0., 10., 10.]))]
    dets = [_det("a", 0, [1, 1, 10, 10], 0.9)]
    assert average_precision(dets, gts) == pytest.approx(1.0, abs=1e-12)


def test_average_precision_hand_computed_half():
    # 2 gts; one correct detection at 0.9, one miss at 0.8:
    # recall caps at 0.5, precision 1.0 then 0.5, all-points AP = 0.5 exactly
    gts = [("a", np.array([0., 0., 10., 10.])), ("b", np.array([0., 0., 10., 10.]))]
    dets = [_det("a", 0, [0, 0, 10, 10], 0.9),
            _det("a", 0, [50, 50, 60, 60], 0.8)]
    assert average_precision(dets, gts) == 0.5


def test_average_precision_duplicate_counts_one_tp_one_fp():
    # duplicate on gt_a is an FP ranked between the two TPs:
    # PR points (0.5, 1), (0.5, 0.5), (1.0, 2/3) -> AP = 0.5*1 + 0.5*(2/3)
    gts = [("a", np.array([0., 0., 10., 10.])), ("b", np.array([0., 0., 10., 10.]))]
    dets = [_det("a", 0, [0, 0, 10, 10], 0.9),
            _det("a", 0, [1, 0, 11, 10], 0.85),
            _det("b", 0, [0, 0, 10, 10], 0.8)]
    assert average_precision(dets, gts) == pytest.approx(0.5 + 0.5 * (2 / 3), abs=1e-12)


def test_average_precision_no_gts_is_excluded():
    assert average_precision([_det("a", 0, [0, 0, 1, 1], 0.5)], []) is None


def test_average_precision_invariant_to_monotone_score_transform(rng):
    gts = [("a", np.array([0., 0., 10., 10.])), ("a", np.array([30., 30., 45., 45.]))]
    dets = []
    for i in range(12):
        x, y = rng.uniform(0, 40, size=2)
        dets.append(_det("a", 0, [x, y, x + 12, y + 12], float(rng.uniform(0.01, 0.99))))
    base = average_precision(dets, gts)
    squashed = [Detection(d.bag_id, d.cls, d.box, float(np.tanh(3 * d.score) + 7)) for d in dets]
    assert average_precision(squashed, gts) == pytest.approx(base, abs=1e-12)


def test_corloc_oracle_and_disjoint():
    gts = {"a": [(0, np.array([0., 0., 10., 10.]))],
           "b": [(0, np.array([5., 5., 25., 25.])), (1, np.array([60., 60., 80., 80.]))]}
    perfect = {("a", 0): np.array([0., 0., 10., 10.]),
               ("b", 0): np.array([5., 5., 25., 25.]),
               ("b", 1): np.array([60., 60., 80., 80.])}
    assert corloc(perfect, gts) == 1.0
    off = {k: v + 500.0 for k, v in perfect.items()}
    assert corloc(off, gts) == 0.0


def test_corloc_mixed_matches_pair_counting(rng):
    gts = {}
    top = {}
    expected_hits = 0
    expected_pairs = 0
    for b in range(10):
        bag = f"bag{b}"
        cls = int(rng.integers(3))
        box = np.array([10., 10., 30., 30.])
        gts[bag] = [(cls, box)]
        expected_pairs += 1
        if rng.uniform() < 0.5:
            top[(bag, cls)] = box + rng.uniform(-1, 1, size=4)
            if iou(top[(bag, cls)], box) >= 0.5:
                expected_hits += 1
        else:
            top[(bag, cls)] = box + 100.0
    assert corloc(top, gts) == pytest.approx(expected_hits / expected_pairs, abs=1e-12)


def test_pca_identical_vectors_degenerate(tmp_path):
    feats = np.tile([1.0, 2.0, 3.0], (5, 1))
    coords, degenerate = pca_2d(feats)
    assert degenerate
    np.testing.assert_array_equal(coords, np.zeros((5, 2)))
    path = tmp_path / "emb.csv"
    export_embedding(feats, [("0", "web")] * 5, path)
    text = path.read_text()
    assert text.startswith("# warning")


def test_pca_rank_one_data(rng):
    direction = rng.standard_normal(6)
    feats = np.outer(rng.standard_normal(40), direction)
    coords, degenerate = pca_2d(feats)
    assert not degenerate
    np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-9)


def test_pca_component_variance_order(rng):
    feats = rng.standard_normal((60, 5)) * np.array([3.0, 1.0, 0.5, 0.2, 0.1])
    coords, _ = pca_2d(feats)
    assert coords[:, 0].var() >= coords[:, 1].var()


def test_export_embedding_header_and_rows(tmp_path, rng):
    feats = rng.standard_normal((8, 4))
    labels = [(str(i % 2), "web" if i < 4 else "target") for i in range(8)]
    path = tmp_path / "emb.csv"
    export_embedding(feats, labels, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pc1", "pc2", "class", "domain"]
    assert len(rows) == 9
    assert {r[3] for r in rows[1:]} == {"web", "target"}


def _oracle_scorer(bag, num_classes):
    s = np.zeros((bag.m, num_classes))
    for c, box in bag.gt_boxes:
        s[:, c] = np.maximum(s[:, c], iou_matrix(bag.boxes, box.reshape(1, 4))[:, 0])
    return s


def test_evaluate_oracle_scorer_is_perfect():
    cfg = GenConfig(seed=11, n_web=2, n_target=40)
    _, target = generate(cfg)
    params = init_params(cfg.num_classes, cfg.feat_dim, 0, 0)
    report = evaluate(params, target, scorer=lambda b: _oracle_scorer(b, cfg.num_classes))
    assert report.map == 1.0
    assert report.corloc == 1.0


def test_evaluate_random_scores_below_oracle():
    cfg = GenConfig(seed=12, n_web=2, n_target=30)
    _, target = generate(cfg)
    params = init_params(cfg.num_classes, cfg.feat_dim, 0, 0)
    for seed in range(3):
        gen = np.random.default_rng(seed)
        report = evaluate(params, target,
                          scorer=lambda b: gen.uniform(size=(b.m, cfg.num_classes)))
        assert report.map < 1.0


def test_evaluate_wsd_and_st_paths(tiny_dataset):
    cfg, _, target = tiny_dataset
    for k in (0, 1):
        params = init_params(cfg.num_classes, cfg.feat_dim, k, 0)
        report = evaluate(params, target)
        assert 0.0 <= report.map <= 1.0
        assert 0.0 <= report.corloc <= 1.0
        assert report.metadata["score_source"] == ("wsd" if k == 0 else "st1")


def test_evaluate_requires_ground_truth(tiny_dataset):
    cfg, web, _ = tiny_dataset
    params = init_params(cfg.num_classes, cfg.feat_dim, 0, 0)
    with pytest.raises(InputError):
        evaluate(params, [], nms_thresh=0.3)


def test_evaluate_threaded_matches_sequential(tiny_dataset):
    cfg, _, target = tiny_dataset
    params = init_params(cfg.num_classes, cfg.feat_dim, 1, 3)
    r1 = evaluate(params, target, threads=1)
    r4 = evaluate(params, target, threads=4)
    assert r1.map == r4.map and r1.corloc == r4.corloc
