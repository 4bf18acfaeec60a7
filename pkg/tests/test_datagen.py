import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from webdet.bags import validate_bag
from webdet.boxes import iou_matrix
from webdet.configio import load_config, save_config
from webdet.datagen import GenConfig, generate
from webdet.errors import ConfigError


def test_counts_and_labels_by_construction():
    cfg = GenConfig(num_classes=5, feat_dim=16, n_web=200, n_target=100, seed=3)
    web, target = generate(cfg)
    assert len(web) == 200 and len(target) == 100
    for bag in web:
        assert bag.weak_label.sum() >= 1
        assert bag.m == cfg.m_web and bag.d == 16
    for bag in target:
        assert len(bag.gt_boxes) >= 1
        assert bag.m == cfg.m_target


def test_same_seed_gives_byte_identical_files(tmp_path):
    from webdet.bags import save_bags
    cfg = GenConfig(n_web=10, n_target=6, seed=77)
    for name in ("one", "two"):
        web, target = generate(GenConfig(n_web=10, n_target=6, seed=77))
        save_bags(tmp_path / f"{name}.web", web)
        save_bags(tmp_path / f"{name}.target", target)
    assert (tmp_path / "one.web").read_bytes() == (tmp_path / "two.web").read_bytes()
    assert (tmp_path / "one.target").read_bytes() == (tmp_path / "two.target").read_bytes()
    assert cfg.seed == 77


def test_threaded_generation_matches_sequential():
    cfg = GenConfig(n_web=12, n_target=8, seed=5)
    w1, t1 = generate(cfg, threads=1)
    w4, t4 = generate(cfg, threads=4)
    assert w1 == w4 and t1 == t4


def test_zero_shift_class_means_agree_within_3_se():
    cfg = GenConfig(num_classes=3, feat_dim=8, n_web=260, n_target=260,
                    m_web=8, m_target=12, clutter=0.0, fg_fraction=1.0,
                    shift_scale=0.0, shift_noise=0.0, seed=21)
    web, target = generate(cfg)
    web_cloud = {c: [] for c in range(3)}
    tgt_cloud = {c: [] for c in range(3)}
    for bag in web:
        web_cloud[int(bag.weak_label.argmax())].append(bag.feats)
    for bag in target:
        gt = np.stack([b for _, b in bag.gt_boxes])
        ious = iou_matrix(bag.boxes, gt)
        fg = ious.max(axis=1) >= 0.5
        owner = ious.argmax(axis=1)
        for i in np.nonzero(fg)[0]:
            tgt_cloud[bag.gt_boxes[owner[i]][0]].append(bag.feats[i])
    for c in range(3):
        w = np.vstack(web_cloud[c])
        t = np.vstack(tgt_cloud[c])
        assert len(w) >= 1000 or len(w) + len(t) >= 1000
        se = np.sqrt(1.0 / len(w) + 1.0 / len(t))  # unit covariance per coordinate
        assert (np.abs(w.mean(axis=0) - t.mean(axis=0)) <= 3.0 * se).mean() >= 0.95


def test_every_gt_box_is_covered():
    for seed in range(5):
        _, target = generate(GenConfig(seed=seed, n_web=2, n_target=40))
        for bag in target:
            for _, box in bag.gt_boxes:
                cover = iou_matrix(bag.boxes, box.reshape(1, 4))[:, 0].max()
                assert cover >= 0.5


def test_bag_invariants_over_many_random_configs():
    gen = np.random.default_rng(0)
    for trial in range(1000):
        cfg = GenConfig(num_classes=int(gen.integers(1, 5)),
                        feat_dim=int(gen.integers(2, 8)),
                        n_web=1, n_target=1,
                        m_web=int(gen.integers(1, 8)),
                        m_target=int(gen.integers(1, 14)),
                        clutter=float(gen.uniform(0, 4)),
                        shift_scale=float(gen.uniform(0, 0.95)),
                        shift_noise=float(gen.uniform(0, 2)),
                        fg_fraction=float(gen.uniform(0.05, 1.0)),
                        seed=trial)
        web, target = generate(cfg)
        for bag in web + target:
            validate_bag(bag)


def _balanced_probe_accuracy(shift, seed):
    cfg = GenConfig(seed=seed, n_web=120, n_target=120, fg_fraction=1.0, clutter=0.0,
                    shift_scale=shift, shift_noise=0.0)
    web, target = generate(cfg)
    xw = np.vstack([bag.feats for bag in web])
    rows = []
    for bag in target:
        fg = iou_matrix(bag.boxes, np.stack([b for _, b in bag.gt_boxes])).max(axis=1) >= 0.5
        rows.append(bag.feats[fg])
    xt = np.vstack(rows)
    gen = np.random.default_rng(seed)
    n = min(len(xw), len(xt))
    xw = xw[gen.choice(len(xw), n, replace=False)]
    xt = xt[gen.choice(len(xt), n, replace=False)]
    x = np.vstack([xw, xt])
    y = np.array([0] * n + [1] * n)
    idx = gen.permutation(len(y))
    cut = int(0.7 * len(y))
    clf = LogisticRegression(max_iter=1000).fit(x[idx[:cut]], y[idx[:cut]])
    return clf.score(x[idx[cut:]], y[idx[cut:]])


def test_probe_accuracy_nondecreasing_in_shift_scale():
    shifts = (0.0, 0.4, 0.8)
    means = []
    for shift in shifts:
        means.append(np.mean([_balanced_probe_accuracy(shift, seed) for seed in range(3)]))
    assert means[0] <= means[1] + 1e-9 <= means[2] + 2e-9, means


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(n_web=0).validate()
    with pytest.raises(ConfigError):
        GenConfig(fg_fraction=0.0).validate()
    with pytest.raises(ConfigError):
        GenConfig(clutter=-1.0).validate()


def test_genconfig_file_round_trip(tmp_path):
    cfg = GenConfig(num_classes=4, n_web=33, shift_scale=0.25, seed=8)
    path = tmp_path / "gen.cfg"
    save_config(cfg, path)
    loaded = load_config(GenConfig, path)
    assert loaded == cfg


def test_genconfig_file_comments_and_errors(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("# comment line\nnum_classes=4\n\nseed=3  # trailing comment\n")
    cfg = load_config(GenConfig, path)
    assert cfg.num_classes == 4 and cfg.seed == 3
    path.write_text("nonsense_key=1\n")
    with pytest.raises(ConfigError, match="nonsense_key"):
        load_config(GenConfig, path)
    path.write_text("num_classes four\n")
    with pytest.raises(ConfigError):
        load_config(GenConfig, path)
