"""Synthetic two-domain proposal-bag generator.

Web bags are clean: one object, few proposals, mostly on the object.
Target bags are cluttered: several objects of different classes plus
out-of-vocabulary distractor objects, many proposals, mostly background.
Class features come from class-specific unit-covariance Gaussians; web
features are additionally pushed through a fixed invertible affine map
A x + eps so the two domains are systematically displaced. Everything is
deterministic given the seed, with per-bag sub-seeds derived from
(seed, domain, bag index) so generation order never matters.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bags import TARGET, WEB, ProposalBag
from .boxes import CANVAS, iou, iou_matrix
from .errors import ConfigError

# Internal layout constants; acceptance trends are calibrated against these.
MEAN_SCALE = 1.0            # class means drawn from N(0, MEAN_SCALE^2 I)
DISTRACTOR_SCALE = 1.0      # distractor means relative to MEAN_SCALE
DISTRACTOR_POOL = 8         # out-of-vocabulary object classes available per dataset
COVER_IOU = 0.8             # planted covering proposals verify at least this IoU
COVERS_PER_TARGET_BOX = 2
MIN_SIDE, MAX_SIDE = 15.0, 40.0
SEPARATION_DILATE = 0.4     # planted boxes stay disjoint after growing by this factor
FG_MATCH_IOU = 0.5          # proposals at or above this IoU adopt the object's features
STUDIO_BG = True            # web backgrounds form a tight backdrop cluster, like studio shots
STUDIO_BG_SPREAD = 0.3

_WEB_TAG, _TARGET_TAG, _SHARED_TAG = 0, 1, 2


@dataclass
class GenConfig:
    """Knobs for one synthetic dataset."""

    num_classes: int = 5
    feat_dim: int = 16
    n_web: int = 200
    n_target: int = 100
    m_web: int = 8
    m_target: int = 30
    clutter: float = 2.0
    shift_scale: float = 0.6
    shift_noise: float = 0.5
    fg_fraction: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_classes", "feat_dim", "n_web", "n_target", "m_web", "m_target"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clutter < 0:
            raise ConfigError(f"clutter must be >= 0, got {self.clutter}")
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ConfigError(f"fg_fraction must be in (0, 1], got {self.fg_fraction}")
        if self.shift_scale < 0 or self.shift_noise < 0:
            raise ConfigError("shift_scale and shift_noise must be >= 0")


@dataclass
class _World:
    """Dataset-level draws shared by every bag."""

    class_means: np.ndarray       # (C, d)
    distractor_means: np.ndarray  # (DISTRACTOR_POOL, d)
    studio_mean: np.ndarray       # (d,) web backdrop cluster center
    shift_map: np.ndarray         # (d, d) the invertible A
    shift_offset: np.ndarray      # (d,) the eps


def _make_world(cfg: GenConfig) -> _World:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHARED_TAG]))
    d = cfg.feat_dim
    class_means = MEAN_SCALE * rng.standard_normal((cfg.num_classes, d))
    distractor_means = DISTRACTOR_SCALE * MEAN_SCALE * rng.standard_normal((DISTRACTOR_POOL, d))
    studio_mean = MEAN_SCALE * rng.standard_normal(d)
    shift_map = np.eye(d)
    if cfg.shift_scale > 0:
        for _ in range(16):
            g = rng.standard_normal((d, d))
            g /= np.linalg.svd(g, compute_uv=False)[0]
            candidate = np.eye(d) + cfg.shift_scale * g
            if abs(np.linalg.det(candidate)) > 1e-6:
                shift_map = candidate
                break
        else:
            raise ConfigError(f"could not draw an invertible shift map at shift_scale={cfg.shift_scale}")
    shift_offset = cfg.shift_noise * rng.standard_normal(d)
    return _World(class_means, distractor_means, studio_mean, shift_map, shift_offset)


def _random_box(rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(MIN_SIDE, MAX_SIDE)
    h = rng.uniform(MIN_SIDE, MAX_SIDE)
    x1 = rng.uniform(0.0, CANVAS - w)
    y1 = rng.uniform(0.0, CANVAS - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _dilated(box: np.ndarray, factor: float) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    dx, dy = 0.5 * factor * w, 0.5 * factor * h
    return np.array([box[0] - dx, box[1] - dy, box[2] + dx, box[3] + dy])


def _plant_separated_boxes(rng: np.random.Generator, count: int, tries: int = 50) -> list[np.ndarray]:
    """Random object boxes whose dilated extents stay disjoint; drops the
    unplaceable tail rather than looping forever."""
    placed: list[np.ndarray] = []
    for _ in range(count):
        for _ in range(tries):
            box = _random_box(rng)
            grown = _dilated(box, SEPARATION_DILATE)
            if all(iou(grown, _dilated(p, SEPARATION_DILATE)) == 0.0 for p in placed):
                placed.append(box)
                break
    return placed


def _covering_proposal(rng: np.random.Generator, box: np.ndarray, tries: int = 20) -> np.ndarray:
    """A jittered copy of ``box`` with verified IoU >= COVER_IOU (exact copy as fallback)."""
    w, h = box[2] - box[0], box[3] - box[1]
    for _ in range(tries):
        jitter = rng.uniform(-0.06, 0.06, size=4) * np.array([w, h, w, h])
        cand = box + jitter
        cand = np.clip(cand, 0.0, CANVAS)
        if cand[0] < cand[2] and cand[1] < cand[3] and iou(cand, box) >= COVER_IOU:
            return cand
    return box.copy()


def _features_for(rng: np.random.Generator, boxes: np.ndarray,
                  planted: list[np.ndarray], planted_means: list[np.ndarray],
                  d: int, bg_mean: np.ndarray | None = None,
                  bg_spread: float = 1.0) -> np.ndarray:
    """Per-proposal features: the max-IoU planted object's Gaussian when that
    IoU reaches FG_MATCH_IOU, otherwise the background Gaussian."""
    noise = rng.standard_normal((boxes.shape[0], d))
    feats = bg_spread * noise
    if bg_mean is not None:
        feats = feats + bg_mean
    if planted:
        ious = iou_matrix(boxes, np.stack(planted))
        owner = ious.argmax(axis=1)
        fg = ious.max(axis=1) >= FG_MATCH_IOU
        for i in np.nonzero(fg)[0]:
            feats[i] = noise[i] + planted_means[owner[i]]
    return feats


def _web_bag(cfg: GenConfig, world: _World, index: int) -> ProposalBag:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _WEB_TAG, index]))
    cls = int(rng.integers(cfg.num_classes))
    obj = _random_box(rng)
    n_fg = max(1, round(cfg.fg_fraction * cfg.m_web))
    n_fg = min(n_fg, cfg.m_web)
    boxes = [_covering_proposal(rng, obj) for _ in range(n_fg)]
    boxes += [_random_box(rng) for _ in range(cfg.m_web - n_fg)]
    boxes = np.stack(boxes)
    bg_mean = world.studio_mean if STUDIO_BG else None
    bg_spread = STUDIO_BG_SPREAD if STUDIO_BG else 1.0
    feats = _features_for(rng, boxes, [obj], [world.class_means[cls]], cfg.feat_dim,
                          bg_mean=bg_mean, bg_spread=bg_spread)
    feats = feats @ world.shift_map.T + world.shift_offset
    label = np.zeros(cfg.num_classes)
    label[cls] = 1.0
    return ProposalBag(id=f"web-{index:05d}", domain=WEB, boxes=boxes, feats=feats,
                       weak_label=label)


def _target_bag(cfg: GenConfig, world: _World, index: int) -> ProposalBag:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TARGET_TAG, index]))
    n_true = int(rng.integers(1, min(3, cfg.num_classes, cfg.m_target) + 1))
    true_classes = rng.choice(cfg.num_classes, size=n_true, replace=False)
    n_distract = int(rng.poisson(cfg.clutter)) if cfg.clutter > 0 else 0

    planted = _plant_separated_boxes(rng, n_true + n_distract)
    # The first box always places on an empty canvas, so >= 1 true object survives.
    n_true_placed = min(n_true, len(planted))
    gt_boxes = [(int(true_classes[i]), planted[i].copy()) for i in range(n_true_placed)]
    means = [world.class_means[c] for c, _ in gt_boxes]
    means += [world.distractor_means[int(rng.integers(DISTRACTOR_POOL))]
              for _ in range(len(planted) - n_true_placed)]

    # One verified cover per true box is mandatory (coverage invariant); further
    # covers for distractors and second rounds only while the budget lasts.
    boxes = [_covering_proposal(rng, planted[i]) for i in range(n_true_placed)]
    optional = [planted[i] for i in range(n_true_placed, len(planted))]
    for _ in range(COVERS_PER_TARGET_BOX - 1):
        optional.extend(planted)
    for box in optional:
        if len(boxes) >= cfg.m_target:
            break
        boxes.append(_covering_proposal(rng, box))
    while len(boxes) < cfg.m_target:
        boxes.append(_random_box(rng))
    boxes = np.stack(boxes)
    feats = _features_for(rng, boxes, planted, means, cfg.feat_dim)
    return ProposalBag(id=f"target-{index:05d}", domain=TARGET, boxes=boxes, feats=feats,
                       gt_boxes=gt_boxes)


def generate(cfg: GenConfig, threads: int = 1) -> tuple[list[ProposalBag], list[ProposalBag]]:
    """Generate (web_bags, target_bags) per the config; deterministic per seed.

    ``threads`` > 1 parallelizes per-bag work; output order is by bag index
    regardless of schedule because every bag derives its own sub-seed.
    """
    cfg.validate()
    world = _make_world(cfg)
    web_jobs = [(cfg, world, i) for i in range(cfg.n_web)]
    target_jobs = [(cfg, world, i) for i in range(cfg.n_target)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            web = list(pool.map(lambda args: _web_bag(*args), web_jobs))
            target = list(pool.map(lambda args: _target_bag(*args), target_jobs))
    else:
        web = [_web_bag(*args) for args in web_jobs]
        target = [_target_bag(*args) for args in target_jobs]
    return web, target
