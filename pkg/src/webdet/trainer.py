"""Training orchestration for the three streams.

Each post-warmup step draws one web bag and one target bag and minimizes

    L = L_wsd(web) + da_weight * L_da(web, target) + st_weight * sum_j L_st_j(target)

where the adversarial term follows the current alternation phase: for
``alt_period`` pairs the discriminator block trains (features detached),
for the next ``alt_period`` pairs the feature learner trains through
gradient reversal on web bags (discriminator frozen, target detached).
Warmup epochs optimize the WSD stream alone. All randomness is derived
from (seed, purpose, epoch), so runs are bit-reproducible and resuming
from an epoch checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, detach, scale, take_rows
from .bags import TARGET, WEB, ProposalBag, check_bags
from .da import (PHASE_DISCRIMINATOR, PHASE_GENERATOR, DomainBatch,
                 discriminate, discriminator_objective, domain_accuracy,
                 generator_objective, uniform_attention)
from .errors import CheckpointError, ConfigError, InputError, TrainingError
from .metrics import evaluate
from .model import (CHECKPOINT_VERSION, ModelParams, feature_forward,
                    init_params, params_from_payload, params_to_payload)
from .st import foreground_scores, make_pseudo_gt, st_forward, st_loss
from .wsd import forward_wsd, wsd_loss

MODE_SIMULTANEOUS = "simultaneous"
MODE_ISOLATED = "isolated"

_SHUFFLE_TAG, _SAMPLE_TAG, _STAGE2_TAG, _PSEUDO_TAG = 21, 22, 23, 24

METRICS_HEADER = ["epoch", "wsd_loss", "da_loss", "st_loss", "disc_acc", "map", "corloc"]


@dataclass
class TrainConfig:
    """All training knobs. Field names double as traincfg file keys."""

    epochs: int = 20
    warmup_epochs: int = 1
    lr: float = 1e-3
    momentum: float = 0.9
    da_weight: float = 0.1
    st_weight: float = 1.0
    alt_period: int = 500
    pseudo_thresh: float = 0.1
    pos_iou: float = 0.5
    bg_ratio: int = 3
    max_samples: int = 32
    st_streams: int = 3
    enable_da: bool = True
    enable_fa: bool = True
    nms_thresh: float = 0.3
    seed: int = 0
    mode: str = MODE_SIMULTANEOUS

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs must be in 0..epochs, got {self.warmup_epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.da_weight < 0 or self.st_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.alt_period < 1:
            raise ConfigError(f"alt_period must be >= 1, got {self.alt_period}")
        if not 0 < self.pseudo_thresh < 1:
            raise ConfigError(f"pseudo_thresh must be in (0, 1), got {self.pseudo_thresh}")
        if not 0 < self.pos_iou < 1:
            raise ConfigError(f"pos_iou must be in (0, 1), got {self.pos_iou}")
        if self.bg_ratio < 0 or self.max_samples < 1:
            raise ConfigError("bg_ratio must be >= 0 and max_samples >= 1")
        if not 0 <= self.st_streams <= 3:
            raise ConfigError(f"st_streams must be in 0..3, got {self.st_streams}")
        if not 0 < self.nms_thresh < 1:
            raise ConfigError(f"nms_thresh must be in (0, 1), got {self.nms_thresh}")
        if self.mode not in (MODE_SIMULTANEOUS, MODE_ISOLATED):
            raise ConfigError(f"mode must be {MODE_SIMULTANEOUS} or {MODE_ISOLATED}, got '{self.mode}'")


@dataclass
class EpochMetrics:
    epoch: int
    wsd_loss: float
    da_loss: float
    st_loss: float
    disc_acc: float
    map: float
    corloc: float

    def as_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(v) for v in
                                    (self.wsd_loss, self.da_loss, self.st_loss,
                                     self.disc_acc, self.map, self.corloc)]


@dataclass
class History:
    """Per-epoch metrics plus bookkeeping the tests assert on."""

    rows: list[EpochMetrics] = field(default_factory=list)
    access: dict[str, dict[str, set]] = field(default_factory=dict)
    pseudo_dump: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def record_access(self, stage: str, domain: str, bag_id: str) -> None:
        self.access.setdefault(stage, {}).setdefault(domain, set()).add(bag_id)

    def write_csv(self, path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode, newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if not append:
                writer.writerow(METRICS_HEADER)
            for row in self.rows:
                writer.writerow(row.as_row())


@dataclass
class StepInfo:
    """Loss components of a single step. None marks a stream that was not
    active this step; term values are exact floats."""

    wsd: float = math.nan
    da_value: float | None = None    # the adversarial log-likelihood itself
    da_term: float | None = None     # da_weight * objective actually added
    st_sum: float | None = None      # sum over streams of their NLLs
    st_term: float | None = None     # st_weight * st_sum as added to the loss
    disc_acc: float | None = None
    exclude: set = field(default_factory=set)


def build_step_loss(params: ModelParams, web_bag: ProposalBag, target_bag: ProposalBag | None,
                    cfg: TrainConfig, phase: str | None, warmup: bool,
                    sample_rng: np.random.Generator) -> tuple[Tensor, StepInfo]:
    """Assemble the composite loss graph for one (web, target) pair.

    ``phase`` is None when the adversarial stream is off this step. Returns
    the scalar loss tensor and the component breakdown.
    """
    info = StepInfo()
    bw = forward_wsd(web_bag.feats, params)
    loss = wsd_loss(bw.img, web_bag.weak_label)
    info.wsd = loss.item()

    da_on = phase is not None and not warmup
    st_on = (not warmup) and cfg.st_streams >= 1 and cfg.st_weight > 0
    bt = forward_wsd(target_bag.feats, params) if (da_on or st_on) else None

    if da_on:
        att_w = bw.fg.data.reshape(-1) if cfg.enable_fa else uniform_attention(bw.feats.rows)
        att_t = bt.fg.data.reshape(-1) if cfg.enable_fa else uniform_attention(bt.feats.rows)
        web_batch = DomainBatch(detach(bw.feats), np.zeros(bw.feats.rows), att_w)
        tgt_batch = DomainBatch(detach(bt.feats), np.ones(bt.feats.rows), att_t)
        if phase == PHASE_DISCRIMINATOR:
            objective = discriminator_objective(web_batch, tgt_batch, params)
            info.da_value = -objective.item()
        elif phase == PHASE_GENERATOR:
            objective = generator_objective(bw.feats, att_w, params)
            frozen = discriminator_objective(web_batch, tgt_batch, params)
            info.da_value = -frozen.item()
            info.exclude.add("disc")
        else:
            raise InputError(f"unknown phase '{phase}'")
        term = scale(objective, cfg.da_weight)
        info.da_term = term.item()
        loss = add(loss, term)
        p_web = discriminate(web_batch.feats, params).data
        p_tgt = discriminate(tgt_batch.feats, params).data
        info.disc_acc = domain_accuracy(p_web, att_w, p_tgt, att_t)

    if st_on:
        # The chain gates on emptiness: a stream whose pseudo ground truth is
        # empty skips the image and so does everything downstream of it, which
        # keeps later heads from training on an untrained predecessor.
        scores = bt.det.data
        st_sum: Tensor | None = None
        for j in range(1, cfg.st_streams + 1):
            pgt = make_pseudo_gt(scores, target_bag.boxes, cfg.pseudo_thresh,
                                 cfg.pos_iou, cfg.bg_ratio, sample_rng, cfg.max_samples)
            if pgt.empty:
                break
            p_all = st_forward(bt.feats, params, j)
            idx = [i for i, _ in pgt.sampled]
            labels = [lab for _, lab in pgt.sampled]
            nll = st_loss(take_rows(p_all, idx), labels)
            st_sum = nll if st_sum is None else add(st_sum, nll)
            scores = foreground_scores(p_all.data)
        if st_sum is not None:
            info.st_sum = st_sum.item()
            term = scale(st_sum, cfg.st_weight)
            info.st_term = term.item()
            loss = add(loss, term)

    return loss, info


def _check_finite(info: StepInfo, epoch: int) -> None:
    for name, value in (("wsd", info.wsd), ("da", info.da_term), ("st", info.st_term)):
        if value is not None and not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss at epoch {epoch}")


def _phase_for(pairs_done: int, cfg: TrainConfig) -> str:
    return PHASE_DISCRIMINATOR if (pairs_done // cfg.alt_period) % 2 == 0 else PHASE_GENERATOR


@dataclass
class _TrainState:
    epoch: int = 0
    pairs_done: int = 0


def _nanmean(values: list) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _run_epoch(params: ModelParams, web_bags, target_bags, cfg: TrainConfig,
               state: _TrainState, history: History, stage: str) -> EpochMetrics:
    epoch = state.epoch
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_TAG, epoch]))
    sample_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SAMPLE_TAG, epoch]))
    warmup = epoch < cfg.warmup_epochs
    web_order = shuffle_rng.permutation(len(web_bags))
    tgt_order = shuffle_rng.permutation(len(target_bags))
    da_enabled = cfg.enable_da and cfg.da_weight > 0 and not warmup
    st_enabled = cfg.st_streams >= 1 and cfg.st_weight > 0 and not warmup
    steps = len(web_bags) if warmup else max(len(web_bags), len(target_bags))

    wsd_vals: list[float] = []
    da_vals: list[float] = []
    st_vals: list[float] = []
    acc_vals: list[float] = []
    for s in range(steps):
        web_bag = web_bags[web_order[s % len(web_bags)]]
        history.record_access(stage, WEB, web_bag.id)
        target_bag = None
        if da_enabled or st_enabled:
            target_bag = target_bags[tgt_order[s % len(target_bags)]]
            history.record_access(stage, TARGET, target_bag.id)
        phase = _phase_for(state.pairs_done, cfg) if da_enabled else None

        params.zero_grad()
        loss, info = build_step_loss(params, web_bag, target_bag, cfg, phase, warmup, sample_rng)
        _check_finite(info, epoch)
        loss.backward()
        exclude = set(info.exclude)
        if warmup:
            exclude.update(b for b in params.blocks if b not in ("feature", "wsd"))
        params.step(cfg.lr, cfg.momentum, exclude=exclude)

        wsd_vals.append(info.wsd)
        da_vals.append(info.da_value)
        st_vals.append(info.st_sum)
        acc_vals.append(info.disc_acc)
        if not warmup:
            state.pairs_done += 1

    report = evaluate(params, target_bags, nms_thresh=cfg.nms_thresh)
    return EpochMetrics(epoch=epoch, wsd_loss=_nanmean(wsd_vals), da_loss=_nanmean(da_vals),
                        st_loss=_nanmean(st_vals), disc_acc=_nanmean(acc_vals),
                        map=report.map, corloc=report.corloc)


def _check_datasets(web_bags, target_bags) -> tuple[int, int]:
    d_web = check_bags(web_bags, domain=WEB)
    d_tgt = check_bags(target_bags, domain=TARGET)
    if d_web != d_tgt:
        raise InputError(f"feature dims differ between domains: {d_web} vs {d_tgt}")
    num_classes = int(np.asarray(web_bags[0].weak_label).shape[0])
    for bag in web_bags:
        if np.asarray(bag.weak_label).shape[0] != num_classes:
            raise InputError(f"bag '{bag.id}': inconsistent label length")
    for bag in target_bags:
        for c, _ in bag.gt_boxes:
            if c >= num_classes:
                raise InputError(f"bag '{bag.id}': gt class {c} outside 0..{num_classes - 1}")
    return num_classes, d_web


def train(web_bags, target_bags, cfg: TrainConfig,
          resume: tuple[ModelParams, dict] | None = None) -> tuple[ModelParams, History]:
    """Simultaneous three-stream training; returns final params and history.

    ``resume`` is (params, extra) from a checkpoint written by this trainer;
    training continues at extra["epoch"] with the identical random streams,
    so an interrupted run resumed here matches the uninterrupted one bitwise.
    """
    cfg.validate()
    num_classes, feat_dim = _check_datasets(web_bags, target_bags)
    state = _TrainState()
    if resume is None:
        params = init_params(num_classes, feat_dim, cfg.st_streams, cfg.seed)
    else:
        params, extra = resume
        ensure_compatible(params, cfg, num_classes, feat_dim)
        state.epoch = int(extra.get("epoch", 0))
        state.pairs_done = int(extra.get("pairs_done", 0))
    history = History()
    while state.epoch < cfg.epochs:
        row = _run_epoch(params, web_bags, target_bags, cfg, state, history, stage="main")
        history.rows.append(row)
        state.epoch += 1
    return params, history


def train_state_extra(cfg: TrainConfig, state_epoch: int, pairs_done: int) -> dict:
    return {"epoch": state_epoch, "pairs_done": pairs_done, "mode": cfg.mode}


def train_with_checkpoints(web_bags, target_bags, cfg: TrainConfig, checkpoint_path,
                           resume: bool = False) -> tuple[ModelParams, History]:
    """Like train(), but writes a checkpoint after every epoch and can pick
    up from the one at ``checkpoint_path``."""
    cfg.validate()
    num_classes, feat_dim = _check_datasets(web_bags, target_bags)
    state = _TrainState()
    if resume:
        params, loaded_cfg, extra = load_checkpoint(checkpoint_path)
        _check_resume_config(loaded_cfg, cfg)
        ensure_compatible(params, cfg, num_classes, feat_dim)
        state.epoch = int(extra["epoch"])
        state.pairs_done = int(extra["pairs_done"])
    else:
        params = init_params(num_classes, feat_dim, cfg.st_streams, cfg.seed)
    history = History()
    while state.epoch < cfg.epochs:
        row = _run_epoch(params, web_bags, target_bags, cfg, state, history, stage="main")
        history.rows.append(row)
        state.epoch += 1
        save_checkpoint(checkpoint_path, params, cfg,
                        extra=train_state_extra(cfg, state.epoch, state.pairs_done))
    return params, history


def _check_resume_config(loaded: TrainConfig, current: TrainConfig) -> None:
    a = dataclasses.asdict(loaded)
    b = dataclasses.asdict(current)
    a.pop("epochs")
    b.pop("epochs")
    if a != b:
        diff = [k for k in a if a[k] != b[k]]
        raise ConfigError(f"resume config differs from checkpoint in: {', '.join(diff)}")


def generate_pseudo_dump(params: ModelParams, target_bags, cfg: TrainConfig) -> dict:
    """Freeze pseudo ground truth for every target bag under fixed params."""
    dump: dict[str, list[tuple[int, int]]] = {}
    for idx, bag in enumerate(target_bags):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PSEUDO_TAG, idx]))
        bundle = forward_wsd(bag.feats, params)
        pgt = make_pseudo_gt(bundle.det.data, bag.boxes, cfg.pseudo_thresh,
                             cfg.pos_iou, cfg.bg_ratio, rng, cfg.max_samples)
        dump[bag.id] = list(pgt.sampled)
    return dump


def train_isolated(web_bags, target_bags, cfg: TrainConfig) -> tuple[ModelParams, History]:
    """Two-stage baseline: web-only WSD, frozen pseudo labels, fresh detector.

    Stage 1 trains the WSD stream alone on web bags. Its detection scores
    then produce one fixed pseudo ground-truth set for the whole target
    split. Stage 2 trains a freshly initialized feature learner plus one
    instance-classifier head on those frozen labels, never touching web
    bags and sharing no parameters with stage 1.
    """
    cfg.validate()
    num_classes, feat_dim = _check_datasets(web_bags, target_bags)

    stage1_cfg = dataclasses.replace(cfg, enable_da=False, st_streams=0)
    stage1_params = init_params(num_classes, feat_dim, 0, cfg.seed)
    state = _TrainState()
    history = History()
    while state.epoch < stage1_cfg.epochs:
        row = _run_epoch(stage1_params, web_bags, target_bags, stage1_cfg, state, history,
                         stage="stage1")
        history.rows.append(row)
        state.epoch += 1

    history.pseudo_dump = generate_pseudo_dump(stage1_params, target_bags, cfg)

    stage2_seed = int(np.random.SeedSequence([cfg.seed, _STAGE2_TAG]).generate_state(1)[0])
    params = init_params(num_classes, feat_dim, 1, stage2_seed)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STAGE2_TAG, epoch]))
        order = rng.permutation(len(target_bags))
        st_vals: list[float] = []
        for idx in order:
            bag = target_bags[idx]
            history.record_access("stage2", TARGET, bag.id)
            sampled = history.pseudo_dump[bag.id]
            if not sampled:
                continue
            params.zero_grad()
            feats = feature_forward(bag.feats, params)
            p_all = st_forward(feats, params, 1)
            nll = st_loss(take_rows(p_all, [i for i, _ in sampled]),
                          [lab for _, lab in sampled])
            loss = scale(nll, cfg.st_weight)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite st loss in stage 2, epoch {epoch}")
            loss.backward()
            params.step(cfg.lr, cfg.momentum, exclude={"wsd", "disc"})
            st_vals.append(nll.item())
        report = evaluate(params, target_bags, nms_thresh=cfg.nms_thresh)
        history.rows.append(EpochMetrics(epoch=cfg.epochs + epoch, wsd_loss=math.nan,
                                         da_loss=math.nan, st_loss=_nanmean(st_vals),
                                         disc_acc=math.nan, map=report.map,
                                         corloc=report.corloc))
    return params, history


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, params: ModelParams, cfg: TrainConfig, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "params": params_to_payload(params),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: got '{version}', "
                              f"expected '{CHECKPOINT_VERSION}'")
    try:
        cfg = TrainConfig(**payload["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} carries an incompatible config: {exc}") from exc
    params = params_from_payload(payload["params"])
    return params, cfg, payload.get("extra", {})


def ensure_compatible(params: ModelParams, cfg: TrainConfig,
                      num_classes: int | None = None, feat_dim: int | None = None) -> None:
    """Structural check between a loaded parameter set and a config/dataset."""
    if params.num_st_streams != cfg.st_streams:
        raise CheckpointError(
            f"checkpoint has {params.num_st_streams} st stream(s) but the config "
            f"demands {cfg.st_streams}")
    if num_classes is not None and params.num_classes != num_classes:
        raise CheckpointError(
            f"checkpoint expects {params.num_classes} classes, dataset has {num_classes}")
    if feat_dim is not None and params.feat_dim != feat_dim:
        raise CheckpointError(
            f"checkpoint expects feature dim {params.feat_dim}, dataset has {feat_dim}")
