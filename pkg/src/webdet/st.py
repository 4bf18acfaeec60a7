"""Self-training streams on pseudo ground truth.

Each target bag's current detection scores nominate at most one box per
class (the per-class argmax, kept only above a confidence threshold). Those
pseudo boxes supervise a (C+1)-way instance classifier: proposals with
enough overlap become positives of the box's class, a random handful of
low-overlap proposals become background (label 0). Streams chain: stream 1
reads the WSD detection scores, stream j > 1 reads stream j-1's class
probabilities with the background column dropped and rows renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, affine, clip, log, neg, pick, softmax_rows, total
from .boxes import iou_matrix
from .errors import ConfigError, InputError
from .model import ModelParams
from .wsd import PROB_EPS

BACKGROUND = 0  # label 0 is background; class c maps to label c + 1

DEFAULT_POS_IOU = 0.5
DEFAULT_BG_RATIO = 3
DEFAULT_MAX_SAMPLES = 32


@dataclass
class PseudoGroundTruth:
    """Selected pseudo boxes and the sampled training set for one bag.

    boxes: list of (class_index, proposal_index, (4,) box)
    sampled: list of (proposal_index, label) with label in 0..C
    """

    boxes: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    sampled: list[tuple[int, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return len(self.sampled) == 0


def make_pseudo_gt(det: np.ndarray, boxes: np.ndarray, thresh: float,
                   pos_iou: float = DEFAULT_POS_IOU, bg_ratio: int = DEFAULT_BG_RATIO,
                   rng: np.random.Generator | None = None,
                   max_samples: int = DEFAULT_MAX_SAMPLES) -> PseudoGroundTruth:
    """Pure function of (det, boxes, thresh, pos_iou, bg_ratio, rng state).

    det: (m, C) scores; boxes: (m, 4). Per class, the argmax proposal is a
    pseudo box if its score reaches ``thresh``. Positives overlap their best
    pseudo box with IoU >= pos_iou; backgrounds overlap every pseudo box with
    IoU < pos_iou, sampled at most bg_ratio per positive, with the whole set
    capped at max_samples. An empty result is valid.
    """
    if not 0.0 < thresh < 1.0:
        raise InputError(f"thresh must be in (0, 1), got {thresh}")
    if not 0.0 < pos_iou < 1.0:
        raise InputError(f"pos_iou must be in (0, 1), got {pos_iou}")
    det = np.asarray(det, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rng = rng if rng is not None else np.random.default_rng(0)

    out = PseudoGroundTruth()
    for c in range(det.shape[1]):
        i_c = int(det[:, c].argmax())
        if det[i_c, c] >= thresh:
            out.boxes.append((c, i_c, boxes[i_c].copy()))
    if not out.boxes:
        return out

    pseudo = np.stack([b for _, _, b in out.boxes])
    overlaps = iou_matrix(boxes, pseudo)           # (m, n_pseudo)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps.max(axis=1)

    positives = [(int(i), out.boxes[best[i]][0] + 1)
                 for i in np.nonzero(best_iou >= pos_iou)[0]]
    bg_pool = np.nonzero(best_iou < pos_iou)[0]

    if len(positives) > max_samples:
        keep = rng.choice(len(positives), size=max_samples, replace=False)
        positives = [positives[i] for i in sorted(keep)]
    n_bg = min(bg_ratio * len(positives), max_samples - len(positives), len(bg_pool))
    backgrounds: list[tuple[int, int]] = []
    if n_bg > 0:
        chosen = rng.choice(bg_pool, size=n_bg, replace=False)
        backgrounds = [(int(i), BACKGROUND) for i in sorted(chosen)]
    out.sampled = positives + backgrounds
    return out


def st_forward(feats: Tensor, params: ModelParams, stream: int) -> Tensor:
    """(m, C+1) class probabilities from stream ``stream``'s affine head."""
    if not 1 <= stream <= params.num_st_streams:
        raise ConfigError(f"stream {stream} out of range 1..{params.num_st_streams}")
    t = params.tensors
    return softmax_rows(affine(feats, t[f"st{stream}_w"], t[f"st{stream}_b"]))


def st_loss(p_st: Tensor, labels) -> Tensor:
    """Negative log-likelihood of the sampled labels under (|P|, C+1) probabilities."""
    lab = np.asarray(labels, dtype=np.intp).reshape(-1)
    if lab.shape[0] != p_st.rows:
        raise InputError(f"{lab.shape[0]} labels for {p_st.rows} probability rows")
    if lab.size and (lab.min() < 0 or lab.max() >= p_st.cols):
        raise InputError(f"label out of range 0..{p_st.cols - 1}")
    picked = pick(p_st, np.arange(lab.shape[0]), lab)
    return neg(total(log(clip(picked, PROB_EPS, 1.0))))


def foreground_scores(p_st_values: np.ndarray) -> np.ndarray:
    """Drop the background column and renormalize each row over classes.

    This is the score interface between chained streams: stream j+1 builds
    its pseudo ground truth from these, with the same threshold as stream 1.
    """
    p = np.asarray(p_st_values, dtype=np.float64)
    fg = p[:, 1:]
    return fg / fg.sum(axis=1, keepdims=True)
