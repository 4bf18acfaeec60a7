"""Detection evaluation: NMS, average precision, mAP, CorLoc, and the 2-D
PCA embedding export.

AP uses all-points interpolation (area under the precision-recall curve
with the running-max precision envelope); matching is greedy by descending
score against the best still-unmatched ground truth at IoU >= 0.5. CorLoc
is the fraction of (image, present class) pairs whose single top-scoring
box hits a ground truth of that class.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bags import ProposalBag
from .boxes import iou, iou_matrix
from .errors import InputError
from .model import ModelParams
from .st import st_forward
from .wsd import forward_wsd

DEFAULT_NMS_THRESH = 0.3
DEFAULT_EVAL_IOU = 0.5


@dataclass
class Detection:
    bag_id: str
    cls: int
    box: np.ndarray
    score: float


@dataclass
class EvalReport:
    ap: dict[int, float]
    map: float
    corloc: float
    gt_counts: dict[int, int]
    det_counts: dict[int, int]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "ap": {str(c): v for c, v in self.ap.items()},
            "map": self.map,
            "corloc": self.corloc,
            "gt_counts": {str(c): v for c, v in self.gt_counts.items()},
            "det_counts": {str(c): v for c, v in self.det_counts.items()},
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "ap"])
            for c in sorted(self.ap):
                writer.writerow([c, repr(self.ap[c])])
            writer.writerow(["map", repr(self.map)])
            writer.writerow(["corloc", repr(self.corloc)])


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression, independently per class.

    Keeps detections in descending score order; drops any detection whose
    IoU with an already-kept detection of the same class reaches the
    threshold. Output preserves the input's relative order among survivors.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InputError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    kept_flags = [False] * len(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        d = dets[i]
        survivors = kept_by_class.setdefault(d.cls, [])
        if all(iou(d.box, dets[j].box) < iou_thresh for j in survivors):
            survivors.append(i)
            kept_flags[i] = True
    return [d for i, d in enumerate(dets) if kept_flags[i]]


def _all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def average_precision(dets: list[Detection], gts: list[tuple[str, np.ndarray]],
                      iou_thresh: float = DEFAULT_EVAL_IOU) -> float | None:
    """All-points AP for one class across images.

    ``gts`` are (bag_id, box) pairs. Returns None when there is no ground
    truth (the class is then excluded from mAP).
    """
    if len(gts) == 0:
        return None
    by_bag: dict[str, list[int]] = {}
    for k, (bag_id, _) in enumerate(gts):
        by_bag.setdefault(bag_id, []).append(k)
    matched = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].bag_id, i))
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        best_iou, best_k = 0.0, -1
        for k in by_bag.get(d.bag_id, ()):
            if matched[k]:
                continue
            v = iou(d.box, gts[k][1])
            if v >= iou_thresh and v > best_iou:
                best_iou, best_k = v, k
        if best_k >= 0:
            matched[best_k] = True
            tp[rank] = 1.0
    if len(dets) == 0:
        return 0.0
    acc_tp = np.cumsum(tp)
    recall = acc_tp / len(gts)
    precision = acc_tp / np.arange(1, len(dets) + 1)
    return _all_points_ap(recall, precision)


def corloc(top_boxes: dict[tuple[str, int], np.ndarray],
           gts: dict[str, list[tuple[int, np.ndarray]]]) -> float:
    """Fraction of (image, present class) pairs whose top box hits a gt at IoU >= 0.5."""
    pairs = 0
    hits = 0
    for bag_id, bag_gts in gts.items():
        present = sorted({c for c, _ in bag_gts})
        for c in present:
            pairs += 1
            box = top_boxes.get((bag_id, c))
            if box is None:
                continue
            if any(iou(box, g) >= DEFAULT_EVAL_IOU for gc, g in bag_gts if gc == c):
                hits += 1
    if pairs == 0:
        raise InputError("corloc: no (image, class) pairs with ground truth")
    return hits / pairs


def detection_scores(params: ModelParams, bag: ProposalBag) -> tuple[np.ndarray, str]:
    """(m, C) class scores for evaluation and the name of their source head.

    With at least one self-training stream the last stream's class
    probabilities (background column dropped) are used; otherwise the WSD
    detection probabilities.
    """
    bundle = forward_wsd(bag.feats, params)
    k = params.num_st_streams
    if k >= 1:
        probs = st_forward(bundle.feats, params, k).data
        return probs[:, 1:].copy(), f"st{k}"
    return bundle.det.data.copy(), "wsd"


def evaluate(params: ModelParams, target_bags: list[ProposalBag],
             nms_thresh: float = DEFAULT_NMS_THRESH,
             iou_thresh: float = DEFAULT_EVAL_IOU,
             threads: int = 1,
             scorer=None) -> EvalReport:
    """Score every proposal, run per-class NMS, and report AP/mAP/CorLoc.

    ``scorer`` overrides the model scores with a callable bag -> (m, C)
    array (used by the oracle-scorer sanity checks).
    """
    if not target_bags:
        raise InputError("evaluate: empty target bag list")
    if all(not bag.gt_boxes for bag in target_bags):
        raise InputError("evaluate: no ground truth in any bag")

    def _score(bag: ProposalBag) -> tuple[np.ndarray, str]:
        if scorer is not None:
            return np.asarray(scorer(bag), dtype=np.float64), "oracle"
        return detection_scores(params, bag)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(_score, target_bags))
    else:
        scored = [_score(bag) for bag in target_bags]

    num_classes = scored[0][0].shape[1]
    source = scored[0][1]
    per_class_dets: dict[int, list[Detection]] = {c: [] for c in range(num_classes)}
    per_class_gts: dict[int, list[tuple[str, np.ndarray]]] = {c: [] for c in range(num_classes)}
    top_boxes: dict[tuple[str, int], np.ndarray] = {}
    gts_by_bag: dict[str, list[tuple[int, np.ndarray]]] = {}

    for bag, (scores, _) in zip(target_bags, scored):
        gts_by_bag[bag.id] = [(c, b) for c, b in (bag.gt_boxes or [])]
        for c, b in gts_by_bag[bag.id]:
            per_class_gts[c].append((bag.id, b))
        for c in range(num_classes):
            top = int(scores[:, c].argmax())
            top_boxes[(bag.id, c)] = bag.boxes[top]
            dets = [Detection(bag.id, c, bag.boxes[i], float(scores[i, c]))
                    for i in range(bag.m)]
            per_class_dets[c].extend(nms(dets, nms_thresh))

    ap: dict[int, float] = {}
    for c in range(num_classes):
        value = average_precision(per_class_dets[c], per_class_gts[c], iou_thresh)
        if value is not None:
            ap[c] = value
    if not ap:
        raise InputError("evaluate: no class has ground truth")
    report = EvalReport(
        ap=ap,
        map=float(np.mean(list(ap.values()))),
        corloc=corloc(top_boxes, gts_by_bag),
        gt_counts={c: len(per_class_gts[c]) for c in range(num_classes)},
        det_counts={c: len(per_class_dets[c]) for c in range(num_classes)},
        metadata={"score_source": source, "nms_thresh": nms_thresh, "iou_thresh": iou_thresh},
    )
    return report


def pca_2d(feats: np.ndarray) -> tuple[np.ndarray, bool]:
    """Top-2 principal-component coordinates via covariance eigendecomposition.

    Sign convention: each component's largest-magnitude coordinate is made
    positive. Returns (coords (n, 2), degenerate) where degenerate flags a
    rank-0 (zero variance) input whose coordinates are all zero.
    """
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"pca_2d needs at least 2 samples, got shape {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    comps = []
    for idx in order:
        v = eigvecs[:, idx]
        j = int(np.abs(v).argmax())
        comps.append(v if v[j] >= 0 else -v)
    while len(comps) < 2:
        comps.append(np.zeros(x.shape[1]))
    basis = np.stack(comps, axis=1)
    degenerate = bool(np.allclose(eigvals, 0.0))
    coords = np.zeros((x.shape[0], 2)) if degenerate else centered @ basis
    return coords, degenerate


def export_embedding(feats: np.ndarray, labels: list[tuple[str, str]], path) -> None:
    """Write pc1,pc2,class,domain CSV rows for external plotting.

    ``labels`` pairs up with the feature rows as (class_name, domain). A
    zero-variance input still writes a file, flagged in a header comment.
    """
    if len(labels) != np.asarray(feats).shape[0]:
        raise InputError("export_embedding: one (class, domain) label per feature row required")
    coords, degenerate = pca_2d(feats)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if degenerate:
            fh.write("# warning: zero-variance input, coordinates are all zero\n")
        writer = csv.writer(fh)
        writer.writerow(["pc1", "pc2", "class", "domain"])
        for (cls, domain), row in zip(labels, coords):
            writer.writerow([repr(float(row[0])), repr(float(row[1])), cls, domain])
