"""Proposal bags and their newline-delimited JSON serialization.

A bag is one image: a set of proposal boxes with feature vectors. Web bags
carry a binary weak label vector and no ground truth; target bags carry
evaluation-only ground-truth boxes and no label. One JSON object per line,
keys sorted, so serialization is deterministic and files are diff-able.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import check_box
from .errors import DataFormatError, InputError

WEB = "web"
TARGET = "target"


@dataclass
class ProposalBag:
    """One image as a bag of proposals.

    boxes: (m, 4) float64, each row x1, y1, x2, y2
    feats: (m, d) float64
    weak_label: (C,) 0/1 float64, web bags only
    gt_boxes: list of (class_index, (4,) box), target bags only
    """

    id: str
    domain: str
    boxes: np.ndarray
    feats: np.ndarray
    weak_label: np.ndarray | None = None
    gt_boxes: list[tuple[int, np.ndarray]] | None = field(default=None)

    @property
    def m(self) -> int:
        return self.boxes.shape[0]

    @property
    def d(self) -> int:
        return self.feats.shape[1]

    def gt_classes(self) -> list[int]:
        return sorted({c for c, _ in (self.gt_boxes or [])})

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProposalBag):
            return NotImplemented
        if (self.id, self.domain) != (other.id, other.domain):
            return False
        if not (np.array_equal(self.boxes, other.boxes) and np.array_equal(self.feats, other.feats)):
            return False
        if (self.weak_label is None) != (other.weak_label is None):
            return False
        if self.weak_label is not None and not np.array_equal(self.weak_label, other.weak_label):
            return False
        if (self.gt_boxes is None) != (other.gt_boxes is None):
            return False
        if self.gt_boxes is not None:
            if len(self.gt_boxes) != len(other.gt_boxes):
                return False
            for (ca, ba), (cb, bb) in zip(self.gt_boxes, other.gt_boxes):
                if ca != cb or not np.array_equal(ba, bb):
                    return False
        return True


def validate_bag(bag: ProposalBag) -> None:
    """Raise DataFormatError (naming the bag id) on any invariant violation."""
    try:
        if bag.domain not in (WEB, TARGET):
            raise InputError(f"unknown domain '{bag.domain}'")
        if bag.boxes.ndim != 2 or bag.boxes.shape[1] != 4:
            raise InputError(f"boxes must be (m, 4), got {bag.boxes.shape}")
        if bag.m < 1:
            raise InputError("bag must contain at least one proposal")
        if bag.feats.ndim != 2 or bag.feats.shape[0] != bag.m:
            raise InputError(f"feats must be (m, d), got {bag.feats.shape} for m={bag.m}")
        if not np.isfinite(bag.feats).all():
            raise InputError("non-finite feature values")
        for i in range(bag.m):
            check_box(bag.boxes[i], context=f"proposal {i}")
        if bag.domain == WEB:
            if bag.weak_label is None:
                raise InputError("web bag is missing its weak label")
            if bag.gt_boxes is not None:
                raise InputError("web bag must not carry ground-truth boxes")
            lab = np.asarray(bag.weak_label)
            if not np.isin(lab, (0.0, 1.0)).all():
                raise InputError("weak label must be binary")
            if lab.sum() < 1:
                raise InputError("web bag needs at least one positive class")
        else:
            if bag.weak_label is not None:
                raise InputError("target bag must not carry a weak label")
            if bag.gt_boxes is None:
                raise InputError("target bag is missing ground-truth boxes")
            for c, box in bag.gt_boxes:
                if c < 0:
                    raise InputError(f"negative ground-truth class {c}")
                check_box(box, context=f"gt class {c}")
    except InputError as exc:
        raise DataFormatError(f"bag '{bag.id}': {exc}") from exc


def check_bags(bags: Sequence[ProposalBag], domain: str | None = None) -> int:
    """Validate a bag list; returns the common feature dimension."""
    if len(bags) == 0:
        raise InputError("empty bag list")
    d = bags[0].d
    for bag in bags:
        validate_bag(bag)
        if bag.d != d:
            raise DataFormatError(
                f"bag '{bag.id}': feature dimension {bag.d} differs from {d}")
        if domain is not None and bag.domain != domain:
            raise DataFormatError(f"bag '{bag.id}': expected domain '{domain}', got '{bag.domain}'")
    return d


def _bag_to_record(bag: ProposalBag) -> dict:
    rec: dict = {
        "id": bag.id,
        "domain": bag.domain,
        "proposals": [
            {"box": bag.boxes[i].tolist(), "feat": bag.feats[i].tolist()}
            for i in range(bag.m)
        ],
    }
    if bag.weak_label is not None:
        rec["weak_label"] = [int(v) for v in bag.weak_label]
    if bag.gt_boxes is not None:
        rec["gt_boxes"] = [{"class": int(c), "box": np.asarray(b).tolist()} for c, b in bag.gt_boxes]
    return rec


def _bag_from_record(rec: dict) -> ProposalBag:
    props = rec["proposals"]
    boxes = np.asarray([p["box"] for p in props], dtype=np.float64).reshape(len(props), 4)
    feats = np.asarray([p["feat"] for p in props], dtype=np.float64)
    if feats.ndim != 2:
        raise DataFormatError(f"bag '{rec.get('id')}': ragged feature vectors")
    weak = rec.get("weak_label")
    gts = rec.get("gt_boxes")
    return ProposalBag(
        id=str(rec["id"]),
        domain=str(rec["domain"]),
        boxes=boxes,
        feats=feats,
        weak_label=None if weak is None else np.asarray(weak, dtype=np.float64),
        gt_boxes=None if gts is None else [
            (int(g["class"]), np.asarray(g["box"], dtype=np.float64)) for g in gts
        ],
    )


def save_bags(path, bags: Sequence[ProposalBag]) -> None:
    """Write bags as one canonical JSON object per line (UTF-8)."""
    with open(path, "w", encoding="utf-8") as fh:
        for bag in bags:
            fh.write(json.dumps(_bag_to_record(bag), sort_keys=True))
            fh.write("\n")


def load_bags(path) -> list[ProposalBag]:
    """Read and validate a bag file; errors name the line or bag at fault."""
    bags: list[ProposalBag] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                bag = _bag_from_record(rec)
            except DataFormatError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: malformed record at line {lineno}: {exc}") from exc
            validate_bag(bag)
            bags.append(bag)
    return bags
