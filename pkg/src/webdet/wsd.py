"""Weakly supervised detection head.

Two affine branches on the shared features produce score matrices; one is
softmax-normalized over classes (what is this proposal?), the other over
proposals (which proposal responds most for this class?). Their elementwise
product is the per-proposal detection probability; summing it over proposals
gives image-level class probabilities trained with multi-class cross entropy
on web bags only. The foreground weight vector is a softmax over proposals
of each proposal's summed detection probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, affine, clip, constant, log, mul, neg,
                       rsub, softmax_cols, softmax_rows, sum_axis, total)
from .errors import InputError
from .model import ModelParams, feature_forward

PROB_EPS = 1e-7  # clamp for probabilities entering logs


@dataclass
class ScoreBundle:
    """All per-bag tensors produced by one WSD forward pass.

    s_cls, s_loc, p_cls, p_loc, det are (m, C); img is (1, C); fg is (m, 1).
    feats is the (m, d) shared-feature output reused by the other streams.
    """

    feats: Tensor
    s_cls: Tensor
    s_loc: Tensor
    p_cls: Tensor
    p_loc: Tensor
    det: Tensor
    img: Tensor
    fg: Tensor


def forward_wsd(feats_raw: np.ndarray, params: ModelParams) -> ScoreBundle:
    """Forward one bag's raw (m, d) features through feature learner and heads."""
    f = feature_forward(feats_raw, params)
    t = params.tensors
    s_cls = affine(f, t["cls_w"], t["cls_b"])
    s_loc = affine(f, t["loc_w"], t["loc_b"])
    p_cls = softmax_rows(s_cls)
    p_loc = softmax_cols(s_loc)
    det = mul(p_cls, p_loc)
    img = sum_axis(det, axis=0)
    fg = softmax_cols(sum_axis(det, axis=1))
    return ScoreBundle(feats=f, s_cls=s_cls, s_loc=s_loc, p_cls=p_cls,
                       p_loc=p_loc, det=det, img=img, fg=fg)


def wsd_loss(img: Tensor, weak_label: np.ndarray) -> Tensor:
    """Multi-class cross entropy between image probabilities and the binary label."""
    y = np.asarray(weak_label, dtype=np.float64).reshape(1, -1)
    if y.shape[1] != img.cols:
        raise InputError(f"label length {y.shape[1]} != class count {img.cols}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise InputError("weak label must be binary 0/1")
    p = clip(img, PROB_EPS, 1.0 - PROB_EPS)
    pos = total(mul(log(p), constant(y)))
    negterm = total(mul(log(rsub(1.0, p)), constant(1.0 - y)))
    return neg(add(pos, negterm))
