"""Scikit-learn style front end for the transfer detector.

``WebTransferDetector`` wraps the training engine behind the familiar
fit/predict surface so it composes with pipelines, grid search, and
``get_params``/``set_params``. ``fit`` takes labeled web bags as X and the
unlabeled target bags in place of y, which is where the unsupervised
domain lives in this problem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .bags import ProposalBag, check_bags
from .metrics import Detection, detection_scores, evaluate, nms
from .model import feature_forward
from .trainer import (MODE_ISOLATED, MODE_SIMULTANEOUS, TrainConfig, train,
                      train_isolated)


class WebTransferDetector(BaseEstimator):
    """Detector trained from weakly labeled web bags plus unlabeled target bags.

    Parameters mirror TrainConfig. After ``fit``, ``params_`` holds the model
    and ``history_`` the per-epoch metrics.
    """

    def __init__(self, epochs: int = 20, warmup_epochs: int = 1, lr: float = 1e-3,
                 momentum: float = 0.9, da_weight: float = 0.1, st_weight: float = 1.0,
                 alt_period: int = 500, pseudo_thresh: float = 0.1, pos_iou: float = 0.5,
                 bg_ratio: int = 3, max_samples: int = 32, st_streams: int = 3,
                 enable_da: bool = True, enable_fa: bool = True, nms_thresh: float = 0.3,
                 seed: int = 0, mode: str = MODE_SIMULTANEOUS):
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.lr = lr
        self.momentum = momentum
        self.da_weight = da_weight
        self.st_weight = st_weight
        self.alt_period = alt_period
        self.pseudo_thresh = pseudo_thresh
        self.pos_iou = pos_iou
        self.bg_ratio = bg_ratio
        self.max_samples = max_samples
        self.st_streams = st_streams
        self.enable_da = enable_da
        self.enable_fa = enable_fa
        self.nms_thresh = nms_thresh
        self.seed = seed
        self.mode = mode

    def _config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                           lr=self.lr, momentum=self.momentum, da_weight=self.da_weight,
                           st_weight=self.st_weight, alt_period=self.alt_period,
                           pseudo_thresh=self.pseudo_thresh, pos_iou=self.pos_iou,
                           bg_ratio=self.bg_ratio, max_samples=self.max_samples,
                           st_streams=self.st_streams, enable_da=self.enable_da,
                           enable_fa=self.enable_fa, nms_thresh=self.nms_thresh,
                           seed=self.seed, mode=self.mode)

    def fit(self, web_bags: list[ProposalBag], target_bags: list[ProposalBag]):
        cfg = self._config()
        runner = train_isolated if cfg.mode == MODE_ISOLATED else train
        self.params_, self.history_ = runner(web_bags, target_bags, cfg)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("this WebTransferDetector is not fitted yet; call fit first")

    def transform(self, bags: list[ProposalBag]) -> list[np.ndarray]:
        """Learned (m, d) feature matrices, one per bag."""
        self._check_fitted()
        check_bags(bags)
        return [feature_forward(bag.feats, self.params_).data.copy() for bag in bags]

    def decision_function(self, bags: list[ProposalBag]) -> list[np.ndarray]:
        """Raw (m, C) detection scores per bag, before NMS."""
        self._check_fitted()
        check_bags(bags)
        return [detection_scores(self.params_, bag)[0] for bag in bags]

    def predict(self, bags: list[ProposalBag]) -> list[list[Detection]]:
        """Post-NMS detections per bag."""
        self._check_fitted()
        out: list[list[Detection]] = []
        for bag, scores in zip(bags, self.decision_function(bags)):
            dets = [Detection(bag.id, c, bag.boxes[i], float(scores[i, c]))
                    for i in range(bag.m) for c in range(scores.shape[1])]
            out.append(nms(dets, self.nms_thresh))
        return out

    def score(self, target_bags: list[ProposalBag]) -> float:
        """mAP at IoU 0.5 on bags that carry ground truth."""
        self._check_fitted()
        return evaluate(self.params_, target_bags, nms_thresh=self.nms_thresh).map
