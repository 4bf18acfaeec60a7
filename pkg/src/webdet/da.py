"""Instance-level adversarial domain adaptation.

A single-affine discriminator scores each proposal feature as web (0) or
target (1). Its log-likelihood, weighted per proposal by the foreground
attention from the WSD stream, is the adversarial value: the discriminator
ascends it, the shared feature learner descends it using web bags only
(target features detached). The generator side is realized with a
gradient-reversal layer feeding the same discriminator loss, which is
gradient-equivalent to the explicit minimization step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, affine, clip, col, constant, detach,
                       grad_reverse, log, mul, neg, rsub, softmax_rows, total)
from .errors import InputError
from .model import ModelParams
from .wsd import PROB_EPS, forward_wsd

PHASE_DISCRIMINATOR = "discriminator"
PHASE_GENERATOR = "generator"


@dataclass
class DomainBatch:
    """One bag's worth of discriminator input.

    feats: (m, d) post-feature-learner tensor (detach upstream as needed)
    domain_labels: (m,) 0 = web, 1 = target, constant within a bag
    attention: (m,) non-negative, sums to 1 over the bag
    """

    feats: Tensor
    domain_labels: np.ndarray
    attention: np.ndarray


def uniform_attention(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


def discriminate(feats: Tensor, params: ModelParams) -> Tensor:
    """Per-proposal probability of coming from the target domain, as (m, 1)."""
    logits = affine(feats, params.tensors["disc_w"], params.tensors["disc_b"])
    return col(softmax_rows(logits), 1)


def _weighted_log(p: Tensor, attention: np.ndarray) -> Tensor:
    w = np.asarray(attention, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != p.rows:
        raise InputError(f"attention length {w.shape[0]} != proposal count {p.rows}")
    if (w < 0).any():
        raise InputError("attention weights must be non-negative")
    return total(mul(log(clip(p, PROB_EPS, 1.0 - PROB_EPS)), constant(w)))


def da_loss(batch_web: DomainBatch, batch_target: DomainBatch, params: ModelParams) -> Tensor:
    """Attention-weighted adversarial log-likelihood; always <= 0.

    sum_target a_i log p_t_i + sum_web a_i log(1 - p_t_i). The discriminator
    maximizes this value, the feature learner minimizes it.
    """
    if batch_web.feats.rows < 1 or batch_target.feats.rows < 1:
        raise InputError("da_loss needs a non-empty batch per domain")
    if batch_web.domain_labels.any():
        raise InputError("web batch carries a non-web domain label")
    if not batch_target.domain_labels.all():
        raise InputError("target batch carries a non-target domain label")
    p_web = discriminate(batch_web.feats, params)
    p_target = discriminate(batch_target.feats, params)
    target_term = _weighted_log(p_target, batch_target.attention)
    web_term = total(mul(log(clip(rsub(1.0, p_web), PROB_EPS, 1.0 - PROB_EPS)),
                         constant(np.asarray(batch_web.attention).reshape(-1, 1))))
    return add(target_term, web_term)


def discriminator_objective(batch_web: DomainBatch, batch_target: DomainBatch,
                            params: ModelParams) -> Tensor:
    """Loss the discriminator descends: the negated adversarial value."""
    return neg(da_loss(batch_web, batch_target, params))


def generator_objective(web_feats: Tensor, web_attention: np.ndarray,
                        params: ModelParams) -> Tensor:
    """Loss whose backward pass makes the feature learner descend the
    adversarial value on web bags, via gradient reversal.

    Target features do not appear: they are detached in the generator phase,
    so their term has zero gradient for every parameter being updated.
    """
    p_web = discriminate(grad_reverse(web_feats, 1.0), params)
    web_term = total(mul(log(clip(rsub(1.0, p_web), PROB_EPS, 1.0 - PROB_EPS)),
                         constant(np.asarray(web_attention).reshape(-1, 1))))
    return neg(web_term)


def domain_accuracy(p_web: np.ndarray, att_web: np.ndarray,
                    p_target: np.ndarray, att_target: np.ndarray) -> float:
    """Attention-weighted balanced accuracy of the discriminator on one pair.

    Each domain contributes its attention-weighted fraction of correct calls;
    the mean of the two keeps chance level at 0.5 even though bags have very
    different proposal counts and foreground rates.
    """
    acc_web = float((np.asarray(att_web) * (np.asarray(p_web).reshape(-1) < 0.5)).sum())
    acc_target = float((np.asarray(att_target) * (np.asarray(p_target).reshape(-1) >= 0.5)).sum())
    return 0.5 * (acc_web + acc_target)


def _bag_batch(bag_feats: Tensor, domain_value: int, attention: np.ndarray) -> DomainBatch:
    m = bag_feats.rows
    return DomainBatch(feats=bag_feats,
                       domain_labels=np.full(m, domain_value, dtype=np.float64),
                       attention=attention)


def da_step(web_bags, target_bags, params: ModelParams, phase: str,
            lr: float = 1e-3, momentum: float = 0.9, enable_fa: bool = True) -> ModelParams:
    """One standalone adversarial update over paired bags.

    The discriminator phase updates only the ``disc`` block (ascending the
    adversarial value, features detached); the generator phase updates only
    the ``feature`` block from web-bag gradients. Everything else is left
    bit-identical.
    """
    if phase not in (PHASE_DISCRIMINATOR, PHASE_GENERATOR):
        raise InputError(f"unknown phase '{phase}'")
    if len(web_bags) == 0 or len(target_bags) == 0:
        raise InputError("da_step needs at least one bag per domain")
    params.zero_grad()
    terms: list[Tensor] = []
    for web_bag, target_bag in zip(web_bags, target_bags):
        bw = forward_wsd(web_bag.feats, params)
        bt = forward_wsd(target_bag.feats, params)
        att_w = bw.fg.data.reshape(-1) if enable_fa else uniform_attention(bw.feats.rows)
        att_t = bt.fg.data.reshape(-1) if enable_fa else uniform_attention(bt.feats.rows)
        if phase == PHASE_DISCRIMINATOR:
            terms.append(discriminator_objective(
                _bag_batch(detach(bw.feats), 0, att_w),
                _bag_batch(detach(bt.feats), 1, att_t), params))
        else:
            terms.append(generator_objective(bw.feats, att_w, params))
    loss = terms[0]
    for t in terms[1:]:
        loss = add(loss, t)
    loss.backward()
    only = "disc" if phase == PHASE_DISCRIMINATOR else "feature"
    exclude = {b for b in params.blocks if b != only}
    params.step(lr, momentum, exclude=exclude)
    return params
