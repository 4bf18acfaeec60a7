"""Shared model state: the feature learner, the per-stream heads, and the
momentum buffers, organized as named parameter blocks.

The block partition matters: the adversarial alternation updates only the
discriminator block or only the feature block, and tests assert the
complement stays bit-identical.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, affine, constant, relu, sgd_update
from .errors import CheckpointError, ConfigError

_INIT_TAG = 7


@dataclass
class ModelParams:
    """Named parameter tensors partitioned into blocks, plus SGD velocity."""

    num_classes: int
    feat_dim: int
    num_st_streams: int
    tensors: dict[str, Tensor] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    blocks: dict[str, list[str]] = field(default_factory=dict)

    def block_names(self) -> list[str]:
        return list(self.blocks)

    def names_in(self, *blocks: str) -> list[str]:
        names: list[str] = []
        for b in blocks:
            names.extend(self.blocks[b])
        return names

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad[:] = 0.0

    def step(self, lr: float, momentum: float, exclude: set[str] | None = None) -> None:
        """One SGD step over all blocks except ``exclude`` (block names)."""
        include = None
        if exclude:
            include = [n for b, names in self.blocks.items() if b not in exclude for n in names]
        sgd_update(self.tensors, self.velocity, lr, momentum, include=include)

    def snapshot(self, *blocks: str) -> dict[str, np.ndarray]:
        names = self.names_in(*blocks) if blocks else list(self.tensors)
        return {n: self.tensors[n].data.copy() for n in names}

    def values(self) -> dict[str, np.ndarray]:
        return self.snapshot()


def init_params(num_classes: int, feat_dim: int, num_st_streams: int, seed: int) -> ModelParams:
    """Gaussian init (std 1/sqrt(fan_in)) for weights, zero biases.

    Blocks: ``feature`` (two affine layers with a rectifier between them),
    ``wsd`` (classification and localization heads), ``disc`` (single affine
    domain discriminator to 2 logits), and ``st1``..``stk`` (one (C+1)-way
    affine head per self-training stream).
    """
    if num_classes < 1 or feat_dim < 1:
        raise ConfigError(f"bad model shape: C={num_classes}, d={feat_dim}")
    if not 0 <= num_st_streams <= 3:
        raise ConfigError(f"num_st_streams must be in 0..3, got {num_st_streams}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_TAG]))
    p = ModelParams(num_classes=num_classes, feat_dim=feat_dim, num_st_streams=num_st_streams)

    def w(shape):
        return Tensor(rng.standard_normal(shape) / np.sqrt(shape[0]))

    def b(n):
        return Tensor(np.zeros((1, n)))

    d, c = feat_dim, num_classes
    layout: dict[str, dict[str, Tensor]] = {
        "feature": {"feat_w1": w((d, d)), "feat_b1": b(d),
                    "feat_w2": w((d, d)), "feat_b2": b(d)},
        "wsd": {"cls_w": w((d, c)), "cls_b": b(c),
                "loc_w": w((d, c)), "loc_b": b(c)},
        "disc": {"disc_w": w((d, 2)), "disc_b": b(2)},
    }
    for j in range(1, num_st_streams + 1):
        layout[f"st{j}"] = {f"st{j}_w": w((d, c + 1)), f"st{j}_b": b(c + 1)}

    for block, tensors in layout.items():
        p.blocks[block] = list(tensors)
        for name, t in tensors.items():
            p.tensors[name] = t
            p.velocity[name] = np.zeros_like(t.data)
    return p


def feature_forward(x: np.ndarray, params: ModelParams) -> Tensor:
    """Run raw proposal features through the shared two-layer feature learner."""
    t = constant(x)
    h = relu(affine(t, params.tensors["feat_w1"], params.tensors["feat_b1"]))
    return affine(h, params.tensors["feat_w2"], params.tensors["feat_b2"])


# ---------------------------------------------------------------------------
# Checkpoint payloads: named blocks, shapes, raw little-endian float64 bytes.

CHECKPOINT_VERSION = "webdet-checkpoint-1"


def _encode(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode(entry: dict, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint entry for {what}: {exc}") from exc
    return arr.copy()


def params_to_payload(params: ModelParams) -> dict:
    return {
        "num_classes": params.num_classes,
        "feat_dim": params.feat_dim,
        "num_st_streams": params.num_st_streams,
        "blocks": {b: names for b, names in params.blocks.items()},
        "tensors": {n: _encode(t.data) for n, t in params.tensors.items()},
        "velocity": {n: _encode(v) for n, v in params.velocity.items()},
    }


def params_from_payload(payload: dict) -> ModelParams:
    try:
        p = ModelParams(num_classes=int(payload["num_classes"]),
                        feat_dim=int(payload["feat_dim"]),
                        num_st_streams=int(payload["num_st_streams"]))
        blocks = payload["blocks"]
        tensors = payload["tensors"]
        velocity = payload["velocity"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint payload is missing field {exc}") from exc
    for block, names in blocks.items():
        p.blocks[block] = list(names)
        for name in names:
            if name not in tensors:
                raise CheckpointError(f"checkpoint block '{block}' references missing tensor '{name}'")
            p.tensors[name] = Tensor(_decode(tensors[name], name))
            p.velocity[name] = _decode(velocity[name], f"velocity of {name}")
    return p
