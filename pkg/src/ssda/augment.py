"""Weak and strong feature-space augmentation.

The weak pipeline applies every configured op with a gentle magnitude; the
strong pipeline samples n distinct ops out of its K configured ops
(RandAugment-style) and applies them in the sampled order.  Every op is the
identity at magnitude zero, and each sample's augmentation is drawn from a
substream keyed by (stream key, sample id), so batch composition never
changes what a given sample sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import substream

OP_KINDS = (
    "gaussian_noise",
    "coordinate_dropout",
    "random_scaling",
    "random_rotation_2plane",
    "feature_jitter",
)

# Ops whose magnitude must be non-negative (scaling magnitude is factor - 1
# and may legitimately be negative, i.e. a shrink).
_NONNEG_KINDS = frozenset(OP_KINDS) - {"random_scaling"}


@dataclass(frozen=True)
class AugOp:
    kind: str
    magnitude_range: tuple[float, float]

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation op {self.kind!r}")
        lo, hi = self.magnitude_range
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"{self.kind}: bad magnitude range [{lo}, {hi}]")
        if self.kind in _NONNEG_KINDS and lo < 0:
            raise ValueError(f"{self.kind}: magnitudes must be non-negative")
        if self.kind == "coordinate_dropout" and hi > 1:
            raise ValueError("coordinate_dropout: drop fraction cannot exceed 1")
        object.__setattr__(self, "magnitude_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class AugPolicy:
    weak_ops: tuple[AugOp, ...]
    strong_ops: tuple[AugOp, ...]
    strong_ops_per_draw: int = 2

    def __post_init__(self):
        object.__setattr__(self, "weak_ops", tuple(self.weak_ops))
        object.__setattr__(self, "strong_ops", tuple(self.strong_ops))
        n = self.strong_ops_per_draw
        if n < 0 or n > len(self.strong_ops):
            raise ValueError(
                f"strong_ops_per_draw={n} must lie in [0, {len(self.strong_ops)}]"
            )
        strong_ranges = {op.kind: op.magnitude_range for op in self.strong_ops}
        for op in self.weak_ops:
            if op.kind in strong_ranges:
                s_lo, s_hi = strong_ranges[op.kind]
                w_lo, w_hi = op.magnitude_range
                if w_lo < s_lo or w_hi > s_hi:
                    raise ValueError(
                        f"weak {op.kind} range {op.magnitude_range} exceeds "
                        f"strong range {strong_ranges[op.kind]}"
                    )


def default_policy() -> AugPolicy:
    return AugPolicy(
        weak_ops=(
            AugOp("gaussian_noise", (0.0, 0.05)),
            AugOp("feature_jitter", (0.0, 0.02)),
        ),
        strong_ops=(
            AugOp("gaussian_noise", (0.0, 0.3)),
            AugOp("coordinate_dropout", (0.0, 0.3)),
            AugOp("random_scaling", (-0.3, 0.3)),
            AugOp("random_rotation_2plane", (0.0, 0.5)),
            AugOp("feature_jitter", (0.0, 0.15)),
        ),
        strong_ops_per_draw=2,
    )


def identity_policy() -> AugPolicy:
    """All magnitudes pinned to zero; both views equal the input."""
    zero = (0.0, 0.0)
    return AugPolicy(
        weak_ops=(AugOp("gaussian_noise", zero),),
        strong_ops=(AugOp("gaussian_noise", zero),),
        strong_ops_per_draw=1,
    )


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"augmentation expects a feature vector, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("augmentation input must be finite")
    return x


def _apply_op(x: np.ndarray, kind: str, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    d = x.shape[0]
    if kind == "gaussian_noise":
        return x + magnitude * rng.standard_normal(d)
    if kind == "coordinate_dropout":
        n_drop = math.ceil(magnitude * d)
        if n_drop == 0:
            return x.copy()
        out = x.copy()
        out[rng.choice(d, size=n_drop, replace=False)] = 0.0
        return out
    if kind == "random_scaling":
        return x * (1.0 + magnitude)
    if kind == "random_rotation_2plane":
        if d < 2:
            raise ValueError("rotation augmentation needs at least 2 dimensions")
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        while True:
            v = rng.standard_normal(d)
            v -= (v @ u) * u
            norm = np.linalg.norm(v)
            if norm > 1e-9:
                v /= norm
                break
        xu, xv = x @ u, x @ v
        return (
            x
            + (math.cos(magnitude) - 1.0) * (xu * u + xv * v)
            + math.sin(magnitude) * (xu * v - xv * u)
        )
    if kind == "feature_jitter":
        return x + magnitude * rng.uniform(-1.0, 1.0, size=d)
    raise ValueError(f"unknown augmentation op {kind!r}")


def weak(x: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply every weak op with a magnitude sampled from its range."""
    x = _check_input(x)
    for op in policy.weak_ops:
        m = rng.uniform(*op.magnitude_range)
        x = _apply_op(x, op.kind, m, rng)
    return x


def strong(x: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply n distinct strong ops chosen uniformly, in the sampled order."""
    x = _check_input(x)
    n = policy.strong_ops_per_draw
    if n > len(policy.strong_ops):
        raise ValueError(f"cannot draw {n} ops from {len(policy.strong_ops)}")
    if n == 0:
        return x.copy()
    chosen = rng.choice(len(policy.strong_ops), size=n, replace=False)
    for idx in chosen:
        op = policy.strong_ops[idx]
        m = rng.uniform(*op.magnitude_range)
        x = _apply_op(x, op.kind, m, rng)
    return x


def augment_batch(samples, policy: AugPolicy, which: str, stream_key):
    """Augment a batch; per-sample rng substreams keyed by (stream_key, id).

    ``which`` is "weak", "strong", or "both" (returning two aligned arrays).
    """
    if len(samples) == 0:
        raise ValueError("cannot augment an empty batch")
    if which not in ("weak", "strong", "both"):
        raise ValueError(f"which must be weak|strong|both, got {which!r}")
    key = stream_key if isinstance(stream_key, tuple) else (stream_key,)

    weak_rows, strong_rows = [], []
    for s in samples:
        if which in ("weak", "both"):
            weak_rows.append(weak(s.features, policy, substream(*key, s.id, 0)))
        if which in ("strong", "both"):
            strong_rows.append(strong(s.features, policy, substream(*key, s.id, 1)))
    if which == "weak":
        return np.stack(weak_rows)
    if which == "strong":
        return np.stack(strong_rows)
    return np.stack(weak_rows), np.stack(strong_rows)
