"""Independent gradient oracle: central finite differences over a packed
parameter vector.  Kept free of the library's backward pass so the check
stays a genuine second route."""

import numpy as np

from ssda.model import Arch, ModelParams


def pack_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params.layers])


def unpack_params(vec: np.ndarray, arch: Arch) -> ModelParams:
    layers = []
    i = 0
    for fan_in, fan_out in arch.layer_dims:
        W = vec[i : i + fan_out * fan_in].reshape(fan_out, fan_in).copy()
        i += fan_out * fan_in
        b = vec[i : i + fan_out].copy()
        i += fan_out
        layers.append((W, b))
    assert i == vec.size
    return ModelParams(arch, layers)


def pack_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in grads.layers])


def fd_gradient(loss_fn, params: ModelParams, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar loss over every parameter."""
    theta = pack_params(params)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += step
        minus = theta.copy()
        minus[i] -= step
        grad[i] = (
            loss_fn(unpack_params(plus, params.arch))
            - loss_fn(unpack_params(minus, params.arch))
        ) / (2 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor); the floor keeps near-zero
    entries from inflating the ratio with finite-difference noise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def random_params(arch: Arch, rng: np.random.Generator, scale: float = 0.7) -> ModelParams:
    layers = []
    for fan_in, fan_out in arch.layer_dims:
        layers.append((scale * rng.standard_normal((fan_out, fan_in)),
                       scale * rng.standard_normal(fan_out)))
    return ModelParams(arch, layers)
