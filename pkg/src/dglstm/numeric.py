"""Numeric foundations: parameter containers, Adam with non-negative
projection, a finite-difference gradient checker, and seeded RNG streams.

Arrays are plain numpy ndarrays (float64 by default; float32 allowed for
training). Determinism: all randomness flows through `seeded_rng` /
`derived_rng`, which wrap numpy's PCG64 generator with explicit seeds.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, NumericError, StructuralError


def seeded_rng(seed) -> np.random.Generator:
    """Deterministic random stream: same seed -> same draws, any platform."""
    return np.random.default_rng(seed)


def derived_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent stream derived from a base seed and integer tags,
    e.g. derived_rng(seed, epoch) for per-epoch shuffles."""
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite entries in '{name}'")


class ParamSet:
    """Ordered name -> ndarray map with per-parameter non-negativity flags.

    Parameters flagged non-negative are kept at min >= 0 by the optimizer's
    projection step; the flag set is preserved by copy() and zeros_like().
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self.nonneg: set[str] = set()

    def add(self, name: str, value: np.ndarray, nonneg: bool = False) -> None:
        if name in self._data:
            raise StructuralError(f"duplicate parameter name '{name}'")
        value = np.asarray(value)
        require_finite(name, value)
        self._data[name] = value
        if nonneg:
            self.nonneg.add(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._data:
            raise StructuralError(f"unknown parameter '{name}'")
        value = np.asarray(value)
        if value.shape != self._data[name].shape:
            raise StructuralError(
                f"shape mismatch for '{name}': {value.shape} != {self._data[name].shape}")
        self._data[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._data.items():
            out.add(name, value.copy(), nonneg=name in self.nonneg)
        return out

    def zeros_like(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._data.items():
            out.add(name, np.zeros_like(value), nonneg=name in self.nonneg)
        return out

    def n_entries(self) -> int:
        return sum(v.size for v in self._data.values())

    def check_same_structure(self, other: "ParamSet", what: str = "grads") -> None:
        if self.names() != other.names():
            raise StructuralError(f"{what} names do not match parameter names")
        for name, value in self._data.items():
            if other[name].shape != value.shape:
                raise StructuralError(
                    f"{what} shape mismatch for '{name}': "
                    f"{other[name].shape} != {value.shape}")

    def check_nonneg(self) -> None:
        for name in self.nonneg:
            if self._data[name].size and self._data[name].min() < 0:
                raise NumericError(f"non-negative parameter '{name}' has negative entries")


class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter."""

    def __init__(self, params: ParamSet, alpha: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.alpha = float(alpha)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> ParamSet:
    """One bias-corrected Adam update, then clamp-at-zero projection of every
    non-negative-flagged parameter. Updates `params` and `state` in place."""
    params.check_same_structure(grads)
    if set(state.m) != set(params.names()):
        raise StructuralError("AdamState was initialized for different parameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for '{name}'")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[name]
        p -= step
        if name in params.nonneg:
            np.maximum(p, 0.0, out=p)
        require_finite(name, p)
    return params


def grad_check(loss_fn: Callable[[ParamSet], float], params: ParamSet,
               analytic: ParamSet, eps: float = 1e-5) -> float:
    """Max relative error between `analytic` and central-difference gradients.

    Probes every entry of every parameter: rel = |a - n| / max(|a|, |n|, 1e-8).
    Double precision only; eps should be in [1e-6, 1e-4].
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ConfigError(f"grad_check eps {eps} outside [1e-6, 1e-4]")
    params.check_same_structure(analytic, what="analytic gradients")
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lo_hi = loss_fn(params)
            flat[idx] = orig - eps
            lo_lo = loss_fn(params)
            flat[idx] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise NumericError(f"non-finite loss probing '{name}'[{idx}]")
            numeric = (lo_hi - lo_lo) / (2.0 * eps)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
