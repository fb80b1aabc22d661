"""Quadrature rules: composite trapezoid in 1D and Halton quasi-Monte Carlo on boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BoxDomain


@dataclass(frozen=True)
class QuadratureRule:
    """Points of shape ``(N, d)`` and positive weights of shape ``(N,)``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights must have the same length")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, np.asarray(values, dtype=float)))

    def rescaled(self, domain: BoxDomain) -> "QuadratureRule":
        """Map a rule on the unit box affinely onto ``domain``."""
        lo = np.array(domain.lower)
        hi = np.array(domain.upper)
        return QuadratureRule(lo + self.points * (hi - lo), self.weights * domain.volume)


def trapezoid_rule(N: int) -> QuadratureRule:
    """Composite trapezoid on ``[0, 1]`` with both endpoints included."""
    if N < 2:
        raise ValueError(f"trapezoid rule needs N >= 2 points, got {N}")
    x = np.arange(N, dtype=float) / (N - 1)
    h = 1.0 / (N - 1)
    w = np.full(N, h)
    w[0] = w[-1] = h / 2
    return QuadratureRule(x.reshape(-1, 1), w)


def radical_inverse(j: int, p: int) -> float:
    """Digits of ``j`` in base ``p`` mirrored about the radix point."""
    if j < 1 or p < 2:
        raise ValueError("radical_inverse needs j >= 1 and p >= 2")
    value, scale = 0.0, 1.0 / p
    while j > 0:
        j, digit = divmod(j, p)
        value += digit * scale
        scale /= p
    return value


def first_primes(d: int) -> list:
    primes: list = []
    candidate = 2
    while len(primes) < d:
        if all(candidate % p for p in primes if p * p <= candidate):
            primes.append(candidate)
        candidate += 1
    return primes


def _radical_inverse_array(j: np.ndarray, p: int) -> np.ndarray:
    j = j.copy()
    value = np.zeros(j.shape, dtype=float)
    scale = 1.0 / p
    while np.any(j > 0):
        j, digit = np.divmod(j, p)
        value += digit * scale
        scale /= p
    return value


def halton_rule(N: int, d: int) -> QuadratureRule:
    """First ``N`` Halton points (indices 1..N) in ``(0, 1)^d`` with equal weights."""
    if N < 1 or d < 1:
        raise ValueError("halton_rule needs N >= 1 and d >= 1")
    j = np.arange(1, N + 1, dtype=np.int64)
    pts = np.column_stack([_radical_inverse_array(j, p) for p in first_primes(d)])
    return QuadratureRule(pts, np.full(N, 1.0 / N))
