"""Shallow ReLU networks: parameter containers and pointwise evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


class DegenerateNeuronError(ValueError):
    """A neuron with zero inner weight has no nodal point."""


def relu(t):
    return np.maximum(t, 0.0)


def relu_prime(t):
    # sigma'(0) := 0, the left limit.
    return (t > 0.0).astype(float)


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``prod_k (lower_k, upper_k)``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise ValueError("lower and upper must have the same length")
        if not all(l < h for l, h in zip(lo, hi)):
            raise ValueError("lower < upper must hold componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, d: int = 1) -> "BoxDomain":
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def vertices(self) -> np.ndarray:
        """All ``2**d`` corners, shape ``(2**d, d)``."""
        return np.array(list(product(*zip(self.lower, self.upper))), dtype=float)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class NetworkParams:
    """Parameters ``{a, omega, b}`` of ``u(x) = sum_i a_i relu(omega_i . x + b_i)``.

    ``omega`` has shape ``(n, d)``. Arrays are copied and made read-only so a
    snapshot can be shared between workers.
    """

    a: np.ndarray
    omega: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = _frozen(self.a).reshape(-1)
        b = _frozen(self.b).reshape(-1)
        omega = np.array(self.omega, dtype=float)
        if omega.ndim == 1:
            omega = omega.reshape(-1, 1)
        omega.setflags(write=False)
        if not (a.shape[0] == b.shape[0] == omega.shape[0]):
            raise ValueError(
                f"a, omega, b must all have n rows (got {a.shape[0]}, "
                f"{omega.shape[0]}, {b.shape[0]})"
            )
        if omega.ndim != 2 or omega.shape[1] < 1:
            raise ValueError("omega must have shape (n, d) with d >= 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "omega", omega)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.omega.shape[1]

    @property
    def size(self) -> int:
        return (self.d + 2) * self.n

    def flatten(self) -> np.ndarray:
        """Layout ``a | omega (row-major) | b``."""
        return np.concatenate([self.a, self.omega.reshape(-1), self.b])

    @classmethod
    def from_flat(cls, theta, n: int, d: int) -> "NetworkParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != ((d + 2) * n,):
            raise ValueError(f"expected {(d + 2) * n} parameters, got {theta.shape}")
        return cls(theta[:n], theta[n : n + n * d].reshape(n, d), theta[n + n * d :])

    def replace(self, a=None, omega=None, b=None) -> "NetworkParams":
        return NetworkParams(
            self.a if a is None else a,
            self.omega if omega is None else omega,
            self.b if b is None else b,
        )


@dataclass(frozen=True)
class SubspaceSplit:
    """Index blocks of the flat parameter vector: the a-block and one block per neuron."""

    n: int
    d: int

    @property
    def a_block(self) -> slice:
        return slice(0, self.n)

    def neuron_block(self, i: int) -> np.ndarray:
        """Flat indices of ``(omega_i, b_i)``."""
        if not 0 <= i < self.n:
            raise IndexError(i)
        start = self.n + i * self.d
        return np.r_[np.arange(start, start + self.d), self.n + self.n * self.d + i]

    def blocks(self) -> list:
        return [np.arange(self.n)] + [self.neuron_block(i) for i in range(self.n)]


def _points(params: NetworkParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1 and (x.ndim == 0 or params.d > 1 or x.shape[0] == 1)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1) if single else x.reshape(-1, 1)
    if x.shape[1] != params.d:
        raise ValueError(f"points have dimension {x.shape[1]}, network expects {params.d}")
    return x, single


def preactivations(omega: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``omega_i . x_q + b_i`` with shape ``(N, n)``.

    Written as an explicit sum over the (small) input dimension so each entry
    is computed the same way regardless of batch shape.
    """
    z = np.multiply.outer(x[:, 0], omega[:, 0])
    z += b
    for k in range(1, x.shape[1]):
        z += np.multiply.outer(x[:, k], omega[:, k])
    return z


def evaluate(params: NetworkParams, x):
    """Network value at one point (scalar) or at an ``(N, d)`` batch (array)."""
    pts, single = _points(params, x)
    u = relu(preactivations(params.omega, params.b, pts)) @ params.a
    return float(u[0]) if single else u


def evaluate_gradient_x(params: NetworkParams, x):
    """Spatial gradient ``sum_i a_i omega_i relu'(omega_i . x + b_i)``."""
    pts, single = _points(params, x)
    s = relu_prime(preactivations(params.omega, params.b, pts))
    g = (s * params.a) @ params.omega
    return g[0] if single else g


def nodal_point(omega_i, b_i: float) -> float:
    """Kink location ``-b_i / omega_i`` of a 1D neuron."""
    w = float(np.asarray(omega_i, dtype=float).reshape(-1)[0])
    if np.asarray(omega_i).size != 1:
        raise ValueError("nodal points are defined for d = 1 only")
    if w == 0.0:
        raise DegenerateNeuronError("omega_i = 0: neuron has no nodal point")
    return -float(b_i) / w
