"""Shared geometric primitives: projection, sphere sampling, trace, finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Below this norm a projection direction is treated as degenerate and the
# projection becomes the identity (the operator is undefined at exact
# stationary points; identity preserves the perturbation estimator there).
U_TOL = 1e-12


class NonFiniteValueError(ValueError):
    """A probed function value was NaN or infinite."""

    def __init__(self, message: str, point: np.ndarray):
        super().__init__(message)
        self.point = np.asarray(point, dtype=float)


@dataclass
class RngStream:
    """Seeded, counter-addressed random stream.

    Identical (seed, stream) pairs reproduce the identical draw sequence
    across runs and platforms. Distinct streams derived from the same seed
    are statistically independent; one stream must never be shared between
    concurrent consumers.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, stream: int) -> "RngStream":
        """Fresh stream with the same seed and a new counter."""
        return RngStream(seed=self.seed, stream=stream)

    # Thin draw helpers so callers never touch the generator's full surface.
    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, low: int, high: int) -> int:
        return int(self.generator.integers(low, high))

    def sign(self) -> float:
        """Uniform draw from {-1.0, +1.0}."""
        return 1.0 if self.generator.integers(0, 2) == 1 else -1.0


def proj_out(u: np.ndarray, v: np.ndarray, u_tol: float = U_TOL) -> np.ndarray:
    """Remove from ``v`` its component along ``u``.

    Returns ``v`` unchanged when ``norm(u) <= u_tol`` (degenerate direction).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    if nu <= u_tol:
        return v.copy()
    uhat = u / nu
    return v - np.dot(uhat, v) * uhat


def proj_out_rows(u: np.ndarray, V: np.ndarray, u_tol: float = U_TOL) -> np.ndarray:
    """Row-wise ``proj_out`` for a batch ``V`` of shape (m, d)."""
    u = np.asarray(u, dtype=float)
    V = np.asarray(V, dtype=float)
    nu = float(np.linalg.norm(u))
    if nu <= u_tol:
        return V.copy()
    uhat = u / nu
    return V - np.outer(V @ uhat, uhat)


def sample_sphere(d: int, rng: RngStream) -> np.ndarray:
    """Uniform draw from the unit sphere in R^d (normalized Gaussian)."""
    if d < 1:
        raise ValueError(f"sphere dimension must be >= 1, got {d}")
    while True:
        g = rng.normal(d)
        n = float(np.linalg.norm(g))
        if n > 0.0:
            return g / n


def sample_sphere_batch(d: int, m: int, rng: RngStream) -> np.ndarray:
    """(m, d) array of independent uniform unit vectors."""
    if d < 1:
        raise ValueError(f"sphere dimension must be >= 1, got {d}")
    G = rng.normal((m, d))
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    # A zero Gaussian row has probability zero; redraw defensively.
    bad = np.nonzero(norms[:, 0] == 0.0)[0]
    for i in bad:
        G[i] = sample_sphere(d, rng)
        norms[i, 0] = 1.0
    return G / norms


def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Raises :class:`NonFiniteValueError` (carrying the probe point) if any
    probed value is not finite.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = float(fn(x + e))
        fm = float(fn(x - e))
        if not np.isfinite(fp):
            raise NonFiniteValueError("non-finite value at forward probe", x + e)
        if not np.isfinite(fm):
            raise NonFiniteValueError("non-finite value at backward probe", x - e)
        out[j] = (fp - fm) / (2.0 * h)
    return out


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """Column-wise central-difference Jacobian of a vector map."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2.0 * h))
    return np.stack(cols, axis=1)


def normalized_trace(obj, x: np.ndarray, fd_step: float = 1e-5) -> float:
    """Trace of the Hessian of ``obj`` at ``x`` divided by the dimension.

    Uses the exact Hessian when the objective provides one, otherwise falls
    back to central differences of the gradient along each basis direction
    (d gradient pairs).
    """
    x = np.asarray(x, dtype=float)
    if obj.hess is not None:
        return float(np.trace(obj.hess(x))) / obj.dim
    acc = 0.0
    for j in range(obj.dim):
        e = np.zeros(obj.dim)
        e[j] = fd_step
        gp = obj.grad(x + e)
        gm = obj.grad(x - e)
        acc += (float(gp[j]) - float(gm[j])) / (2.0 * fd_step)
    return acc / obj.dim
