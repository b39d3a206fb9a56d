"""Differentiable objective bundles and the analytic test landscapes.

Every landscape exposes analytic value/gradient/Hessian plus vectorized
batch evaluators; finite differences are used only for cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Vector = np.ndarray
Matrix = np.ndarray

# Finite-difference cross-checks and Lipschitz-hint estimation are confined
# to this box; experiment trajectories stay inside it.
TEST_REGION_HALF_WIDTH = 3.0


@dataclass(frozen=True)
class Objective:
    """Differentiable function bundle.

    Attributes
    ----------
    dim : int
        Domain dimension.
    value, grad : callables
        f(x) and its gradient.
    hess : callable or None
        Exact symmetric Hessian, when available.
    lipschitz_grad_hint : float or None
        Upper bound on the Hessian spectral norm over the region of
        interest; used for default step sizes.
    value_many, grad_many : callables or None
        Vectorized evaluation over an (m, dim) batch of points.
    normalized_trace_grad : callable or None
        Closed-form gradient of trace(hess(x)) / dim, when known.
    """

    dim: int
    value: Callable[[Vector], float]
    grad: Callable[[Vector], Vector]
    hess: Callable[[Vector], Matrix] | None = None
    lipschitz_grad_hint: float | None = None
    value_many: Callable[[Matrix], Vector] | None = None
    grad_many: Callable[[Matrix], Matrix] | None = None
    normalized_trace_grad: Callable[[Vector], Vector] | None = None
    name: str = ""


@dataclass(frozen=True)
class SampleSumObjective:
    """Training loss of the form f(x) = (1/n) * sum_i loss(p_i(x), y_i).

    ``sample_*`` callables address the per-sample losses f_i; ``pred_grad``
    is the gradient of the model output p_i.
    """

    base: Objective
    n: int
    sample_value: Callable[[int, Vector], float]
    sample_grad: Callable[[int, Vector], Vector]
    sample_hess: Callable[[int, Vector], Matrix] | None = None
    pred_grad: Callable[[int, Vector], Vector] | None = None

    @property
    def dim(self) -> int:
        return self.base.dim


@dataclass(frozen=True)
class LandscapeSpec:
    """Serializable description of a test landscape (kind + flat params)."""

    kind: str
    params: dict = field(default_factory=dict)

    def build(self):
        return build_landscape(self)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @staticmethod
    def from_dict(data: dict) -> "LandscapeSpec":
        data = dict(data)
        try:
            kind = data.pop("kind")
        except KeyError:
            raise ValueError("landscape config requires a 'kind' field") from None
        if kind not in _BUILDERS:
            raise ValueError(f"unknown landscape kind {kind!r}; known: {sorted(_BUILDERS)}")
        return LandscapeSpec(kind=kind, params=data)


# Lipschitz hints are estimated once per landscape configuration.
_BETA_HINT_CACHE: dict = {}


def _grid_spectral_sup(hess: Callable[[Vector], Matrix], dim: int, half_width: float, n_grid: int = 61) -> float:
    """Max Hessian spectral norm over a grid on [-w, w]^dim (dim == 2 only)."""
    axis = np.linspace(-half_width, half_width, n_grid)
    xs, ys = np.meshgrid(axis, axis)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    mats = np.stack([hess(p) for p in pts])
    return float(np.abs(np.linalg.eigvalsh(mats)).max())


def build_hyperbola() -> Objective:
    """Two-dimensional product landscape f(x1, x2) = (x1*x2 - 1)^2.

    Minima form the hyperbola {x1*x2 = 1}; the normalized Hessian trace is
    x1^2 + x2^2 everywhere, minimized on the manifold at (1, 1) and (-1, -1).
    """

    def value(x):
        return float((x[0] * x[1] - 1.0) ** 2)

    def grad(x):
        r = x[0] * x[1] - 1.0
        return np.array([2.0 * r * x[1], 2.0 * r * x[0]])

    def hess(x):
        off = 4.0 * x[0] * x[1] - 2.0
        return np.array([[2.0 * x[1] ** 2, off], [off, 2.0 * x[0] ** 2]])

    def value_many(X):
        r = X[:, 0] * X[:, 1] - 1.0
        return r**2

    def grad_many(X):
        r = 2.0 * (X[:, 0] * X[:, 1] - 1.0)
        return np.stack([r * X[:, 1], r * X[:, 0]], axis=1)

    def trace_grad(x):
        return np.array([2.0 * x[0], 2.0 * x[1]])

    key = ("hyperbola",)
    if key not in _BETA_HINT_CACHE:
        _BETA_HINT_CACHE[key] = _grid_spectral_sup(hess, 2, TEST_REGION_HALF_WIDTH)
    return Objective(
        dim=2,
        value=value,
        grad=grad,
        hess=hess,
        lipschitz_grad_hint=_BETA_HINT_CACHE[key],
        value_many=value_many,
        grad_many=grad_many,
        normalized_trace_grad=trace_grad,
        name="hyperbola",
    )


def build_convex_quadratic(eigenvalues) -> Objective:
    """f(x) = 0.5 * x^T diag(eigenvalues) x with a unique minimum at 0."""
    eig = np.asarray(eigenvalues, dtype=float)
    if eig.ndim != 1 or eig.size == 0:
        raise ValueError("eigenvalues must be a nonempty 1-d sequence")
    if np.any(eig <= 0.0):
        raise ValueError(f"eigenvalues must be positive, got {eig.tolist()}")
    d = eig.size
    D = np.diag(eig)

    def value(x):
        return float(0.5 * np.dot(x, eig * x))

    def grad(x):
        return eig * np.asarray(x, dtype=float)

    def hess(x):
        return D.copy()

    def value_many(X):
        return 0.5 * (X**2 @ eig)

    def grad_many(X):
        return X * eig

    def trace_grad(x):
        return np.zeros(d)

    return Objective(
        dim=d,
        value=value,
        grad=grad,
        hess=hess,
        lipschitz_grad_hint=float(eig.max()),
        value_many=value_many,
        grad_many=grad_many,
        normalized_trace_grad=trace_grad,
        name="convex_quadratic",
    )


def build_scalar_factorization(a, c: float) -> SampleSumObjective:
    """Two-parameter factorization loss f(u, v) = (1/n) sum_i (a_i*u*v - c*a_i)^2.

    Per-sample prediction p_i(u, v) = a_i*u*v with label y_i = c*a_i and squared
    loss. Minima form {u*v = c}; with n=1, a=(1,), c=1 this is exactly the
    hyperbola landscape.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("a must be a nonempty 1-d sequence")
    if np.any(a == 0.0):
        raise ValueError("all data values a_i must be nonzero")
    c = float(c)
    n = a.size
    m2 = float(np.mean(a**2))

    def value(x):
        return m2 * float((x[0] * x[1] - c) ** 2)

    def grad(x):
        r = 2.0 * m2 * (x[0] * x[1] - c)
        return np.array([r * x[1], r * x[0]])

    def hess(x):
        off = 2.0 * m2 * (2.0 * x[0] * x[1] - c)
        return np.array([[2.0 * m2 * x[1] ** 2, off], [off, 2.0 * m2 * x[0] ** 2]])

    def value_many(X):
        r = X[:, 0] * X[:, 1] - c
        return m2 * r**2

    def grad_many(X):
        r = 2.0 * m2 * (X[:, 0] * X[:, 1] - c)
        return np.stack([r * X[:, 1], r * X[:, 0]], axis=1)

    def trace_grad(x):
        return np.array([2.0 * m2 * x[0], 2.0 * m2 * x[1]])

    def sample_value(i, x):
        return float(a[i] ** 2 * (x[0] * x[1] - c) ** 2)

    def sample_grad(i, x):
        r = 2.0 * a[i] ** 2 * (x[0] * x[1] - c)
        return np.array([r * x[1], r * x[0]])

    def sample_hess(i, x):
        s = 2.0 * a[i] ** 2
        off = s * (2.0 * x[0] * x[1] - c)
        return np.array([[s * x[1] ** 2, off], [off, s * x[0] ** 2]])

    def pred_grad(i, x):
        return np.array([a[i] * x[1], a[i] * x[0]])

    key = ("scalar_factorization", tuple(a.tolist()), c)
    if key not in _BETA_HINT_CACHE:
        _BETA_HINT_CACHE[key] = _grid_spectral_sup(hess, 2, TEST_REGION_HALF_WIDTH)
    base = Objective(
        dim=2,
        value=value,
        grad=grad,
        hess=hess,
        lipschitz_grad_hint=_BETA_HINT_CACHE[key],
        value_many=value_many,
        grad_many=grad_many,
        normalized_trace_grad=trace_grad,
        name="scalar_factorization",
    )
    return SampleSumObjective(
        base=base,
        n=n,
        sample_value=sample_value,
        sample_grad=sample_grad,
        sample_hess=sample_hess,
        pred_grad=pred_grad,
    )


def build_orthogonal_quadratic_model(d: int, n: int, y) -> SampleSumObjective:
    """Sample-sum model with orthogonal prediction gradients.

    Predictions p_i(x) = 0.5 * <e_i, x>^2 against the first n standard basis
    vectors, labels y_i > 0, and loss 0.5 * (z - y)^2. At any global minimum
    x* (so <e_i, x*>^2 = 2*y_i) the prediction gradients are mutually
    orthogonal and the full Hessian is (1/n) sum_i 2*y_i e_i e_i^T.
    """
    y = np.asarray(y, dtype=float)
    if not (1 <= n <= d):
        raise ValueError(f"need 1 <= n <= d, got n={n}, d={d}")
    if y.shape != (n,):
        raise ValueError(f"y must have length n={n}, got shape {y.shape}")
    if np.any(y <= 0.0):
        raise ValueError("labels y_i must be positive")

    def preds(x):
        return 0.5 * np.asarray(x[:n], dtype=float) ** 2

    def value(x):
        return float(np.mean(0.5 * (preds(x) - y) ** 2))

    def grad(x):
        out = np.zeros(d)
        out[:n] = (preds(x) - y) * np.asarray(x[:n], dtype=float) / n
        return out

    def hess(x):
        s2 = np.asarray(x[:n], dtype=float) ** 2
        diag = np.zeros(d)
        diag[:n] = (1.5 * s2 - y) / n
        return np.diag(diag)

    def value_many(X):
        P = 0.5 * X[:, :n] ** 2
        return np.mean(0.5 * (P - y) ** 2, axis=1)

    def grad_many(X):
        out = np.zeros_like(X)
        out[:, :n] = (0.5 * X[:, :n] ** 2 - y) * X[:, :n] / n
        return out

    def trace_grad(x):
        out = np.zeros(d)
        out[:n] = 3.0 * np.asarray(x[:n], dtype=float) / (n * d)
        return out

    def sample_value(i, x):
        p = 0.5 * float(x[i]) ** 2
        return 0.5 * (p - y[i]) ** 2

    def sample_grad(i, x):
        p = 0.5 * float(x[i]) ** 2
        out = np.zeros(d)
        out[i] = (p - y[i]) * float(x[i])
        return out

    def sample_hess(i, x):
        out = np.zeros((d, d))
        out[i, i] = 1.5 * float(x[i]) ** 2 - y[i]
        return out

    def pred_grad(i, x):
        out = np.zeros(d)
        out[i] = float(x[i])
        return out

    # Spectral norm over [-w, w]^d is attained coordinate-wise.
    w2 = TEST_REGION_HALF_WIDTH**2
    beta = float(max(max(1.5 * w2 - yi, yi) for yi in y) / n)
    base = Objective(
        dim=d,
        value=value,
        grad=grad,
        hess=hess,
        lipschitz_grad_hint=beta,
        value_many=value_many,
        grad_many=grad_many,
        normalized_trace_grad=trace_grad,
        name="orthogonal_quadratic_model",
    )
    return SampleSumObjective(
        base=base,
        n=n,
        sample_value=sample_value,
        sample_grad=sample_grad,
        sample_hess=sample_hess,
        pred_grad=pred_grad,
    )


_BUILDERS = {
    "hyperbola": lambda p: build_hyperbola(),
    "convex_quadratic": lambda p: build_convex_quadratic(p["eigenvalues"]),
    "scalar_factorization": lambda p: build_scalar_factorization(p["a"], p["c"]),
    "orthogonal_quadratic_model": lambda p: build_orthogonal_quadratic_model(
        int(p["d"]), int(p["n"]), p["y"]
    ),
}


def build_landscape(spec: LandscapeSpec):
    """Construct the Objective / SampleSumObjective described by ``spec``."""
    if spec.kind not in _BUILDERS:
        raise ValueError(f"unknown landscape kind {spec.kind!r}; known: {sorted(_BUILDERS)}")
    try:
        return _BUILDERS[spec.kind](spec.params)
    except KeyError as exc:
        raise ValueError(f"landscape {spec.kind!r} missing parameter {exc}") from None


def canonical_minimum(spec: LandscapeSpec) -> np.ndarray:
    """An analytically-known global minimum of the landscape (ground truth)."""
    if spec.kind == "hyperbola":
        return np.array([1.0, 1.0])
    if spec.kind == "convex_quadratic":
        return np.zeros(len(spec.params["eigenvalues"]))
    if spec.kind == "scalar_factorization":
        c = float(spec.params["c"])
        s = np.sqrt(abs(c)) if c != 0 else 1.0
        return np.array([s, c / s])
    if spec.kind == "orthogonal_quadratic_model":
        d = int(spec.params["d"])
        n = int(spec.params["n"])
        y = np.asarray(spec.params["y"], dtype=float)
        out = np.zeros(d)
        out[:n] = np.sqrt(2.0 * y)
        return out
    raise ValueError(f"unknown landscape kind {spec.kind!r}")


def base_of(obj) -> Objective:
    """The full-loss Objective behind either objective flavor."""
    return obj.base if isinstance(obj, SampleSumObjective) else obj
