"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from flatmin import LandscapeSpec, SampleRegion, build_landscape

#: Landscape specs with exact Hessians, used by the derivative cross-checks.
ALL_LANDSCAPE_SPECS = [
    LandscapeSpec("hyperbola"),
    LandscapeSpec("convex_quadratic", {"eigenvalues": [1.0, 1.0]}),
    LandscapeSpec("convex_quadratic", {"eigenvalues": [2.0, 4.0, 0.5]}),
    LandscapeSpec("scalar_factorization", {"a": [1.0, 2.0], "c": 1.0}),
    LandscapeSpec("scalar_factorization", {"a": [1.0, 0.7, 1.3, 1.6], "c": 1.0}),
    LandscapeSpec("orthogonal_quadratic_model", {"d": 6, "n": 3, "y": [0.5, 1.0, 2.0]}),
]


def base_objective(spec: LandscapeSpec):
    obj = build_landscape(spec)
    return obj.base if hasattr(obj, "base") else obj


def random_points(d: int, n: int, seed: int, half_width: float = 3.0) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(seed))
    return gen.uniform(-half_width, half_width, size=(n, d))


def hyperbola_manifold_point(s: float) -> np.ndarray:
    return np.array([s, 1.0 / s])


def hyperbola_tube_region(max_dist: float = 0.1) -> SampleRegion:
    """Points within ``max_dist`` of the hyperbola manifold, |x1| in [0.5, 2]."""

    def near(p: np.ndarray) -> bool:
        u, v = p
        return 0.5 <= abs(u) <= 2.0 and abs(u * v - 1.0) / np.hypot(u, v) <= max_dist

    return SampleRegion(low=(-2.2, -2.2), high=(2.2, 2.2), predicate=near, axis_probes=False)


def near_manifold_points(n: int, seed: int, offset: float = 1e-2) -> np.ndarray:
    """Points a small normal offset away from the hyperbola manifold."""
    gen = np.random.Generator(np.random.PCG64(seed))
    pts = []
    for _ in range(n):
        s = float(gen.uniform(0.65, 1.7))
        base = np.array([s, 1.0 / s])
        normal = np.array([1.0 / s, s]) / np.hypot(1.0 / s, s)
        pts.append(base + float(gen.uniform(-1.0, 1.0)) * offset * normal)
    return np.stack(pts)
