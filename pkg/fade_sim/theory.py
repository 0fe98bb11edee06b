# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Built-in oracle suites for the robustness diagnostics.

Each suite draws small synthetic instances from a seeded stream and checks a
closed form against an independent computation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .analysis import (
    AffineMap,
    QuadraticHead,
    epsilon_lower_bound,
    head_curvature,
    head_hessian,
    linf_equivalent,
    theorem1_empirical_check,
)
from .exceptions import StrongConvexityError
from .tensor import softmax
from .utils import stream

logger = logging.getLogger(__name__)

PASS, FAIL, VIOLATION = "pass", "fail", "violation"

# (g, mu, c) -> bound, evaluated by hand
BOUND_EXAMPLES = [((1.0, 2.0, 1.0), 0.5 + math.sqrt(1.25)), ((0.0, 1.0, 2.0), 2.0), ((0.0, 3.0, 0.0), 0.0)]


@dataclass
class CheckResult:
    suite: str
    instance: str
    status: str
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == FAIL


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _cross_entropy(w: np.ndarray, b: np.ndarray, z: np.ndarray, label: int) -> float:
    return float(-np.log(softmax(z @ w + b)[label]))


def _random_head(rng: np.random.Generator):
    k = int(rng.integers(2, 6))
    d = int(rng.integers(1, 9))
    return rng.normal(size=(d, k)), rng.normal(size=k), rng.normal(size=d), int(rng.integers(k))


def curvature_suite(seed: int, instances: int = 100, h: float = 1e-3, tolerance: float = 1e-3) -> List[CheckResult]:
    """Closed-form gradient and Hessian of a linear softmax head against central differences."""
    rng = stream(seed, "theory/curvature")
    results = []
    for i in range(instances):
        w, b, z, label = _random_head(rng)
        d = len(z)
        curve = head_curvature(w, b, z, label)
        eye = np.eye(d) * h
        fd_grad = np.array([(_cross_entropy(w, b, z + e, label) - _cross_entropy(w, b, z - e, label)) / (2 * h)
                            for e in eye])
        fd_hess = np.array([[(_cross_entropy(w, b, z + ei + ej, label) - _cross_entropy(w, b, z + ei - ej, label)
                              - _cross_entropy(w, b, z - ei + ej, label) + _cross_entropy(w, b, z - ei - ej, label))
                             / (4 * h * h) for ej in eye] for ei in eye])
        closed = head_hessian(w, z, b)
        errors = (_relative(curve.gradient, fd_grad), _relative(closed, fd_hess),
                  _relative(curve.eigenvalues, np.linalg.eigvalsh((fd_hess + fd_hess.T) / 2)))
        # Nearly saturated heads leave only round-off in both quantities
        ok = all(e < tolerance for e in errors) or np.abs(fd_hess).max() < 1e-6
        results.append(CheckResult("curvature", f"#{i} K={w.shape[1]} d={d}", PASS if ok else FAIL,
                                   f"rel err grad={errors[0]:.2e} hess={errors[1]:.2e} eig={errors[2]:.2e}"))
    return results


def scaling_suite(seed: int, instances: int = 100) -> List[CheckResult]:
    """At fixed softmax output, scaling W by s < 1 shrinks g and every nonzero eigenvalue."""
    rng = stream(seed, "theory/scaling")
    results = []
    for i in range(instances):
        w, b, z, label = _random_head(rng)
        s = float(rng.uniform(0.1, 0.95))
        base = head_curvature(w, b, z, label)
        # z / s keeps the logits, hence p, unchanged
        scaled = head_curvature(s * w, b, z / s, label)
        nonzero = base.eigenvalues > 1e-12 * max(base.beta_hat, 1.0)
        ok = (base.g == 0 or scaled.g < base.g) and bool(np.all(scaled.eigenvalues[nonzero] < base.eigenvalues[nonzero]))
        ok = ok and math.isclose(scaled.g, s * base.g, rel_tol=1e-9, abs_tol=1e-15)
        ok = ok and np.allclose(scaled.eigenvalues, s * s * base.eigenvalues, rtol=1e-8, atol=1e-15)
        results.append(CheckResult("scaling", f"#{i} s={s:.3f}", PASS if ok else FAIL,
                                   f"g {base.g:.4g}->{scaled.g:.4g}, beta {base.beta_hat:.4g}->{scaled.beta_hat:.4g}"))
    return results


def bound_suite(seed: int) -> List[CheckResult]:
    """Hand-evaluated bound values and monotonicity in g, mu and c."""
    results = []
    for (g, mu, c), expected in BOUND_EXAMPLES:
        value = epsilon_lower_bound(g, mu, c)
        ok = abs(value - expected) <= 1e-9
        results.append(CheckResult("bound", f"g={g:g} mu={mu:g} c={c:g}", PASS if ok else FAIL,
                                   f"{value:.9f} (expected {expected:.9f}, linf d=4: {linf_equivalent(value, 4):.6f})"))
    rng = stream(seed, "theory/bound")
    grid = np.sort(rng.uniform(0.01, 3.0, size=8))
    ok = True
    for base in grid:
        ok &= all(np.diff([epsilon_lower_bound(x, base, base) for x in grid]) >= 0)
        ok &= all(np.diff([epsilon_lower_bound(base, base, x) for x in grid]) >= 0)
        ok &= all(np.diff([epsilon_lower_bound(base, x, base) for x in grid]) <= 0)
    results.append(CheckResult("bound", "monotone sweep", PASS if ok else FAIL,
                               "nondecreasing in g, c; nonincreasing in mu"))
    return results


def _quadratic(rng: np.random.Generator, dim: int) -> QuadraticHead:
    r = rng.normal(size=(dim, dim))
    return QuadraticHead(q=r @ r.T + rng.uniform(0.2, 1.0) * np.eye(dim), center=rng.normal(size=dim))


def displacement_suite(seed: int, instances: int = 100, resolution: float = 1e-3,
                       tolerance: float = 1e-3) -> List[CheckResult]:
    """Brute-force feature displacement under the bound on random strongly convex instances."""
    rng = stream(seed, "theory/displacement")
    results = []
    # Linear module: the largest displacement is ||A||_2 * eps
    a = rng.normal(size=(2, 2))
    eps = 0.2
    report = theorem1_empirical_check(AffineMap(a, np.zeros(2)), _quadratic(rng, 2), rng.normal(size=2), eps,
                                      resolution, tolerance)
    expected = float(np.linalg.norm(a, 2)) * eps
    ok = abs(report.max_displacement - expected) <= 1e-3 and report.holds
    results.append(CheckResult("displacement", "linear operator norm", PASS if ok else FAIL,
                               f"grid {report.max_displacement:.6f} vs ||A|| eps {expected:.6f}"))
    for i in range(instances):
        dim_out = int(rng.integers(1, 4))
        module = AffineMap(rng.normal(size=(dim_out, 2)), rng.normal(size=dim_out) * 0.1, activation="tanh")
        eps = float(rng.uniform(0.0, 0.2))
        report = theorem1_empirical_check(module, _quadratic(rng, dim_out), rng.normal(size=2), eps,
                                          resolution, tolerance)
        results.append(CheckResult("displacement", f"#{i} eps={eps:.3f}", PASS if report.holds else FAIL,
                                   f"max disp {report.max_displacement:.5f} <= bound {report.bound:.5f}"))
    return results


def violation_instance() -> CheckResult:
    """A head with mu = 0 must surface as a strong-convexity violation."""
    head = QuadraticHead(q=np.diag([1.0, 0.0]), center=np.zeros(2))
    try:
        epsilon_lower_bound(1.0, head.mu, 0.5)
    except StrongConvexityError as e:
        return CheckResult("violation", "mu = 0", VIOLATION, str(e))
    return CheckResult("violation", "mu = 0", FAIL, "bound computed for a non strongly convex head")


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    "curvature": curvature_suite,
    "scaling": scaling_suite,
    "bound": bound_suite,
    "displacement": displacement_suite,
}


def run_suites(seed: int = 0, suites=None, instances: int = 100, inject_violation: bool = False) -> List[CheckResult]:
    """Run the named suites (all by default)."""
    results: List[CheckResult] = []
    for name in suites or list(SUITES):
        suite = SUITES[name]
        results.extend(suite(seed) if name == "bound" else suite(seed, instances))
        logger.debug(f"Theory suite {name} done")
    if inject_violation:
        results.append(violation_instance())
    return results
