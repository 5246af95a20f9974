"""Multifidelity synthetic benchmarks and the brute-force ground-truth oracle.

Every evaluator takes an ``(m, d)`` array of design points and a scalar
fidelity and returns an ``(m,)`` array.  For the two 2-d problems the
reference failure probabilities correspond to the region ``f >= 0``, so
their limit states use ``rho = -1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from camera.acquisition import CostModel
from camera.errors import DomainViolation
from camera.fpe import FailureEstimate, mc_estimate
from camera.mfgp import Domain, LimitState


def _check(x, s, lower, upper):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not 0.0 <= float(s) <= 1.0:
        raise DomainViolation(f"fidelity {s} outside [0, 1]")
    tol = 1e-12 * np.maximum(1.0, np.abs(np.asarray(upper, dtype=float)))
    if np.any(x < np.asarray(lower) - tol) or np.any(x > np.asarray(upper) + tol):
        raise DomainViolation("design point outside the benchmark domain")
    return x


def multimodal(x, s):
    """2-d multimodal function with a fidelity-scaled sine term."""
    x = _check(x, s, [-4.0, -3.0], [7.0, 8.0])
    x1, x2 = x[:, 0], x[:, 1]
    return (x1 ** 2 + 4.0) * (x2 - 1.0) / 20.0 - s * np.sin(2.5 * x1) - 2.0


def _four_branches_base(xp):
    a, b = xp[:, 0], xp[:, 1]
    q = 3.0 + 0.1 * (a - b) ** 2
    t = (a + b) / math.sqrt(2.0)
    k = 7.0 / math.sqrt(2.0)
    return np.minimum(np.minimum(q - t, q + t), np.minimum(a - b + k, b - a + k))


def four_branches(x, s):
    """Four-branch system translated by ``5 s`` along both axes."""
    x = _check(x, s, [-8.0, -8.0], [8.0, 8.0])
    return _four_branches_base(x - 5.0 * float(s))


def ishigami_mf(x, s):
    x = _check(x, s, [-math.pi] * 3, [math.pi] * 3)
    x1 = x[:, 0] - s
    x2 = x[:, 1] - s
    return np.sin(x1) + 7.0 * np.sin(x2) ** 2 + 0.1 * x[:, 2] ** 4 * np.sin(x1)


HARTMANN_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
HARTMANN_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN_BETA = np.array([1.0, 1.2, 3.0, 3.2])


def hartmann6_mf(x, s):
    """Augmented Hartmann-6: only the first coefficient depends on fidelity."""
    x = _check(x, s, [0.0] * 6, [1.0] * 6)
    e = np.exp(-(HARTMANN_A * (x[:, None, :] - HARTMANN_P) ** 2).sum(-1))
    beta = HARTMANN_BETA.copy()
    beta[0] -= 0.1 * (1.0 - float(s))
    return -(e * beta).sum(1)


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    domain: Domain
    evaluator: Callable
    limit: LimitState
    cost: CostModel
    true_pf: float | None = None
    true_pf_note: str = ""

    @property
    def dim(self):
        return self.domain.dim


def _problems(cost):
    return {
        "multimodal": BenchmarkProblem(
            "multimodal", Domain([-4.0, -3.0], [7.0, 8.0]), multimodal, LimitState(-1.0, 0.0), cost,
            0.30215, "reference value, uniform MC with 1e6 samples at s=1"),
        "four-branches": BenchmarkProblem(
            "four-branches", Domain([-8.0, -8.0], [8.0, 8.0]), four_branches, LimitState(-1.0, 0.0), cost,
            0.1689, "reference value, uniform MC with 1e6 samples at s=1"),
        "ishigami": BenchmarkProblem(
            "ishigami", Domain([-math.pi] * 3, [math.pi] * 3), ishigami_mf, LimitState(1.0, -9.0), cost,
            0.0011, "reference value, uniform MC with 1e6 samples at s=1"),
        "hartmann6": BenchmarkProblem(
            "hartmann6", Domain([0.0] * 6, [1.0] * 6), hartmann6_mf, LimitState(1.0, -2.0), cost,
            0.00737, "reference value, uniform MC with 1e6 samples at s=1"),
    }


PROBLEM_NAMES = ("multimodal", "four-branches", "ishigami", "hartmann6")


def get_problem(name: str, cost: CostModel | None = None) -> BenchmarkProblem:
    probs = _problems(cost or CostModel())
    key = name.replace("_", "-").lower()
    if key == "hartmann":
        key = "hartmann6"
    if key not in probs:
        raise KeyError(f"unknown problem {name!r}; choose from {', '.join(PROBLEM_NAMES)}")
    return probs[key]


def brute_force_pf(problem: BenchmarkProblem, n: int = 10**6, seed: int = 0, chunk: int = 250_000) -> FailureEstimate:
    """Uniform Monte Carlo at the highest fidelity."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    hits = np.empty(n, dtype=bool)
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        X = problem.domain.sample_uniform(m, rng)
        hits[lo:lo + m] = problem.limit.fails(problem.evaluator(X, 1.0))
    return mc_estimate(hits)
