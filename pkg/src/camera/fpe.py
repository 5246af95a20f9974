"""Monte Carlo and importance-sampling failure-probability estimators.

The biasing density is a Gaussian mixture fitted to design points that the
surrogate mean predicts to fail at the highest fidelity.  Indicators in the
final estimate always come from the true highest-fidelity model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from camera.density import GaussianMixture, NominalDensity, em_fit, gmm_logpdf, gmm_sample
from camera.errors import EmptyFailureRegion, EmptySample, EvaluationError, NonFiniteWeight


@dataclass(frozen=True)
class FailureEstimate:
    p_hat: float
    variance: float
    n_samples: int
    cumulative_cost: float = 0.0

    @property
    def std(self):
        return math.sqrt(max(self.variance, 0.0))

    def relative_error(self, truth):
        return abs(self.p_hat - truth) / truth

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BiasingSet:
    points: np.ndarray
    M: int
    pool_size: int
    fallback: bool = False


def mc_estimate(indicator_values) -> FailureEstimate:
    ind = np.asarray(indicator_values, dtype=float).ravel()
    if ind.size == 0:
        raise EmptySample("no samples")
    p = float(ind.mean())
    return FailureEstimate(p, p * (1.0 - p) / ind.size, int(ind.size))


def is_estimate(indicators, log_q, log_qprime) -> FailureEstimate:
    """Importance-sampling estimate with weights ``exp(log_q - log_qprime)``."""
    ind = np.asarray(indicators, dtype=float).ravel()
    lq = np.asarray(log_q, dtype=float).ravel()
    lqp = np.asarray(log_qprime, dtype=float).ravel()
    if not (ind.size == lq.size == lqp.size):
        raise ValueError("indicators and log densities must have equal length")
    if ind.size == 0:
        raise EmptySample("no samples")
    with np.errstate(invalid="ignore", over="ignore"):
        w = np.exp(lq - lqp)
    bad = ~np.isfinite(w)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteWeight(f"importance weight at sample {i} is {w[i]} (biasing density has no support there)")
    if np.all(w == 1.0):
        return mc_estimate(ind)
    v = ind * w
    p = float(v.mean())
    var = float(np.mean((v - p) ** 2)) / ind.size
    return FailureEstimate(p, var, int(ind.size))


def _evaluate(evaluator, X, s):
    try:
        return np.asarray(evaluator(X, s), dtype=float)
    except Exception as exc:
        for x in X:
            try:
                evaluator(x[None, :], s)
            except Exception as inner:
                raise EvaluationError(f"evaluator failed at x={x.tolist()}, s={s}: {inner}", x, s) from inner
        raise EvaluationError(f"evaluator failed: {exc}") from exc


def _seedseq(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def build_biasing_set(model, domain, limit, pool_size=10**7, seed=0, pool_fraction=1e-3, chunk=100_000) -> BiasingSet:
    """Uniform pool over X filtered by ``rho * mu(x, 1) - a <= 0``.

    When nothing is predicted to fail, keeps the ``pool_fraction`` of the
    pool with the smallest predicted limit state instead.
    """
    rng = np.random.default_rng(seed)
    keep = []
    n_keep_fb = max(1, int(round(pool_fraction * pool_size)))
    fb_X = np.empty((0, domain.dim))
    fb_g = np.empty(0)
    done = 0
    while done < pool_size:
        m = min(chunk, pool_size - done)
        X = domain.sample_uniform(m, rng)
        g = limit.g(model.predict_mean(X, 1.0))
        keep.append(X[g <= 0.0])
        if not any(k.shape[0] for k in keep):
            fb_X = np.vstack([fb_X, X])
            fb_g = np.append(fb_g, g)
            if fb_g.size > n_keep_fb:
                idx = np.argpartition(fb_g, n_keep_fb - 1)[:n_keep_fb]
                fb_X, fb_g = fb_X[idx], fb_g[idx]
        done += m
    pts = np.vstack(keep)
    if pts.shape[0] == 0:
        warnings.warn(EmptyFailureRegion("surrogate predicts no failure in the pool; "
                                         f"fitting on the {n_keep_fb} lowest-margin points"))
        order = np.argsort(fb_g, kind="stable")
        return BiasingSet(fb_X[order], int(fb_X.shape[0]), pool_size, fallback=True)
    return BiasingSet(pts, int(pts.shape[0]), pool_size)


def build_biasing(model, domain, limit, pool_size=10**7, K=25, seed=0, max_fit=None,
                  pool_fraction=1e-3) -> GaussianMixture:
    """Gaussian-mixture biasing density over the predicted failure region.

    ``max_fit`` caps the number of filtered points handed to EM (a random
    subset is used); ``None`` fits on all of them.
    """
    ss = _seedseq(seed).spawn(3)
    bset = build_biasing_set(model, domain, limit, pool_size, ss[0], pool_fraction)
    pts = bset.points
    if max_fit is not None and pts.shape[0] > max_fit:
        idx = np.random.default_rng(ss[1]).choice(pts.shape[0], size=max_fit, replace=False)
        pts = pts[np.sort(idx)]
    return em_fit(pts, K, seed=ss[2], scale=domain.side)


def estimate_with_mixture(mixture, evaluator, domain, limit, nominal: NominalDensity, N, seed, unit_cost=0.0,
                          base_cost=0.0) -> FailureEstimate:
    """IS estimate from ``N`` draws of ``mixture`` scored on the true model at s = 1.

    Draws outside the nominal support carry zero weight and are not evaluated.
    """
    X = gmm_sample(mixture, N, seed)
    log_q = nominal.logpdf(X)
    log_qp = gmm_logpdf(mixture, X)
    inside = np.isfinite(log_q)
    ind = np.zeros(N)
    if inside.any():
        f = _evaluate(evaluator, X[inside], 1.0)
        ind[inside] = limit.fails(f)
    log_q = np.where(inside, log_q, -np.inf)
    est = is_estimate(ind, log_q, log_qp)
    return FailureEstimate(est.p_hat, est.variance, est.n_samples, base_cost + N * unit_cost)


def estimate_failure_probability(model, evaluator, domain, limit, nominal, N=1000, seed=0, pool_size=10**7, K=25,
                                 unit_cost=0.0, base_cost=0.0, max_fit=None):
    """Build the biasing mixture from ``model`` and return (estimate, mixture)."""
    s_bias, s_draw = _seedseq(seed).spawn(2)
    mixture = build_biasing(model, domain, limit, pool_size, K, s_bias, max_fit=max_fit)
    est = estimate_with_mixture(mixture, evaluator, domain, limit, nominal, N, s_draw, unit_cost, base_cost)
    return est, mixture
