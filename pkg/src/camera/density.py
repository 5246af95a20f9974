"""Nominal input densities and diagonal Gaussian mixtures fitted by EM."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from camera.errors import DegenerateSamples

VAR_FLOOR_REL = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ll_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if w.ndim != 1 or m.shape != v.shape or m.shape[0] != w.size:
            raise ValueError("weights (K,), means (K, d) and variances (K, d) must agree")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def to_json(self):
        return json.dumps({"weights": self.weights.tolist(), "means": self.means.tolist(),
                           "variances": self.variances.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["weights"], d["means"], d["variances"])


def _component_logpdf(X, means, variances):
    # (n, K) log N(x; m_k, diag v_k), quadratic form expanded into matrix products
    X = np.atleast_2d(X)
    prec = 1.0 / variances
    quad = (X * X) @ prec.T - 2.0 * X @ (means * prec).T + (means * means * prec).sum(1)
    quad = np.maximum(quad, 0.0)
    logdet = np.log(variances).sum(1)
    return -0.5 * (quad + logdet + X.shape[1] * _LOG_2PI)


def gmm_logpdf(g: GaussianMixture, x):
    """Log density, stable via log-sum-exp; scalar for one point, array for many."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == g.dim)
    X = x.reshape(1, -1) if single else (x.reshape(-1, 1) if x.ndim == 1 else x)
    with np.errstate(divide="ignore"):
        lw = np.log(g.weights)
    out = logsumexp(_component_logpdf(X, g.means, g.variances) + lw, axis=1)
    return float(out[0]) if single else out


def gmm_sample(g: GaussianMixture, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    comp = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    return g.means[comp] + z * np.sqrt(g.variances[comp])


def _kmeanspp(X, K, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / tot)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def em_fit(samples, K: int = 25, seed=0, max_iters: int = 500, tol: float = 1e-6, scale=None) -> GaussianMixture:
    """Fit a diagonal-covariance mixture by expectation maximization.

    Initial means come from k-means++ seeding drawn with ``seed``; the result
    is deterministic for a given (seed, sample order).  Variances are floored
    at ``1e-10 * scale**2`` per dimension, where ``scale`` defaults to the
    sample range.  Iteration stops once the average log-likelihood gains
    less than ``tol``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no samples to fit")
    n, d = X.shape
    if scale is None:
        scale = np.ptp(X, axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    floor = VAR_FLOOR_REL * np.asarray(scale, dtype=float) ** 2 * np.ones(d)

    if np.all(X == X[0]):
        warnings.warn(DegenerateSamples("all samples identical; returning a point-mass component"))
        return GaussianMixture(np.ones(1), X[:1].copy(), floor[None, :].copy())

    K = int(min(K, n))
    rng = np.random.default_rng(seed)
    means = _kmeanspp(X, K, rng)
    variances = np.tile(np.maximum(X.var(0), floor), (K, 1))
    weights = np.full(K, 1.0 / K)

    history = []
    prev = -np.inf
    for _ in range(max_iters):
        with np.errstate(divide="ignore"):
            resp = _component_logpdf(X, means, variances) + np.log(weights)
        # log-sum-exp and responsibilities from a single exponentiation
        top = resp.max(axis=1, keepdims=True)
        resp -= top
        np.exp(resp, out=resp)
        tot = resp.sum(axis=1)
        avg = float((np.log(tot) + top[:, 0]).mean())
        history.append(avg)
        if avg - prev < tol:
            break
        prev = avg
        resp /= tot[:, None]
        nk = resp.sum(0)
        live = nk > 1e-10 * n
        weights = nk / n
        new_means = (resp.T @ X) / np.where(live, nk, 1.0)[:, None]
        new_var = (resp.T @ (X * X)) / np.where(live, nk, 1.0)[:, None] - new_means ** 2
        means = np.where(live[:, None], new_means, means)
        variances = np.where(live[:, None], np.maximum(new_var, floor), variances)
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, variances, tuple(history))


_DISTS = {"uniform", "norm", "lognorm", "truncnorm", "beta", "gumbel_r", "gumbel_l", "weibull_min"}


@dataclass(frozen=True)
class NominalDensity:
    """Input density: uniform on the domain, or a product of 1-d scipy laws.

    ``marginals`` entries look like ``{"dist": "norm", "loc": 0, "scale": 1}``.
    """

    domain: object
    marginals: tuple | None = None

    def __post_init__(self):
        if self.marginals is not None:
            if len(self.marginals) != self.domain.dim:
                raise ValueError("need one marginal per design dimension")
            for m in self.marginals:
                if m.get("dist") not in _DISTS:
                    raise ValueError(f"unsupported marginal {m.get('dist')!r}")

    @property
    def kind(self):
        return "uniform" if self.marginals is None else "product"

    def _frozen(self):
        out = []
        for m in self.marginals:
            kw = {k: v for k, v in m.items() if k != "dist"}
            out.append(getattr(stats, m["dist"])(**kw))
        return out

    def logpdf(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.marginals is None:
            inside = self.domain.contains(X)
            return np.where(inside, -math.log(self.domain.volume), -np.inf)
        return sum(f.logpdf(X[:, i]) for i, f in enumerate(self._frozen()))

    def sample(self, n, rng):
        if self.marginals is None:
            return self.domain.sample_uniform(n, rng)
        return np.column_stack([f.rvs(size=n, random_state=rng) for f in self._frozen()])

    def to_dict(self):
        return {"kind": self.kind, "marginals": None if self.marginals is None else list(self.marginals)}
