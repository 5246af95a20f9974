"""Multifidelity Gaussian-process regression over the joint (x, s) space.

The covariance is a product of anisotropic Matern-5/2 correlations in the
design coordinates and in the fidelity coordinate.  Observations are
noise-free; a small relative jitter is added only to keep the Cholesky
factorization stable.  Design coordinates are mapped to the unit cube before
any kernel evaluation, so fitted length scales are expressed in unit-cube
units while every public method takes and returns problem units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from camera.errors import DomainViolation, DuplicatePoint, InsufficientData, SingularKernel

SQRT5 = math.sqrt(5.0)

# Relative jitter ladder (multiples of the signal variance).
JITTER_START = 1e-10
JITTER_MAX = 1e-4

LENGTH_BOUNDS = (1e-2, 1e2)
VARIANCE_BOUNDS = (1e-4, 1e4)

SERIAL_VERSION = 1


@dataclass(frozen=True, eq=False)
class Domain:
    """Box design space plus a continuous or discrete fidelity space."""

    lower: np.ndarray
    upper: np.ndarray
    fidelities: tuple | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.fidelities is not None:
            fids = tuple(float(v) for v in self.fidelities)
            if not fids:
                raise ValueError("discrete fidelity set is empty")
            if list(fids) != sorted(set(fids)):
                raise ValueError("discrete fidelities must be sorted and unique")
            if fids[0] < 0.0 or fids[-1] > 1.0 or 1.0 not in fids:
                raise ValueError("discrete fidelities must lie in [0, 1] and contain 1.0")
            object.__setattr__(self, "fidelities", fids)

    def __eq__(self, other):
        if not isinstance(other, Domain):
            return NotImplemented
        return (np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)
                and self.fidelities == other.fidelities)

    def __hash__(self):
        return hash((tuple(self.lower), tuple(self.upper), self.fidelities))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_discrete(self) -> bool:
        return self.fidelities is not None

    @property
    def side(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.side))

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lower) / self.side

    def from_unit(self, u):
        return self.lower + np.asarray(u, dtype=float) * self.side

    def contains(self, x, tol=0.0):
        x = np.atleast_2d(x)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=1)

    def valid_fidelity(self, s) -> bool:
        if self.is_discrete:
            return float(s) in self.fidelities
        return 0.0 <= float(s) <= 1.0

    def check(self, x, s) -> None:
        if not np.all(self.contains(x)):
            raise DomainViolation(f"point outside design domain: {np.asarray(x).tolist()}")
        if not self.valid_fidelity(s):
            raise DomainViolation(f"fidelity {s} not in fidelity space")

    def sample_uniform(self, n, rng):
        return self.lower + rng.random((n, self.dim)) * self.side

    def to_dict(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "fidelities": None if self.fidelities is None else list(self.fidelities),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["lower"], d["upper"], d.get("fidelities"))


@dataclass(frozen=True)
class LimitState:
    """Affine limit state ``g = rho * f - a``; failure is ``g <= 0``."""

    rho: float = 1.0
    a: float = 0.0

    def __post_init__(self):
        if self.rho == 0:
            raise ValueError("rho must be nonzero")

    def g(self, f):
        return self.rho * np.asarray(f) - self.a

    def fails(self, f):
        return self.g(f) <= 0.0

    def to_dict(self):
        return {"rho": self.rho, "a": self.a}


@dataclass(frozen=True)
class Dataset:
    """Observed points ``(x_i, s_i)`` with values ``y_i`` and costs ``c(s_i)``."""

    X: np.ndarray
    s: np.ndarray
    y: np.ndarray
    costs: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        s = np.atleast_1d(np.asarray(self.s, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        costs = np.zeros_like(y) if self.costs is None else np.atleast_1d(np.asarray(self.costs, dtype=float))
        if not (X.shape[0] == s.size == y.size == costs.size):
            raise ValueError("points, fidelities, values and costs must have equal length")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "costs", costs)
        if self.n > 1:
            Z = np.column_stack([X, s])
            if np.unique(Z, axis=0).shape[0] != self.n:
                raise DuplicatePoint("dataset contains an exact duplicate (x, s)")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    def contains(self, x, s) -> bool:
        x = np.asarray(x, dtype=float)
        hit = np.all(self.X == x, axis=1) & (self.s == float(s))
        return bool(hit.any())

    def append(self, x, s, y, cost=0.0) -> "Dataset":
        if self.contains(x, s):
            raise DuplicatePoint(f"(x={np.asarray(x).tolist()}, s={s}) already observed")
        return Dataset(
            np.vstack([self.X, np.asarray(x, dtype=float)[None, :]]),
            np.append(self.s, float(s)),
            np.append(self.y, float(y)),
            np.append(self.costs, float(cost)),
        )

    def to_dict(self):
        return {"X": self.X.tolist(), "s": self.s.tolist(), "y": self.y.tolist(), "costs": self.costs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["X"], d["s"], d["y"], d["costs"])


@dataclass(frozen=True)
class KernelParams:
    """Product Matern-5/2 hyperparameters (length scales in unit-cube units)."""

    gamma_x: np.ndarray
    gamma_s: float
    signal_variance: float = 1.0
    jitter: float = 0.0

    def __post_init__(self):
        gx = np.atleast_1d(np.asarray(self.gamma_x, dtype=float))
        object.__setattr__(self, "gamma_x", gx)
        if np.any(gx <= 0) or self.gamma_s <= 0 or self.signal_variance <= 0:
            raise ValueError("length scales and signal variance must be positive")
        if self.jitter < 0 or self.jitter > JITTER_MAX * self.signal_variance * (1 + 1e-12):
            raise ValueError("jitter must lie in [0, 1e-4 * signal_variance]")

    def to_dict(self):
        return {
            "gamma_x": self.gamma_x.tolist(),
            "gamma_s": float(self.gamma_s),
            "signal_variance": float(self.signal_variance),
            "jitter": float(self.jitter),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["gamma_x"], d["gamma_s"], d["signal_variance"], d.get("jitter", 0.0))


def matern52(r):
    t = SQRT5 * np.asarray(r, dtype=float)
    e = np.exp(-t)
    # (1 + t + t^2/3) e^{-t}, built in place to limit temporaries on large matrices
    out = t * t
    out *= 1.0 / 3.0
    out += t
    out += 1.0
    out *= e
    return out


def _matern52_dlog(r, sq):
    # d m(r) / d log(gamma) where sq = (delta/gamma)^2 summed over the scaled dims
    return (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r) * sq


def kernel_eval(p, q, params: KernelParams) -> float:
    """Covariance between two (x, s) points given as ``(x, s)`` tuples."""
    (x, s), (xp, sp) = p, q
    dx = (np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(xp, float))) / params.gamma_x
    r_x = math.sqrt(float(dx @ dx))
    r_s = abs(float(s) - float(sp)) / params.gamma_s
    return float(params.signal_variance * matern52(r_x) * matern52(r_s))


def correlation(U1, s1, U2, s2, gamma_x, gamma_s):
    """Matern-5/2 product correlation matrix between two point sets."""
    A = U1 / gamma_x
    B = U2 / gamma_x
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    R = matern52(np.sqrt(d2, out=d2))
    if s2.size and np.all(s2 == s2[0]):
        # one shared query fidelity: the fidelity factor is a column vector
        R *= matern52(np.abs(s1 - s2[0]) / gamma_s)[:, None]
    elif s1.size and np.all(s1 == s1[0]):
        R *= matern52(np.abs(s1[0] - s2) / gamma_s)[None, :]
    else:
        R *= matern52(np.abs(s1[:, None] - s2[None, :]) / gamma_s)
    return R


def _cholesky_ladder(R, start=JITTER_START):
    """Cholesky of ``R + j I`` for the smallest ladder jitter ``j`` that works."""
    n = R.shape[0]
    k0 = max(-10, math.ceil(math.log10(start) - 1e-9))
    for k in range(k0, -3):
        rel = 10.0 ** k
        try:
            L = np.linalg.cholesky(R + rel * np.eye(n))
            return L, rel
        except np.linalg.LinAlgError:
            continue
    raise SingularKernel(f"Cholesky failed at maximum jitter {JITTER_MAX:g} (n={n})")


def _refined_solve(L, R, y, steps=4):
    """``R^{-1} y`` by iterative refinement preconditioned with the jittered factor ``L``.

    Removes the jitter bias from the posterior mean so training outputs are
    reproduced; stops as soon as the residual stops shrinking.
    """
    x = cho_solve((L, True), y)
    res = y - R @ x
    norm = np.linalg.norm(res)
    for _ in range(steps):
        cand = x + cho_solve((L, True), res)
        cres = y - R @ cand
        cnorm = np.linalg.norm(cres)
        if not cnorm < norm:
            break
        x, res, norm = cand, cres, cnorm
    return x


def prior_predict(params: KernelParams):
    """Zero-mean prior at any point."""
    return 0.0, params.signal_variance


class GpModel:
    """Immutable GP posterior conditioned on a :class:`Dataset`.

    ``signal_variance`` and ``jitter`` live in standardized-output units;
    predictions are returned in problem units.
    """

    def __init__(self, params, data, domain, y_mean=0.0, y_std=1.0, chol=None, rel_jitter=None):
        self.params = params
        self.data = data
        self.domain = domain
        self.y_mean = float(y_mean)
        self.y_std = float(y_std)
        self._U = domain.to_unit(data.X)
        self._ys = (data.y - self.y_mean) / self.y_std
        R = correlation(self._U, data.s, self._U, data.s, params.gamma_x, params.gamma_s)
        if chol is None:
            chol, rel_jitter = _cholesky_ladder(R, start=max(JITTER_START, params.jitter / params.signal_variance))
        self.rel_jitter = float(rel_jitter)
        self.params = KernelParams(params.gamma_x, params.gamma_s, params.signal_variance,
                                   self.rel_jitter * params.signal_variance)
        # chol factors the correlation; the covariance factor is sqrt(sv) * chol
        self._Lr = chol
        self._R = R
        self._alpha_r = _refined_solve(chol, R, self._ys)

    @classmethod
    def condition(cls, data, params, domain, standardize=True):
        """Build the posterior for fixed hyperparameters."""
        if data.n < 1:
            raise InsufficientData("need at least one observation")
        y_mean, y_std = _standardization(data.y) if standardize else (0.0, 1.0)
        return cls(params, data, domain, y_mean, y_std)

    @property
    def chol(self):
        """Lower factor of ``K_n + jitter I`` in standardized units."""
        return math.sqrt(self.params.signal_variance) * self._Lr

    @property
    def alpha(self):
        """``K_n^{-1} y_n`` with standardized ``y_n`` (jitter bias removed by refinement)."""
        return self._alpha_r / self.params.signal_variance

    @property
    def n(self):
        return self.data.n

    def _cross(self, X, s):
        U = self.domain.to_unit(np.atleast_2d(X))
        s = np.broadcast_to(np.asarray(s, dtype=float), (U.shape[0],))
        return correlation(self._U, self.data.s, U, s, self.params.gamma_x, self.params.gamma_s)

    def whitened_cross(self, X, s):
        """``L^{-1} r(X)`` for the correlation factor; shape (n, m)."""
        return solve_triangular(self._Lr, self._cross(X, s), lower=True, check_finite=False)

    def predict(self, X, s, chunk=20000):
        """Posterior mean and variance at many points sharing or not sharing ``s``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = np.broadcast_to(np.asarray(s, dtype=float), (X.shape[0],))
        mean = np.empty(X.shape[0])
        var = np.empty(X.shape[0])
        sv = self.params.signal_variance
        for lo in range(0, X.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            Rc = self._cross(X[sl], s[sl])
            V = solve_triangular(self._Lr, Rc, lower=True, check_finite=False)
            mean[sl] = Rc.T @ self._alpha_r
            var[sl] = sv * (1.0 - (V * V).sum(0))
        mean = self.y_mean + self.y_std * mean
        var = np.maximum(var, 0.0) * self.y_std ** 2
        return mean, var

    def predict_mean(self, X, s, chunk=20000):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = np.broadcast_to(np.asarray(s, dtype=float), (X.shape[0],))
        out = np.empty(X.shape[0])
        for lo in range(0, X.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            out[sl] = self._cross(X[sl], s[sl]).T @ self._alpha_r
        return self.y_mean + self.y_std * out

    def posterior(self, x, s):
        m, v = self.predict(np.atleast_2d(x), s)
        return float(m[0]), float(v[0])

    def fantasy_update(self, x, s, y) -> "GpModel":
        """Condition on one extra observation with frozen hyperparameters.

        Extends the Cholesky factor by one row (O(n^2)).  Observing an
        already-observed point returns the model unchanged.
        """
        x = np.asarray(x, dtype=float)
        if self.data.contains(x, s):
            return self
        r = self._cross(x[None, :], s)[:, 0]
        l = solve_triangular(self._Lr, r, lower=True, check_finite=False)
        d2 = 1.0 + self.rel_jitter - l @ l
        if not np.isfinite(d2) or d2 <= 0.0:
            raise SingularKernel("fantasy point makes the kernel matrix singular")
        n = self.n
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self._Lr
        L[n, :n] = l
        L[n, n] = math.sqrt(d2)
        new = object.__new__(GpModel)
        new.params = self.params
        new.domain = self.domain
        new.data = self.data.append(x, s, y, 0.0)
        new.y_mean = self.y_mean
        new.y_std = self.y_std
        new.rel_jitter = self.rel_jitter
        new._U = np.vstack([self._U, self.domain.to_unit(x)[None, :]])
        new._ys = np.append(self._ys, (float(y) - self.y_mean) / self.y_std)
        R = np.empty((n + 1, n + 1))
        R[:n, :n] = self._R
        R[n, :n] = R[:n, n] = r
        R[n, n] = 1.0
        new._Lr = L
        new._R = R
        new._alpha_r = _refined_solve(L, R, new._ys)
        return new

    def log_marginal_likelihood(self) -> float:
        """Log marginal likelihood of the standardized outputs."""
        n = self.n
        sv = self.params.signal_variance
        quad = self._ys @ cho_solve((self._Lr, True), self._ys) / sv
        logdet = 2.0 * np.log(np.diag(self._Lr)).sum() + n * math.log(sv)
        return float(-0.5 * quad - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi))

    def to_json(self) -> str:
        return json.dumps({
            "version": SERIAL_VERSION,
            "params": self.params.to_dict(),
            "domain": self.domain.to_dict(),
            "data": self.data.to_dict(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        })

    @classmethod
    def from_json(cls, text) -> "GpModel":
        d = json.loads(text)
        if d.get("version") != SERIAL_VERSION:
            raise ValueError(f"unsupported GpModel document version {d.get('version')}")
        return cls(KernelParams.from_dict(d["params"]), Dataset.from_dict(d["data"]),
                   Domain.from_dict(d["domain"]), d["y_mean"], d["y_std"])


def _standardization(y):
    m = float(np.mean(y))
    sd = float(np.std(y))
    if not np.isfinite(sd) or sd < 1e-12 * max(1.0, abs(m)):
        sd = 1.0
    return m, sd


# --------------------------------------------------------------------------
# Hyperparameter fitting
# --------------------------------------------------------------------------

@dataclass
class _LikelihoodTerms:
    U: np.ndarray
    s: np.ndarray
    y: np.ndarray
    diffs: list = field(default_factory=list)

    def __post_init__(self):
        self.diffs = [(self.U[:, i, None] - self.U[None, :, i]) ** 2 for i in range(self.U.shape[1])]
        self.ds = (self.s[:, None] - self.s[None, :]) ** 2


def _profiled_nll(theta, terms, var_bounds, want_grad=True):
    """Negative log likelihood with the signal variance profiled out.

    ``theta`` holds log length scales (design dims then fidelity).  Returns
    the objective, its gradient and the (clipped) profiled variance.
    """
    d = len(terms.diffs)
    g = np.exp(theta)
    sq = [D / g[i] ** 2 for i, D in enumerate(terms.diffs)]
    sq_x = np.sum(sq, axis=0)
    r_x = np.sqrt(sq_x)
    sq_s = terms.ds / g[d] ** 2
    r_s = np.sqrt(sq_s)
    mx = matern52(r_x)
    ms = matern52(r_s)
    R = mx * ms
    try:
        L, rel = _cholesky_ladder(R)
    except SingularKernel:
        return 1e10, np.zeros_like(theta), 1.0
    n = terms.y.size
    a = cho_solve((L, True), terms.y)
    sv = float(np.clip(terms.y @ a / n, *var_bounds))
    logdet = 2.0 * np.log(np.diag(L)).sum()
    nll = 0.5 * (terms.y @ a) / sv + 0.5 * logdet + 0.5 * n * math.log(sv) + 0.5 * n * math.log(2 * math.pi)
    if not want_grad:
        return nll, None, sv
    Rinv = cho_solve((L, True), np.eye(n))
    W = np.outer(a, a) / sv - Rinv
    grad = np.empty(d + 1)
    ex = (5.0 / 3.0) * (1.0 + SQRT5 * r_x) * np.exp(-SQRT5 * r_x) * ms
    for i in range(d):
        grad[i] = -0.5 * np.sum(W * ex * sq[i])
    es = _matern52_dlog(r_s, sq_s) * mx
    grad[d] = -0.5 * np.sum(W * es)
    return nll, grad, sv


def log_likelihood_and_grad(theta, data, domain):
    """Profiled log likelihood and its gradient in log length scales (for checks)."""
    y_mean, y_std = _standardization(data.y)
    terms = _LikelihoodTerms(domain.to_unit(data.X), data.s, (data.y - y_mean) / y_std)
    nll, grad, _ = _profiled_nll(np.asarray(theta, float), terms, VARIANCE_BOUNDS)
    return -nll, -grad


def fit(data: Dataset, domain: Domain, restarts: int = 8, seed: int = 0, init: KernelParams | None = None,
        maxiter: int = 200) -> GpModel:
    """Maximum-likelihood hyperparameters, best of ``restarts`` local searches.

    Restart 0 starts from ``init`` when given (warm start); the others start
    from log-uniform draws seeded by ``seed``.  Ties go to the lowest
    restart index.
    """
    if data.n < 2:
        raise InsufficientData(f"need at least 2 observations to fit, got {data.n}")
    y_mean, y_std = _standardization(data.y)
    terms = _LikelihoodTerms(domain.to_unit(data.X), data.s, (data.y - y_mean) / y_std)
    d = domain.dim
    lo, hi = math.log(LENGTH_BOUNDS[0]), math.log(LENGTH_BOUNDS[1])
    rng = np.random.default_rng(seed)
    starts = []
    if init is not None:
        starts.append(np.clip(np.log(np.append(init.gamma_x, init.gamma_s)), lo, hi))
    while len(starts) < max(restarts, 1):
        starts.append(rng.uniform(math.log(0.05), math.log(2.0), size=d + 1))

    def fun(theta):
        nll, grad, _ = _profiled_nll(theta, terms, VARIANCE_BOUNDS)
        return nll, grad

    best = None
    for theta0 in starts:
        res = minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=[(lo, hi)] * (d + 1),
                       options={"maxiter": maxiter})
        val = res.fun if np.isfinite(res.fun) else np.inf
        if best is None or val < best[0]:
            best = (val, res.x)
    theta = best[1]
    _, _, sv = _profiled_nll(theta, terms, VARIANCE_BOUNDS, want_grad=False)
    g = np.exp(theta)
    params = KernelParams(g[:d], float(g[d]), sv, 0.0)
    return GpModel(params, data, domain, y_mean, y_std)
