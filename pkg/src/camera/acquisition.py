"""Contour value functions and the cost-normalized lookahead acquisition.

The lookahead value of a candidate ``(x, s)`` is the expected maximum, over
an inner grid at the highest fidelity, of a contour value function after
conditioning the GP on one fantasized observation at the candidate.
Fantasies are driven by a shared set of standard-normal draws (common random
numbers) so that candidates within a round are compared on equal footing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

from camera.errors import EmptyCandidateSet, UnknownFidelity
from camera.mfgp import GpModel, LimitState, correlation

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _zpdf(z):
    # z * phi(z), exactly 0 in the tails so infinite z cannot produce inf * 0
    with np.errstate(invalid="ignore", over="ignore"):
        return np.where(np.abs(z) < 40.0, z * _pdf(np.where(np.abs(z) < 40.0, z, 0.0)), 0.0)


def _g_space(mean, sd, limit, band_sd):
    m = limit.rho * np.asarray(mean, dtype=float)
    s = abs(limit.rho) * np.asarray(sd, dtype=float)
    b = s if band_sd is None else abs(limit.rho) * np.asarray(band_sd, dtype=float)
    return np.broadcast_arrays(m, s, b)


def ei_bichon(mean, sd, limit: LimitState, eta: float, band_sd=None):
    """Expected feasibility-style improvement ``E[delta - min(|y - a|, delta)]``.

    ``delta = sqrt(eta) * band_sd``; the band defaults to the predictive sd.
    """
    m, sd, band = _g_space(mean, sd, limit, band_sd)
    a = limit.a
    delta = math.sqrt(eta) * band
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):  # subnormal sd sends z to +-inf, which is handled
        z = (a - m) / safe
        zm = (a - delta - m) / safe
        zp = (a + delta - m) / safe
        out = (delta * (ndtr(zp) - ndtr(zm))
               - safe * (2.0 * _pdf(z) - _pdf(zm) - _pdf(zp))
               + (m - a) * (2.0 * ndtr(z) - ndtr(zm) - ndtr(zp)))
    exact = delta - np.minimum(np.abs(m - a), delta)
    out = np.where(pos, np.maximum(out, 0.0), exact)
    return out if out.ndim else float(out)


def ei_ranjan(mean, sd, limit: LimitState, eta: float, band_sd=None):
    """Expected improvement ``E[delta^2 - min((y - a)^2, delta^2)]``."""
    m, sd, band = _g_space(mean, sd, limit, band_sd)
    a = limit.a
    delta = math.sqrt(eta) * band
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    dm = m - a
    with np.errstate(over="ignore", invalid="ignore"):
        zm = (a - delta - m) / safe
        zp = (a + delta - m) / safe
        out = ((delta ** 2 - dm ** 2 - safe ** 2) * (ndtr(zp) - ndtr(zm))
               + safe ** 2 * (_zpdf(zp) - _zpdf(zm))
               + 2.0 * dm * safe * (_pdf(zp) - _pdf(zm)))
    exact = delta ** 2 - np.minimum(dm ** 2, delta ** 2)
    out = np.where(pos, np.maximum(out, 0.0), exact)
    return out if out.ndim else float(out)


_VALUE_FUNCTIONS = {"bichon": ei_bichon, "ranjan": ei_ranjan}


@dataclass(frozen=True)
class ValueConfig:
    kind: str = "bichon"
    eta: float = 4.0
    limit: LimitState = field(default_factory=LimitState)

    def __post_init__(self):
        if self.kind not in _VALUE_FUNCTIONS:
            raise ValueError(f"unknown value function {self.kind!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    def evaluate(self, mean, sd, band_sd=None):
        return _VALUE_FUNCTIONS[self.kind](mean, sd, self.limit, self.eta, band_sd)

    def upper_bound(self, mean, spread, sd, band_sd=None):
        """Bound on :meth:`evaluate` for any mean within ``mean +- spread``.

        The improvement is at most the band height and vanishes outside the
        band, so the value is at most ``height * P(|y - a| < delta)``, and
        that probability is largest at the admissible mean closest to ``a``.
        """
        m, sd, band = _g_space(mean, sd, self.limit, band_sd)
        delta = math.sqrt(self.eta) * band
        gap = delta - np.maximum(np.abs(m - self.limit.a) - abs(self.limit.rho) * np.asarray(spread), 0.0)
        pos = sd > 0
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            prob = np.where(pos, ndtr(gap / np.where(pos, sd, 1.0)), (gap > 0).astype(float))
        return (delta if self.kind == "bichon" else delta * delta) * prob

    def to_dict(self):
        return {"kind": self.kind, "eta": self.eta, "limit": self.limit.to_dict()}


@dataclass(frozen=True)
class AcquisitionConfig:
    """Lookahead settings.

    ``normalize="gain"`` divides the expected gain over the current best
    value by the cost; ``"value"`` divides the raw lookahead value.  The two
    rank candidates identically at a fixed cost, but only the gain survives
    the division when costs differ by an order of magnitude.  ``band``
    chooses whether the value-function band width uses the current
    (``"current"``) or the fantasized (``"updated"``) posterior sd.
    """

    n_fantasies: int = 16
    inner_grid_size: int = 512
    outer_candidates: int = 2000
    seed: int = 0
    polish: bool = True
    normalize: str = "gain"
    band: str = "current"

    def __post_init__(self):
        if min(self.n_fantasies, self.inner_grid_size, self.outer_candidates) < 1:
            raise ValueError("acquisition counts must be >= 1")
        if self.normalize not in ("value", "gain"):
            raise ValueError("normalize must be 'value' or 'gain'")
        if self.band not in ("current", "updated"):
            raise ValueError("band must be 'current' or 'updated'")

    def to_dict(self):
        return {"n_fantasies": self.n_fantasies, "inner_grid_size": self.inner_grid_size,
                "outer_candidates": self.outer_candidates, "seed": self.seed, "polish": self.polish,
                "normalize": self.normalize, "band": self.band}


@dataclass(frozen=True)
class CostModel:
    """``c(s) = c0 * (c2 + exp(-c1 * (1 - s)))`` or a fidelity -> cost table."""

    kind: str = "exponential"
    c0: float = 500.0
    c1: float = 10.0
    c2: float = 0.1
    table: dict | None = None

    def __post_init__(self):
        if self.kind == "exponential":
            if self.c0 <= 0 or self.c2 < 0 or self.c1 < 0 or self.c2 + math.exp(-self.c1) <= 0:
                raise ValueError("exponential cost needs c0 > 0, c1 >= 0, c2 >= 0")
        elif self.kind == "table":
            if not self.table:
                raise ValueError("table cost model needs a nonempty table")
            tab = {float(k): float(v) for k, v in self.table.items()}
            keys = sorted(tab)
            vals = [tab[k] for k in keys]
            if min(vals) <= 0:
                raise ValueError("costs must be strictly positive")
            if any(b < a for a, b in zip(vals, vals[1:])):
                raise ValueError("table costs must be monotone in fidelity")
            object.__setattr__(self, "table", tab)
        else:
            raise ValueError(f"unknown cost model kind {self.kind!r}")

    def __call__(self, s):
        if self.kind == "exponential":
            out = self.c0 * (self.c2 + np.exp(-self.c1 * (1.0 - np.asarray(s, dtype=float))))
            return out if np.ndim(out) else float(out)
        arr = np.atleast_1d(np.asarray(s, dtype=float))
        try:
            out = np.array([self.table[float(v)] for v in arr])
        except KeyError as exc:
            raise UnknownFidelity(f"fidelity {exc.args[0]} has no table cost") from None
        return out if np.ndim(s) else float(out[0])

    def to_dict(self):
        if self.kind == "exponential":
            return {"kind": "exponential", "c0": self.c0, "c1": self.c1, "c2": self.c2}
        return {"kind": "table", "table": {repr(k): v for k, v in self.table.items()}}

    @classmethod
    def from_dict(cls, d):
        if d.get("kind", "exponential") == "table":
            return cls(kind="table", table={float(k): float(v) for k, v in d["table"].items()})
        return cls(kind="exponential", c0=d.get("c0", 500.0), c1=d.get("c1", 10.0), c2=d.get("c2", 0.1))


def cost_eval(cost: CostModel, s):
    return cost(s)


def halton(n, dim, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qmc.Halton(d=dim, scramble=True, seed=seed).random(n)


def inner_grid(domain, size, seed):
    """Quasi-random design points at which the highest-fidelity value is maximized."""
    return domain.from_unit(halton(size, domain.dim, seed))


def fantasy_normals(n, seed):
    return np.random.default_rng(seed).standard_normal(n)


class _InnerState:
    """Quantities at the inner grid that do not depend on the candidate."""

    def __init__(self, model: GpModel, inner_X):
        self.model = model
        self.X = np.atleast_2d(inner_X)
        self.U = model.domain.to_unit(self.X)
        self.ones = np.ones(self.X.shape[0])
        self.mean, self.var = model.predict(self.X, 1.0)
        self.V = model.whitened_cross(self.X, 1.0)
        self.scale = model.params.signal_variance * model.y_std ** 2


def lookahead_values(model: GpModel, Xc, sc, vcfg, inner_X, eps, chunk=128, _state=None, band="current",
                     prune=True):
    """Monte Carlo lookahead value for each candidate row of ``Xc`` at ``sc``.

    Uses the rank-one conditioning identities, which give the same posterior
    as :meth:`GpModel.fantasy_update` without materializing N fantasy models.
    With ``band="current"`` the improvement band keeps the width set by the
    current posterior sd; ``"updated"`` recomputes it from the fantasy sd.
    ``prune`` skips inner points whose value bound cannot reach the max
    (value functions without ``upper_bound`` are always evaluated in full).
    """
    st = _state or _InnerState(model, inner_X)
    Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
    sc = np.broadcast_to(np.asarray(sc, dtype=float), (Xc.shape[0],))
    eps = np.asarray(eps, dtype=float)
    gx, gs = model.params.gamma_x, model.params.gamma_s
    jit = model.rel_jitter * st.scale
    band_sd = np.sqrt(st.var)[None, :] if band == "current" else None
    bound = getattr(vcfg, "upper_bound", None) if prune else None
    if bound is not None:
        # inner points with the largest current value give a cheap lower bound on each fantasy max
        cur = vcfg.evaluate(st.mean, np.sqrt(st.var))
        top = np.argsort(-cur, kind="stable")[:min(16, cur.size)]
        e_max = float(np.max(np.abs(eps))) if eps.size else 0.0
    out = np.empty(Xc.shape[0])
    for lo in range(0, Xc.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        Vc = model.whitened_cross(Xc[sl], sc[sl])
        var_c = np.maximum(st.scale * (1.0 - (Vc * Vc).sum(0)), 0.0)
        r_cg = correlation(model.domain.to_unit(Xc[sl]), np.asarray(sc[sl]), st.U, st.ones, gx, gs)
        cov = st.scale * (r_cg - Vc.T @ st.V)
        observed = np.array([model.data.contains(x, s) for x, s in zip(Xc[sl], sc[sl])])
        informative = (var_c > 0) & ~observed
        denom = np.where(informative, var_c + jit, 1.0)
        b = np.where(informative[:, None], cov * (np.sqrt(var_c) / denom)[:, None], 0.0)
        sd_new = np.sqrt(np.maximum(st.var[None, :] - np.where(informative[:, None], cov * cov / denom[:, None], 0.0), 0.0))
        acc = np.zeros(b.shape[0])
        if bound is None:
            for e in eps:
                acc += vcfg.evaluate(st.mean[None, :] + b * e, sd_new, band_sd).max(axis=1)
        else:
            acc = _pruned_fantasy_sum(vcfg, st.mean, b, sd_new, band_sd, eps, top, e_max)
        out[sl] = acc / eps.size
    return out


def _pruned_fantasy_sum(vcfg, mean, b, sd_new, band_sd, eps, top, e_max):
    """Sum over fantasies of the inner max, skipping points that provably cannot attain it.

    Gives the same numbers as evaluating every inner point.
    """
    band_full = None if band_sd is None else np.broadcast_to(band_sd, sd_new.shape)
    band_top = None if band_full is None else band_full[:, top]
    lower = np.empty((b.shape[0], eps.size))
    for j, e in enumerate(eps):
        lower[:, j] = vcfg.evaluate(mean[top][None, :] + b[:, top] * e, sd_new[:, top], band_top).max(axis=1)
    ub = vcfg.upper_bound(mean[None, :], np.abs(b) * e_max, sd_new, band_sd)
    # relative slack keeps round-off in the closed forms from pruning a true maximizer
    keep = ub >= lower.min(axis=1)[:, None] * (1.0 - 1e-9)
    keep[:, top] = False
    rows, cols = np.nonzero(keep)
    m_k, b_k, sd_k = mean[cols], b[rows, cols], sd_new[rows, cols]
    band_k = None if band_full is None else band_full[rows, cols]
    acc = np.zeros(b.shape[0])
    full = np.empty(b.shape)
    for j, e in enumerate(eps):
        best = lower[:, j]
        if rows.size:
            full.fill(-np.inf)
            full[rows, cols] = vcfg.evaluate(m_k + b_k * e, sd_k, band_k)
            best = np.maximum(best, full.max(axis=1))
        acc += best
    return acc


def lookahead_acquisition(model: GpModel, candidate, vcfg, acfg: AcquisitionConfig, inner_X, eps=None):
    """Lookahead value of a single ``(x, s)`` candidate."""
    x, s = candidate
    if eps is None:
        eps = fantasy_normals(acfg.n_fantasies, acfg.seed)
    return float(lookahead_values(model, np.atleast_2d(x), s, vcfg, inner_X, eps, band=acfg.band)[0])


def lookahead_by_fantasy(model: GpModel, candidate, vcfg, inner_X, eps, band="current"):
    """Reference path: explicit fantasy models, one per draw (slow)."""
    x, s = candidate
    x = np.asarray(x, dtype=float)
    mu, var = model.posterior(x, s)
    band_sd = np.sqrt(model.predict(inner_X, 1.0)[1]) if band == "current" else None
    total = 0.0
    for e in np.asarray(eps, dtype=float):
        fm = model.fantasy_update(x, s, mu + math.sqrt(var) * e)
        m, v = fm.predict(inner_X, 1.0)
        total += float(np.max(vcfg.evaluate(m, np.sqrt(v), band_sd)))
    return total / len(eps)


class Selection(NamedTuple):
    x: np.ndarray
    s: float
    acquisition: float
    normalized: float


def outer_candidates(domain, n, seed):
    """Quasi-random candidates in X x S (all discrete fidelities per x)."""
    if domain.is_discrete:
        k = len(domain.fidelities)
        m = max(1, n // k)
        X = domain.from_unit(halton(m, domain.dim, seed))
        Xc = np.repeat(X, k, axis=0)
        sc = np.tile(np.asarray(domain.fidelities), m)
        return Xc, sc
    H = halton(n, domain.dim + 1, seed)
    return domain.from_unit(H[:, :-1]), H[:, -1]


def _pick(values, s, valid):
    """Index of the max value; ties go to higher s, then lower index."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise EmptyCandidateSet("no admissible candidates")
    v = values[idx]
    top = idx[v == v.max()]
    top = top[s[top] == s[top].max()]
    return int(top.min())


def select_next(model: GpModel, domain, cost: CostModel, vcfg, acfg: AcquisitionConfig, rng_seed: int,
                candidates=None) -> Selection:
    """Maximize lookahead / cost over candidates (plus a local polish)."""
    ss = np.random.SeedSequence([acfg.seed, rng_seed])
    s_inner, s_eps, s_cand = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    inner_X = inner_grid(domain, acfg.inner_grid_size, s_inner)
    eps = fantasy_normals(acfg.n_fantasies, s_eps)
    if candidates is None:
        Xc, sc = outer_candidates(domain, acfg.outer_candidates, s_cand)
    else:
        Xc, sc = candidates
        Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
        sc = np.broadcast_to(np.asarray(sc, dtype=float), (Xc.shape[0],)).copy()
    if Xc.shape[0] == 0:
        raise EmptyCandidateSet("candidate generation produced no points")
    state = _InnerState(model, inner_X)
    acq = lookahead_values(model, Xc, sc, vcfg, inner_X, eps, _state=state, band=acfg.band)
    # "gain" divides only the lookahead improvement over the current best value by the cost
    base = float(np.max(vcfg.evaluate(state.mean, np.sqrt(state.var)))) if acfg.normalize == "gain" else 0.0
    norm = (acq - base) / cost(sc)
    fresh = np.array([not model.data.contains(x, s) for x, s in zip(Xc, sc)])
    i = _pick(norm, sc, fresh)
    best_x, best_s, best_a, best_n = Xc[i], float(sc[i]), float(acq[i]), float(norm[i])

    if acfg.polish and candidates is None:
        u0 = domain.to_unit(best_x)
        discrete = domain.is_discrete

        def neg(z):
            u = np.clip(z[:domain.dim], 0.0, 1.0)
            s = best_s if discrete else float(np.clip(z[-1], 0.0, 1.0))
            x = domain.from_unit(u)
            a = lookahead_values(model, x[None, :], s, vcfg, inner_X, eps, _state=state, band=acfg.band)[0]
            return -(a - base) / cost(s)

        z0 = u0 if discrete else np.append(u0, best_s)
        res = minimize(neg, z0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * z0.size,
                       options={"maxfev": 30 * z0.size, "xatol": 1e-4, "fatol": 1e-12})
        if -res.fun > best_n:
            u = np.clip(res.x[:domain.dim], 0.0, 1.0)
            s = best_s if discrete else float(np.clip(res.x[-1], 0.0, 1.0))
            x = domain.from_unit(u)
            if not model.data.contains(x, s):
                best_x, best_s, best_n = x, s, float(-res.fun)
                best_a = best_n * cost(s) + base
    return Selection(np.asarray(best_x, dtype=float), best_s, best_a, best_n)
