"""The adaptive loop: seed design, budgeted acquisitions, biasing, IS estimate."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from camera.acquisition import AcquisitionConfig, CostModel, ValueConfig, select_next
from camera.density import NominalDensity
from camera.errors import CameraError, ConfigError, EvaluationError
from camera.fpe import FailureEstimate, estimate_failure_probability
from camera.mfgp import Dataset, Domain, GpModel, LimitState, fit
from camera.testbed import BenchmarkProblem, brute_force_pf, get_problem

log = logging.getLogger(__name__)

MODES = ("multifidelity", "single_fidelity")
DESIGNS = ("adaptive", "lhs")


class RunError(CameraError):
    """A run failed part-way.

    ``iteration`` counts the acquisitions completed before the failure and
    ``record`` holds every row evaluated so far.
    """

    def __init__(self, message, iteration, record):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.record = record


@dataclass(frozen=True)
class RunConfig:
    problem: str = "four-branches"
    mode: str = "multifidelity"
    design: str = "adaptive"
    n_seed: int | None = None
    budget: float | None = 30_000.0
    max_iterations: int | None = None
    value_kind: str = "bichon"
    eta: float = 4.0
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    cost: CostModel = field(default_factory=CostModel)
    gmm_components: int = 25
    pool_size: int = 10**7
    max_fit: int | None = 50_000
    n_is: int = 1000
    refit_stride: int = 1
    fit_restarts: int = 8
    master_seed: int = 0
    per_iteration_pf: bool = False
    n_diag: int = 200
    diag_pool_size: int = 100_000
    diag_every: int = 1
    truth_n: int = 10**6
    external: dict | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", "mode")
        if self.design not in DESIGNS:
            raise ConfigError(f"must be one of {DESIGNS}", "design")
        if self.n_seed is not None and self.n_seed < 2:
            raise ConfigError("need at least 2 seed points", "n_seed")
        if self.budget is None and self.max_iterations is None:
            raise ConfigError("set a budget or an iteration cap", "budget")
        if self.budget is not None and self.budget <= 0:
            raise ConfigError("must be positive", "budget")
        for name in ("gmm_components", "pool_size", "n_is", "refit_stride", "fit_restarts", "n_diag",
                     "diag_pool_size", "diag_every", "truth_n"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.eta <= 0:
            raise ConfigError("must be positive", "eta")
        if self.value_kind not in ("bichon", "ranjan"):
            raise ConfigError("must be 'bichon' or 'ranjan'", "value_kind")
        if self.problem == "external" and not self.external:
            raise ConfigError("problem 'external' needs an 'external' section", "external")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["acquisition"] = self.acquisition.to_dict()
        d["cost"] = self.cost.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown key", unknown[0])
        try:
            if "acquisition" in d and isinstance(d["acquisition"], dict):
                acq = d["acquisition"]
                bad = sorted(set(acq) - {f.name for f in dataclasses.fields(AcquisitionConfig)})
                if bad:
                    raise ConfigError("unknown key", f"acquisition.{bad[0]}")
                try:
                    d["acquisition"] = AcquisitionConfig(**acq)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(str(exc), "acquisition") from None
            if "cost" in d and isinstance(d["cost"], dict):
                try:
                    d["cost"] = CostModel.from_dict(d["cost"])
                except (TypeError, ValueError, KeyError) as exc:
                    raise ConfigError(str(exc), "cost") from None
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunRecord:
    config: RunConfig
    problem: str
    dim: int
    rows: list = field(default_factory=list)
    final: FailureEstimate | None = None
    truth: float | None = None
    histogram: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    diag_cost: float = 0.0
    model: GpModel | None = None

    @property
    def iterations(self):
        return sum(1 for r in self.rows if r["iter"] > 0)

    @property
    def cumulative_cost(self):
        return self.rows[-1]["cum_cost"] if self.rows else 0.0

    @property
    def final_error(self):
        if self.final is None or not self.truth:
            return None
        return self.final.relative_error(self.truth)

    def acquired_fidelities(self):
        return np.array([r["s"] for r in self.rows if r["iter"] > 0])

    def error_series(self):
        """(cumulative cost, relative error) pairs for curve aggregation."""
        pts = [(r["cum_cost"], r["err"]) for r in self.rows if r.get("err") is not None and np.isfinite(r["err"])]
        if not pts and self.final_error is not None:
            pts = [(self.cumulative_cost, self.final_error)]
        return pts

    def summary(self):
        return {
            "problem": self.problem,
            "mode": self.config.mode,
            "design": self.config.design,
            "iterations": self.iterations,
            "n_seed": sum(1 for r in self.rows if r["iter"] == 0),
            "cumulative_cost": self.cumulative_cost,
            "final": None if self.final is None else self.final.to_dict(),
            "truth": self.truth,
            "relative_error": self.final_error,
            "histogram": self.histogram,
            "wall_clock": self.wall_clock,
            "diagnostic_cost": self.diag_cost,
            "config": self.config.to_dict(),
        }


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------

def default_seed_count(dim):
    return 10 * (dim + 1)


def lhs_seed(domain: Domain, n: int, mode: str, seed) -> tuple[np.ndarray, np.ndarray]:
    """Randomized Latin hypercube seed points ``(X, s)`` (values not evaluated)."""
    if n < 2:
        raise ValueError("need n >= 2 seed points")
    rng = np.random.default_rng(seed)
    if mode == "single_fidelity":
        U = qmc.LatinHypercube(d=domain.dim, seed=rng).random(n)
        return domain.from_unit(U), np.ones(n)
    if domain.is_discrete:
        U = qmc.LatinHypercube(d=domain.dim, seed=rng).random(n)
        fids = np.asarray(domain.fidelities)
        s = fids[np.arange(n) % fids.size]
        return domain.from_unit(U), rng.permutation(s)
    U = qmc.LatinHypercube(d=domain.dim + 1, seed=rng).random(n)
    return domain.from_unit(U[:, :-1]), U[:, -1]


def matched_single_fidelity_count(seed_cost: float, cost: CostModel) -> int:
    """Largest n with n * c(1) <= seed_cost (at least 2)."""
    return max(2, int(math.floor(seed_cost / cost(1.0) + 1e-9)))


def fidelity_histogram(s, domain: Domain, bins=10):
    s = np.asarray(s, dtype=float)
    if domain.is_discrete:
        fids = list(domain.fidelities)
        return {"fidelities": fids, "counts": [int(np.sum(s == f)) for f in fids]}
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(s, bins=edges)
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def histogram_tv(h1, h2):
    """Total-variation distance between two fidelity histograms."""
    a = np.asarray(h1["counts"], dtype=float)
    b = np.asarray(h2["counts"], dtype=float)
    if a.sum() == 0 or b.sum() == 0:
        return 0.0 if a.sum() == b.sum() else 1.0
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())


@functools.lru_cache(maxsize=32)
def _cached_truth(name, n, seed):
    return brute_force_pf(get_problem(name), n, seed).p_hat


def resolve_problem(config: RunConfig) -> BenchmarkProblem:
    """Benchmark (or external simulator) named by ``config``.

    A table cost model turns a benchmark's fidelity space into the table's keys.
    """
    if config.problem == "external":
        from camera.external import problem_from_spec
        return problem_from_spec(config.external, config.cost)
    try:
        prob = get_problem(config.problem, config.cost)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "problem") from None
    if config.cost.kind == "table":
        fids = tuple(sorted(config.cost.table))
        try:
            dom = Domain(prob.domain.lower, prob.domain.upper, fids)
        except ValueError as exc:
            raise ConfigError(str(exc), "cost.table") from None
        prob = dataclasses.replace(prob, domain=dom)
    return prob


def _truth_for(problem, config):
    if config.problem == "external":
        return problem.true_pf
    return _cached_truth(problem.name, config.truth_n, 12345)


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------

def _eval_point(problem, x, s):
    try:
        return float(np.asarray(problem.evaluator(np.atleast_2d(x), s), dtype=float)[0])
    except CameraError:
        raise
    except Exception as exc:
        raise EvaluationError(f"evaluator failed at x={np.ravel(x).tolist()}, s={float(s)}: {exc}", x, s) from exc


def run(config: RunConfig, problem: BenchmarkProblem | None = None, truth: float | None = None) -> RunRecord:
    """Execute one seeded run; deterministic for a given configuration."""
    t0 = time.perf_counter()
    problem = problem or resolve_problem(config)
    if truth is None:
        truth = _truth_for(problem, config)
    domain = problem.domain
    cost = problem.cost
    limit = problem.limit
    vcfg = ValueConfig(config.value_kind, config.eta, limit)
    nominal = NominalDensity(domain)
    sel_domain = domain if config.mode == "multifidelity" else Domain(domain.lower, domain.upper, (1.0,))

    root = np.random.SeedSequence(config.master_seed)
    s_seed, s_fit, s_acq, s_final, s_diag = root.spawn(5)
    n_seed = config.n_seed or default_seed_count(domain.dim)

    # budget-matched seeding: the single-fidelity design costs no more than the multifidelity one
    X0, S0 = lhs_seed(domain, n_seed, "multifidelity", s_seed)
    if config.mode == "single_fidelity":
        n_sf = matched_single_fidelity_count(float(np.sum(cost(S0))), cost)
        X0, S0 = lhs_seed(domain, n_sf, "single_fidelity", s_seed)
    seed_cost = float(np.sum(cost(S0)))
    if config.budget is not None and config.budget <= seed_cost:
        raise ConfigError(f"budget {config.budget:g} does not exceed the seed design cost {seed_cost:g}", "budget")

    record = RunRecord(config, problem.name, domain.dim, truth=truth)
    cum = 0.0
    it = 0
    fit_seeds = np.random.SeedSequence(s_fit.entropy, spawn_key=s_fit.spawn_key)
    try:
        ys = []
        for x, s in zip(X0, S0):
            y = _eval_point(problem, x, s)
            c = float(cost(s))
            cum += c
            ys.append(y)
            record.rows.append(_row(0, x, s, y, c, cum))
        data = Dataset(X0, S0, ys, np.asarray(cost(S0), dtype=float))
        if config.design == "lhs":
            data, cum = _lhs_fill(problem, config, data, cum, record, s_seed)

        model = fit(data, domain, config.fit_restarts, seed=_int_seed(fit_seeds, 0))
        if config.per_iteration_pf and config.design == "adaptive":
            _diagnose(record, model, problem, config, s_diag, 0, -1)
        while config.design == "adaptive":
            if config.max_iterations is not None and it >= config.max_iterations:
                break
            if config.budget is not None and cum + float(np.min(cost(_cheapest(sel_domain)))) > config.budget:
                break
            sel = select_next(model, sel_domain, cost, vcfg, config.acquisition, rng_seed=_int_seed(s_acq, it))
            c = float(cost(sel.s))
            if config.budget is not None and cum + c > config.budget:
                break
            y = _eval_point(problem, sel.x, sel.s)
            data = data.append(sel.x, sel.s, y, c)
            cum += c
            it += 1
            record.rows.append(_row(it, sel.x, sel.s, y, c, cum, sel.acquisition))
            if it % config.refit_stride == 0:
                model = fit(data, domain, config.fit_restarts, seed=_int_seed(fit_seeds, it), init=model.params)
            else:
                model = GpModel.condition(data, model.params, domain)
            if config.per_iteration_pf and it % config.diag_every == 0:
                _diagnose(record, model, problem, config, s_diag, it, len(record.rows) - 1)
            log.debug("iter %d: s=%.3f cost=%.1f cum=%.1f", it, sel.s, c, cum)

        est, _ = estimate_failure_probability(
            model, problem.evaluator, domain, limit, nominal, N=config.n_is, seed=s_final,
            pool_size=config.pool_size, K=config.gmm_components, unit_cost=float(cost(1.0)),
            base_cost=cum, max_fit=config.max_fit)
    except CameraError as exc:
        _finish(record, sel_domain, t0)
        raise RunError(str(exc), it, record) from exc
    except np.linalg.LinAlgError as exc:
        _finish(record, sel_domain, t0)
        raise RunError(f"linear algebra failure: {exc}", it, record) from exc
    record.final = est
    record.model = model
    _finish(record, sel_domain, t0)
    return record


def _cheapest(domain):
    return np.asarray(domain.fidelities) if domain.is_discrete else np.array([0.0])


def _int_seed(ss, i):
    return int(np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (int(i),)).generate_state(1)[0])


def _row(it, x, s, y, c, cum, acq=float("nan")):
    return {"iter": int(it), "x": [float(v) for v in np.ravel(x)], "s": float(s), "y": float(y), "cost": float(c),
            "cum_cost": float(cum), "acq": float(acq), "p_hat": None, "err": None}


def _finish(record, sel_domain, t0):
    record.histogram = fidelity_histogram(record.acquired_fidelities(), sel_domain)
    record.wall_clock = time.perf_counter() - t0


def _diagnose(record, model, problem, config, s_diag, it, row_index):
    seed = _int_seed(s_diag, it)
    est, _ = estimate_failure_probability(
        model, problem.evaluator, problem.domain, problem.limit, NominalDensity(problem.domain), N=config.n_diag,
        seed=seed, pool_size=config.diag_pool_size, K=config.gmm_components, max_fit=config.max_fit)
    record.diag_cost += config.n_diag * float(problem.cost(1.0))
    err = est.relative_error(record.truth) if record.truth else None
    row = record.rows[row_index]
    row["p_hat"] = est.p_hat
    row["err"] = err


def _lhs_fill(problem, config, data, cum, record, s_seed):
    """Non-adaptive baseline: one Latin hypercube design spending the whole budget."""
    domain, cost = problem.domain, problem.cost
    rng = np.random.default_rng(np.random.SeedSequence(s_seed.entropy, spawn_key=tuple(s_seed.spawn_key) + (1,)))
    budget = config.budget if config.budget is not None else cum
    remaining = budget - cum
    if config.mode == "single_fidelity":
        m = int(math.floor(remaining / cost(1.0) + 1e-9))
    else:
        # expected cost per joint-LHS point, then trim to the exact budget
        grid = np.asarray(domain.fidelities) if domain.is_discrete else np.linspace(0.0, 1.0, 1001)
        m = int(math.floor(remaining / float(np.mean(cost(grid)))))
    if m < 1:
        return data, cum
    X, S = lhs_seed(domain, max(m, 2), config.mode, rng)
    it = 0
    for x, s in zip(X, S):
        c = float(cost(s))
        if cum + c > budget:
            continue
        y = _eval_point(problem, x, s)
        data = data.append(x, s, y, c)
        cum += c
        it += 1
        record.rows.append(_row(it, x, s, y, c, cum))
    return data, cum


# --------------------------------------------------------------------------
# Repetitions
# --------------------------------------------------------------------------

@dataclass
class Aggregate:
    cost_grid: np.ndarray
    mean_error: np.ndarray
    median_error: np.ndarray
    std_error: np.ndarray
    count: np.ndarray
    final_errors: list
    failures: list

    def rows(self):
        for i, c in enumerate(self.cost_grid):
            yield {"cost": float(c), "mean_err": _nan_none(self.mean_error[i]),
                   "median_err": _nan_none(self.median_error[i]), "std_err": _nan_none(self.std_error[i]),
                   "n": int(self.count[i])}


def _nan_none(v):
    return None if not np.isfinite(v) else float(v)


def locf(series, grid):
    """Last observation carried forward onto ``grid`` (NaN before the first)."""
    out = np.full(len(grid), np.nan)
    if not series:
        return out
    c = np.array([p[0] for p in series])
    e = np.array([p[1] for p in series])
    idx = np.searchsorted(c, grid, side="right") - 1
    ok = idx >= 0
    out[ok] = e[idx[ok]]
    return out


def aggregate(records, n_grid=100, grid=None) -> Aggregate:
    good = [r for r in records if isinstance(r, RunRecord)]
    failures = [r for r in records if not isinstance(r, RunRecord)]
    series = [r.error_series() for r in good]
    if grid is None:
        starts = [s[0][0] for s in series if s]
        ends = [s[-1][0] for s in series if s]
        if not starts:
            grid = np.array([0.0])
        else:
            grid = np.linspace(min(starts), max(ends), n_grid)
    M = np.array([locf(s, grid) for s in series]) if series else np.full((0, len(grid)), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns before the first observation
        mean = np.nanmean(M, axis=0) if M.size else np.full(len(grid), np.nan)
        med = np.nanmedian(M, axis=0) if M.size else np.full(len(grid), np.nan)
        std = np.nanstd(M, axis=0) if M.size else np.full(len(grid), np.nan)
    count = np.sum(np.isfinite(M), axis=0) if M.size else np.zeros(len(grid), dtype=int)
    return Aggregate(np.asarray(grid), mean, med, std, count, [r.final_error for r in good], failures)


def repeat(config: RunConfig, repetitions: int, problem=None):
    """Run ``master_seed + r`` for r in range(repetitions); returns (records, aggregate).

    Failed repetitions appear in the record list as their :class:`RunError`.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    records = []
    for r in range(repetitions):
        cfg = config.replace(master_seed=config.master_seed + r)
        try:
            records.append(run(cfg, problem))
        except RunError as exc:
            log.warning("repetition %d failed: %s", r, exc)
            records.append(exc)
    return records, aggregate(records)
