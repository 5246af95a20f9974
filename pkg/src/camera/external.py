"""Adapter that turns a user simulator executable into a multifidelity evaluator.

Wire contract: each argv token is formatted with ``{x0} {x1} ... {s}``; the
process must exit 0 and print the scalar output on the last line of stdout
(or write it to ``result_file`` inside ``workdir``).
"""

from __future__ import annotations

import math
import re
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camera.acquisition import CostModel
from camera.errors import ConfigError, NonZeroExit, ParseFailure, Timeout
from camera.mfgp import Domain, LimitState

_PLACEHOLDER = re.compile(r"\{(x\d+|s)\}")


@dataclass(frozen=True)
class ExternalModelSpec:
    command: tuple
    lower: tuple
    upper: tuple
    fidelities: tuple | None = None
    timeout: float = 600.0
    workdir: str | None = None
    result_file: str | None = None
    limit: LimitState = field(default_factory=LimitState)
    cost: CostModel | None = None
    max_workers: int = 1
    true_pf: float | None = None
    name: str = "external"

    def __post_init__(self):
        cmd = self.command
        if isinstance(cmd, str):
            import shlex
            cmd = shlex.split(cmd)
        cmd = tuple(str(c) for c in cmd)
        if not cmd:
            raise ConfigError("empty command", "external.command")
        object.__setattr__(self, "command", cmd)
        if len(self.lower) != len(self.upper):
            raise ConfigError("lower and upper differ in length", "external.upper")
        found = set()
        for tok in cmd:
            found.update(_PLACEHOLDER.findall(tok))
        need = {f"x{i}" for i in range(len(self.lower))} | {"s"}
        missing = sorted(need - found)
        if missing:
            raise ConfigError(f"template lacks placeholder(s) {', '.join('{' + m + '}' for m in missing)}",
                              "external.command")
        extra = sorted(found - need)
        if extra:
            raise ConfigError(f"template has unknown placeholder(s) {extra}", "external.command")
        if not self.timeout > 0:
            raise ConfigError("must be positive", "external.timeout")
        if self.max_workers < 1:
            raise ConfigError("must be >= 1", "external.max_workers")

    @property
    def dim(self):
        return len(self.lower)

    def domain(self):
        try:
            return Domain(self.lower, self.upper, self.fidelities)
        except ValueError as exc:
            raise ConfigError(str(exc), "external.fidelities" if self.fidelities else "external.lower") from None

    def render(self, x, s):
        vals = {f"x{i}": repr(float(v)) for i, v in enumerate(np.ravel(x))}
        vals["s"] = repr(float(s))
        return [_PLACEHOLDER.sub(lambda m: vals[m.group(1)], tok) for tok in self.command]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {"command", "lower", "upper", "fidelities", "timeout", "workdir", "result_file", "limit", "cost",
                 "max_workers", "true_pf", "name"}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError("unknown key", f"external.{bad[0]}")
        for key in ("command", "lower", "upper"):
            if key not in d:
                raise ConfigError("required", f"external.{key}")
        lim = d.get("limit") or {}
        try:
            d["limit"] = LimitState(float(lim.get("rho", 1.0)), float(lim.get("a", 0.0)))
        except ValueError as exc:
            raise ConfigError(str(exc), "external.limit") from None
        if d.get("cost") is not None:
            try:
                d["cost"] = CostModel.from_dict(d["cost"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(str(exc), "external.cost") from None
        d["lower"] = tuple(float(v) for v in d["lower"])
        d["upper"] = tuple(float(v) for v in d["upper"])
        if d.get("fidelities") is not None:
            d["fidelities"] = tuple(float(v) for v in d["fidelities"])
        return cls(**d)

    def to_dict(self):
        return {"command": list(self.command), "lower": list(self.lower), "upper": list(self.upper),
                "fidelities": None if self.fidelities is None else list(self.fidelities), "timeout": self.timeout,
                "workdir": self.workdir, "result_file": self.result_file, "limit": self.limit.to_dict(),
                "cost": None if self.cost is None else self.cost.to_dict(), "max_workers": self.max_workers,
                "true_pf": self.true_pf, "name": self.name}


def _parse_scalar(text, cmd, x, s, where):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseFailure(f"no output on {where}", cmd, x, s)
    try:
        val = float(lines[-1])
    except ValueError:
        raise ParseFailure(f"last line of {where} is not a number: {lines[-1][:80]!r}", cmd, x, s) from None
    if not math.isfinite(val):
        raise ParseFailure(f"non-finite value {val} on {where}", cmd, x, s)
    return val


def external_eval(spec: ExternalModelSpec, x, s) -> float:
    """Run the simulator once at ``(x, s)`` and return its scalar output."""
    cmd = spec.render(x, s)
    try:
        proc = subprocess.run(cmd, cwd=spec.workdir, capture_output=True, text=True, timeout=spec.timeout)
    except subprocess.TimeoutExpired:
        raise Timeout(f"no result within {spec.timeout} s", cmd, x, s) from None
    except OSError as exc:
        raise NonZeroExit(f"could not start: {exc}", cmd, None, "", x, s) from None
    if proc.returncode != 0:
        raise NonZeroExit(f"exit code {proc.returncode}: {proc.stderr.strip()[-200:]}", cmd, proc.returncode,
                          proc.stderr, x, s)
    if spec.result_file:
        path = Path(spec.workdir or ".") / spec.result_file
        try:
            text = path.read_text()
        except OSError:
            raise ParseFailure(f"result file {path} missing", cmd, x, s) from None
        return _parse_scalar(text, cmd, x, s, f"result file {path}")
    return _parse_scalar(proc.stdout, cmd, x, s, "stdout")


class ExternalModel:
    """Batch evaluator with a per-(x, s) cache; usable wherever a benchmark evaluator is."""

    def __init__(self, spec: ExternalModelSpec):
        self.spec = spec
        self._cache = {}
        self._lock = threading.Lock()
        self.calls = 0

    @staticmethod
    def _key(x, s):
        return tuple(float(v) for v in np.ravel(x)) + (float(s),)

    def evaluate_one(self, x, s):
        key = self._key(x, s)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
            self.calls += 1
        val = external_eval(self.spec, x, s)
        with self._lock:
            self._cache[key] = val
        return val

    def __call__(self, X, s):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        # collapse repeats so each distinct point spawns one process
        uniq = {}
        for x in X:
            uniq.setdefault(self._key(x, s), x)
        pending = [x for k, x in uniq.items() if k not in self._cache]
        if len(pending) > 1 and self.spec.max_workers > 1:
            with ThreadPoolExecutor(self.spec.max_workers) as pool:
                list(pool.map(lambda x: self.evaluate_one(x, s), pending))
        else:
            for x in pending:
                self.evaluate_one(x, s)
        return np.array([self._cache[self._key(x, s)] for x in X])


def problem_from_spec(d, default_cost: CostModel):
    from camera.testbed import BenchmarkProblem

    spec = d if isinstance(d, ExternalModelSpec) else ExternalModelSpec.from_dict(d)
    cost = spec.cost or default_cost
    domain = spec.domain()
    check_cost_fidelities(cost, domain, "external.cost.table" if spec.cost else "cost.table")
    return BenchmarkProblem(spec.name, domain, ExternalModel(spec), spec.limit, cost, spec.true_pf,
                            "user supplied" if spec.true_pf is not None else "")


def check_cost_fidelities(cost: CostModel, domain: Domain, field_path="cost.table"):
    """A table cost model must price every fidelity the domain can produce."""
    if cost.kind != "table":
        return
    if not domain.is_discrete:
        raise ConfigError("a table cost model needs a discrete fidelity set", field_path)
    missing = [f for f in domain.fidelities if float(f) not in cost.table]
    if missing:
        raise ConfigError(f"no cost for fidelity {missing[0]}", field_path)
