"""Command-line front end: ``camera {run,truth,cost-sweep,contour,validate-config}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from camera.acquisition import CostModel
from camera.errors import CameraError, ConfigError, ExternalModelError, NonZeroExit
from camera.runner import RunConfig, RunError, repeat, resolve_problem, run
from camera.testbed import PROBLEM_NAMES, brute_force_pf, get_problem

log = logging.getLogger("camera")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", "config") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", "config") from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", "config")
    return data


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree: dict, dotted: str, value):
    """Set ``tree[a][b]... = value`` for ``dotted = "a.b..."``, creating sections as needed."""
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError("is not a section", ".".join(parts[: parts.index(p) + 1]))
        node = nxt
    node[parts[-1]] = value


_FLAG_FIELDS = {
    "problem": "problem", "mode": "mode", "design": "design", "budget": "budget", "seed": "master_seed",
    "n_seed": "n_seed", "max_iterations": "max_iterations", "value": "value_kind", "eta": "eta",
    "pool_size": "pool_size", "n_is": "n_is", "components": "gmm_components", "refit_stride": "refit_stride",
    "restarts": "fit_restarts", "max_fit": "max_fit",
}


def build_config(args) -> RunConfig:
    tree = load_config_file(args.config) if getattr(args, "config", None) else {}
    tree.pop("reps", None)
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            tree[name] = v
    if getattr(args, "per_iteration_pf", False):
        tree["per_iteration_pf"] = True
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}", "set")
        k, v = item.split("=", 1)
        apply_override(tree, k.strip(), _parse_value(v))
    cfg = RunConfig.from_dict(tree)
    resolve_problem(cfg)  # surfaces problem / cost-table / external errors before any work
    return cfg


def _reps(args):
    if args.reps is not None:
        return args.reps
    if getattr(args, "config", None):
        return int(load_config_file(args.config).get("reps", 1))
    return 1


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _write_run_outputs(records, agg, cfg, out, figures):
    from camera.report import write_aggregate, write_contour, write_histograms, write_record

    problem = None
    for r, rec in enumerate(records):
        if isinstance(rec, RunError):
            rec = rec.record
        write_record(rec, out, r)
        problem = rec.problem
    stem = f"{problem}_{cfg.mode}"
    write_aggregate(agg, out / f"{stem}_aggregate.csv")
    good = [r for r in records if not isinstance(r, RunError)]
    write_histograms([(cfg.mode, i, r) for i, r in enumerate(good)], out / f"{stem}_histogram.csv")
    last = good[-1] if good else None
    if last is not None and last.model is not None and last.dim == 2:
        write_contour(last.model, out / f"{stem}_contour.csv")
    if figures and good:
        from camera.plotting import plot_contour, plot_error_vs_cost, plot_fidelity_histogram

        plot_error_vs_cost({cfg.mode: agg}, out / f"{stem}_error_vs_cost.png", title=problem)
        plot_fidelity_histogram(good, out / f"{stem}_histogram.png", title=problem)
        if last.model is not None and last.dim == 2:
            plot_contour(last.model, resolve_problem(cfg).limit, out / f"{stem}_contour.png", title=problem)


def cmd_run(args):
    cfg = build_config(args)
    reps = _reps(args)
    if reps < 1:
        raise ConfigError("must be >= 1", "reps")
    out = Path(args.out)
    records, agg = repeat(cfg, reps)
    _write_run_outputs(records, agg, cfg, out, not args.no_figures)
    for r, rec in enumerate(records):
        if isinstance(rec, RunError):
            print(f"rep {r}: FAILED {rec}")
            continue
        f = rec.final
        err = "" if rec.final_error is None else f" rel_err={rec.final_error:.4g}"
        print(f"rep {r}: p_hat={f.p_hat:.6g} variance={f.variance:.4g} cumulative_cost={f.cumulative_cost:.6g}"
              f" iterations={rec.iterations}{err}")
    failed = sum(isinstance(r, RunError) for r in records)
    if failed == len(records):
        raise records[0]
    return 0


def cmd_truth(args):
    prob = get_problem(args.problem)
    est = brute_force_pf(prob, args.n, args.seed)
    half = 2.0 * est.std
    print(f"{prob.name}: p_F = {est.p_hat:.6g} +/- {half:.3g} (2 std, N={est.n_samples}, seed={args.seed})")
    return 0


def cmd_cost_sweep(args):
    from camera.report import write_aggregates

    if not args.c1:
        raise ConfigError("need at least one value", "c1")
    if any(c < 0 for c in args.c1):
        raise ConfigError("values must be >= 0", "c1")
    base = build_config(args)
    reps = _reps(args)
    out = Path(args.out)
    curves = {}
    for c1 in args.c1:
        cost = CostModel(c0=base.cost.c0, c1=c1, c2=base.cost.c2)
        records, agg = repeat(base.replace(cost=cost, mode="multifidelity"), reps)
        curves[f"c1={c1:g}"] = agg
        print(f"c1={c1:g}: median final rel_err="
              f"{_median([e for e in agg.final_errors if e is not None]):.4g} over {len(agg.final_errors)} runs")
    keyed = [(("c1", float(k.split("=")[1])), a) for k, a in curves.items()]
    path = write_aggregates(keyed, out / f"{base.problem}_cost_sweep.csv", "c1")
    if args.single_fidelity:
        _, agg = repeat(base.replace(mode="single_fidelity"), reps)
        curves["single_fidelity"] = agg
        write_aggregates([(("mode", "single_fidelity"), agg)], out / f"{base.problem}_cost_sweep_sf.csv", "mode")
    if not args.no_figures:
        from camera.plotting import plot_error_vs_cost

        plot_error_vs_cost(curves, out / f"{base.problem}_cost_sweep.png", title=f"{base.problem}: cost sweep")
    print(f"wrote {path}")
    return 0


def cmd_contour(args):
    from camera.report import write_contour

    cfg = build_config(args)
    if resolve_problem(cfg).dim != 2:
        raise ConfigError("contour export needs a 2-d problem", "problem")
    rec = run(cfg)
    path = write_contour(rec.model, args.out, args.n)
    if not args.no_figures:
        from camera.plotting import plot_contour

        plot_contour(rec.model, resolve_problem(cfg).limit, Path(args.out).with_suffix(".png"), args.n, cfg.problem)
    print(f"wrote {path}")
    return 0


def cmd_validate(args):
    tree = load_config_file(args.config)
    reps = tree.pop("reps", 1)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("must be a positive integer", "reps")
    cfg = RunConfig.from_dict(tree)
    resolve_problem(cfg)
    print(json.dumps({"valid": True, "config": cfg.to_dict(), "reps": reps}, indent=2))
    return 0


def _median(xs):
    import numpy as np

    return float(np.median(xs)) if xs else float("nan")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--problem", help=f"benchmark name ({', '.join(PROBLEM_NAMES)}) or 'external'")
    p.add_argument("--mode", choices=["multifidelity", "single_fidelity"])
    p.add_argument("--design", choices=["adaptive", "lhs"])
    p.add_argument("--budget", type=float)
    p.add_argument("--seed", type=int, help="master seed; repetition r uses seed + r")
    p.add_argument("--reps", type=int)
    p.add_argument("--n-seed", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--value", choices=["bichon", "ranjan"])
    p.add_argument("--eta", type=float)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--n-is", type=int)
    p.add_argument("--components", type=int)
    p.add_argument("--refit-stride", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-fit", type=int)
    p.add_argument("--per-iteration-pf", action="store_true", help="record a diagnostic estimate each iteration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config entry by dotted path, e.g. acquisition.n_fantasies=8")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="camera", description="Cost-aware multifidelity reliability analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write artifacts")
    _add_run_flags(p)
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("truth", help="brute-force Monte Carlo failure probability")
    p.add_argument("--problem", required=True)
    p.add_argument("--n", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("cost-sweep", help="repeat runs over several cost steepness values c1")
    _add_run_flags(p)
    p.add_argument("--c1", type=float, nargs="*", default=None)
    p.add_argument("--single-fidelity", action="store_true", help="also run the single-fidelity reference")
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_cost_sweep)

    p = sub.add_parser("contour", help="export the s = 1 posterior on a lattice after one run")
    _add_run_flags(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", default="contour.csv")
    p.set_defaults(func=cmd_contour)

    p = sub.add_parser("validate-config", help="check a configuration file")
    p.add_argument("config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_validate)
    return parser


def _error_payload(exc):
    d = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.field:
        d["field"] = exc.field
    if isinstance(exc, RunError):
        d["iteration"] = exc.iteration
        cause = exc.__cause__
        if cause is not None:
            d["cause"] = type(cause).__name__
    if isinstance(exc, ExternalModelError):
        d["command"] = exc.command
    if isinstance(exc, NonZeroExit):
        d["code"] = exc.code
    return d


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2
    except (CameraError, KeyError, ValueError) as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
