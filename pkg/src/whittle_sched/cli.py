"""Command line front end: ``whittle-sched {solve,indices,verify,simulate,compare}``.

Exit status is 0 on success, 1 when a computation or property check fails
and 2 when the configuration cannot be used. Failures also print one
``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump, load, spec_digest
from .dp_solver import (
    SubsidizedMdp,
    check_subsidy_profile,
    solve_grid,
    solve_rvi,
    verify_structure,
    write_solution_csv,
)
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DivergenceError,
    StructuralError,
    ValidationError,
    WhittleSchedError,
)
from .model import unichain_violations, validate
from .policies import build_policy
from .simulator import SimConfig, compare, run
from .whittle import (
    TwoTimescaleConfig,
    WhittleTable,
    bracket_grid,
    compute_indices_bisection,
    compute_indices_two_timescale,
    passive_sets_report,
    read_table_csv,
    write_index_curves,
    write_table_csv,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
METHODS = ("two-timescale", "bisection", "both")
MAX_REPORTED = 50


def _err(kind: str, msg: str) -> None:
    print(f"error: {kind}: {msg}", file=sys.stderr)


def _header(cfg: ExperimentConfig, seeds: Sequence[int] = ()) -> list[str]:
    out = [f"whittle-sched {__version__}", f"config {cfg.digest()}"]
    out.append("seeds " + (" ".join(str(s) for s in seeds) if seeds else "none"))
    return out


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    d = Path(args.out or cfg.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _parse_seeds(text: str | None) -> tuple[int, ...] | None:
    """``"0,3,5"`` or ``"0-9"`` (inclusive) or a mix of both."""
    if text is None:
        return None
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                a, b = part.split("-")
                seeds.extend(range(int(a), int(b) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigurationError(f"--seeds: cannot parse {text!r}") from None
    if not seeds:
        raise ConfigurationError("--seeds: no seeds given")
    return tuple(seeds)


def _compute_table(spec, method: str, cfg: ExperimentConfig) -> WhittleTable:
    s = cfg.solver
    if method == "bisection":
        return compute_indices_bisection(spec, tol=s.bisection_tol, solver_tol=s.tol, max_iter=s.max_iter, strict=False)
    tt = TwoTimescaleConfig(gamma=s.gamma, max_sweeps=s.sweeps)
    return compute_indices_two_timescale(spec, tt, solver_tol=s.tol, max_iter=s.max_iter)


def index_tables(cfg: ExperimentConfig, method: str, cache_dir: Path | None) -> list[WhittleTable]:
    """One table per queue, read from ``cache_dir`` when a table for identical inputs exists."""
    s = cfg.solver
    tables = []
    for qid, spec in zip(cfg.queue_ids, cfg.queues):
        key = spec_digest(spec, method, s.tol, s.max_iter, s.bisection_tol, s.gamma, s.sweeps)
        path = cache_dir / f"index-{key}.csv" if cache_dir else None
        if path is not None and path.exists():
            tables.append(read_table_csv(path, {"q": spec}, method=method)["q"])
            continue
        print(f"notice: computing {method} index table for {qid}", file=sys.stderr)
        t = _compute_table(spec, method, cfg)
        if path is not None and not t.failures:
            cache_dir.mkdir(parents=True, exist_ok=True)
            write_table_csv([("q", t)], path, [f"whittle-sched {__version__}", f"queue {key}", f"method {method}"])
        tables.append(t)
    return tables


def cmd_solve(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg, args)
    lam = float(args.lam)
    status = EXIT_OK
    for qid, spec in zip(cfg.queue_ids, cfg.queues):
        try:
            sol = solve_rvi(SubsidizedMdp(spec, lam), tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
        except ConvergenceError as exc:
            _err("convergence", f"{qid}: {exc}")
            status = EXIT_FAIL
            continue
        write_solution_csv(sol, out / f"solution_{qid}.csv", _header(cfg) + [f"queue {qid}"])
        print(f"{qid} lambda={lam:.10g} beta={sol.beta:.10g} residual={sol.residual:.3e} iterations={sol.iterations}")
    return status


def cmd_indices(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg, args)
    methods = ("two-timescale", "bisection") if args.method == "both" else (args.method,)
    status = EXIT_OK
    results: dict[str, list[tuple[str, WhittleTable]]] = {}
    for method in methods:
        rows = []
        for qid, spec in zip(cfg.queue_ids, cfg.queues):
            try:
                t = _compute_table(spec, method, cfg)
            except (ConvergenceError, DivergenceError, StructuralError) as exc:
                _err(type(exc).__name__, f"{qid} {method}: {exc}")
                status = EXIT_FAIL
                continue
            for x, m, why in t.failures:
                _err("state", f"{qid} {method} ({x}, {m}): {why}")
                status = EXIT_FAIL
            rows.append((qid, t))
        results[method] = rows
        write_table_csv(rows, out / f"indices_{method}.csv", _header(cfg) + [f"method {method}"])
    main = results.get("bisection") or results[methods[0]]
    write_index_curves([t for _, t in main], out / "index_curves.csv", _header(cfg))
    if args.method == "both":
        tt = dict(results["two-timescale"])
        with (out / "disagreement.csv").open("w", newline="") as fh:
            for line in _header(cfg):
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["queue_id", "max_abs_diff", "x", "mu_index"])
            for qid, b in results["bisection"]:
                if qid not in tt:
                    continue
                d = np.abs(tt[qid].index - b.index)
                x, m = np.unravel_index(int(np.nanargmax(d)), d.shape)
                w.writerow([qid, repr(float(d[x, m])), int(x), int(m)])
                print(f"{qid} max |two-timescale - bisection| = {d[x, m]:.3e} at ({x}, {m})")
    return status


def cmd_verify(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg, args)
    failures = []
    rows = []
    for qid, spec in zip(cfg.queue_ids, cfg.queues):
        if args.strict:
            bad = [v for v in validate(spec).violations if "dominate" in v]
            rows.append((qid, "stochastic_dominance", "", "fail" if bad else "pass"))
            failures.extend(("stochastic_dominance", "", qid, v) for v in bad)
            bad = unichain_violations(spec)
            rows.append((qid, "unichain", "", "fail" if bad else "pass"))
            failures.extend(("unichain", "", qid, v) for v in bad)
        grid = bracket_grid(spec, cfg.solver.grid_points)
        sols = solve_grid(spec, grid, tol=cfg.solver.tol, max_iter=cfg.solver.max_iter)
        for sol in sols:
            for r in verify_structure(sol).results.values():
                rows.append((qid, r.name, repr(float(sol.subsidy)), "pass" if r.passed else "fail"))
                for v in r.violations:
                    failures.append((r.name, sol.subsidy, qid, v))
        prof = check_subsidy_profile(sols)
        for name, bad in prof.items():
            prop = f"value_{name}_in_lambda"
            rows.append((qid, prop, "grid", "fail" if bad else "pass"))
            failures.extend((prop, "grid", qid, b) for b in bad)
        ind = passive_sets_report(sols)
        checks = {
            "passive_sets_nested": not ind.inclusion_violations,
            "passive_set_threshold_form": not ind.threshold_violations,
            "passive_full_at_bottom": ind.full_at_bottom,
            "passive_empty_at_top": ind.empty_at_top,
        }
        for name, ok in checks.items():
            rows.append((qid, name, "grid", "pass" if ok else "fail"))
            if not ok:
                failures.append((name, "grid", qid, ""))
        failures.extend(("passive_sets_nested", f"{a}->{b}", qid, (m, x)) for a, b, m, x in ind.inclusion_violations)
    with (out / "verify.csv").open("w", newline="") as fh:
        for line in _header(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["queue_id", "property", "lambda", "status"])
        w.writerows(rows)
    width = max(len(r[1]) for r in rows)
    for qid, name, lam, st in rows:
        print(f"{qid:>6} {name:<{width}} {lam:>24} {st}")
    for name, lam, qid, v in failures[:MAX_REPORTED]:
        print(f"failure: {name} lambda={lam} queue={qid} {v}", file=sys.stderr)
    if len(failures) > MAX_REPORTED:
        print(f"failure: {len(failures) - MAX_REPORTED} more, see verify.csv", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def _sim_config(cfg: ExperimentConfig, queues=None) -> SimConfig:
    s = cfg.simulation
    return SimConfig(tuple(queues or cfg.queues), horizon=s.horizon, delta=s.delta, seed=s.seeds[0])


def cmd_simulate(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg, args)
    seeds = _parse_seeds(args.seeds) or cfg.simulation.seeds
    tables = index_tables(cfg, args.method, out / "cache")
    policy = build_policy(args.policy, tables)
    sim = _sim_config(cfg)
    runs = []
    for seed in seeds:
        st = run(sim.with_seed(seed), policy)
        st.write_csv(out / f"sim_{args.policy}_seed{seed}.csv", _header(cfg, (seed,)) + [f"policy {args.policy}"])
        runs.append(st.summary())
        print(f"{args.policy} seed={seed} average_cost={st.final_cost:.6f} drops={st.total_drops}")
    _write_json(out / f"sim_{args.policy}.json", {"config": cfg.to_dict(), "seeds": list(seeds), "runs": runs})
    return EXIT_OK


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _comparison_rows(res, rate=None):
    for name, r in res.rows.items():
        row = [name, r.n, repr(r.mean_cost), repr(r.std_cost), repr(r.mean_drops), repr(r.std_drops)]
        yield row if rate is None else [repr(float(rate))] + row


def cmd_compare(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg, args)
    s = cfg.simulation
    seeds = _parse_seeds(args.seeds) or s.seeds
    header = _header(cfg, seeds)
    cols = ["policy", "n", "mean_cost", "std_cost", "mean_drops", "std_drops"]

    tables = index_tables(cfg, args.method, out / "cache")
    res = compare(_sim_config(cfg), {p: build_policy(p, tables) for p in s.policies}, seeds)
    with (out / "running_average.csv").open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["slot"] + list(s.policies))
        grid = res.runs[(s.policies[0], seeds[0])].slots
        means = [np.mean([res.runs[(p, sd)].average_cost for sd in seeds], axis=0) for p in s.policies]
        for k, slot in enumerate(grid):
            w.writerow([int(slot)] + [repr(float(m[k])) for m in means])
    with (out / "compare_summary.csv").open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows(_comparison_rows(res))
    for name, r in res.rows.items():
        print(f"{name:>10} cost {r.mean_cost:12.4f} +- {r.se_cost:.4f}  drops {r.mean_drops:10.2f} +- {r.se_drops:.2f}")

    sweep = []
    if s.arrival_sweep:
        with (out / "drops_vs_rate.csv").open("w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["arrival_rate"] + cols)
            for rate in s.arrival_sweep:
                rc = cfg.with_arrival_rate(rate)
                rt = index_tables(rc, args.method, out / "cache")
                rr = compare(_sim_config(rc), {p: build_policy(p, rt) for p in s.policies}, seeds)
                w.writerows(_comparison_rows(rr, rate))
                sweep.append({"arrival_rate": rate, "mean_drops": {n: r.mean_drops for n, r in rr.rows.items()}})
                print(f"rate {rate:g}: " + "  ".join(f"{n} {r.mean_drops:.1f}" for n, r in rr.rows.items()))
    _write_json(
        out / "compare.json",
        {
            "config": cfg.to_dict(),
            "seeds": list(seeds),
            "summary": {n: vars(r) for n, r in res.rows.items()},
            "runs": [res.runs[(p, sd)].summary() for p in s.policies for sd in seeds],
            "drop_sweep": sweep,
        },
    )
    return EXIT_OK


def cmd_config(args) -> int:
    """Echo the parsed configuration in canonical form."""
    sys.stdout.write(dump(load(args.config)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="whittle-sched", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--out", help="output directory (default: the config's output)")
        return sp

    sp = common(sub.add_parser("solve", help="solve the subsidised problem of every queue"))
    sp.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sp.set_defaults(func=cmd_solve)

    sp = common(sub.add_parser("indices", help="compute index tables"))
    sp.add_argument("--method", choices=METHODS, default="bisection")
    sp.set_defaults(func=cmd_indices)

    sp = common(sub.add_parser("verify", help="check structural properties over a subsidy grid"))
    sp.add_argument("--strict", action="store_true", help="also fail on channels without stochastic dominance")
    sp.set_defaults(func=cmd_verify)

    for name, func in (("simulate", cmd_simulate), ("compare", cmd_compare)):
        sp = common(sub.add_parser(name, help=f"{name} scheduling policies"))
        sp.add_argument("--seeds", help="e.g. 0-9 or 1,4,7 (default: the config's seeds)")
        sp.add_argument("--method", choices=METHODS[:2], default="bisection", help="index method for tables")
        if name == "simulate":
            sp.add_argument("--policy", choices=("whittle", "maxweight", "wfq"), required=True)
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("config", help="print the parsed configuration"))
    sp.set_defaults(func=cmd_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        _err("validation", str(exc))
        return EXIT_CONFIG
    except ConfigurationError as exc:
        _err("configuration", str(exc))
        return EXIT_CONFIG
    except WhittleSchedError as exc:
        _err(type(exc).__name__, str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
