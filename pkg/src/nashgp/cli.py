"""Command-line front end.

Subcommands
-----------
solve FILE
    Run the sequential design for every replicate of an experiment file.
baseline FILE
    Run the fixed-point solver from several random starts.
table {1,2}
    Replicate the P1 or differential-game comparison at a chosen scale.
problems
    List the registered problems.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or schema
error.  ``NASHGP_SEED`` and ``NASHGP_OUT`` override the seed and output
directory of an experiment file; command-line flags override both.
"""

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .acquisition import AcquisitionConfig
from .errors import NashGPError
from .game import PayoffTensor, StrategyGrid, best_response, fixed_point_solve, nash_extract
from .loop import RunConfig, RunLog, derive_seed, run
from .problems import PROBLEMS, build_factorial_grid, make_problem

log = logging.getLogger("nashgp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# seed-derivation tags, distinct from the loop's
_REPLICATE, _BASELINE = 101, 102

# ------------------------------------------------------------------ schema

_ACQ = {"M": int, "K": int, "R": int, "cdf_switch": int, "n_sim": int, "n_cand": int,
        "cdf_accuracy": float}
_RUN = {"n0": int, "n_max": int, "acquisition": str, "stop_eps": float,
        "repetitions_per_point": int, "kernel": str, "n_restarts": int,
        "acquisition_config": _ACQ}
SCHEMA = {
    "problem": {"name": str, "params": dict},
    "grid": {"scheme": str, "counts": [int], "seed": int},
    "run": _RUN,
    "baseline": {"starts": int, "alpha": float, "k_max": int, "tol": float,
                 "check_points": int},
    "replicates": int,
    "seed": int,
    "output": str,
}
REQUIRED = [("problem", "name"), ("grid", "counts")]


class SchemaError(Exception):
    """Experiment file problem, carrying the offending line."""

    def __init__(self, source, line, message):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def _lines(node, path=(), out=None):
    # map key paths to 1-based line numbers of their keys
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _lines(value, sub, out)
    return out


def _type_ok(value, kind):
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is str:
        return isinstance(value, str)
    if kind is dict:
        return isinstance(value, dict)
    if isinstance(kind, list):
        return isinstance(value, list) and all(_type_ok(v, kind[0]) for v in value)
    return False


def _type_name(kind):
    if isinstance(kind, list):
        return f"list of {kind[0].__name__}"
    if isinstance(kind, dict):
        return "mapping"
    return {int: "integer", float: "number", str: "string", dict: "mapping"}[kind]


def _check(data, schema, path, lines, source):
    for key, value in data.items():
        sub = path + (key,)
        dotted = ".".join(map(str, sub))
        if key not in schema:
            known = ", ".join(sorted(schema))
            raise SchemaError(source, lines.get(sub), f"unknown key {dotted!r} (allowed: {known})")
        kind = schema[key]
        if isinstance(kind, dict):
            if not isinstance(value, dict):
                raise SchemaError(source, lines.get(sub), f"{dotted!r} must be a mapping")
            _check(value, kind, sub, lines, source)
        elif not _type_ok(value, kind):
            raise SchemaError(source, lines.get(sub),
                              f"{dotted!r} must be a {_type_name(kind)}, got {value!r}")


def parse_experiment(text, source="<experiment>"):
    """Validate an experiment file and return it as a dict.

    Raises
    ------
    SchemaError
        Unknown keys, wrong types or missing required keys, with the line.
    """
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SchemaError(source, mark.line + 1 if mark else None, f"invalid YAML: {exc}")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise SchemaError(source, 1, "top level must be a mapping")
    lines = _lines(node)
    _check(data, SCHEMA, (), lines, source)
    for sect, key in REQUIRED:
        if key not in data.get(sect, {}):
            raise SchemaError(source, lines.get((sect,)), f"missing required key {sect}.{key}")
    if data["problem"]["name"] not in PROBLEMS:
        raise SchemaError(source, lines.get(("problem", "name")),
                          f"unknown problem {data['problem']['name']!r}")
    return data


def load_experiment(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(str(path), None, f"cannot read: {exc.strerror}")
    return parse_experiment(text, str(path))


def apply_overrides(exp, seed=None, out=None, mode=None, env=None):
    """Environment variables, then command-line flags, win over the file."""
    env = os.environ if env is None else env
    exp = json.loads(json.dumps(exp))
    if env.get("NASHGP_SEED"):
        exp["seed"] = int(env["NASHGP_SEED"])
    if env.get("NASHGP_OUT"):
        exp["output"] = env["NASHGP_OUT"]
    if seed is not None:
        exp["seed"] = seed
    if out is not None:
        exp["output"] = out
    if mode is not None:
        exp.setdefault("run", {})["acquisition"] = mode
    return exp


# ---------------------------------------------------------------- builders


@dataclass
class Experiment:
    """A validated experiment with its problem and grid built."""

    data: dict
    problem: object
    grid: StrategyGrid

    @property
    def seed(self):
        return int(self.data.get("seed", 0))

    @property
    def replicates(self):
        return int(self.data.get("replicates", 1))

    @property
    def output(self):
        return Path(self.data.get("output", "results"))


def build(exp):
    problem = make_problem(exp["problem"]["name"], **exp["problem"].get("params", {}))
    g = exp["grid"]
    grid = build_factorial_grid(problem, g["counts"], g.get("scheme", "regular"),
                                g.get("seed", 0))
    return Experiment(exp, problem, grid)


def run_config(exp, replicate):
    r = dict(exp.get("run", {}))
    acq = AcquisitionConfig(**r.pop("acquisition_config", {}))
    return RunConfig(cfg=acq, seed=derive_seed(exp.get("seed", 0), _REPLICATE, replicate), **r)


# --------------------------------------------------------------- solve


def _solve_one(exp, replicate, out_dir, resume):
    ex = build(exp)
    cfg = run_config(exp, replicate)
    ckpt = out_dir / "checkpoints" / f"replicate_{replicate}.json"
    prior = None
    if resume and ckpt.exists():
        prior = RunLog.from_checkpoint(ckpt.read_text())
    t0 = time.perf_counter()
    state = run(ex.problem, ex.grid, cfg, checkpoint_path=ckpt, resume=prior)
    (out_dir / f"replicate_{replicate}.jsonl").write_text(state.to_jsonl())
    log.info("replicate %d: estimate %s after %s evaluations (%.1f s)", replicate,
             state.final_index, state.evaluations_to_convergence(), time.perf_counter() - t0)
    return state.checkpoint()


def _solve_task(args):
    exp, replicate, out_dir, resume = args
    try:
        return replicate, _solve_one(exp, replicate, Path(out_dir), resume), None
    except Exception as exc:  # reported with replicate context by the caller
        return replicate, None, f"{type(exc).__name__}: {exc}"


def _pool_map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    # one BLAS thread per worker so the total stays within --jobs
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


SUMMARY_HEADER = ["replicate", "seed", "mode", "evaluations", "evaluations_to_convergence",
                  "final_index"]
CONVERGENCE_HEADER = ["replicate", "iteration", "evaluations", "chosen_index",
                      "estimate_index", "best_pe", "gamma", "criterion", "no_ne_fraction"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary(path, logs, grid, mode):
    """Summary CSV: one row per replicate, final strategy and values appended."""
    p, d = grid.p, grid.d
    header = (SUMMARY_HEADER + [f"x_{j + 1}" for j in range(d)]
              + [f"value_{i + 1}" for i in range(p)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r, state in sorted(logs.items()):
            x = grid.points([state.final_index])[0].tolist()
            w.writerow([r, state.config["seed"], mode, state.evaluations,
                        state.evaluations_to_convergence(), state.final_index]
                       + [_fmt(float(v)) for v in x]
                       + [_fmt(float(v)) for v in state.final_values])


def write_convergence(path, logs, p):
    """Plot data: the estimate's values after every iteration of every replicate."""
    header = CONVERGENCE_HEADER + [f"value_{i + 1}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r, state in sorted(logs.items()):
            for rec in state.records:
                w.writerow([r, rec.iteration, rec.evaluations, _fmt(rec.chosen_index),
                            rec.estimate_index, _fmt(rec.best_pe), _fmt(rec.gamma),
                            _fmt(rec.criterion), _fmt(rec.no_ne_fraction)]
                           + [_fmt(float(v)) for v in rec.estimate_values])


def solve(exp, jobs=1, resume=False):
    """Run all replicates and write their outputs.

    Returns
    -------
    dict
        Replicate number to :class:`RunLog`.

    Raises
    ------
    RuntimeError
        A replicate failed; the message names it.
    """
    ex = build(exp)
    out = ex.output
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    tasks = [(exp, r, str(out), resume) for r in range(ex.replicates)]
    logs, errors = {}, []
    for r, text, err in _pool_map(_solve_task, tasks, jobs):
        if err is not None:
            errors.append(f"replicate {r}: {err}")
        else:
            logs[r] = RunLog.from_checkpoint(text)
    if errors:
        raise RuntimeError("; ".join(errors))
    mode = exp.get("run", {}).get("acquisition", "pe")
    write_summary(out / "summary.csv", logs, ex.grid, mode)
    write_convergence(out / "convergence.csv", logs, ex.problem.p)
    return logs


# ------------------------------------------------------------ baseline


def _alternatives(lo, hi, count):
    # a regular grid with about ``count`` points over one block's box
    per_dim = max(2, int(np.floor(count ** (1.0 / lo.size) + 1e-9)))
    axes = [np.linspace(a, b, per_dim) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def is_equilibrium(problem, x, check_points=961, rtol=1e-3):
    """Check ``x`` against a grid of unilateral deviations for every player.

    For each player a small game is built where that player chooses between
    its own block of ``x`` and a regular grid over its block box while the
    others stay at ``x``; ``x`` must be among the best responses, up to
    ``rtol`` times the spread of that player's costs over the deviations.
    """
    x = np.asarray(x, dtype=float)
    offsets = np.cumsum((0,) + tuple(problem.block_dims))
    for i in range(problem.p):
        blk = slice(offsets[i], offsets[i + 1])
        b = problem.bounds[blk]
        alt = _alternatives(b[:, 0], b[:, 1], check_points)
        alt = alt[~np.all(alt == x[blk], axis=1)]
        actions = []
        for j in range(problem.p):
            own = x[offsets[j]:offsets[j + 1]][None]
            actions.append(np.vstack([own, alt]) if j == i else own)
        grid = StrategyGrid(actions, problem.bounds)
        values = problem.evaluate(grid.points())
        tensor = PayoffTensor(grid, values)
        tol = rtol * np.ptp(values[:, i])
        if 0 not in best_response(tensor, i, [0] * (problem.p - 1), tol=tol):
            return False
    return True


BASELINE_HEADER = ["start", "seed", "converged", "evaluations", "iterations",
                   "is_equilibrium", "nearest_index"]


def _baseline_one(args):
    exp, start = args
    try:
        ex = build(exp)
        b = exp.get("baseline", {})
        pb = ex.problem
        seed = derive_seed(ex.seed, _BASELINE, start)
        rng = np.random.default_rng(seed)
        lo, hi = pb.bounds[:, 0], pb.bounds[:, 1]
        x0 = lo + rng.random(pb.d) * (hi - lo)
        res = fixed_point_solve(pb, pb.bounds, pb.block_dims, x0, alpha=b.get("alpha", 0.5),
                                k_max=b.get("k_max", 100), tol=b.get("tol", 1e-5))
        ok = is_equilibrium(pb, res.x, b.get("check_points", 961))
        row = {"start": start, "seed": seed, "converged": res.converged,
               "evaluations": res.evaluations, "iterations": res.iterations,
               "is_equilibrium": ok, "nearest_index": int(ex.grid.nearest(res.x)[0]),
               "x": res.x.tolist(), "values": pb(res.x).tolist(), "x0": x0.tolist(),
               "trajectory": [t.tolist() for t in res.trajectory]}
        return start, row, None
    except Exception as exc:
        return start, None, f"{type(exc).__name__}: {exc}"


def baseline(exp, jobs=1):
    """Fixed-point runs from ``baseline.starts`` random starts; writes outputs."""
    ex = build(exp)
    out = ex.output
    out.mkdir(parents=True, exist_ok=True)
    starts = int(exp.get("baseline", {}).get("starts", 5))
    rows, errors = {}, []
    for s, row, err in _pool_map(_baseline_one, [(exp, s) for s in range(starts)], jobs):
        if err is not None:
            errors.append(f"start {s}: {err}")
        else:
            rows[s] = row
    if errors:
        raise RuntimeError("; ".join(errors))
    d, p = ex.problem.d, ex.problem.p
    with open(out / "baseline.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASELINE_HEADER + [f"x_{j + 1}" for j in range(d)]
                   + [f"value_{i + 1}" for i in range(p)])
        for s, row in sorted(rows.items()):
            w.writerow([row[k] for k in BASELINE_HEADER] + [_fmt(v) for v in row["x"]]
                       + [_fmt(v) for v in row["values"]])
    for s, row in rows.items():
        with open(out / f"baseline_{s}.jsonl", "w") as fh:
            fh.write(json.dumps({"type": "config", "start": s, "seed": row["seed"],
                                 "x0": row["x0"], **exp.get("baseline", {})},
                                sort_keys=True) + "\n")
            for k, x in enumerate(row["trajectory"]):
                fh.write(json.dumps({"type": "iteration", "iteration": k, "x": x}) + "\n")
            final = {k: v for k, v in row.items() if k not in ("trajectory", "x0")}
            fh.write(json.dumps({"type": "final", **final}, sort_keys=True) + "\n")
    return rows


# --------------------------------------------------------------- tables

PUBLISHED = {
    1: {"pe": ("9--10", "5/5"), "sur": ("8--14", "5/5"), "fixed point": ("200--1000", "3/5")},
    2: {"pe": ("83--95", None), "sur": ("81--88", None), "fixed point": ("3000--5000", None)},
}


def table_experiments(table, budget_scale=1.0, replicates=5, seed=0, out="results"):
    """The experiment dicts behind a comparison table.

    Table 1 (P1, 31x31 grid, n0=6) is cheap and ignores ``budget_scale``.
    Table 2 scales the differential game: ``round(1 + 16 sqrt(s))`` actions
    per player, ``n0 = round(80 sqrt(s))`` and ``n_max = round(160 sqrt(s))``,
    so ``s = 1`` is the full 17^4 grid.
    """
    out = Path(out)
    if table == 1:
        base = {"problem": {"name": "p1"}, "grid": {"counts": [31, 31], "scheme": "regular"},
                "replicates": replicates, "seed": seed,
                "baseline": {"starts": replicates}}
        run_cfg = {"n0": 6, "n_max": 30}
        acq = {"pe": {"n_sim": 961, "n_cand": 256}, "sur": {"n_sim": 961, "n_cand": 128}}
    elif table == 2:
        root = np.sqrt(budget_scale)
        m = int(round(1 + 16 * root))
        base = {"problem": {"name": "diffgame", "params": {"kappa": 1}},
                "grid": {"counts": [m] * 4, "scheme": "lhd", "seed": seed},
                "replicates": replicates, "seed": seed,
                "baseline": {"starts": replicates, "check_points": 81}}
        n0 = max(2, int(round(80 * root)))
        run_cfg = {"n0": n0, "n_max": max(n0 + 1, int(round(160 * root)))}
        acq = {"pe": {"n_sim": 1296, "n_cand": 256}, "sur": {"n_sim": 1296, "n_cand": 256}}
    else:
        raise ValueError(f"unknown table {table!r}")
    exps = {}
    for mode in ("pe", "sur"):
        e = json.loads(json.dumps(base))
        e["run"] = {**run_cfg, "acquisition": mode, "acquisition_config": acq[mode]}
        e["output"] = str(out / f"table{table}" / mode)
        exps[mode] = e
    fp = json.loads(json.dumps(base))
    fp["output"] = str(out / f"table{table}" / "baseline")
    exps["fixed point"] = fp
    return exps


def _range(values):
    if not values:
        return "-"
    return f"{min(values)}--{max(values)}"


def _reference_index(ex):
    # exhaustive discrete equilibrium of the true tensor
    tensor = PayoffTensor(ex.grid, ex.problem.evaluate(ex.grid.points()))
    return nash_extract(tensor).indices


def table(table_id, budget_scale=1.0, replicates=5, seed=0, out="results", jobs=1,
          stream=sys.stdout):
    """Run and print one comparison table; returns its rows."""
    exps = table_experiments(table_id, budget_scale, replicates, seed, out)
    if table_id == 2 and budget_scale >= 1.0:
        log.warning("full-scale table 2 evaluates a 17^4 grid and may take many hours")
    ex = build(exps["pe"])
    reference = set(int(i) for i in _reference_index(ex))
    rows = {}
    finals = {}
    for mode in ("pe", "sur"):
        logs = solve(exps[mode], jobs=jobs)
        evals = [s.evaluations_to_convergence() for s in logs.values()]
        finals[mode] = [s.final_index for s in logs.values()]
        rows[mode] = evals
    fp = baseline(exps["fixed point"], jobs=jobs)
    rows["fixed point"] = [r["evaluations"] for r in fp.values() if r["converged"]]
    finals["fixed point"] = [r["nearest_index"] if r["is_equilibrium"] else None
                             for r in fp.values()]
    if table_id == 1:
        truth = reference
    else:
        # no known truth: the most common answer across all solvers
        votes = [i for v in finals.values() for i in v if i is not None]
        truth = {max(set(votes), key=votes.count)} if votes else set()
    print(f"Table {table_id} (budget scale {budget_scale:g}, {replicates} replicates)", file=stream)
    print(f"reference equilibrium index: {sorted(truth)}", file=stream)
    scaled = table_id == 2 and budget_scale != 1.0
    header = f"{'strategy':<12} {'evaluations':>14} {'success':>8}"
    if not scaled:
        header += f" {'published':>14} {'pub. success':>12}"
    print(header, file=stream)
    summary = {}
    for name in ("pe", "sur", "fixed point"):
        hits = sum(1 for i in finals[name] if i in truth)
        line = f"{name:<12} {_range(rows[name]):>14} {f'{hits}/{len(finals[name])}':>8}"
        if not scaled:
            pub, rate = PUBLISHED[table_id][name]
            line += f" {pub:>14} {rate or '-':>12}"
        print(line, file=stream)
        summary[name] = {"evaluations": rows[name], "finals": finals[name], "hits": hits,
                         "median": statistics.median(rows[name]) if rows[name] else None}
    summary["reference"] = sorted(truth)
    return summary


# ----------------------------------------------------------------- main


def _parser():
    ap = argparse.ArgumentParser(prog="nashgp", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides file and NASHGP_SEED)")
    common.add_argument("--jobs", type=int, default=1, help="parallel replicate processes")
    common.add_argument("--out", help="output directory (overrides file and NASHGP_OUT)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="run the sequential design")
    s.add_argument("experiment")
    s.add_argument("--mode", choices=("pe", "sur"), help="acquisition function")
    s.add_argument("--resume", action="store_true", help="continue from checkpoints")
    b = sub.add_parser("baseline", parents=[common], help="run the fixed-point baseline")
    b.add_argument("experiment")
    t = sub.add_parser("table", parents=[common], help="replicate a comparison table")
    t.add_argument("table_id", type=int, choices=(1, 2))
    t.add_argument("--budget-scale", type=float, default=1.0)
    t.add_argument("--replicates", type=int, default=5)
    sub.add_parser("problems", parents=[common], help="list registered problems")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "problems":
        for name, (_, text) in sorted(PROBLEMS.items()):
            print(f"{name:<10} {text}")
        return EXIT_OK
    if args.command == "table":
        if not args.budget_scale > 0:
            print("error: --budget-scale must be positive", file=sys.stderr)
            return EXIT_USAGE
        env = os.environ
        seed = args.seed if args.seed is not None else int(env.get("NASHGP_SEED") or 0)
        out = args.out or env.get("NASHGP_OUT") or "results"
        try:
            table(args.table_id, args.budget_scale, args.replicates, seed, out, args.jobs)
        except (NashGPError, RuntimeError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    try:
        exp = apply_overrides(load_experiment(args.experiment), args.seed, args.out,
                              getattr(args, "mode", None))
        run_config(exp, 0)
        build(exp)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NashGPError, TypeError, ValueError) as exc:
        print(f"error: {args.experiment}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "solve":
            solve(exp, jobs=args.jobs, resume=args.resume)
        else:
            baseline(exp, jobs=args.jobs)
    except (NashGPError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
