"""Command-line front end: ``stein-coverage {plan,bench,spectral,sdf,export}``.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure
(``plan`` only; ``bench`` records failures as table dashes).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import run_bench, write_run
from .config import ConfigError, builtin_names
from .scenarios import load_scenario, write_echo
from .sdf import GridSdf
from .solvers import METHODS, solve
from .surface import CACHE_ENV

log = logging.getLogger("stein_coverage")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


def _csv_list(text: str, cast=str) -> list:
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stein-coverage",
        description="Ergodic coverage trajectory optimization on point-cloud surfaces.",
        epilog=f"Built-in scenarios: {', '.join(builtin_names())}. "
        f"The spectral basis cache lives in ${CACHE_ENV} (default ~/.cache/stein_coverage).",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="scenario YAML path or built-in scenario name")
    common.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. solver.step_size=0.05 (repeatable)")
    common.add_argument("--profile", choices=["desk", "paper"], help="size preset applied under the config file")
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--no-cache", action="store_true", help="do not read or write the spectral basis cache")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v: solver progress, -vv: debug logs")
    sub = p.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", parents=[common], help="run one solver on one scenario")
    plan.add_argument("--method", "-m", choices=METHODS, default="tsvec")
    plan.add_argument("--seed", type=int, default=0)

    bench = sub.add_parser("bench", parents=[common], help="seeded comparison across methods")
    bench.add_argument("--methods", type=_csv_list, help="comma-separated subset of " + ",".join(METHODS))
    bench.add_argument("--seeds", type=lambda s: _csv_list(s, int), help="comma-separated seeds (default: profile)")
    bench.add_argument("--jobs", type=int, help="worker processes (default: bench.jobs)")
    bench.add_argument("--run-id", help="name of the run directory (default: derived from the config)")

    sub.add_parser("spectral", parents=[common], help="export the diffused target and leading eigenvectors")
    sub.add_parser("sdf", parents=[common], help="export SDF samples at the cloud (and the grid, if used)")

    export = sub.add_parser("export", parents=[common], help="re-export a trajectory from a per-run JSON")
    export.add_argument("--run", required=True, help="per-run JSON written by plan or bench")
    return p


def _load(args):
    return load_scenario(args.config, args.override, args.profile, cache=False if args.no_cache else None)


def cmd_plan(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    write_echo(scenario.config, out)
    particles = scenario.initial_particles(args.seed)
    try:
        rep = solve(scenario.objective(), particles, scenario.solver_config(args.method, args.verbose > 0))
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if not np.isfinite(rep.best.V_total):
        print("solver failure: non-finite energy", file=sys.stderr)
        return EXIT_SOLVER
    stem = f"{scenario.name}_{args.method}_{args.seed}"
    d = rep.to_dict()
    d.update({"scenario": scenario.name, "seed": args.seed})
    d["wall_time"] = 0.0 if scenario.config.bench.reproducible else d["wall_time"]
    (out / f"{stem}.json").write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    io.export_trajectory(rep.best_trajectory, scenario.scene, out, stem)
    b = rep.best
    print(f"{stem}: V={b.V_total:.3e} (V_s={b.V_s:.3e} V_a={b.V_a:.3e} V_f={b.V_f:.3e} V_e={b.V_e:.3e}) "
          f"iterations={rep.iterations} status={rep.status}")
    return EXIT_OK


def cmd_bench(args) -> int:
    scenario = _load(args)
    cfg = scenario.config
    methods = args.methods or list(cfg.bench.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"--methods: unknown method(s) {bad}")
    seeds = args.seeds if args.seeds is not None else list(cfg.bench.seeds)
    jobs = args.jobs or cfg.bench.jobs
    run = run_bench([scenario], methods, seeds, jobs=jobs, reproducible=cfg.bench.reproducible,
                    verbose=args.verbose > 0)
    out = write_run(run, [scenario], args.out, args.run_id)
    sys.stdout.write((out / "table.txt").read_text())
    print(f"results written to {out}")
    return EXIT_OK


def cmd_spectral(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    write_echo(scenario.config, out)
    pts = scenario.surface.points
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2],
            "phi_raw": scenario.phi_raw, "phi": scenario.phi}
    U = scenario.basis.eigvecs
    for j in range(min(10, U.shape[1])):
        cols[f"u{j}"] = U[:, j]
    path = out / f"{scenario.name}_spectral.csv"
    io._write_columns(path, cols)
    print(f"basis {'loaded from cache' if scenario.basis_cached else 'computed'}; "
          f"{len(pts)} nodes written to {path}")
    return EXIT_OK


def cmd_sdf(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    write_echo(scenario.config, out)
    sdf = scenario.scene.sdf
    pts = scenario.surface.points
    value, normal = sdf.value_grad(pts)
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2], "sdf": value,
            "nx": normal[:, 0], "ny": normal[:, 1], "nz": normal[:, 2]}
    path = out / f"{scenario.name}_sdf.csv"
    io._write_columns(path, cols)
    if isinstance(sdf, GridSdf):
        sdf.save(out / f"{scenario.name}_sdf_grid.npz")
    print(f"max |sdf| at cloud nodes {np.max(np.abs(value)):.3e}; written to {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    scenario = _load(args)
    run_path = Path(args.run)
    if not run_path.exists():
        raise FileNotFoundError(f"run file not found: {run_path}")
    data = json.loads(run_path.read_text())
    if data.get("failed"):
        raise ConfigError(f"{run_path}: run is marked failed; nothing to export")
    traj = np.asarray(data["best_trajectory"], dtype=float).reshape(-1, 4, 4)
    paths = io.export_trajectory(traj, scenario.scene, args.out, run_path.stem)
    print(f"wrote {paths['trajectory']} and {paths['cloud']}")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "bench": cmd_bench, "spectral": cmd_spectral, "sdf": cmd_sdf, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:  # ConfigError and DisconnectedGraphError included
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
