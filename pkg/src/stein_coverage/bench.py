"""Seeded benchmark runs and Table-I-style output.

Every (scenario, method, seed) cell is an independent job. All methods see
the same initial particle set for a given seed; single-trajectory methods
start from particle 0, which is the unperturbed straight line.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import dump_config
from .energy import EnergyReport
from .scenarios import Scenario, write_echo
from .solvers import SolveReport, solve

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["Scenario", "Method", "V_s", "V_a", "V_f", "V_e", "V", "Iter", "Time(s)"]
DASH = "-"


def particles_hash(particles: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(particles, dtype="<f8").tobytes()).hexdigest()


@dataclass
class Cell:
    scenario: str
    method: str
    seed: int
    init_hash: str
    report: SolveReport | None = None
    error: str | None = None
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.report is not None

    @property
    def key(self) -> str:
        return f"{self.scenario}_{self.method}_{self.seed}"

    def to_dict(self, reproducible: bool) -> dict:
        d = {
            "scenario": self.scenario,
            "method": self.method,
            "seed": self.seed,
            "init_hash": self.init_hash,
            "failed": not self.ok,
            "error": self.error,
        }
        if self.ok:
            d.update(self.report.to_dict())
            if reproducible:
                d["wall_time"] = 0.0
        return d


@dataclass
class Aggregate:
    scenario: str
    method: str
    report: EnergyReport | None
    iterations: float | None
    seconds: float | None
    n_ok: int
    n_total: int


@dataclass
class BenchRun:
    scenarios: list[str]
    methods: list[str]
    seeds: list[int]
    cells: list[Cell] = field(default_factory=list)
    reproducible: bool = True

    def cell(self, scenario: str, method: str, seed: int) -> Cell:
        for c in self.cells:
            if (c.scenario, c.method, c.seed) == (scenario, method, seed):
                return c
        raise KeyError((scenario, method, seed))

    def aggregate(self) -> list[Aggregate]:
        """Mean over seeds per (scenario, method); any failed seed marks the row failed."""
        rows = []
        for s in self.scenarios:
            for m in self.methods:
                cells = [c for c in self.cells if c.scenario == s and c.method == m]
                ok = [c for c in cells if c.ok]
                if not cells:
                    continue
                if len(ok) < len(cells):
                    rows.append(Aggregate(s, m, None, None, None, len(ok), len(cells)))
                    continue
                terms = np.mean([[c.report.best.V_s, c.report.best.V_a, c.report.best.V_f, c.report.best.V_e]
                                 for c in ok], axis=0)
                rep = EnergyReport.from_terms(*terms)
                its = float(np.mean([c.report.iterations for c in ok]))
                secs = 0.0 if self.reproducible else float(np.mean([c.wall_time for c in ok]))
                rows.append(Aggregate(s, m, rep, its, secs, len(ok), len(cells)))
        return rows


def _run_cell(scenario: Scenario, method: str, seed: int, verbose: bool = False) -> Cell:
    particles = scenario.initial_particles(seed)
    cell = Cell(scenario.name, method, seed, particles_hash(particles))
    try:
        rep = solve(scenario.objective(), particles, scenario.solver_config(method, verbose))
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s failed: %s", cell.key, cell.error)
        return cell
    finals = [f.V_total for f in rep.final] + list(rep.trace)
    if not np.all(np.isfinite(finals)):
        cell.error = "non-finite energy"
        log.warning("cell %s failed: non-finite energy", cell.key)
        return cell
    cell.report = rep
    cell.wall_time = rep.wall_time
    return cell


def run_bench(scenarios, methods, seeds, jobs: int = 1, reproducible: bool = True, verbose: bool = False) -> BenchRun:
    """Run every (scenario, method, seed) cell; results keep declaration order."""
    scenarios = list(scenarios)
    run = BenchRun([s.name for s in scenarios], list(methods), [int(s) for s in seeds], reproducible=reproducible)
    tasks = [(sc, m, s) for sc in scenarios for m in run.methods for s in run.seeds]
    if jobs <= 1 or len(tasks) <= 1:
        run.cells = [_run_cell(sc, m, s, verbose) for sc, m, s in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, sc, m, s, verbose) for sc, m, s in tasks]
            run.cells = [f.result() for f in futures]
    return run


# ---------------------------------------------------------------------------
# output


def _sci(x) -> str:
    return f"{x:.2e}"


def table_rows(run: BenchRun) -> list[list[str]]:
    rows = []
    for a in run.aggregate():
        if a.report is None:
            rows.append([a.scenario, a.method] + [DASH] * 7)
            continue
        r = a.report
        rows.append([a.scenario, a.method, _sci(r.V_s), _sci(r.V_a), _sci(r.V_f), _sci(r.V_e),
                     _sci(r.V_total), f"{a.iterations:g}", _sci(a.seconds)])
    return rows


def emit_table(run: BenchRun) -> tuple[str, str]:
    """Return ``(csv_text, formatted_text)`` for the aggregate table."""
    rows = table_rows(run)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(rows)
    widths = [max(len(r[i]) for r in [TABLE_COLUMNS] + rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in [TABLE_COLUMNS] + rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return buf.getvalue(), "\n".join(lines) + "\n"


def run_id(scenarios, methods, seeds) -> str:
    """Deterministic id from the echoed configs and the method/seed lists."""
    h = hashlib.sha256()
    for sc in scenarios:
        h.update(dump_config(sc.config).encode())
    h.update(repr((list(methods), [int(s) for s in seeds])).encode())
    names = "+".join(sc.name for sc in scenarios)
    return f"{names}-{h.hexdigest()[:10]}"


def write_run(run: BenchRun, scenarios, out_root, rid: str | None = None) -> Path:
    """Write table.csv, table.txt, per-run JSON, config echoes and trajectories."""
    scenarios = list(scenarios)
    rid = rid or run_id(scenarios, run.methods, run.seeds)
    out = Path(out_root) / rid
    (out / "per_run").mkdir(parents=True, exist_ok=True)
    (out / "trajectories").mkdir(exist_ok=True)
    csv_text, txt = emit_table(run)
    (out / "table.csv").write_text(csv_text)
    (out / "table.txt").write_text(txt)

    by_name = {sc.name: sc for sc in scenarios}
    for sc in scenarios:
        write_echo(sc.config, out)
        io.write_cloud_csv(out / "trajectories" / f"{sc.name}_cloud.csv", sc.surface.points, sc.surface.roi_weight)
    timing = ["scenario,method,seed,seconds"]
    for c in run.cells:
        text = json.dumps(c.to_dict(run.reproducible), indent=1, sort_keys=True)
        (out / "per_run" / f"{c.key}.json").write_text(text + "\n")
        if c.ok:
            io.write_trajectory_csv(out / "trajectories" / f"{c.key}.csv", c.report.best_trajectory,
                                    by_name[c.scenario].scene.sdf)
        timing.append(f"{c.scenario},{c.method},{c.seed},{float(c.wall_time)!r}")
    # wall-clock times are the only non-deterministic output; they live here
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    return out
