import json

import numpy as np
import pytest

from stein_coverage import bench as B
from stein_coverage import solvers
from stein_coverage.energy import EnergyReport


def test_single_cell(tiny_two_patch):
    run = B.run_bench([tiny_two_patch], ["gn"], [0])
    assert len(run.cells) == 1 and run.cells[0].ok
    assert run.cells[0].report.method == "gn"


def test_shared_initialization_across_methods(tiny_two_patch):
    run = B.run_bench([tiny_two_patch], ["gn", "pgd", "se", "tsvec", "batch_gn"], [0, 1])
    for seed in (0, 1):
        cells = [run.cell("two_patch", m, seed) for m in run.methods]
        assert len({c.init_hash for c in cells}) == 1
        assert len({c.report.initial_energy for c in cells}) == 1
    assert run.cell("two_patch", "tsvec", 0).init_hash != run.cell("two_patch", "tsvec", 1).init_hash


def test_aggregate_is_mean_over_seeds(tiny_two_patch):
    run = B.run_bench([tiny_two_patch], ["batch_gn"], [0, 1, 2])
    agg = run.aggregate()[0]
    finals = [run.cell("two_patch", "batch_gn", s).report.best for s in (0, 1, 2)]
    assert agg.report.V_e == pytest.approx(np.mean([f.V_e for f in finals]), rel=1e-15)
    assert agg.report.V_total == pytest.approx(np.mean([f.V_total for f in finals]), rel=1e-14)
    assert agg.iterations == np.mean([run.cell("two_patch", "batch_gn", s).report.iterations for s in (0, 1, 2)])


def test_empty_run_header_only():
    csv_text, txt = B.emit_table(B.BenchRun([], [], []))
    assert csv_text == ",".join(B.TABLE_COLUMNS) + "\n"
    assert txt.splitlines()[0].split() == B.TABLE_COLUMNS


def test_v_column_sums_terms(tiny_two_patch):
    run = B.run_bench([tiny_two_patch], ["gn", "pgd"], [0])
    for row in B.table_rows(run):
        terms = [float(x) for x in row[2:6]]
        assert float(row[6]) == pytest.approx(sum(terms), rel=1e-2)
        assert all("e" in x for x in row[2:7])


def _failing_solve(objective, particles, config):
    if config.method == "se":
        raise solvers.SolverError("boom")
    return solvers.solve(objective, particles, config)


def test_failed_cell_dash(tiny_two_patch, monkeypatch, tmp_path):
    monkeypatch.setattr(B, "solve", _failing_solve)
    run = B.run_bench([tiny_two_patch], ["gn", "se"], [0])
    se = run.cell("two_patch", "se", 0)
    assert not se.ok and "boom" in se.error
    rows = {r[1]: r for r in B.table_rows(run)}
    assert rows["se"][2:] == [B.DASH] * 7
    assert rows["gn"][2] != B.DASH
    out = B.write_run(run, [tiny_two_patch], tmp_path, "r")
    d = json.loads((out / "per_run" / "two_patch_se_0.json").read_text())
    assert d["failed"] is True and "boom" in d["error"]


def test_non_finite_energy_marks_failure(tiny_two_patch, monkeypatch):
    def nan_solve(objective, particles, config):
        rep = solvers.solve(objective, particles, config)
        rep.final[rep.best_index] = EnergyReport.from_terms(np.nan, 0, 0, 0)
        return rep

    monkeypatch.setattr(B, "solve", nan_solve)
    cell = B.run_bench([tiny_two_patch], ["gn"], [0]).cells[0]
    assert not cell.ok and cell.error == "non-finite energy"


def test_write_run_layout_and_determinism(tiny_two_patch, tmp_path):
    runs = []
    for k in range(2):
        run = B.run_bench([tiny_two_patch], ["gn", "tsvec"], [0, 1])
        runs.append(B.write_run(run, [tiny_two_patch], tmp_path / str(k)))
    a, b = runs
    assert a.name == b.name  # run id derived from the config
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert (a / "table.csv").exists() and (a / "table.txt").exists()
    assert (a / "per_run" / "two_patch_tsvec_1.json").exists()
    assert (a / "trajectories" / "two_patch_gn_0.csv").exists()
    assert (a / "two_patch.config.yaml").exists()
    for rel in files:
        if rel.name == "timing.csv":
            continue
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_parallel_matches_serial(tiny_two_patch):
    serial = B.run_bench([tiny_two_patch], ["gn", "se"], [0, 1], jobs=1)
    par = B.run_bench([tiny_two_patch], ["gn", "se"], [0, 1], jobs=2)
    assert [c.key for c in serial.cells] == [c.key for c in par.cells]
    assert B.emit_table(serial) == B.emit_table(par)


def test_reproducible_false_keeps_time(tiny_two_patch):
    run = B.run_bench([tiny_two_patch], ["gn"], [0], reproducible=False)
    assert run.aggregate()[0].seconds > 0
    assert run.cells[0].to_dict(False)["wall_time"] > 0
    assert run.cells[0].to_dict(True)["wall_time"] == 0.0
