"""File formats: point clouds in, trajectories and node fields out.

Point clouds
    * ASCII PLY with vertex properties ``x y z`` and optionally ``red green blue``
      (and an optional ``w`` / ``weight`` property). ROI weight is the green
      channel divided by 255 unless a weight property exists.
    * CSV with header ``x,y,z[,w]``.

Trajectory CSV
    ``t,x,y,z,qw,qx,qy,qz,zx,zy,zz,sdf`` with one row per pose; the quaternion
    is unit norm with ``qw >= 0``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import liegroup as lg

TRAJ_HEADER = ["t", "x", "y", "z", "qw", "qx", "qy", "qz", "zx", "zy", "zz", "sdf"]


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    path = Path(path)
    with path.open("r", encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props, n_vertex, in_vertex = [], None, False
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ascii PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        data = np.loadtxt(f, max_rows=n_vertex, ndmin=2)
    col = {name: i for i, name in enumerate(props)}
    missing = [c for c in "xyz" if c not in col]
    if missing:
        raise ValueError(f"{path}: missing vertex properties {missing}")
    pts = data[:, [col["x"], col["y"], col["z"]]]
    for key in ("w", "weight"):
        if key in col:
            return pts, data[:, col[key]]
    if "green" in col:
        return pts, data[:, col["green"]] / 255.0
    return pts, None


def read_csv_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    path = Path(path)
    with path.open(newline="") as f:
        header = [h.strip() for h in next(csv.reader(f))]
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in "xyz" if c not in col]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    pts = data[:, [col["x"], col["y"], col["z"]]]
    return pts, (data[:, col["w"]] if "w" in col else None)


def read_cloud(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    if path.suffix.lower() == ".csv":
        return read_csv_cloud(path)
    raise ValueError(f"unsupported point cloud format: {path.suffix}")


def write_ply(path, points, weights=None) -> None:
    points = np.asarray(points, dtype=float)
    w = np.zeros(len(points)) if weights is None else np.asarray(weights, dtype=float)
    green = np.clip(np.round(255.0 * w / max(w.max(), 1e-300)), 0, 255).astype(int)
    with Path(path).open("w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for p, g in zip(points, green):
            x, y, z = (repr(float(v)) for v in p)
            f.write(f"{x} {y} {z} 0 {g} 0\n")


def write_cloud_csv(path, points, weights, extra: dict | None = None) -> None:
    cols = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2], "w": weights}
    cols.update(extra or {})
    _write_columns(path, cols)


def _write_columns(path, cols: dict) -> None:
    names = list(cols)
    arrays = [np.asarray(cols[n]) for n in names]
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([repr(float(v)) for v in row])


def write_trajectory_csv(path, traj, sdf=None) -> None:
    traj = np.asarray(traj, dtype=float)
    tq = lg.pose_to_tq(traj)
    z = traj[:, :3, 2]
    sdf_val = sdf.value(traj[:, :3, 3]) if sdf is not None else np.full(len(traj), np.nan)
    cols = {"t": np.arange(len(traj))}
    for i, name in enumerate(["x", "y", "z", "qw", "qx", "qy", "qz"]):
        cols[name] = tq[:, i]
    cols.update({"zx": z[:, 0], "zy": z[:, 1], "zz": z[:, 2], "sdf": sdf_val})
    _write_columns(path, cols)


def read_trajectory_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return lg.pose_from_tq(data[:, 1:8])


def export_trajectory(traj, scene, out_dir, stem: str = "trajectory") -> dict:
    """Write the trajectory CSV and the ROI-weighted cloud next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / f"{stem}.csv"
    cloud_path = out / f"{stem}_cloud.csv"
    write_trajectory_csv(traj_path, traj, scene.sdf)
    write_cloud_csv(cloud_path, scene.surface.points, scene.surface.roi_weight)
    return {"trajectory": traj_path, "cloud": cloud_path}
