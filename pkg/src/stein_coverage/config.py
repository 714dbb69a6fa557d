"""Scenario configuration schema, profiles and dotted-path overrides.

A scenario file is YAML validated against :class:`ScenarioConfig`. Values
are layered as: schema defaults < profile preset < file < ``--override``.
Unknown keys are rejected everywhere and error messages carry the field
path (e.g. ``solver.step_size``).
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

SCHEMA_VERSION = 1

PROFILES: dict[str, dict] = {
    "desk": {
        "trajectory": {"n_steps": 50},
        "solver": {"n_particles": 16},
        "spectral": {"n_basis": 100},
        "bench": {"seeds": [0, 1, 2, 3, 4]},
    },
    "paper": {
        "trajectory": {"n_steps": 200},
        "solver": {"n_particles": 100},
        "spectral": {"n_basis": 300},
        "bench": {"seeds": list(range(10))},
    },
}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CloudConfig(_Strict):
    source: Literal["generator", "file"] = "generator"
    generator: Optional[Literal["torus", "sphere", "cylinder", "two_patch"]] = "torus"
    path: Optional[str] = None
    n_points: int = Field(2000, ge=4)
    seed: int = 0
    major_radius: float = Field(0.15, gt=0)
    minor_radius: float = Field(0.05, gt=0)
    radius: float = Field(0.1, gt=0)
    height: float = Field(0.16, gt=0)
    length: float = Field(0.4, gt=0)
    width: float = Field(0.2, gt=0)


class RoiPatch(_Strict):
    center: tuple[float, float, float]
    radius: float = Field(gt=0)
    weight: float = Field(1.0, ge=0)


class RoiConfig(_Strict):
    mode: Literal["patches", "nodes", "file"] = "patches"
    patches: list[RoiPatch] = []
    nodes: list[int] = []
    path: Optional[str] = None


class SdfConfig(_Strict):
    kind: Literal["analytic", "grid"] = "analytic"
    resolution: int = Field(64, ge=4)
    n_neighbors: int = Field(20, ge=3)


class SpectralConfig(_Strict):
    n_basis: int = Field(100, ge=1)
    k_graph: int = Field(8, ge=1)
    sigma_g: Optional[float] = Field(None, gt=0)
    tau_d: float = Field(20.0, ge=0)
    beta: float = Field(0.5, ge=0, le=1)
    lambda_exponent: float = Field(2.0, gt=0)


class WeightsConfig(_Strict):
    w_s: float = Field(5.0, ge=0)
    w_a: float = Field(3.0, ge=0)
    w_f: float = Field(3.0, ge=0)
    w_e: float = Field(0.1, ge=0)


class DepositionConfig(_Strict):
    k: int = Field(60, ge=1)
    sigma_a: Optional[float] = Field(None, gt=0)


class TrajectoryConfig(_Strict):
    n_steps: int = Field(50, ge=3)


class SolverSection(_Strict):
    step_size: Optional[float] = Field(None, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    stop_tol: float = Field(1e-4, gt=0)
    kernel_length: float = Field(0.05, gt=0)
    n_particles: int = Field(16, ge=1)
    noise_var: float = Field(0.005, ge=0)
    damping_init: float = Field(1e-3, ge=0)
    damping_down: float = Field(0.5, gt=0)
    damping_up: float = Field(4.0, gt=0)
    ls_shrink: float = Field(0.5, gt=0, lt=1)
    ls_slope: float = Field(1e-4, gt=0, lt=1)
    ls_max_halvings: int = Field(20, ge=0)
    kernel_mode: Literal["per_step", "trajectory"] = "per_step"


Method = Literal["gn", "batch_gn", "se", "tsvec", "pgd"]


class BenchSection(_Strict):
    methods: list[Method] = ["gn", "batch_gn", "pgd", "se", "tsvec"]
    seeds: list[int] = [0, 1, 2, 3, 4]
    reproducible: bool = True
    jobs: int = Field(1, ge=1)


class ScenarioConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "scenario"
    profile: Literal["desk", "paper"] = "desk"
    cloud: CloudConfig = CloudConfig()
    roi: RoiConfig = RoiConfig()
    sdf: SdfConfig = SdfConfig()
    spectral: SpectralConfig = SpectralConfig()
    weights: WeightsConfig = WeightsConfig()
    deposition: DepositionConfig = DepositionConfig()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    solver: SolverSection = SolverSection()
    bench: BenchSection = BenchSection()


def _merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like dotted.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, yaml.safe_load(raw)


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return out


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def builtin_names() -> list[str]:
    root = resources.files("stein_coverage") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_path(name_or_path) -> Path | None:
    """A filesystem path, or ``None`` plus a builtin lookup for bare names."""
    p = Path(name_or_path)
    if p.exists():
        return p
    return None


def read_raw(name_or_path) -> dict:
    p = resolve_path(name_or_path)
    if p is not None:
        text = p.read_text()
    elif str(name_or_path) in builtin_names():
        text = (resources.files("stein_coverage") / "scenarios" / f"{name_or_path}.yaml").read_text()
    else:
        raise FileNotFoundError(f"scenario config not found: {name_or_path}")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{name_or_path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{name_or_path}: top level must be a mapping")
    return raw


def build_config(raw: dict, overrides=(), profile: str | None = None) -> ScenarioConfig:
    raw = apply_overrides(raw, overrides)
    prof = profile or raw.get("profile", "desk")
    if prof not in PROFILES:
        raise ConfigError(f"profile: unknown profile {prof!r}")
    merged = _merge(PROFILES[prof], raw)
    merged["profile"] = prof
    try:
        return ScenarioConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_config(name_or_path, overrides=(), profile: str | None = None) -> ScenarioConfig:
    return build_config(read_raw(name_or_path), overrides, profile)


def dump_config(cfg: ScenarioConfig) -> str:
    """Canonical YAML echo; loading it back reproduces ``cfg`` exactly."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
