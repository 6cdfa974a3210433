"""Experiment configuration: one JSON file per experiment."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .engine import EngineConfig
from .equilibrium import simple_state
from .initial import GeometryError, build_nu_delta, init_from_json, validate_geometry
from .measure import StateMeasure
from .service import SpecError, TypeBSpec

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "NMPQUEUE_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def sha256(self) -> str:
        return config_hash(self.raw)

    def get(self, key: str, default: Any = None) -> Any:
        return self.raw.get(key, default)

    def section(self, key: str) -> dict:
        return dict(self.raw.get(key) or {})

    def spec(self) -> TypeBSpec:
        return _load_spec(self.raw["dist"], self.base_dir)

    def engine(self) -> EngineConfig:
        return EngineConfig(**self.section("engine"))

    def initial_state(self) -> StateMeasure:
        return _initial_state(self.raw.get("init", {"rho": 1.0}), self.spec())

    def output_path(self, path: str | Path) -> Path:
        return output_path(path)


def output_path(path: str | Path) -> Path:
    """Resolve a relative output path against the output-root override, creating parents."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _load_spec(obj: Any, base_dir: Path) -> TypeBSpec:
    if isinstance(obj, str):
        path = Path(obj)
        if not path.is_absolute():
            path = base_dir / path
        return TypeBSpec.load(path)
    return TypeBSpec.from_json(obj)


def _initial_state(obj: dict, spec: TypeBSpec) -> StateMeasure:
    if "rho" in obj:
        return simple_state(float(obj["rho"]))
    if "atoms" in obj:
        atoms = {(int(n), int(t)): float(m) for n, t, m in obj["atoms"]}
        return StateMeasure.from_atoms(atoms, float(obj.get("idle_mass", 0.0)))
    init, delta = init_from_json(obj, spec)
    if delta is None:
        raise GeometryError("layered init needs delta_weights")
    return build_nu_delta(init, delta)


def validate_config(raw: Any, base_dir: str | Path = ".") -> list[str]:
    """Itemized problems; empty when the experiment can run."""
    base_dir = Path(base_dir)
    if not isinstance(raw, dict):
        return ["config must be a JSON object"]
    out = []
    if raw.get("schema_version") != SCHEMA_VERSION:
        out.append(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    spec = None
    if "dist" not in raw:
        out.append("missing 'dist'")
    else:
        try:
            spec = _load_spec(raw["dist"], base_dir)
        except FileNotFoundError as exc:
            out.append(f"dist file not found: {exc.filename}")
        except (SpecError, KeyError, TypeError, ValueError) as exc:
            out.append(f"dist: {exc}")
    for key, val in (raw.get("engine") or {}).items():
        if key not in ("prune", "poisson_tol", "conservation_budget"):
            out.append(f"engine: unknown key {key!r}")
        elif not (isinstance(val, (int, float)) and val > 0):
            out.append(f"engine.{key} must be positive")
    for key in ("horizon", "workers"):
        if key in raw and not (isinstance(raw[key], int) and raw[key] >= 1):
            out.append(f"{key} must be a positive integer")
    for key in ("eps",):
        if key in raw and not (isinstance(raw[key], (int, float)) and raw[key] > 0):
            out.append(f"{key} must be positive")
    init = raw.get("init")
    if spec is not None and isinstance(init, dict) and "rho" not in init and "atoms" not in init:
        try:
            ispec, delta = init_from_json(init, spec)
            out += validate_geometry(ispec)
            if delta is None:
                out.append("init: delta_weights missing")
            elif len(delta) > ispec.n_layers:
                out.append(f"init: {len(delta)} weights for {ispec.n_layers} layers")
        except (GeometryError, ValueError, KeyError, TypeError) as exc:
            msg = str(exc)
            out.append(f"weights: {msg}" if "weights sum" in msg else f"init: {msg}")
    elif isinstance(init, dict) and "rho" in init and not (isinstance(init["rho"], (int, float)) and init["rho"] > 0):
        out.append("init.rho must be positive")
    mf = raw.get("meanfield") or {}
    for key in ("M", "seeds"):
        vals = mf.get(key, [])
        if not isinstance(vals, list) or any(not isinstance(v, int) or v < 0 for v in vals):
            out.append(f"meanfield.{key} must be a list of nonnegative integers")
    tr = raw.get("transience") or {}
    if "eps" in tr and not tr["eps"] > 0:
        out.append("transience.eps must be positive")
    if "levels" in tr and not (isinstance(tr["levels"], int) and tr["levels"] >= 1):
        out.append("transience.levels must be a positive integer")
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"])
    problems = validate_config(raw, path.parent)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(raw, path.parent)


def provenance(cfg: ExperimentConfig | None) -> dict:
    from . import __version__

    return {"config_sha256": None if cfg is None else cfg.sha256, "version": __version__}
