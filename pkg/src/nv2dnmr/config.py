"""Experiment configuration: YAML loading, preset merging, validation and object builders.

A config is a nested key-value tree. Every key must appear in :data:`DEFAULTS`;
anything else is rejected so that typos never pass silently. A ``preset`` key
loads a named preset first, and the remaining keys override it.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .completion import SVTConfig
from .presets import get_preset, sweep_directions
from .protocols import CosySettings, GridSpec, StrongSettings, config_digest, make_mask
from .spins import FieldConfig, GeometryError, NVSensor, Nucleus, SpinSystem, read_molecule, hartmann_hahn_rabi

PROTOCOLS = ("cosy", "strong", "anglesweep")

DEFAULTS: dict[str, Any] = {
    "preset": None,
    "description": "",
    "large": False,
    "molecule": None,  # path to a 'species x y z' file
    "nuclei": None,  # inline list of [species, [x, y, z]]
    "nv": {"position": [0.0, 0.0, -20.0], "axis": [0.0, 0.0, 1.0], "rabi": None},
    "field": {
        "magnitude": 1000.0,
        "direction": None,  # None: along the NV axis
        "omega_f": None,  # kHz; sets Delta_p = omega_f / sqrt(3), Omega_p = sqrt(2) Delta_p
        "rf_detuning": 0.0,
        "rf_strength": 0.0,
        "decoupling": False,
    },
    "protocol": {
        "kind": "cosy",
        "readout_species": None,
        "target_species": None,
        "polarize_species": None,
        "polarize_cycles": 4,
        "polarize_tau": None,
        "readout_tau": None,
        "readout_axis": "x",
        "decouple_nuclei": False,
        "tau": None,
        "nv_initial": "m-1",
        "gpar_operator": "sigma_x",
        "resonance_tol": 1.0,
        "sweep_count": 37,
        "directions": None,
    },
    "grid": {"n": 128, "dt": None, "total_time": None},
    "sampling": {"rate": 1.0, "seed": 0},
    "svt": {"threshold": None, "step": 1.2, "max_iters": 500, "tol": 1e-4, "rank_cap": None},
    "spectrum": {"window": None, "rel_threshold": 0.1, "halo": 1},
    "output": "nv2dnmr-out",
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    data: dict
    source: str = "<memory>"
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def digest(self) -> str:
        """Hash of everything that affects results (output location and description excluded)."""
        return config_digest({k: v for k, v in self.data.items() if k not in ("output", "description")})

    @property
    def kind(self) -> str:
        return self.data["protocol"]["kind"]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=None)

    # builders ------------------------------------------------------------

    def nuclei(self) -> list[Nucleus]:
        if self.data["molecule"] is not None:
            return read_molecule(self._path(self.data["molecule"]))
        return [Nucleus(sp, np.asarray(pos, dtype=float)) for sp, pos in self.data["nuclei"]]

    def system(self) -> SpinSystem:
        nv = self.data["nv"]
        axis = np.asarray(nv["axis"], dtype=float)
        sensor = NVSensor(np.asarray(nv["position"], dtype=float), axis / np.linalg.norm(axis))
        return SpinSystem(tuple(self.nuclei()), sensor)

    def field_config(self, direction=None) -> FieldConfig:
        f = self.data["field"]
        if direction is None:
            direction = f["direction"] if f["direction"] is not None else self.data["nv"]["axis"]
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        if f["omega_f"] is not None:
            return FieldConfig.decoupled(f["magnitude"], f["omega_f"], d)
        return FieldConfig(f["magnitude"], d, f["rf_detuning"], f["rf_strength"], f["decoupling"])

    def grid_spec(self) -> GridSpec:
        g = self.data["grid"]
        mask = None
        rate = self.data["sampling"]["rate"]
        if rate < 1:
            mask = make_mask(g["n"], rate, self.data["sampling"]["seed"])
        return GridSpec(g["n"], self.dt, mask)

    @property
    def dt(self) -> float:
        g = self.data["grid"]
        return g["dt"] if g["dt"] is not None else g["total_time"] / g["n"]

    def cosy_settings(self) -> CosySettings:
        p = self.data["protocol"]
        pol = p["polarize_species"]
        return CosySettings(
            readout_species=p["readout_species"],
            polarize_species=tuple(pol) if isinstance(pol, list) else pol,
            polarize_cycles=p["polarize_cycles"],
            polarize_tau=p["polarize_tau"],
            readout_tau=p["readout_tau"],
            readout_axis=p["readout_axis"],
            rabi=self.data["nv"]["rabi"],
            gpar_operator=p["gpar_operator"],
            resonance_tol=p["resonance_tol"],
            decouple_nuclei=p["decouple_nuclei"],
        )

    def strong_settings(self) -> StrongSettings:
        p = self.data["protocol"]
        return StrongSettings(
            target_species=p["target_species"],
            tau=p["tau"],
            nv_initial=p["nv_initial"],
            rabi=self.data["nv"]["rabi"],
            gpar_operator=p["gpar_operator"],
            resonance_tol=p["resonance_tol"],
        )

    def sweep_directions(self) -> list[np.ndarray]:
        p = self.data["protocol"]
        if p["directions"] is not None:
            return [np.asarray(d, dtype=float) / np.linalg.norm(d) for d in p["directions"]]
        a, b = self.nuclei()[:2]
        return sweep_directions(b.position - a.position, p["sweep_count"])

    def svt_config(self) -> SVTConfig:
        s = self.data["svt"]
        return SVTConfig(
            threshold=s["threshold"], step=s["step"], max_iters=s["max_iters"], tol=s["tol"], rank_cap=s["rank_cap"]
        )

    def output_dir(self) -> Path:
        env = os.environ.get("NV2DNMR_OUTPUT_DIR")
        return Path(env) if env else self._path(self.data["output"])

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


# ------------------------------------------------------------------ merging


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, f"unknown key (allowed: {', '.join(sorted(base))})")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(path, "expected a mapping")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def resolve(tree: dict) -> dict:
    """Defaults, then the named preset, then the user's keys."""
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    merged = _merge(DEFAULTS, {})
    name = tree.get("preset")
    if name is not None:
        try:
            preset = get_preset(name)
        except KeyError as exc:
            raise ConfigError("preset", str(exc.args[0])) from None
        merged = _merge(merged, preset)
        merged["preset"] = name
    return _merge(merged, tree)


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` strings (values parsed as YAML) applied on top of ``tree``."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.sub=value")
        path, raw = item.split("=", 1)
        node = tree
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot descend into a scalar")
        node[keys[-1]] = yaml.safe_load(raw)
    return tree


# ------------------------------------------------------------------ validation


def _num(d: dict, key: str, path: str, positive=False, nonneg=False, optional=False):
    v = d[key]
    if v is None and optional:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{path}.{key}", f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{path}.{key}", f"must be > 0, got {v}")
    if nonneg and v < 0:
        raise ConfigError(f"{path}.{key}", f"must be >= 0, got {v}")


def _vec(v, path: str, optional=False):
    if v is None and optional:
        return
    arr = np.asarray(v, dtype=float) if isinstance(v, (list, tuple)) else None
    if arr is None or arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(path, f"expected a 3-vector, got {v!r}")
    return arr


def validate_tree(d: dict, base_dir: Path) -> None:
    if d["large"] is not True and d["large"] is not False:
        raise ConfigError("large", "expected true or false")
    # geometry
    if (d["molecule"] is None) == (d["nuclei"] is None):
        raise ConfigError("molecule", "give exactly one of 'molecule' (file) or 'nuclei' (inline list)")
    if d["molecule"] is not None:
        path = Path(d["molecule"])
        path = path if path.is_absolute() else base_dir / path
        if not path.is_file():
            raise ConfigError("molecule", f"file not found: {path}")
    else:
        if not isinstance(d["nuclei"], list) or not d["nuclei"]:
            raise ConfigError("nuclei", "expected a non-empty list of [species, [x, y, z]]")
        for i, item in enumerate(d["nuclei"]):
            if not isinstance(item, (list, tuple)) or len(item) != 2 or not isinstance(item[0], str):
                raise ConfigError(f"nuclei[{i}]", "expected [species, [x, y, z]]")
            _vec(item[1], f"nuclei[{i}]")

    nv = d["nv"]
    _vec(nv["position"], "nv.position")
    if not np.linalg.norm(_vec(nv["axis"], "nv.axis")) > 0:
        raise ConfigError("nv.axis", "must be nonzero")
    _num(nv, "rabi", "nv", nonneg=True, optional=True)

    f = d["field"]
    _num(f, "magnitude", "field", positive=True)
    dvec = _vec(f["direction"], "field.direction", optional=True)
    if dvec is not None and not np.linalg.norm(dvec) > 0:
        raise ConfigError("field.direction", "must be nonzero")
    _num(f, "omega_f", "field", positive=True, optional=True)
    _num(f, "rf_detuning", "field")
    _num(f, "rf_strength", "field", nonneg=True)
    if f["omega_f"] is None and f["decoupling"]:
        want = np.sqrt(2.0) * f["rf_detuning"]
        if abs(f["rf_strength"] - want) > 1e-9 * max(abs(want), 1e-300):
            raise ConfigError(
                "field.rf_strength",
                f"decoupling requires Omega_p = sqrt(2) * Delta_p; got Omega_p = {f['rf_strength']}, "
                f"sqrt(2) * Delta_p = {want:.6g}",
            )

    p = d["protocol"]
    if p["kind"] not in PROTOCOLS:
        raise ConfigError("protocol.kind", f"must be one of {', '.join(PROTOCOLS)}")
    if p["readout_axis"] not in ("x", "y"):
        raise ConfigError("protocol.readout_axis", "must be x or y")
    if p["nv_initial"] not in ("m-1", "plus"):
        raise ConfigError("protocol.nv_initial", "must be m-1 or plus")
    if p["gpar_operator"] not in ("identity", "sigma_x", "sigma_z"):
        raise ConfigError("protocol.gpar_operator", "must be identity, sigma_x or sigma_z")
    for key in ("polarize_tau", "readout_tau", "tau"):
        _num(p, key, "protocol", positive=True, optional=True)
    _num(p, "resonance_tol", "protocol", positive=True)
    if not isinstance(p["polarize_cycles"], int) or p["polarize_cycles"] < 0:
        raise ConfigError("protocol.polarize_cycles", "must be an integer >= 0")
    if p["kind"] == "cosy" and not p["readout_species"]:
        raise ConfigError("protocol.readout_species", "required for the cosy protocol")
    if p["kind"] == "strong" and not p["target_species"]:
        raise ConfigError("protocol.target_species", "required for the strong protocol")
    if p["kind"] == "anglesweep":
        if p["directions"] is None and (not isinstance(p["sweep_count"], int) or p["sweep_count"] < 1):
            raise ConfigError("protocol.sweep_count", "must be an integer >= 1")
        if p["directions"] is not None:
            if not isinstance(p["directions"], list) or not p["directions"]:
                raise ConfigError("protocol.directions", "expected a non-empty list of 3-vectors")
            for i, v in enumerate(p["directions"]):
                if not np.linalg.norm(_vec(v, f"protocol.directions[{i}]")) > 0:
                    raise ConfigError(f"protocol.directions[{i}]", "must be nonzero")

    g = d["grid"]
    n = g["n"]
    if not isinstance(n, int) or n < 8 or n & (n - 1):
        raise ConfigError("grid.n", f"must be a power of two >= 8, got {n!r}")
    if (g["dt"] is None) == (g["total_time"] is None):
        raise ConfigError("grid.dt", "give exactly one of grid.dt or grid.total_time (ms)")
    _num(g, "dt", "grid", positive=True, optional=True)
    _num(g, "total_time", "grid", positive=True, optional=True)

    s = d["sampling"]
    _num(s, "rate", "sampling", positive=True)
    if s["rate"] > 1:
        raise ConfigError("sampling.rate", "must lie in (0, 1]")
    if not isinstance(s["seed"], int):
        raise ConfigError("sampling.seed", "must be an integer")

    v = d["svt"]
    _num(v, "threshold", "svt", positive=True, optional=True)
    _num(v, "step", "svt", positive=True)
    _num(v, "tol", "svt", positive=True)
    if not isinstance(v["max_iters"], int) or v["max_iters"] < 1:
        raise ConfigError("svt.max_iters", "must be an integer >= 1")
    if v["rank_cap"] is not None and (not isinstance(v["rank_cap"], int) or v["rank_cap"] < 1):
        raise ConfigError("svt.rank_cap", "must be an integer >= 1")

    sp = d["spectrum"]
    if sp["window"] not in (None, "hann"):
        raise ConfigError("spectrum.window", "must be null or hann")
    _num(sp, "rel_threshold", "spectrum", positive=True)
    if not isinstance(sp["halo"], int) or sp["halo"] < 0:
        raise ConfigError("spectrum.halo", "must be an integer >= 0")
    if not isinstance(d["output"], str) or not d["output"]:
        raise ConfigError("output", "expected a directory path")


def _validate_physics(cfg: ExperimentConfig) -> None:
    d = cfg.data
    try:
        system = cfg.system()
        fld = cfg.field_config()
    except GeometryError as exc:
        raise ConfigError("nuclei", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("molecule" if d["molecule"] else "nuclei", str(exc)) from None
    p = d["protocol"]
    species = {"cosy": p["readout_species"], "strong": p["target_species"]}.get(p["kind"])
    if p["kind"] == "anglesweep" and len(system) != 2:
        raise ConfigError("nuclei", f"the angle sweep needs exactly two nuclei, got {len(system)}")
    if species is not None:
        idx = system.indices(species)
        if not idx:
            raise ConfigError("protocol", f"species {species!r} is not present in the system")
        rabi = d["nv"]["rabi"]
        if rabi is not None:
            want = hartmann_hahn_rabi(fld, system.nuclei[idx[0]].gamma)
            if abs(rabi - want) > p["resonance_tol"]:
                raise ConfigError(
                    "nv.rabi",
                    f"Hartmann-Hahn mismatch for {species}: Omega_nv must equal (|gamma|B - Delta_p) + omega_f "
                    f"= {want:.6g} kHz within {p['resonance_tol']} kHz, got {rabi}",
                )


def load_config(path: str | Path | None = None, *, tree: dict | None = None, overrides=()) -> ExperimentConfig:
    """Read, merge and validate a config; raises :class:`ConfigError` with the offending key."""
    base = Path.cwd()
    source = "<memory>"
    if path is not None:
        path = Path(path)
        text = path.read_text()  # OSError propagates: an I/O failure, not a config error
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"YAML syntax error: {exc}") from None
        base = path.resolve().parent
        source = str(path)
    tree = apply_overrides(tree or {}, list(overrides))
    data = resolve(tree)
    validate_tree(data, base)
    cfg = ExperimentConfig(data, source, base)
    _validate_physics(cfg)
    return cfg


def validate_config(path: str | Path) -> ExperimentConfig:
    return load_config(path)
