"""Run configuration: flat dotted ``key = value`` files plus flag overrides.

A ``[section]`` line prefixes the keys below it, so ``[grid]`` followed by
``n_theta = 64`` is the same as ``grid.n_theta = 64``.  Every key has a typed
default; the defaults describe the standard problem (2 flavors, 100 energy
bins, 10 phi bins, 10000 theta bins).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from bulbsim.errors import ConfigError
from bulbsim.grid import GridConfig, check_grid_config
from bulbsim.hamiltonian import DEFAULT_CHUNK_SIZE, DEFAULT_COS_THETA_FLOOR, VacuumParams
from bulbsim.integrator import Physics, StepConfig
from bulbsim.state import ANTINEUTRINO, NEUTRINO, Spectra, SpectrumParams
from bulbsim.topology import CPU_KIND, DeviceSpec

ACCELERATOR_KIND = "phi"
IO_MODES = ("off", "direct", "staged")

DEFAULTS: dict[str, object] = {
    "grid.n_theta": 10000,
    "grid.n_phi": 10,
    "grid.n_energy": 100,
    "grid.n_flavors": 2,
    "grid.radius": 10.0,
    "grid.e_min": 1.0,
    "grid.e_max": 50.0,
    "spectra.nu0.luminosity": 1.0,
    "spectra.nu0.mean_energy": 10.0,
    "spectra.nu0.eta": 0.0,
    "spectra.nubar0.luminosity": 1.0,
    "spectra.nubar0.mean_energy": 15.0,
    "spectra.nubar0.eta": 0.0,
    "spectra.nu1.luminosity": 1.0,
    "spectra.nu1.mean_energy": 20.0,
    "spectra.nu1.eta": 0.0,
    "spectra.nubar1.luminosity": 1.0,
    "spectra.nubar1.mean_energy": 20.0,
    "spectra.nubar1.eta": 0.0,
    "vacuum.delta_m2": 1.0,
    "vacuum.theta_v": 0.15,
    "vacuum.matter_potential": 0.0,
    "coupling.mu0": 1.0,
    "step.h": 0.005,
    "step.n_substeps": 8,
    "step.renormalize_every": 0,
    "step.cos_theta_floor": DEFAULT_COS_THETA_FLOOR,
    "run.n_steps": 1000,
    "run.chunk_size": DEFAULT_CHUNK_SIZE,
    "run.seed": 0,
    "run.log_every": 0,
    "devices.cpu.count": 1,
    "devices.cpu.weight": 1.0,
    "devices.cpu.threads": 8,
    "devices.phi.count": 0,
    "devices.phi.weight": 3.0,
    "devices.phi.threads": 244,
    "io.mode": "off",
    "io.interval": 0,
    "io.out_dir": "out",
    "bench.iterations": 10_000_000,
    "bench.widths": "8,16,32,64,128,256,512,1024",
    "bench.threads": 1,
    "bench.lane_hint": 4,
    "bench.duration": 100.0,
}


def _parse_value(key: str, text: str, where: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text.replace("_", ""))
        if isinstance(default, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {type(default).__name__}, got {text!r}") from None
    return text


def _check_key(key: str, where: str) -> None:
    if key not in DEFAULTS:
        raise ConfigError(f"{where}: unknown key {key!r}")


def parse_ini(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse config text into typed values; errors name the line."""
    values: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip() + "."
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key = section + key.strip()
        _check_key(key, where)
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, where)
    return values


def parse_overrides(items: Iterable[str]) -> dict[str, object]:
    """``key=value`` strings (from ``--key=value`` flags) into typed values."""
    values = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip().lstrip("-")
        where = f"flag --{key}"
        if not sep:
            raise ConfigError(f"{where}: expected --key=value")
        _check_key(key, where)
        values[key] = _parse_value(key, value, where)
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, **flat) -> "RunConfig":
        """Copy with ``grid__n_theta=...``-style keyword overrides."""
        values = dict(self.values)
        for k, v in flat.items():
            key = k.replace("__", ".")
            _check_key(key, "override")
            values[key] = _parse_value(key, str(v), "override")
        return make_config(values)

    def canonical(self) -> str:
        return "\n".join(f"{k} = {self.values[k]!r}" for k in sorted(self.values)) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # typed views

    def grid_config(self) -> GridConfig:
        v = self.values
        return GridConfig(n_theta=v["grid.n_theta"], n_phi=v["grid.n_phi"], n_energy=v["grid.n_energy"],
                          n_flavors=v["grid.n_flavors"], radius=v["grid.radius"], e_min=v["grid.e_min"],
                          e_max=v["grid.e_max"])

    def spectra(self) -> Spectra:
        entries = {}
        for name, species in (("nu", NEUTRINO), ("nubar", ANTINEUTRINO)):
            for flavor in (0, 1):
                p = f"spectra.{name}{flavor}."
                entries[species, flavor] = SpectrumParams(self[p + "luminosity"], self[p + "mean_energy"],
                                                          self[p + "eta"])
        return Spectra(entries)

    def physics(self) -> Physics:
        vac = VacuumParams(self["vacuum.delta_m2"], self["vacuum.theta_v"], self["vacuum.matter_potential"])
        return Physics(vac, self["coupling.mu0"])

    def step_config(self) -> StepConfig:
        return StepConfig(h=self["step.h"], n_substeps=self["step.n_substeps"],
                          renormalize_every=self["step.renormalize_every"],
                          cos_theta_floor=self["step.cos_theta_floor"])

    def devices(self) -> list[DeviceSpec]:
        out = []
        for kind in (CPU_KIND, ACCELERATOR_KIND):
            p = f"devices.{kind}."
            out.append(DeviceSpec(kind, self[p + "count"], self[p + "weight"], self[p + "threads"]))
        return out

    @property
    def n_ranks(self) -> int:
        return self["devices.cpu.count"] + self["devices.phi.count"]

    @property
    def snapshot_interval(self) -> int:
        """Steps between snapshots; 0 in the file means ten snapshots per run."""
        if self["io.interval"]:
            return self["io.interval"]
        return max(1, self["run.n_steps"] // 10)

    @property
    def widths(self) -> list[int]:
        try:
            return [int(w) for w in str(self["bench.widths"]).split(",") if w.strip()]
        except ValueError:
            raise ConfigError(f"bench.widths must be a comma-separated list of integers, "
                              f"got {self['bench.widths']!r}") from None


def _positive(values, *keys):
    for k in keys:
        if not values[k] > 0:
            raise ConfigError(f"{k} must be > 0, got {values[k]!r}")


def _nonnegative(values, *keys):
    for k in keys:
        if values[k] < 0:
            raise ConfigError(f"{k} must be >= 0, got {values[k]!r}")


def validate(values: dict) -> None:
    """Cross-field consistency checks; errors name the fields involved."""
    _positive(values, "grid.n_theta", "grid.n_phi", "grid.n_energy", "grid.radius", "step.h",
              "run.chunk_size", "devices.cpu.weight", "devices.phi.weight", "devices.cpu.threads",
              "devices.phi.threads", "bench.iterations", "bench.threads", "bench.lane_hint", "bench.duration")
    _nonnegative(values, "devices.cpu.count", "devices.phi.count", "io.interval", "run.n_steps",
                 "step.renormalize_every", "run.log_every")
    if values["grid.n_flavors"] != 2:
        raise ConfigError(f"grid.n_flavors must be 2 (the vacuum term is two-flavor), got {values['grid.n_flavors']}")
    if values["devices.cpu.count"] + values["devices.phi.count"] < 1:
        raise ConfigError("devices.cpu.count and devices.phi.count are both 0; at least one rank is needed")
    if values["io.mode"] not in IO_MODES:
        raise ConfigError(f"io.mode must be one of {', '.join(IO_MODES)}, got {values['io.mode']!r}")
    if values["io.mode"] == "staged" and values["devices.cpu.count"] < 1:
        raise ConfigError("io.mode = staged needs devices.cpu.count >= 1 (cpu ranks write for accelerators)")
    # the typed views validate the remaining per-object invariants
    cfg = RunConfig(values)
    check_grid_config(cfg.grid_config())
    cfg.spectra()
    cfg.physics()
    cfg.step_config()
    cfg.devices()
    for w in cfg.widths:
        if w < 1 or w % values["bench.lane_hint"]:
            raise ConfigError(f"bench.widths entry {w} is not a positive multiple of "
                              f"bench.lane_hint = {values['bench.lane_hint']}")


def make_config(values: dict | None = None) -> RunConfig:
    merged = dict(DEFAULTS)
    merged.update(values or {})
    validate(merged)
    return RunConfig(merged)


def load_config(path=None, overrides: Iterable[str] = (), *, text: str | None = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``key=value`` overrides."""
    values: dict = {}
    if text is not None:
        values.update(parse_ini(text))
    elif path is not None:
        p = Path(path)
        try:
            content = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        values.update(parse_ini(content, str(p)))
    values.update(parse_overrides(overrides))
    return make_config(values)
