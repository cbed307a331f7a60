"""Scenario files: JSON documents with units in the field names.

Every quantity is stored in the unit its key names (``_m``, ``_s``, ``_Hz``,
``_mbar``, ``_K``, ...) and converted to SI on load. Frequencies given in Hz
become angular frequencies (rad/s) in the returned objects. Unknown keys are
rejected so that typos surface as errors instead of silently using defaults.

Top-level layout::

    {
      "name": "...",
      "seed": 12345,
      "particle": {...}, "trap": {...}, "environment": {...}, "protocol": {...},
      "simulate": {...}, "sweep_energy": {...}, "expansion": {...},
      "lossmap": {...}, "calibrate": {...}, "estimate": {...}, "duffing": {...}
    }

The command sections are optional individually; a command fails with a
ScenarioError when its own section is missing.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .constants import EPS_SILICA, G_DEFAULT, K_B, M_AIR, RHO_SILICA, mbar_to_pa
from .physics_core import (
    DomainError,
    EnvironmentParams,
    ParticleParams,
    Protocol,
    TrapParams,
)

TWO_PI = 2.0 * math.pi
COMMAND_SECTIONS = ("simulate", "sweep_energy", "expansion", "lossmap", "calibrate", "estimate", "duffing")


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` is the dotted key path, ``line`` its line in the file."""

    def __init__(self, message, field_path=None, line=None, source=None):
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(f"field '{field_path}'")
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message)
        self.field = field_path
        self.line = line
        self.source = source


# ---------------------------------------------------------------------------
# low-level reader


class _Section:
    """Typed access to one JSON object, remembering the key path for errors."""

    def __init__(self, data, path, doc):
        if not isinstance(data, dict):
            doc.fail(f"expected an object, got {type(data).__name__}", path)
        self.data = data
        self.path = path
        self.doc = doc
        self.used = set()

    def _key(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key):
        return key in self.data

    def raw(self, key, default=None, required=False):
        self.used.add(key)
        if key not in self.data:
            if required:
                self.doc.fail("missing required field", self._key(key))
            return default
        return self.data[key]

    def number(self, key, default=None, required=False, positive=False, nonneg=False):
        v = self.raw(key, default, required)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.doc.fail(f"expected a finite number, got {v!r}", self._key(key))
        if positive and v <= 0:
            self.doc.fail(f"must be > 0, got {v!r}", self._key(key))
        if nonneg and v < 0:
            self.doc.fail(f"must be >= 0, got {v!r}", self._key(key))
        return float(v)

    def integer(self, key, default=None, required=False, minimum=None):
        v = self.raw(key, default, required)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, int):
            self.doc.fail(f"expected an integer, got {v!r}", self._key(key))
        if minimum is not None and v < minimum:
            self.doc.fail(f"must be >= {minimum}, got {v!r}", self._key(key))
        return int(v)

    def numbers(self, key, default=None, required=False, length=None, nonneg=False, allow_empty=False):
        v = self.raw(key, default, required)
        if v is None:
            return None
        if not isinstance(v, list) or any(
            isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x) for x in v
        ):
            self.doc.fail("expected a list of finite numbers", self._key(key))
        if length is not None and len(v) != length:
            self.doc.fail(f"expected {length} values, got {len(v)}", self._key(key))
        if not v and not allow_empty:
            self.doc.fail("list must not be empty", self._key(key))
        if nonneg and any(x < 0 for x in v):
            self.doc.fail("values must be >= 0", self._key(key))
        return tuple(float(x) for x in v)

    def string(self, key, default=None, required=False, choices=None):
        v = self.raw(key, default, required)
        if v is None:
            return None
        if not isinstance(v, str):
            self.doc.fail(f"expected a string, got {v!r}", self._key(key))
        if choices is not None and v not in choices:
            self.doc.fail(f"must be one of {sorted(choices)}, got {v!r}", self._key(key))
        return v

    def boolean(self, key, default=None):
        v = self.raw(key, default)
        if v is not None and not isinstance(v, bool):
            self.doc.fail(f"expected true/false, got {v!r}", self._key(key))
        return v

    def section(self, key, required=False):
        v = self.raw(key, None, required)
        if v is None:
            return None
        return _Section(v, self._key(key), self.doc)

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            self.doc.fail(f"unknown field(s) {extra}", self._key(extra[0]))


class _Document:
    def __init__(self, text, source):
        self.text = text
        self.source = source
        self.lines = text.splitlines()

    def line_of(self, path):
        """Best-effort line number of the last key in a dotted path."""
        if not path:
            return None
        start = 0
        for part in path.split("."):
            pat = re.compile(r'"' + re.escape(part) + r'"\s*:')
            for i in range(start, len(self.lines)):
                if pat.search(self.lines[i]):
                    start = i
                    break
            else:
                return start + 1 if start else None
        return start + 1

    def fail(self, message, path=None):
        raise ScenarioError(message, path, self.line_of(path), self.source)


# ---------------------------------------------------------------------------
# typed scenario


@dataclass
class SimulateConfig:
    tau_grid: tuple
    n_trajectories: int
    dt: float | None


@dataclass
class SweepEnergyConfig:
    displacements: tuple
    tau_grid: tuple
    mc_tau_grid: tuple
    n_trajectories: int
    dt: float | None


@dataclass
class ExpansionConfig:
    tau_grid: tuple
    mc_tau_grid: tuple
    n_trajectories: int
    level: float
    ci_method: str
    transduction_wavelength: float | None
    filter_Gamma_f: float
    sample_rate: float
    readout_duration: float
    Gamma_reheat: float | None


@dataclass
class LossmapConfig:
    tau_grid: tuple
    n0_grid: tuple
    purity_levels: tuple
    environment: EnvironmentParams
    tol: float
    method: str


@dataclass
class CalibrateConfig:
    pressure: float  # Pa
    gas_temperature: float
    radius: float
    frequencies: tuple  # rad/s
    calibration: tuple  # V/m
    sample_rate: float
    duration: float
    noise_floor: float  # V^2/Hz
    segment_length: int
    reference_gamma: tuple | None  # rad/s
    reference_radius: tuple | None
    reference_radius_err: tuple | None
    reference_mass: tuple | None
    reference_mass_err: tuple | None


@dataclass
class EstimateConfig:
    trace_file: str | None
    frequency: float  # rad/s
    Gamma_f: float  # rad/s
    temperature: float
    damping: float  # rad/s
    sample_rate: float
    duration: float
    noise_floor: float  # m^2/Hz
    n_batches: int


@dataclass
class DuffingConfig:
    data_file: str | None
    omega0: tuple  # rad/s
    xi: tuple  # 1/m^2
    var_x: float
    var_z: float
    y_rms_range: tuple
    n_points: int
    relative_noise: float
    verify_amplitude: float | None
    verify_periods: int


@dataclass
class Scenario:
    """Parsed scenario in SI units plus the hash of its canonical JSON."""

    name: str
    seed: int
    particle: ParticleParams
    trap: TrapParams
    environment: EnvironmentParams
    protocol: Protocol | None
    optimal_displacement: bool
    depth: float
    sha256: str
    source: str
    raw: dict = field(repr=False)
    simulate: SimulateConfig | None = None
    sweep_energy: SweepEnergyConfig | None = None
    expansion: ExpansionConfig | None = None
    lossmap: LossmapConfig | None = None
    calibrate: CalibrateConfig | None = None
    estimate: EstimateConfig | None = None
    duffing: DuffingConfig | None = None

    def require(self, name):
        cfg = getattr(self, name)
        if cfg is None:
            raise ScenarioError(f"section '{name}' required by this command is missing", name, None, self.source)
        return cfg


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def scenario_hash(data):
    return hashlib.sha256(canonical_json(data).encode("ascii")).hexdigest()


def _hz(values):
    return None if values is None else tuple(TWO_PI * v for v in values)


def _particle(s: _Section):
    out = ParticleParams(
        radius=s.number("radius_m", required=True, positive=True),
        density=s.number("density_kg_per_m3", RHO_SILICA, positive=True),
        permittivity_rel=s.number("permittivity_rel", EPS_SILICA, positive=True),
    )
    s.finish()
    return out


def _environment(s: _Section, doc):
    damping = s.number("damping_Hz", positive=True)
    try:
        env = EnvironmentParams(
            pressure=mbar_to_pa(s.number("pressure_mbar", required=True, nonneg=True)),
            gas_temperature=s.number("gas_temperature_K", 300.0, positive=True),
            molar_mass=s.number("molar_mass_kg_per_mol", M_AIR, positive=True),
            damping_gamma=None if damping is None else TWO_PI * damping,
            g=s.number("g_m_per_s2", G_DEFAULT),
        )
    except DomainError as exc:
        doc.fail(str(exc), s.path)
    s.finish()
    return env


def _trap(s: _Section, doc):
    freqs = s.numbers("frequencies_Hz", required=True, length=3)
    depth_J = s.number("depth_J", positive=True)
    depth_kT = s.number("depth_kT", positive=True)
    depth_ref = s.number("depth_reference_K", positive=True)
    try:
        trap = TrapParams(
            waist_x=s.number("waist_x_m", required=True, positive=True),
            waist_y=s.number("waist_y_m", required=True, positive=True),
            rayleigh_z=s.number("rayleigh_z_m", required=True, positive=True),
            power=s.number("power_W", required=True, nonneg=True),
            frequencies=_hz(freqs),
        )
    except DomainError as exc:
        doc.fail(str(exc), s.path)
    if depth_J is not None and depth_kT is not None:
        doc.fail("give depth_J or depth_kT, not both", f"{s.path}.depth_kT")
    if depth_kT is not None:
        if depth_ref is None:
            doc.fail("depth_kT needs depth_reference_K", f"{s.path}.depth_kT")
        depth_J = depth_kT * K_B * depth_ref
    elif depth_ref is not None:
        doc.fail("depth_reference_K only applies with depth_kT", f"{s.path}.depth_reference_K")
    s.finish()
    if depth_J is not None:
        trap = trap.with_depth(depth_J)
    return trap


def _protocol(s: _Section, env, doc):
    tau = s.number("tau_s", 0.0, nonneg=True)
    disp = s.raw("displacement_m")
    optimal = disp == "optimal"
    if disp is not None and not optimal:
        disp = s.number("displacement_m")
    detuning = s.number("detuning_Hz")
    c_f = s.number("c_f_m_per_Hz", positive=True)
    temps = s.numbers("init_temperatures_K", length=3, nonneg=True)
    occs = s.numbers("init_occupations", length=3, nonneg=True)
    if optimal:
        disp = 0.5 * env.g * tau**2
    elif disp is None and detuning is None:
        disp = 0.0
    try:
        prot = Protocol(tau, disp, detuning, c_f, temps, occs)
    except DomainError as exc:
        doc.fail(str(exc), s.path)
    s.finish()
    return prot, optimal


def _grid(s: _Section, key, required=True, allow_empty=False):
    """A list of values or {"start", "stop", "num", "spacing": "linear"|"log"}."""
    v = s.data.get(key)
    if isinstance(v, dict):
        spec = _Section(v, s._key(key), s.doc)
        s.used.add(key)
        start = spec.number("start", required=True, nonneg=True)
        stop = spec.number("stop", required=True, nonneg=True)
        num = spec.integer("num", required=True, minimum=0)
        spacing = spec.string("spacing", "linear", choices={"linear", "log"})
        spec.finish()
        if num == 0 and not allow_empty:
            s.doc.fail("grid must not be empty", s._key(key))
        if spacing == "log":
            if start <= 0:
                s.doc.fail("log grid needs start > 0", s._key(key))
            g = tuple(float(x) for x in np.geomspace(start, stop, num))
        else:
            g = tuple(float(x) for x in np.linspace(start, stop, num))
    else:
        g = s.numbers(key, required=required, nonneg=True, allow_empty=allow_empty)
    if g is not None and any(b <= a for a, b in zip(g, g[1:])):
        s.doc.fail("grid must be strictly ascending", s._key(key))
    return g


def _simulate(s: _Section):
    cfg = SimulateConfig(
        tau_grid=_grid(s, "tau_grid_s", allow_empty=True),
        n_trajectories=s.integer("n_trajectories", 100, minimum=2),
        dt=s.number("dt_s", positive=True),
    )
    s.finish()
    return cfg


def _sweep_energy(s: _Section, protocol_cf):
    disp = s.numbers("displacements_m", nonneg=True)
    det = s.numbers("detunings_Hz", nonneg=True)
    c_f = s.number("c_f_m_per_Hz", protocol_cf, positive=True)
    if (disp is None) == (det is None):
        s.doc.fail("give exactly one of displacements_m / detunings_Hz", s.path)
    if det is not None:
        if c_f is None:
            s.doc.fail("detunings_Hz needs c_f_m_per_Hz", s._key("detunings_Hz"))
        disp = tuple(c_f * x for x in det)
    cfg = SweepEnergyConfig(
        displacements=disp,
        tau_grid=_grid(s, "tau_grid_s"),
        mc_tau_grid=_grid(s, "mc_tau_grid_s", required=False, allow_empty=True) or (),
        n_trajectories=s.integer("n_trajectories", 5000, minimum=2),
        dt=s.number("dt_s", positive=True),
    )
    s.finish()
    return cfg


def _expansion(s: _Section):
    reheat = s.number("Gamma_reheat_Hz", positive=True)
    cfg = ExpansionConfig(
        tau_grid=_grid(s, "tau_grid_s"),
        mc_tau_grid=_grid(s, "mc_tau_grid_s", required=False, allow_empty=True) or (),
        n_trajectories=s.integer("n_trajectories", 100, minimum=10),
        level=s.number("level", 0.9544997361036416, positive=True),
        ci_method=s.string("ci_method", "chi2", choices={"chi2", "bootstrap"}),
        transduction_wavelength=s.number("transduction_wavelength_m", positive=True),
        filter_Gamma_f=TWO_PI * s.number("filter_Gamma_f_Hz", 3000.0, positive=True),
        sample_rate=s.number("sample_rate_Hz", 20e6, positive=True),
        readout_duration=s.number("readout_duration_s", 2e-4, positive=True),
        Gamma_reheat=_hz([reheat])[0] if reheat is not None else None,
    )
    if cfg.level >= 1:
        s.doc.fail("level must lie in (0, 1)", s._key("level"))
    s.finish()
    return cfg


def _lossmap(s: _Section, base_env, doc):
    env_s = s.section("environment")
    env = base_env if env_s is None else _environment(env_s, doc)
    n0 = _grid(s, "n0_grid")
    cfg = LossmapConfig(
        tau_grid=_grid(s, "tau_grid_s"),
        n0_grid=n0,
        purity_levels=s.numbers("purity_levels", [0.5, 0.25, 0.1]),
        environment=env,
        tol=s.number("tol", 1e-4, positive=True),
        method=s.string("method", "conditional", choices={"conditional", "marginal"}),
    )
    s.finish()
    return cfg


def _calibrate(s: _Section):
    ref_g = s.numbers("reference_gamma_Hz", length=3)
    ref_m = s.numbers("reference_mass_kg", length=3)
    ref_me = s.numbers("reference_mass_err_kg", length=3)
    cfg = CalibrateConfig(
        pressure=mbar_to_pa(s.number("pressure_mbar", required=True, positive=True)),
        gas_temperature=s.number("gas_temperature_K", 300.0, positive=True),
        radius=s.number("radius_m", required=True, positive=True),
        frequencies=_hz(s.numbers("frequencies_Hz", required=True, length=3)),
        calibration=tuple(1e6 * c for c in s.numbers("calibration_V_per_um", required=True, length=3)),
        sample_rate=s.number("sample_rate_Hz", 1e6, positive=True),
        duration=s.number("duration_s", 1.0, positive=True),
        noise_floor=s.number("noise_floor_V2_per_Hz", 0.0, nonneg=True),
        segment_length=s.integer("segment_length", 16384, minimum=8),
        reference_gamma=_hz(ref_g),
        reference_radius=s.numbers("reference_radius_m", length=3),
        reference_radius_err=s.numbers("reference_radius_err_m", length=3),
        reference_mass=ref_m,
        reference_mass_err=ref_me,
    )
    s.finish()
    return cfg


def _estimate(s: _Section):
    cfg = EstimateConfig(
        trace_file=s.string("trace_file"),
        frequency=TWO_PI * s.number("frequency_Hz", required=True, positive=True),
        Gamma_f=TWO_PI * s.number("Gamma_f_Hz", 500.0, positive=True),
        temperature=s.number("temperature_K", 300.0, nonneg=True),
        damping=TWO_PI * s.number("damping_Hz", 100.0, positive=True),
        sample_rate=s.number("sample_rate_Hz", 1e6, positive=True),
        duration=s.number("duration_s", 0.2, positive=True),
        noise_floor=s.number("noise_floor_m2_per_Hz", 0.0, nonneg=True),
        n_batches=s.integer("n_batches", 20, minimum=2),
    )
    s.finish()
    return cfg


def _duffing(s: _Section):
    rng_ = s.numbers("y_rms_range_m", [50e-9, 200e-9], length=2, nonneg=True)
    cfg = DuffingConfig(
        data_file=s.string("data_file"),
        omega0=_hz(s.numbers("omega0_Hz", required=True, length=3)),
        xi=tuple(1e12 * x for x in s.numbers("xi_per_um2", [-1.72, -2.78, -0.32], length=3)),
        var_x=s.number("rms_x_m", 38e-9, nonneg=True) ** 2,
        var_z=s.number("rms_z_m", 63e-9, nonneg=True) ** 2,
        y_rms_range=rng_,
        n_points=s.integer("n_points", 200, minimum=4),
        relative_noise=s.number("relative_noise", 1e-3, nonneg=True),
        verify_amplitude=s.number("verify_amplitude_rms_m", positive=True),
        verify_periods=s.integer("verify_periods", 120, minimum=10),
    )
    s.finish()
    return cfg


def parse_scenario(text, source="<string>"):
    """Parse and validate scenario text; raises ScenarioError with line/field."""
    doc = _Document(text, source)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", None, exc.lineno, source) from None
    root = _Section(data, "", doc)
    name = root.string("name", Path(str(source)).stem)
    seed = root.integer("seed", 0, minimum=0)
    particle = _particle(root.section("particle", required=True))
    env = _environment(root.section("environment", required=True), doc)
    trap = _trap(root.section("trap", required=True), doc)
    prot_s = root.section("protocol")
    protocol, optimal = (None, False) if prot_s is None else _protocol(prot_s, env, doc)
    depth = trap.depth(particle)
    sc = Scenario(
        name=name,
        seed=seed,
        particle=particle,
        trap=trap.with_depth(depth),
        environment=env,
        protocol=protocol,
        optimal_displacement=optimal,
        depth=depth,
        sha256=scenario_hash(data),
        source=str(source),
        raw=data,
    )
    builders = {
        "simulate": lambda s: _simulate(s),
        "sweep_energy": lambda s: _sweep_energy(s, None if protocol is None else protocol.c_f),
        "expansion": lambda s: _expansion(s),
        "lossmap": lambda s: _lossmap(s, env, doc),
        "calibrate": lambda s: _calibrate(s),
        "estimate": lambda s: _estimate(s),
        "duffing": lambda s: _duffing(s),
    }
    for key, build in builders.items():
        sec = root.section(key)
        if sec is not None:
            setattr(sc, key, build(sec))
    root.finish()
    if any(getattr(sc, k) is not None for k in ("simulate", "sweep_energy", "expansion")) and protocol is None:
        doc.fail("free-fall commands need a 'protocol' section", "protocol")
    return sc


def load_scenario(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", None, None, str(path)) from None
    return parse_scenario(text, str(path))


def default_scenario_text(name="default"):
    return resources.files("trapfall").joinpath("scenarios", f"{name}.json").read_text(encoding="utf-8")


def load_default(name="default"):
    return parse_scenario(default_scenario_text(name), f"<builtin:{name}>")
