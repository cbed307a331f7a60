"""Detector traces: containers, file formats and synthetic QPD signals."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, signal

from ..constants import K_B
from ..physics_core import DomainError

CHANNELS = ("X", "Y")
BINARY_MAGIC = b"TFTR"
BINARY_VERSION = 1
# magic, version, sample rate, channel, count
_HEADER = struct.Struct("<4sHdcQ")


@dataclass
class Trace:
    """Uniformly sampled detector channel.

    ``markers`` maps protocol phases (e.g. "initialize", "gap", "measure")
    to half-open sample ranges [start, stop).
    """

    sample_rate: float
    values: np.ndarray
    channel: str = "Y"
    unit: str = "V"
    markers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise DomainError("sample_rate must be > 0")
        if self.channel not in CHANNELS:
            raise DomainError(f"channel must be one of {CHANNELS}")
        self.values = np.asarray(self.values, dtype=float)
        last = 0
        for name, (start, stop) in sorted(self.markers.items(), key=lambda kv: kv[1][0]):
            if not (last <= start <= stop <= self.values.size):
                raise DomainError(f"marker {name!r} out of order or out of bounds")
            last = stop

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    @property
    def times(self):
        return np.arange(self.values.size) / self.sample_rate

    def segment(self, name):
        start, stop = self.markers[name]
        return Trace(self.sample_rate, self.values[start:stop], self.channel, self.unit)

    def scaled(self, factor, unit):
        return Trace(self.sample_rate, self.values * factor, self.channel, unit, dict(self.markers))


def write_trace_csv(trace: Trace, path):
    """CSV with columns time_s,value and a JSON sidecar holding the metadata."""
    data = np.column_stack([trace.times, trace.values])
    np.savetxt(path, data, delimiter=",", header=f"time_s,value_{trace.unit}", comments="", fmt="%.17g")
    _write_sidecar(trace, str(path) + ".json")


def read_trace_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = _read_sidecar(str(path) + ".json")
    if meta is None:
        dt = np.diff(data[:, 0])
        if dt.size == 0 or not np.allclose(dt, dt[0], rtol=1e-9):
            raise DomainError("time column is not uniformly sampled")
        meta = {"sample_rate": 1.0 / dt[0]}
    return Trace(
        meta["sample_rate"],
        data[:, 1],
        meta.get("channel", "Y"),
        meta.get("unit", "V"),
        {k: tuple(v) for k, v in meta.get("markers", {}).items()},
    )


def _write_sidecar(trace, path):
    meta = {
        "sample_rate": trace.sample_rate,
        "channel": trace.channel,
        "unit": trace.unit,
        "markers": {k: list(v) for k, v in trace.markers.items()},
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _read_sidecar(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def write_trace_binary(trace: Trace, path):
    """Raw format: header (magic, version, fs, channel, count) + little-endian float64."""
    header = _HEADER.pack(
        BINARY_MAGIC, BINARY_VERSION, trace.sample_rate, trace.channel.encode(), trace.values.size
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(trace.values.astype("<f8").tobytes())


def read_trace_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DomainError("file too short for a trace header")
    magic, version, fs, channel, count = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise DomainError("not a trace file (bad magic)")
    if version != BINARY_VERSION:
        raise DomainError(f"unsupported trace version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * count:
        raise DomainError("sample count does not match file size")
    values = np.frombuffer(body, dtype="<f8").astype(float)
    return Trace(fs, values, channel.decode())


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class ModeSpec:
    """One thermal mode: angular frequency, damping [rad/s], temperature [K]."""

    omega: float
    gamma: float
    temperature: float


def _exact_step(omega, gamma, mass, dt):
    """Transition matrix of the damped mode over one sample."""
    A = np.array([[0.0, 1.0 / mass], [-mass * omega**2, -gamma]])
    return linalg.expm(A * dt)


def thermal_mode(spec: ModeSpec, mass, fs, n, rng):
    """Stationary sample path (q, p) of a damped harmonic mode.

    The linear SDE is discretized exactly and run through a second-order
    recursion with ``scipy.signal.lfilter``; the initial state is drawn from
    the stationary distribution, so no burn-in is needed.
    """
    omega, gamma, T = spec.omega, spec.gamma, spec.temperature
    if omega <= 0 or gamma <= 0 or T < 0:
        raise DomainError("need omega > 0, gamma > 0, temperature >= 0")
    dt = 1.0 / fs
    phi = _exact_step(omega, gamma, mass, dt)
    S = np.diag([K_B * T / (mass * omega**2), mass * K_B * T])
    # the stationary covariance makes the one-step noise exact
    Q = S - phi @ S @ phi.T
    Q = 0.5 * (Q + Q.T)
    # Q is PSD up to round-off; a symmetric square root tolerates that
    ev, V = np.linalg.eigh(Q)
    L = V * np.sqrt(np.clip(ev, 0.0, None))
    e = rng.standard_normal((n, 2)) @ L.T
    den = [1.0, -np.trace(phi), np.linalg.det(phi)]
    # x_n = sum_{k<n} phi^(n-1-k) e_k, component-wise through adj(zI - phi)
    q = signal.lfilter([0.0, 1.0, -phi[1, 1]], den, e[:, 0]) + signal.lfilter(
        [0.0, 0.0, phi[0, 1]], den, e[:, 1]
    )
    p = signal.lfilter([0.0, 0.0, phi[1, 0]], den, e[:, 0]) + signal.lfilter(
        [0.0, 1.0, -phi[0, 0]], den, e[:, 1]
    )
    # free evolution of a stationary initial state
    x0 = np.sqrt(np.diag(S)) * rng.standard_normal(2)
    lam, W = np.linalg.eig(phi)
    coef = np.linalg.solve(W, x0.astype(complex))
    # the transient is negligible once |lam|^k < 1e-20
    rho = float(np.max(np.abs(lam)))
    m = n if rho >= 1.0 else min(n, int(math.ceil(-46.0 / math.log(rho))) + 1)
    powers = lam[None, :] ** np.arange(m)[:, None]
    free = (powers * coef) @ W.T
    q[:m] += free[:, 0].real
    p[:m] += free[:, 1].real
    return q, p


def sinusoidal_transduction(q, wavelength):
    """Interferometric readout (lambda / 2 pi) sin(2 pi q / lambda), linear for small q."""
    k = 2.0 * math.pi / wavelength
    return np.sin(k * np.asarray(q)) / k


@dataclass
class SyntheticRecord:
    traces: dict  # channel -> Trace
    q: np.ndarray  # (3, n) true positions
    p: np.ndarray  # (3, n) true momenta


def synthesize_trace(
    modes,
    mass,
    calibration,
    fs,
    duration,
    rng,
    noise_floor=0.0,
    crosstalk=None,
    transduction_wavelength=None,
):
    """Voltage traces of the X and Y QPD channels for three thermal modes.

    Parameters
    ----------
    modes : sequence of three ModeSpec
        x, y, z modes.
    calibration : sequence of three float
        c_j in V/m with s = c q. Channel Y carries c_y q_y; channel X
        carries c_x q_x + c_z q_z (the z leak is what makes z visible).
    noise_floor : float
        One-sided white-noise PSD [V^2/Hz] added to each channel.
    crosstalk : dict, optional
        Extra couplings {(channel, axis): volts per metre}, e.g.
        {("Y", 0): 0.05 * c_x}.
    transduction_wavelength : float, optional
        Apply the sinusoidal readout map before calibration.
    """
    f_max = max(m.omega for m in modes) / (2.0 * math.pi)
    if fs <= 2.0 * f_max:
        raise DomainError(f"sample rate {fs:g} Hz aliases the {f_max:g} Hz mode")
    n = int(round(duration * fs))
    if n < 2:
        raise DomainError("trace too short")
    q = np.empty((3, n))
    p = np.empty((3, n))
    for j, spec in enumerate(modes):
        q[j], p[j] = thermal_mode(spec, mass, fs, n, rng)
    seen = q if transduction_wavelength is None else sinusoidal_transduction(q, transduction_wavelength)
    cx, cy, cz = calibration
    coupling = {("X", 0): cx, ("X", 2): cz, ("Y", 1): cy}
    for key, value in (crosstalk or {}).items():
        coupling[key] = coupling.get(key, 0.0) + value
    sigma_n = math.sqrt(noise_floor * fs / 2.0)
    traces = {}
    for ch in CHANNELS:
        s = np.zeros(n)
        for (c, axis), gain in coupling.items():
            if c == ch:
                s += gain * seen[axis]
        if sigma_n > 0:
            s += sigma_n * rng.standard_normal(n)
        traces[ch] = Trace(fs, s, ch, "V")
    return SyntheticRecord(traces, q, p)
