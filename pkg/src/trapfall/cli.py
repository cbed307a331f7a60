"""Command-line driver.

Every artifact embeds the tool version, the scenario hash and the seed, and
nothing that varies between runs (no timestamps, no thread count), so the
same scenario and seed give byte-identical files.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid scenario,
4 artifacts written but an internal check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .constants import K_B
from .energetics import gravity_depth_ratio, loss_map, mean_energy_y
from .freefall import expansion_factors, expansion_q, propagate
from .langevin import (
    block_rng,
    energy_y_samples,
    fit_parabola,
    jackknife,
    run_ensemble,
    simulate_trapped,
    spectral_peak_frequency,
)
from .physics_core import DomainError, EnvironmentParams, ParticleParams, TrapParams, mass_from_radius
from .pipeline.duffing import duffing_frequency, fit_duffing
from .pipeline.estimation import (
    design_bandpass,
    ensemble_expansion,
    readout_state,
    variance_with_se,
)
from .pipeline.spectral import (
    FitError,
    calibrate,
    fit_psd_peaks,
    mass_from_damping,
    radius_from_damping,
    welch_psd,
)
from .pipeline.trace import ModeSpec, Trace, read_trace_binary, read_trace_csv, synthesize_trace, thermal_mode
from .scenario import ScenarioError, load_default, load_scenario

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SCENARIO, EXIT_CHECK = 0, 1, 2, 3, 4
TWO_PI = 2.0 * math.pi
AXES = ("x", "y", "z")

# sub-stream ids for randomness that is not part of a trajectory ensemble
_STREAM_BOOTSTRAP = 1 << 20
_STREAM_SYNTH = (1 << 20) + 1


class UsageError(Exception):
    pass


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


class Artifacts:
    """Writes tables (CSV or JSON) and JSON documents with a common header."""

    def __init__(self, out_dir, fmt, meta):
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.meta = meta
        self.written = []
        self.checks = {}
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _write(self, name, text):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.written.append(str(path))
        return path

    def table(self, name, columns, rows):
        if self.fmt == "csv":
            buf = io.StringIO()
            for k in sorted(self.meta):
                buf.write(f"# {k}={self.meta[k]}\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
            return self._write(f"{name}.csv", buf.getvalue())
        doc = {"meta": self.meta, "columns": list(columns), "rows": [list(r) for r in rows]}
        return self._write(f"{name}.json", json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")

    def document(self, name, payload):
        doc = {"meta": self.meta}
        doc.update(payload)
        return self._write(f"{name}.json", json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n")

    def check(self, name, ok):
        self.checks[name] = bool(ok)

    @property
    def all_ok(self):
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# commands


def _free_fall_setup(sc):
    mass = sc.particle.mass
    gamma = sc.environment.gamma(sc.particle)
    return mass, gamma


def cmd_simulate(sc, art, args):
    cfg = sc.require("simulate")
    grid = cfg.tau_grid
    if len(grid) == 0:
        raise UsageError("simulate: tau_grid_s is empty")
    g = sc.environment.g
    prot = replace(sc.protocol, tau=grid[-1], displacement_d=0.0, detuning=None)
    disp = [0.5 * g * t**2 if sc.optimal_displacement else sc.protocol.displacement_d for t in grid]
    stats = run_ensemble(
        prot,
        cfg.n_trajectories,
        sc.particle,
        sc.trap,
        sc.environment,
        art.meta["seed"],
        dt=cfg.dt,
        depth=sc.depth,
        record_times=grid,
        threads=args.threads,
        displacements=disp,
        keep_samples=True,
    )
    cols = ["tau_s"]
    for a in AXES:
        cols += [f"mean_q{a}_m", f"mean_q{a}_se_m", f"mean_p{a}_kg_m_per_s", f"mean_p{a}_se_kg_m_per_s"]
    cols += ["recapture_fraction", "recapture_se"]
    rows = []
    for s in stats:
        r = [s.tau]
        for j in range(3):
            r += [s.mean[j, 0], s.mean_se[j, 0], s.mean[j, 1], s.mean_se[j, 1]]
        rows.append(r + [s.recapture_fraction, s.recapture_se])
    art.table("mean_displacement", cols, rows)
    art.document("ensemble_stats", {"displacements_m": disp, "ensembles": [s.to_dict() for s in stats]})

    fits = []
    if len(grid) >= 4:
        # trajectories share their noise across record times, so the residual
        # scatter understates the error; a jackknife over trajectories does not
        Q = np.stack([s.samples_q for s in stats], axis=1)  # (n, times, 3)
        for j, a in enumerate(AXES):
            acc, acc_se, coef = fit_parabola(grid, [s.mean[j, 0] for s in stats])
            _, jk_se = jackknife(lambda arrs: fit_parabola(grid, arrs[0][:, :, j].mean(axis=0))[0], (Q,), groups=20)
            fits.append([a, acc, acc_se, jk_se, coef[0], coef[1]])
    art.table(
        "parabola_fit",
        ["axis", "acceleration_m_per_s2", "acceleration_se_residual_m_per_s2", "acceleration_se_jackknife_m_per_s2", "offset_m", "velocity_m_per_s"],
        fits,
    )
    finite = all(np.isfinite(s.mean).all() and np.isfinite(s.cov).all() for s in stats)
    psd = all(np.all(np.linalg.eigvalsh(s.cov) >= -1e-12 * np.abs(s.cov).max()) for s in stats)
    art.check("finite_statistics", finite)
    art.check("covariance_psd", psd)
    return {"a_y_m_per_s2": fits[1][1] if fits else None, "a_y_se_jackknife": fits[1][3] if fits else None}


def cmd_sweep_energy(sc, art, args):
    cfg = sc.require("sweep_energy")
    mass, gamma = _free_fall_setup(sc)
    env, trap = sc.environment, sc.trap
    s0 = sc.protocol.initial_states(mass, trap.frequencies)[1]
    taus = np.asarray(cfg.tau_grid)
    resolution_grid = cfg.mc_tau_grid if len(cfg.mc_tau_grid) > 1 else cfg.tau_grid
    rows, minima = [], []
    unit = None
    analytic = {}
    for d in cfg.displacements:
        curve = []
        for t in taus:
            e = mean_energy_y(s0, trap, t, d, mass, gamma, env.gas_temperature, sc.depth, env.g)
            unit = e.thermal_unit
            curve.append(e.total / unit)
            rows.append([d, t, e.total / unit, e.kinetic / unit, e.potential / unit])
        curve = np.array(curve)
        analytic[d] = curve
        k = int(np.argmin(curve))
        expected = math.sqrt(2.0 * d / env.g)
        # the spread terms pull the minimum slightly below sqrt(2 d / g); the
        # check is at the resolution of the Monte Carlo (measurement) grid
        step = float(np.max(np.diff(resolution_grid))) if len(resolution_grid) > 1 else 0.0
        inside = taus[0] <= expected <= taus[-1]
        ok = (not inside) or abs(taus[k] - expected) <= step
        minima.append([d, taus[k], curve[k], expected, step, ok])
    art.table("energy_analytic", ["displacement_m", "tau_s", "energy_kT0", "kinetic_kT0", "potential_kT0"], rows)
    art.table("energy_minima", ["displacement_m", "tau_star_s", "energy_min_kT0", "expected_tau_s", "grid_step_s", "within_grid"], minima)
    art.check("minimum_at_sqrt_2d_over_g", all(m[-1] for m in minima))

    mc_rows = []
    if cfg.mc_tau_grid:
        mc = np.asarray(cfg.mc_tau_grid)
        prot = replace(sc.protocol, tau=float(mc[-1]), displacement_d=0.0, detuning=None)
        stats = run_ensemble(
            prot,
            cfg.n_trajectories,
            sc.particle,
            trap,
            env,
            art.meta["seed"],
            dt=cfg.dt,
            depth=sc.depth,
            record_times=mc,
            threads=args.threads,
            keep_samples=True,
        )
        for d in cfg.displacements:
            for s in stats:
                e = energy_y_samples(s.samples_q, s.samples_p, trap, mass, d, sc.depth) / unit
                mean, se = e.mean(), e.std(ddof=1) / math.sqrt(e.size)
                an = mean_energy_y(s0, trap, s.tau, d, mass, gamma, env.gas_temperature, sc.depth, env.g)
                a = an.total / unit
                mc_rows.append([d, s.tau, mean, se, a, (mean - a) / se if se > 0 else 0.0])
        art.check("mc_finite", all(np.isfinite(r[2]) for r in mc_rows))
    art.table("energy_mc", ["displacement_m", "tau_s", "energy_kT0", "energy_se_kT0", "analytic_kT0", "z_score"], mc_rows)
    return {"minima": minima, "thermal_unit_J": unit}


def cmd_expansion(sc, art, args):
    cfg = sc.require("expansion")
    mass, gamma = _free_fall_setup(sc)
    env, trap = sc.environment, sc.trap
    omega = trap.frequencies[1]
    s0 = sc.protocol.initial_states(mass, trap.frequencies)[1]
    q0, p0 = math.sqrt(s0.var_q), math.sqrt(s0.var_p)
    T0 = s0.var_q * mass * omega**2 / K_B
    Gamma = cfg.Gamma_reheat if cfg.Gamma_reheat is not None else gamma * env.gas_temperature / T0
    rows = []
    for t in cfg.tau_grid:
        st = propagate(s0, t, "y", mass, gamma, env.gas_temperature, env.g)
        xq, xp = expansion_factors(s0, st)
        rows.append([t, expansion_q(t, omega, Gamma), xq, xp])
    art.table("expansion_analytic", ["tau_s", "xi_q_first_order", "xi_q_exact", "xi_p_exact"], rows)

    mc_rows = []
    if cfg.mc_tau_grid:
        mc = np.asarray(cfg.mc_tau_grid)
        prot = replace(sc.protocol, tau=float(mc[-1]), displacement_d=0.0, detuning=None)
        stats = run_ensemble(
            prot,
            cfg.n_trajectories,
            sc.particle,
            trap,
            env,
            art.meta["seed"],
            depth=sc.depth,
            record_times=mc,
            threads=args.threads,
            keep_samples=True,
        )
        for i, s in enumerate(stats):
            q = s.samples_q[:, 1] - s.samples_q[:, 1].mean()
            p = s.samples_p[:, 1] - s.samples_p[:, 1].mean()
            rng = block_rng(art.meta["seed"], _STREAM_BOOTSTRAP + i)
            direct = ensemble_expansion(q / q0, p / p0, cfg.level, cfg.ci_method, rng)
            row = [s.tau, direct.xi_q, *direct.ci_q, direct.xi_p, *direct.ci_p]
            if cfg.transduction_wavelength is not None:
                qs, ps = readout_state(
                    q, p, mass, omega, cfg.filter_Gamma_f, cfg.sample_rate, cfg.readout_duration, cfg.transduction_wavelength
                )
                sat = ensemble_expansion(qs / q0, ps / p0, cfg.level, cfg.ci_method, rng)
                row += [sat.xi_q, *sat.ci_q, sat.xi_p, *sat.ci_p]
            else:
                row += [math.nan] * 6
            mc_rows.append(row)
    cols = [
        "tau_s",
        "xi_q",
        "xi_q_ci_low",
        "xi_q_ci_high",
        "xi_p",
        "xi_p_ci_low",
        "xi_p_ci_high",
        "xi_q_readout",
        "xi_q_readout_ci_low",
        "xi_q_readout_ci_high",
        "xi_p_readout",
        "xi_p_readout_ci_low",
        "xi_p_readout_ci_high",
    ]
    art.table("expansion_mc", cols, mc_rows)
    art.check("expansion_finite", all(np.isfinite(r[1]) for r in mc_rows) and all(np.isfinite(r[1]) for r in rows))
    return {"Gamma_reheat_rad_per_s": Gamma, "ci_level": cfg.level}


def cmd_lossmap(sc, art, args):
    cfg = sc.require("lossmap")
    lm = loss_map(
        cfg.tau_grid,
        cfg.n0_grid,
        sc.particle,
        sc.trap,
        cfg.environment,
        depth=sc.depth,
        purity_levels=cfg.purity_levels,
        threads=args.threads,
        method=cfg.method,
        tol=cfg.tol,
    )
    rows = []
    for i, t in enumerate(lm.tau_grid):
        for k, n0 in enumerate(lm.n0_grid):
            rows.append([t, n0, lm.loss[i, k], lm.loss_error[i, k], lm.purity[i, k]])
    art.table("loss_map", ["tau_s", "n0", "loss_probability", "loss_error", "purity"], rows)
    crow = []
    for level in cfg.purity_levels:
        n0s, taus = lm.contours[level]
        crow += [[level, n, t] for n, t in zip(n0s, taus)]
    art.table("purity_contours", ["purity", "n0", "tau_s"], crow)

    slack = float(np.max(lm.loss_error)) + 1e-9
    art.check("loss_in_unit_interval", bool(np.all((lm.loss >= -slack) & (lm.loss <= 1 + slack))))
    art.check("loss_monotone_in_tau", bool(np.all(np.diff(lm.loss, axis=0) >= -2 * slack)))
    if lm.tau_grid[0] == 0.0:
        art.check("purity_at_release", bool(np.allclose(lm.purity[0], 1.0 / (2.0 * lm.n0_grid + 1.0), rtol=1e-12)))
    ratio = gravity_depth_ratio(sc.depth, sc.particle.mass, sc.trap.waist_y, sc.environment.g)
    return {
        "gamma_rad_per_s": lm.gamma,
        "Gamma_dec_rad_per_s": lm.Gamma_dec,
        "gravity_depth_ratio": ratio,
        "depth_J": sc.depth,
    }


def _axis_rows(values):
    return [[a, *v] for a, v in zip(AXES, values)]


def cmd_calibrate(sc, art, args):
    cfg = sc.require("calibrate")
    density = sc.particle.density
    m_true = mass_from_radius(cfg.radius, density)
    env = EnvironmentParams(pressure=cfg.pressure, gas_temperature=cfg.gas_temperature, molar_mass=sc.environment.molar_mass)
    gamma = env.gamma(ParticleParams(cfg.radius, density))
    modes = [ModeSpec(w, gamma, cfg.gas_temperature) for w in cfg.frequencies]
    rng = block_rng(art.meta["seed"], _STREAM_SYNTH)
    rec = synthesize_trace(modes, m_true, cfg.calibration, cfg.sample_rate, cfg.duration, rng, cfg.noise_floor)
    f_hz = [w / TWO_PI for w in cfg.frequencies]
    lo, hi = 0.25 * min(f_hz), min(1.75 * max(f_hz), 0.49 * cfg.sample_rate)
    fits = {}
    for ch, axes in (("X", (0, 2)), ("Y", (1,))):
        sp = welch_psd(rec.traces[ch], cfg.segment_length)
        art.table(f"psd_{ch}", ["frequency_Hz", "psd_V2_per_Hz"], zip(sp.frequencies, sp.psd))
        fit = fit_psd_peaks(sp, [f_hz[a] for a in axes], band=(lo, hi))
        # fitted peaks come back sorted by frequency
        order = sorted(axes, key=lambda a: f_hz[a])
        for k, a in enumerate(order):
            fits[a] = (fit, k)
    rows = []
    pressure = cfg.pressure
    ok = True
    for a in range(3):
        fit, k = fits[a]
        om, ga, ar = fit.omega[k], fit.gamma[k], fit.area[k]
        om_e, ga_e, ar_e = fit.omega_err[k], fit.gamma_err[k], fit.area_err[k]
        R = radius_from_damping(ga, pressure, cfg.gas_temperature, env.molar_mass, density)
        R_e = R * ga_e / ga
        m = float(mass_from_damping(ga, pressure, cfg.gas_temperature, env.molar_mass, density))
        m_e = 3.0 * m * ga_e / ga
        c = float(calibrate(ar, m, om, cfg.gas_temperature))
        c_e = 0.5 * c * math.hypot(ar_e / ar, m_e / m)
        rows.append([AXES[a], om / TWO_PI, om_e / TWO_PI, ga / TWO_PI, ga_e / TWO_PI, c * 1e-6, c_e * 1e-6, m * 1e18, m_e * 1e18, R * 1e9, R_e * 1e9, fit.reduced_chi2])
        ok &= all(math.isfinite(v) for v in (om, ga, ar, c))
    art.table(
        "calibration",
        ["axis", "omega_Hz", "omega_err_Hz", "gamma_Hz", "gamma_err_Hz", "c_V_per_um", "c_err_V_per_um", "mass_fg", "mass_err_fg", "radius_nm", "radius_err_nm", "reduced_chi2"],
        rows,
    )
    truth = []
    for a in range(3):
        r = rows[a]
        truth.append(
            [
                AXES[a],
                cfg.frequencies[a] / TWO_PI,
                r[1] / (cfg.frequencies[a] / TWO_PI) - 1.0,
                cfg.calibration[a] * 1e-6,
                r[5] / (cfg.calibration[a] * 1e-6) - 1.0,
                m_true * 1e18,
                r[7] - m_true * 1e18,
                cfg.radius * 1e9,
                r[9] - cfg.radius * 1e9,
            ]
        )
    art.table(
        "calibration_vs_truth",
        ["axis", "omega_true_Hz", "omega_rel_dev", "c_true_V_per_um", "c_rel_dev", "mass_true_fg", "mass_dev_fg", "radius_true_nm", "radius_dev_nm"],
        truth,
    )
    ref = []
    if cfg.reference_gamma is not None:
        for a in range(3):
            R = radius_from_damping(cfg.reference_gamma[a], pressure, cfg.gas_temperature, env.molar_mass, density)
            row = [AXES[a], cfg.reference_gamma[a] / TWO_PI, R * 1e9]
            if cfg.reference_radius is not None and cfg.reference_radius_err is not None:
                inside = abs(R - cfg.reference_radius[a]) <= cfg.reference_radius_err[a]
                row += [cfg.reference_radius[a] * 1e9, cfg.reference_radius_err[a] * 1e9, inside]
            else:
                row += [math.nan, math.nan, False]
            ref.append(row)
    art.table("reference_radius", ["axis", "reference_gamma_Hz", "radius_from_damping_nm", "reference_radius_nm", "reference_err_nm", "within_error"], ref)
    art.check("fit_finite", ok)
    return {"true_gamma_rad_per_s": gamma, "true_mass_kg": m_true}


def cmd_estimate(sc, art, args):
    cfg = sc.require("estimate")
    mass = sc.particle.mass
    omega = cfg.frequency
    true_var = None
    if cfg.trace_file:
        path = Path(cfg.trace_file)
        if not path.is_absolute():
            base = Path(sc.source).parent if not sc.source.startswith("<") else Path.cwd()
            path = base / path
        trace = read_trace_binary(path) if path.suffix in (".bin", ".tftr") else read_trace_csv(path)
    else:
        rng = block_rng(art.meta["seed"], _STREAM_SYNTH)
        n = int(round(cfg.duration * cfg.sample_rate))
        q, _ = thermal_mode(ModeSpec(omega, cfg.damping, cfg.temperature), mass, cfg.sample_rate, n, rng)
        if cfg.noise_floor > 0:
            q = q + math.sqrt(cfg.noise_floor * cfg.sample_rate / 2.0) * rng.standard_normal(n)
        trace = Trace(cfg.sample_rate, q, "Y", "m")
        true_var = K_B * cfg.temperature / (mass * omega**2)
    fs = trace.sample_rate
    # drop 20 filter time constants at both ends
    edge = int(math.ceil(20.0 / (4.0 * cfg.Gamma_f) * fs))
    if trace.values.size <= 4 * edge:
        raise UsageError("estimate: trace too short for the filter settling time")
    rows = []
    for kind in ("position", "momentum"):
        filt = design_bandpass(omega, cfg.Gamma_f, fs, kind)
        for direction in ("forward", "backward"):
            y = filt.apply(trace.values, direction)
            if kind == "momentum":
                y = (-1.0 if direction == "forward" else 1.0) * mass * omega * y
            v, se = variance_with_se(y[edge:-edge], cfg.n_batches)
            ref = math.nan
            if true_var is not None:
                ref = true_var if kind == "position" else true_var * (mass * omega) ** 2
            rows.append([kind, direction, v, se, ref, v / ref - 1.0 if ref == ref else math.nan])
    art.table("estimate_variance", ["kind", "direction", "variance", "variance_se", "true_variance", "relative_deviation"], rows)
    f = omega + cfg.Gamma_f * np.linspace(-20.0, 20.0, 81)
    resp = []
    for kind in ("position", "momentum"):
        h = np.abs(design_bandpass(omega, cfg.Gamma_f, fs, kind).response(f))
        resp.append(20.0 * np.log10(h))
    art.table("filter_response", ["frequency_Hz", "position_gain_dB", "momentum_gain_dB"], [[w / TWO_PI, a, b] for w, a, b in zip(f, *resp)])
    agree = []
    for k in (0, 2):
        a, b = rows[k], rows[k + 1]
        agree.append(abs(a[2] - b[2]) <= 2.0 * math.hypot(a[3], b[3]))
    art.check("finite_variances", all(math.isfinite(r[2]) for r in rows))
    return {"forward_backward_within_2se": agree, "edge_samples_dropped": edge}


def _read_duffing_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True, comments="#")
    need = ("y_rms_m", "omega_x_Hz", "omega_y_Hz", "omega_z_Hz")
    missing = [k for k in need if k not in data.dtype.names]
    if missing:
        raise UsageError(f"duffing data file lacks columns {missing}")
    F = TWO_PI * np.column_stack([data[k] for k in need[1:]])
    return np.asarray(data["y_rms_m"], dtype=float), F


def cmd_duffing(sc, art, args):
    cfg = sc.require("duffing")
    w0 = np.asarray(cfg.omega0)
    if cfg.data_file:
        y, F = _read_duffing_csv(cfg.data_file)
    else:
        rng = block_rng(art.meta["seed"], _STREAM_SYNTH)
        y = np.linspace(cfg.y_rms_range[0], cfg.y_rms_range[1], cfg.n_points)
        V = np.column_stack([np.full(y.size, cfg.var_x), y**2, np.full(y.size, cfg.var_z)])
        F = np.column_stack([duffing_frequency(w0[j], V, cfg.xi, j) for j in range(3)])
        F = F * (1.0 + cfg.relative_noise * rng.standard_normal(F.shape))
        art.table("duffing_data", ["y_rms_m", "omega_x_Hz", "omega_y_Hz", "omega_z_Hz"], [[a, *(b / TWO_PI)] for a, b in zip(y, F)])
    tensor = fit_duffing(y, F, w0, cfg.var_x, cfg.var_z)
    rows = [[a, tensor.xi[j] * 1e-12, tensor.xi_err[j] * 1e-12, tensor.waists[j], tensor.waist_errors[j]] for j, a in enumerate(AXES)]
    art.table("duffing_tensor", ["axis", "xi_per_um2", "xi_err_per_um2", "waist_m", "waist_err_m"], rows)
    out = {"status": tensor.status}
    if cfg.verify_amplitude is not None:
        mass = sc.particle.mass
        wx, wy, wz = (math.sqrt(-2.0 / x) for x in cfg.xi)
        U0 = mass * w0[1] ** 2 * wy**2 / 4.0
        trap = TrapParams(wx, wy, wz, 0.0, tuple(w0), depth_U0=U0)
        period = TWO_PI / w0[1]
        dt = 1e-3 * period
        q = np.array([[0.0, math.sqrt(2.0) * cfg.verify_amplitude, 0.0]])
        tr = simulate_trapped(q, np.zeros((1, 3)), trap, mass, cfg.verify_periods * period, dt)
        yt = tr.q[:, 0, 1]
        f_sim = spectral_peak_frequency(yt, dt)
        f_pred = duffing_frequency(w0[1], [0.0, float(np.mean(yt**2)), 0.0], tensor.xi, "y")
        out.update(
            {
                "verify_rms_m": float(np.sqrt(np.mean(yt**2))),
                "verify_simulated_rad_per_s": f_sim,
                "verify_predicted_rad_per_s": float(f_pred),
                "verify_frequency_rel_dev": f_sim / f_pred - 1.0,
                "verify_shift_rel_dev": (f_sim - w0[1]) / (f_pred - w0[1]) - 1.0,
                "verify_lost": bool(tr.lost.any()),
            }
        )
        art.check("verify_not_lost", not tr.lost.any())
    art.check("fit_finite", bool(np.isfinite(tensor.xi).all()))
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-energy": cmd_sweep_energy,
    "expansion": cmd_expansion,
    "lossmap": cmd_lossmap,
    "calibrate": cmd_calibrate,
    "estimate": cmd_estimate,
    "duffing-fit": cmd_duffing,
}


# ---------------------------------------------------------------------------
# entry point


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="RNG seed (overrides the scenario seed)")
    p.add_argument("--out-dir", default=default, help="output directory (env TRAPFALL_OUT_DIR; default ./trapfall_out)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker threads")
    p.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS if suppress else "csv", help="table format")


def build_parser():
    parser = argparse.ArgumentParser(prog="trapfall", description="Trap-to-trap free-fall simulation and analysis.")
    parser.add_argument("--version", action="version", version=f"trapfall {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")
    helps = {
        "simulate": "free-fall ensembles and the parabola fit of the mean displacement",
        "sweep-energy": "mean y energy at recapture versus tau for several trap displacements",
        "expansion": "state expansion xi_q(tau): analytic curve and Monte Carlo with intervals",
        "lossmap": "loss probability and purity on a (tau, n0) grid",
        "calibrate": "synthetic calibration run: PSD fits, c_j, gamma_j, mass and radius",
        "estimate": "bandpass state estimation of a trace (file or synthetic)",
        "duffing-fit": "Duffing tensor from frequency versus amplitude data",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("scenario", nargs="?", help="scenario JSON file (default: built-in scenario)")
        _global_flags(p, suppress=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("trapfall: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        sc = load_scenario(args.scenario) if args.scenario else load_default()
    except ScenarioError as exc:
        print(f"trapfall: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    seed = sc.seed if args.seed is None else args.seed
    if seed < 0:
        parser.error("--seed must be >= 0")
    out_dir = args.out_dir or os.environ.get("TRAPFALL_OUT_DIR") or "trapfall_out"
    meta = {
        "tool": "trapfall",
        "version": __version__,
        "command": args.command,
        "scenario": sc.name,
        "scenario_sha256": sc.sha256,
        "seed": seed,
    }
    art = Artifacts(out_dir, args.format, meta)
    try:
        summary = COMMANDS[args.command](sc, art, args)
    except UsageError as exc:
        print(f"trapfall: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScenarioError as exc:
        print(f"trapfall: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (DomainError, FitError, RuntimeError, OSError) as exc:
        print(f"trapfall: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    art.document("summary", {"results": summary, "checks": art.checks, "artifacts": [Path(p).name for p in art.written]})
    for p in art.written:
        print(p)
    if not art.all_ok:
        failed = [k for k, v in art.checks.items() if not v]
        print(f"trapfall: checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
