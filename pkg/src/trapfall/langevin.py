"""Stochastic trajectories: the brute-force check for every analytic result.

Free fall uses Euler-Maruyama on dq = p/m dt, dp = (-m g_j - gamma p) dt + dW.
Trapped motion in the full Gaussian potential uses a BAOAB splitting
(velocity Verlet kicks/drifts around an exact Ornstein-Uhlenbeck step).

Randomness is drawn in fixed blocks of trajectories, each block with its
own ``SeedSequence(seed, spawn_key=(block,))`` stream, so trajectory *i*
does not depend on how blocks are scheduled across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .constants import G_DEFAULT, HBAR, K_B
from .energetics import optical_force, optical_potential
from .physics_core import (
    DomainError,
    EnvironmentParams,
    ParticleParams,
    Protocol,
    TrapParams,
)

BLOCK_SIZE = 1024
ESCAPE_WAISTS = 5.0


class IntegrationError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step


def block_rng(seed, block):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


@dataclass
class Trajectory:
    """Recorded phase-space samples of a batch of trajectories.

    ``q`` and ``p`` have shape (n_times, n_traj, 3).
    """

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    rng_seed: int | None = None
    lost: np.ndarray | None = None  # (n_traj,) bool, trapped runs only


def sample_initial(n, mass, frequencies, rng, temperatures=None, occupations=None):
    """Draw (q, p) of shape (n, 3) from uncorrelated thermal states."""
    if (temperatures is None) == (occupations is None):
        raise DomainError("give temperatures or occupations")
    omega = np.asarray(frequencies, dtype=float)
    if temperatures is not None:
        v0 = K_B * np.asarray(temperatures, dtype=float) / (HBAR * omega)
    else:
        v0 = np.asarray(occupations, dtype=float) + 0.5
    sq = np.sqrt(HBAR / (mass * omega) * v0)
    sp = np.sqrt(HBAR * mass * omega * v0)
    q = rng.standard_normal((n, 3)) * sq
    p = rng.standard_normal((n, 3)) * sp
    return q, p


def _record_indices(record_times, dt, n_steps):
    idx = np.rint(np.asarray(record_times, dtype=float) / dt).astype(int)
    if np.any(idx < 0) or np.any(idx > n_steps):
        raise DomainError("record times outside the simulated interval")
    return idx


def simulate_freefall(
    q0,
    p0,
    tau,
    mass,
    gamma,
    gas_temperature,
    dt,
    rng=None,
    record_times=None,
    g=G_DEFAULT,
    normals=None,
):
    """Euler-Maruyama free fall of a batch of particles.

    Parameters
    ----------
    q0, p0 : array_like, shape (n, 3)
        Initial positions and momenta.
    dt : float
        Step; the number of steps is round(tau / dt).
    record_times : array_like, optional
        Times to store (snapped to the step grid). Defaults to (0, tau).
    normals : callable, optional
        ``normals(step, shape)`` returning standard normals for one step;
        overrides ``rng``. Used to share a Brownian path between step sizes.
    """
    if dt <= 0 or tau < dt:
        raise DomainError("need dt > 0 and tau >= dt")
    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    n_steps = int(round(tau / dt))
    if record_times is None:
        record_times = (0.0, n_steps * dt)
    rec = _record_indices(record_times, dt, n_steps)
    if normals is None:
        if rng is None:
            raise DomainError("need rng or normals")

        def normals(step, shape):
            return rng.standard_normal(shape)

    grav = np.array([0.0, mass * g, 0.0])
    kick = math.sqrt(2.0 * mass * K_B * gas_temperature * gamma * dt)
    out_q = np.empty((rec.size,) + q.shape)
    out_p = np.empty_like(out_q)
    slots = {}
    for i, k in enumerate(rec):
        slots.setdefault(int(k), []).append(i)
    for step in range(n_steps + 1):
        for i in slots.get(step, ()):
            out_q[i] = q
            out_p[i] = p
        if step == n_steps:
            break
        xi = normals(step, q.shape)
        q_next = q + p * (dt / mass)
        p = p + (-grav - gamma * p) * dt + kick * xi
        q = q_next
        if not (np.isfinite(q).all() and np.isfinite(p).all()):
            raise IntegrationError("non-finite state", step)
    return Trajectory(times=rec * dt, q=out_q, p=out_p)


def sample_freefall_exact(q0, p0, tau, mass, gamma, gas_temperature, rng, g=G_DEFAULT):
    """Exact transition of the linear free-fall SDE (no time stepping).

    Returns (q, p) at ``tau`` for initial arrays of shape (n, 3).
    """
    from .freefall import noise_covariance, propagate_mean, transition_matrix
    from .physics_core import GaussianState1D

    phi = transition_matrix(tau, mass, gamma)
    cov = noise_covariance(tau, mass, gamma, gas_temperature)
    chol = np.linalg.cholesky(cov + 1e-300 * np.eye(2)) if cov[1, 1] > 0 else np.zeros((2, 2))
    q0 = np.asarray(q0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    q = phi[0, 0] * q0 + phi[0, 1] * p0
    p = phi[1, 1] * p0
    zero = GaussianState1D(0.0, 0.0, 0.0, 0.0, 0.0)
    gq, gp = propagate_mean(zero, tau, "y", mass, gamma, g)
    q[:, 1] += gq
    p[:, 1] += gp
    z = rng.standard_normal(q0.shape + (2,))
    noise = z @ chol.T
    return q + noise[..., 0], p + noise[..., 1]


def simulate_trapped(
    q0,
    p0,
    trap: TrapParams,
    mass,
    duration,
    dt,
    rng=None,
    gamma=0.0,
    gas_temperature=0.0,
    depth=None,
    focus_y=0.0,
    record_every=1,
):
    """Motion in the full Gaussian potential with damping and thermal noise.

    BAOAB splitting; with gamma = 0 this is velocity Verlet. Particles that
    move further than five waists (per axis) from the focus are flagged
    lost and frozen.
    """
    if dt <= 0 or duration < dt:
        raise DomainError("need dt > 0 and duration >= dt")
    U0 = trap.depth_U0 if depth is None else depth
    if U0 is None:
        raise DomainError("trap depth unknown")
    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    n = q.shape[0]
    n_steps = int(round(duration / dt))
    n_rec = n_steps // record_every + 1
    out_q = np.empty((n_rec, n, 3))
    out_p = np.empty_like(out_q)
    lost = np.zeros(n, dtype=bool)
    reach = ESCAPE_WAISTS * np.array(trap.waists)
    center = np.array([0.0, focus_y, 0.0])

    c1 = math.exp(-gamma * dt)
    c2 = math.sqrt(max(mass * K_B * gas_temperature * (1.0 - c1**2), 0.0))
    noisy = c2 > 0
    if noisy and rng is None:
        raise DomainError("need rng for a noisy trapped simulation")

    force = optical_force(q, trap, focus_y, U0)
    lost |= np.any(np.abs(q - center) > reach, axis=1)
    r = 0
    for step in range(n_steps + 1):
        if step % record_every == 0:
            out_q[r] = q
            out_p[r] = p
            r += 1
        if step == n_steps:
            break
        live = ~lost
        p_new = p + 0.5 * dt * force
        q_new = q + 0.5 * dt * p_new / mass
        p_new = c1 * p_new
        if noisy:
            p_new += c2 * rng.standard_normal(p.shape)
        q_new = q_new + 0.5 * dt * p_new / mass
        force_new = optical_force(q_new, trap, focus_y, U0)
        p_new = p_new + 0.5 * dt * force_new
        q = np.where(live[:, None], q_new, q)
        p = np.where(live[:, None], p_new, p)
        force = np.where(live[:, None], force_new, force)
        if not (np.isfinite(q).all() and np.isfinite(p).all()):
            raise IntegrationError("non-finite state", step)
        lost |= np.any(np.abs(q - center) > reach, axis=1)
    times = np.arange(n_rec) * dt * record_every
    return Trajectory(times=times, q=out_q, p=out_p, lost=lost)


def total_energy(q, p, trap: TrapParams, mass, depth=None, focus_y=0.0):
    """Kinetic plus optical potential energy for arrays of shape (..., 3)."""
    return np.sum(p**2, axis=-1) / (2.0 * mass) + optical_potential(q, trap, focus_y, depth)


def zero_crossing_frequency(x, dt):
    """Mean angular frequency from upward zero crossings (linear interpolation)."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    idx = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    if idx.size < 2:
        raise DomainError("fewer than two zero crossings")
    t = (idx + x[idx] / (x[idx] - x[idx + 1])) * dt
    return 2.0 * math.pi * (idx.size - 1) / (t[-1] - t[0])


def spectral_peak_frequency(x, dt, pad=8):
    """Angular frequency of the periodogram maximum, refined by a log-parabola fit."""
    x = np.asarray(x, dtype=float)
    x = (x - x.mean()) * np.hanning(x.size)
    n = pad * x.size
    spec = np.abs(np.fft.rfft(x, n)) ** 2
    k = int(np.argmax(spec[1:-1])) + 1
    a, b, c = np.log(spec[k - 1 : k + 2])
    shift = 0.5 * (a - c) / (a - 2 * b + c)
    return 2.0 * math.pi * (k + shift) / (n * dt)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleStats:
    """Aggregated free-fall ensemble at one recapture time.

    ``mean`` has shape (3, 2) (axis, q/p); ``cov`` shape (3, 2, 2). Every
    estimate carries a standard error of the same shape.
    """

    n_traj: int
    tau: float
    seed: int
    mean: np.ndarray
    mean_se: np.ndarray
    cov: np.ndarray
    cov_se: np.ndarray
    energy_y: float
    energy_y_se: float
    recapture_fraction: float
    recapture_se: float
    samples_q: np.ndarray | None = field(default=None, repr=False)
    samples_p: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("samples_q")
        d.pop("samples_p")
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def covariance_with_se(a, b):
    """Sample covariance of two 1-D arrays and its standard error (fourth moments)."""
    n = a.size
    da = a - a.mean()
    db = b - b.mean()
    prod = da * db
    c = prod.sum() / (n - 1)
    se = math.sqrt(max(np.mean((prod - prod.mean()) ** 2), 0.0) / n)
    return c, se


def energy_y_samples(q, p, trap: TrapParams, mass, d, depth=None):
    """Per-sample y energy p_y^2/2m + U0 (1 - u_y) about a focus ``d`` below the origin."""
    U0 = trap.depth_U0 if depth is None else depth
    uy = np.exp(-2.0 * (q[:, 1] + d) ** 2 / trap.waist_y**2)
    return p[:, 1] ** 2 / (2.0 * mass) + U0 * (1.0 - uy)


def summarize(q, p, tau, seed, mass, trap=None, depth=None, d=0.0, keep=False, lost=None):
    n = q.shape[0]
    mean = np.empty((3, 2))
    mean_se = np.empty((3, 2))
    cov = np.empty((3, 2, 2))
    cov_se = np.empty((3, 2, 2))
    for j in range(3):
        cols = (q[:, j], p[:, j])
        for a in range(2):
            mean[j, a] = cols[a].mean()
            mean_se[j, a] = cols[a].std(ddof=1) / math.sqrt(n)
            for b in range(2):
                cov[j, a, b], cov_se[j, a, b] = covariance_with_se(cols[a], cols[b])
    energy = energy_se = math.nan
    frac = frac_se = math.nan
    if trap is not None:
        e = energy_y_samples(q, p, trap, mass, d, depth)
        energy, energy_se = e.mean(), e.std(ddof=1) / math.sqrt(n)
        kept = ~lost if lost is not None else np.ones(n, dtype=bool)
        frac = kept.mean()
        # add-one smoothing keeps the error finite when no particle (or every
        # particle) is lost
        smooth = (kept.sum() + 1.0) / (n + 2.0)
        frac_se = math.sqrt(smooth * (1.0 - smooth) / n)
    return EnsembleStats(
        n_traj=n,
        tau=tau,
        seed=seed,
        mean=mean,
        mean_se=mean_se,
        cov=cov,
        cov_se=cov_se,
        energy_y=energy,
        energy_y_se=energy_se,
        recapture_fraction=frac,
        recapture_se=frac_se,
        samples_q=q if keep else None,
        samples_p=p if keep else None,
    )


def recapture_mask(q, p, trap: TrapParams, mass, d, depth=None, transverse=False):
    """True where the particle is held: kinetic energy below the local barrier.

    With ``transverse`` the x and z kinetic energies count as well; otherwise
    only p_y enters, p_y^2 <= 2 m U0 u(q).
    """
    U0 = trap.depth_U0 if depth is None else depth
    barrier = U0 - optical_potential(q, trap, -d, U0)
    kin2m = p[:, 1] ** 2
    if transverse:
        kin2m = np.sum(p**2, axis=1)
    return kin2m <= 2.0 * mass * barrier


def default_freefall_dt(tau, steps=2000):
    return tau / steps


def run_ensemble(
    protocol: Protocol,
    n,
    particle: ParticleParams,
    trap: TrapParams,
    env: EnvironmentParams,
    seed,
    dt=None,
    depth=None,
    record_times=None,
    exact=False,
    transverse=True,
    keep_samples=False,
    threads=1,
    displacements=None,
):
    """Free-fall ensemble with recapture test; one EnsembleStats per record time.

    The recapture trap sits ``protocol.displacement_d`` below the release
    point unless ``displacements`` gives one value per record time.

    Trajectories are generated in blocks of ``BLOCK_SIZE`` with independent
    streams, so results are bit-identical for any ``threads``. With
    ``exact`` the linear SDE is sampled from its exact transition instead of
    time-stepped (only the final time is available then).
    """
    if n < 2:
        raise DomainError("need n >= 2")
    mass = particle.mass
    gamma = env.gamma(particle)
    U0 = trap.depth(particle) if depth is None else depth
    tau = protocol.tau
    d = protocol.displacement_d
    if record_times is None:
        record_times = (tau,)
    record_times = tuple(float(t) for t in record_times)
    if tau == 0 or exact:
        if len(record_times) != 1 or record_times[0] != tau:
            raise DomainError("only the final time can be recorded here")
    if displacements is None:
        displacements = (d,) * len(record_times)
    if len(displacements) != len(record_times):
        raise DomainError("need one displacement per record time")
    if dt is None and tau > 0:
        dt = default_freefall_dt(tau)

    n_blocks = -(-n // BLOCK_SIZE)

    def run_block(b):
        rng = block_rng(seed, b)
        size = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        q0, p0 = sample_initial(
            size,
            mass,
            trap.frequencies,
            rng,
            temperatures=protocol.init_temperatures,
            occupations=protocol.init_occupations,
        )
        if tau == 0:
            return q0[None], p0[None]
        if exact:
            q, p = sample_freefall_exact(q0, p0, tau, mass, gamma, env.gas_temperature, rng, env.g)
            return q[None], p[None]
        tr = simulate_freefall(
            q0, p0, tau, mass, gamma, env.gas_temperature, dt, rng, record_times, env.g
        )
        return tr.q, tr.p

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))
    else:
        parts = [run_block(b) for b in range(n_blocks)]
    q_all = np.concatenate([pq for pq, _ in parts], axis=1)
    p_all = np.concatenate([pp for _, pp in parts], axis=1)

    stats = []
    for i, t in enumerate(record_times):
        q, p = q_all[i], p_all[i]
        di = float(displacements[i])
        kept = recapture_mask(q, p, trap, mass, di, U0, transverse)
        stats.append(summarize(q, p, t, seed, mass, trap, U0, di, keep_samples, lost=~kept))
    return stats


def fit_parabola(times, values, sigma=None):
    """Least-squares fit of a + b t + (acc/2) t^2.

    Returns (acc, acc_se, coefficients). With ``sigma`` None the standard
    error is scaled by the residual variance.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.size < 3:
        raise DomainError("need at least 3 points for a parabola")
    # work in t / t_max so the normal matrix is well conditioned
    scale = float(np.max(np.abs(t))) or 1.0
    u = t / scale
    A = np.vstack([np.ones_like(u), u, 0.5 * u**2]).T
    w = np.ones_like(t) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    Aw = A * w[:, None]
    coef, *_ = np.linalg.lstsq(Aw, y * w, rcond=None)
    cov = np.linalg.inv(Aw.T @ Aw)
    if sigma is None:
        dof = max(t.size - 3, 1)
        resid = y - A @ coef
        cov = cov * (resid @ resid) / dof
    back = np.array([1.0, 1.0 / scale, 1.0 / scale**2])
    coef = coef * back
    return coef[2], math.sqrt(max(cov[2, 2], 0.0)) * back[2], coef


def jackknife(values_fn, arrays, groups=50):
    """Grouped jackknife estimate and standard error of a statistic.

    ``values_fn`` maps a tuple of sample arrays (first axis = samples) to a
    float.
    """
    n = arrays[0].shape[0]
    edges = np.linspace(0, n, groups + 1).astype(int)
    full = values_fn(arrays)
    loo = []
    for g in range(groups):
        mask = np.ones(n, dtype=bool)
        mask[edges[g] : edges[g + 1]] = False
        loo.append(values_fn(tuple(a[mask] for a in arrays)))
    loo = np.array(loo)
    se = math.sqrt((groups - 1) / groups * np.sum((loo - loo.mean()) ** 2))
    return full, se


def mc_purity(q, p, mass, omega):
    """Purity and jackknife SE from samples: (4 |Sigma_r|)^(-1/2), reduced units q/q_zpf, p/p_zpf."""
    q_zpf = math.sqrt(HBAR / (mass * omega))
    p_zpf = math.sqrt(HBAR * mass * omega)

    def stat(arrs):
        c = np.cov(arrs[0] / q_zpf, arrs[1] / p_zpf)
        return 1.0 / math.sqrt(4.0 * np.linalg.det(c))

    return jackknife(stat, (np.asarray(q), np.asarray(p)))
