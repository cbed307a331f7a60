"""Optical-trap energetics at recapture: depth, mean energy, loss probability.

Coordinates are those of the release frame: the particle starts at the
origin and falls towards negative y. A recapture tweezer displaced
*downwards* by ``d`` has its focus at y = -d, so the misalignment at
recapture is Delta_y = d - g tau^2 / 2.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special

from .constants import C_LIGHT, G_DEFAULT, HBAR, K_B
from .freefall import propagate, purity
from .physics_core import (
    DomainError,
    EnvironmentParams,
    GaussianState1D,
    ParticleParams,
    TrapParams,
    thermal_state,
)


class RecaptureIntegrationError(RuntimeError):
    """Quadrature did not reach the requested tolerance.

    ``estimate`` and ``error`` hold the best value obtained.
    """

    def __init__(self, message, estimate, error):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


def trap_depth(particle: ParticleParams, trap: TrapParams):
    """Depth U0 [J] of a Gaussian tweezer for a sub-wavelength dielectric sphere."""
    return (
        4.0
        * particle.radius**3
        * trap.power
        / (C_LIGHT * trap.waist_x * trap.waist_y)
        * particle.polarizability_factor
    )


def _intensity_profile(qx, qy, qz, trap: TrapParams, focus_y):
    arg = 2.0 * qx**2 / trap.waist_x**2 + 2.0 * (qy - focus_y) ** 2 / trap.waist_y**2
    return np.exp(-arg) / (1.0 + (qz / trap.rayleigh_z) ** 2)


def optical_potential(q, trap: TrapParams, displacement_d=0.0, depth=None):
    """Potential energy U(q) = U0 [1 - u(q)], zero at the focus, U0 far away.

    ``q`` has shape (..., 3). The focus sits at (0, displacement_d, 0).
    """
    U0 = trap.depth_U0 if depth is None else depth
    if U0 is None:
        raise DomainError("trap depth unknown")
    q = np.asarray(q, dtype=float)
    u = _intensity_profile(q[..., 0], q[..., 1], q[..., 2], trap, displacement_d)
    return U0 * (1.0 - u)


def optical_force(q, trap: TrapParams, displacement_d=0.0, depth=None):
    """-grad U for positions of shape (..., 3)."""
    U0 = trap.depth_U0 if depth is None else depth
    q = np.asarray(q, dtype=float)
    qx, qy, qz = q[..., 0], q[..., 1] - displacement_d, q[..., 2]
    lor = 1.0 / (1.0 + (qz / trap.rayleigh_z) ** 2)
    u = np.exp(-2.0 * qx**2 / trap.waist_x**2 - 2.0 * qy**2 / trap.waist_y**2) * lor
    f = np.empty_like(q)
    f[..., 0] = -U0 * u * 4.0 * qx / trap.waist_x**2
    f[..., 1] = -U0 * u * 4.0 * qy / trap.waist_y**2
    f[..., 2] = -U0 * u * 2.0 * qz / trap.rayleigh_z**2 * lor
    return f


@dataclass(frozen=True)
class OverlapIntegrals:
    I_x: float
    I_y: float
    I_z: float

    @property
    def product(self):
        return self.I_x * self.I_y * self.I_z


def _overlap_z(var_z, w_z):
    if var_z == 0:
        return 1.0
    s = w_z**2 / (2.0 * var_z)
    if s > 1e12:
        # asymptotic series; the product below would be inf * 0
        return 1.0 - 0.5 / s
    # sqrt(pi s) erfc(sqrt s) e^s, written with the scaled erfc for large s
    return math.sqrt(math.pi * s) * special.erfcx(math.sqrt(s))


def overlap_integrals(variances, trap: TrapParams, delta_y=0.0):
    """Gaussian averages of the separable intensity factors.

    ``variances`` are the position variances (V_x, V_y, V_z); ``delta_y``
    the offset between the mean position and the focus along y.
    """
    vx, vy, vz = variances
    if min(vx, vy, vz) < 0:
        raise DomainError("variances must be >= 0")
    wx, wy, wz = trap.waists
    I_x = wx / math.sqrt(wx**2 + 4.0 * vx)
    sy = wy**2 + 4.0 * vy
    I_y = wy * math.exp(-2.0 * delta_y**2 / sy) / math.sqrt(sy)
    return OverlapIntegrals(I_x, I_y, _overlap_z(vz, wz))


def optimal_displacement(tau, g=G_DEFAULT, c_f=None):
    """Trap displacement g tau^2 / 2; with ``c_f`` also the AOM detuning d / c_f.

    Returns ``d`` alone, or ``(d, detuning)`` when ``c_f`` is given.
    """
    if tau < 0:
        raise DomainError("tau must be >= 0")
    d = 0.5 * g * tau**2
    if c_f is None:
        return d
    return d, d / c_f


@dataclass(frozen=True)
class EnergyAtRecapture:
    total: float
    kinetic: float
    potential: float
    thermal_unit: float  # k_B T0 = m Omega^2 V_q0 [J]

    @property
    def normalized(self):
        return self.total / self.thermal_unit


def mean_energy_y(
    state0: GaussianState1D,
    trap: TrapParams,
    tau,
    d,
    mass,
    gamma,
    gas_temperature,
    depth=None,
    g=G_DEFAULT,
):
    """Mean y-energy at recapture for a trap displaced downwards by ``d``.

    Kinetic energy of the mean fall plus the momentum spread, and the
    separable y part of the optical potential, U0 [1 - I_y]. The mean is
    taken as undamped (gamma tau is ~1e-6 here), so the minimum over d sits
    exactly at g tau^2 / 2. The thermal
    unit is k_B T0 = m Omega_y^2 V_q0 with Omega_y the measured y frequency.
    """
    U0 = trap.depth(None) if depth is None else depth
    st = propagate(state0, tau, "y", mass, gamma, gas_temperature, g)
    kinetic = mass * g**2 * tau**2 / 2.0 + st.var_p / (2.0 * mass)
    delta_y = d - 0.5 * g * tau**2
    sy = trap.waist_y**2 + 4.0 * st.var_q
    I_y = trap.waist_y * math.exp(-2.0 * delta_y**2 / sy) / math.sqrt(sy)
    potential = U0 * (1.0 - I_y)
    omega_y = trap.frequencies[1]
    unit = mass * omega_y**2 * state0.var_q
    return EnergyAtRecapture(kinetic + potential, kinetic, potential, unit)


def depth_crossing_time(depth_in_kT0, omega, q0, g=G_DEFAULT):
    """Free-fall time at which g^2 tau^2 / (2 Omega^2 q0^2) equals the depth (in k_B T0)."""
    return math.sqrt(2.0 * depth_in_kT0) * omega * q0 / g


def gravity_depth_ratio(depth, mass, waist_y, g=G_DEFAULT):
    """U0 / (m g w_y): optical depth versus gravitational energy across one waist."""
    return depth / (mass * g * waist_y)


def transverse_kinetic_ratio(states, mass, depth):
    """Largest x/z kinetic energy <p^2>/2m relative to the depth."""
    sx, _, sz = states
    return max((s.var_p + s.mean_p**2) / (2.0 * mass) for s in (sx, sz)) / depth


# ---------------------------------------------------------------------------
# recapture probability


@dataclass(frozen=True)
class RecaptureReport:
    recapture_probability: float
    error: float
    mean_energy: float | None = None
    kinetic: float | None = None
    potential: float | None = None

    @property
    def loss_probability(self):
        return 1.0 - self.recapture_probability


_SPAN_SIGMA = 9.0
_SPAN_WAIST = 4.5  # exp(-2 * 4.5^2) ~ 2e-18
_ROOT_GRID = 129
_MAX_ROOTS = 4
_EDGE_WIDTHS = 8.0
_GL = {}


def _leggauss01(order):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if order not in _GL:
        x, w = np.polynomial.legendre.leggauss(order)
        _GL[order] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL[order]


def _axis_interval(mean, var, center, reach):
    sd = math.sqrt(var)
    lo, hi = mean - _SPAN_SIGMA * sd, mean + _SPAN_SIGMA * sd
    if reach is not None:
        lo, hi = max(lo, center - reach), min(hi, center + reach)
    return lo, hi


def _gaussian_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


class _CaptureIntegrand:
    """Capture probability as a function of q_y, one row per transverse factor k.

    ``k`` is u_x(q_x) u_z(q_z); the momentum barrier at q_y is
    sqrt(2 m U0 k) exp(-(q_y - focus)^2 / w_y^2).
    """

    def __init__(self, sy, pk, focus_y, w_y, method):
        self.sy = sy
        self.k = pk[:, None]  # sqrt(2 m U0 k), shape (M, 1)
        self.focus_y = focus_y
        self.w_y = w_y
        self.method = method
        if method == "conditional":
            self.slope = sy.cov_qp / sy.var_q if sy.var_q > 0 else 0.0
            self.sd = math.sqrt(max(sy.var_p - self.slope * sy.cov_qp, 0.0))
        else:
            self.slope = 0.0
            self.sd = math.sqrt(sy.var_p)

    def rows(self, idx):
        sub = _CaptureIntegrand.__new__(_CaptureIntegrand)
        sub.__dict__.update(self.__dict__)
        sub.k = self.k[idx]
        return sub

    def p_u(self, qy):
        return self.k * np.exp(-((qy - self.focus_y) ** 2) / self.w_y**2)

    def mu(self, qy):
        return self.sy.mean_p + self.slope * (qy - self.sy.mean_q)

    def boundary(self, qy):
        """Zero where the capture condition switches (ignoring momentum spread)."""
        if self.method == "conditional":
            return self.p_u(qy) - np.abs(self.mu(qy))
        return self.p_u(qy) + self.mu(qy)

    def kept(self, qy):
        p_u = self.p_u(qy)
        mu = self.mu(qy)
        if self.sd == 0.0:
            if self.method == "conditional":
                return (np.abs(mu) <= p_u).astype(float)
            return (mu + p_u >= 0).astype(float)
        if self.method == "conditional":
            return special.ndtr((p_u - mu) / self.sd) - special.ndtr((-p_u - mu) / self.sd)
        # one-sided form, valid when the mean fall momentum dominates
        return special.ndtr((mu + p_u) / self.sd)


def _capture_edges(f: _CaptureIntegrand, lo, hi):
    """Locate sign changes of the capture boundary in q_y for every row."""
    grid = np.linspace(lo, hi, _ROOT_GRID)
    G = f.boundary(grid[None, :])
    M = G.shape[0]
    flips = np.signbit(G[:, 1:]) != np.signbit(G[:, :-1])
    edges = np.full((M, _MAX_ROOTS), np.nan)
    rows, cols = np.nonzero(flips)
    if rows.size == 0:
        return edges
    # keep the first _MAX_ROOTS flips of each row
    rank = np.zeros_like(rows)
    if rows.size > 1:
        starts = np.r_[0, np.nonzero(np.diff(rows))[0] + 1]
        counts = np.diff(np.r_[starts, rows.size])
        rank = np.arange(rows.size) - np.repeat(starts, counts)
    keep = rank < _MAX_ROOTS
    rows, cols, rank = rows[keep], cols[keep], rank[keep]
    a = grid[cols].copy()
    b = grid[cols + 1].copy()
    ga = G[rows, cols]
    sub = f.rows(rows)
    for _ in range(48):
        mid = 0.5 * (a + b)
        gm = sub.boundary(mid[:, None])[:, 0]
        same = np.signbit(gm) == np.signbit(ga)
        a = np.where(same, mid, a)
        ga = np.where(same, gm, ga)
        b = np.where(same, b, mid)
    edges[rows, rank] = 0.5 * (a + b)
    return edges


def _capture_given_k(sy, k, trap, focus_y, mass, U0, panels, order, method):
    """F(k): probability of capture given the transverse factor u_x u_z = k.

    The q_y integral is split where the capture condition switches, since
    for a strongly sheared state the capture probability is nearly a step
    in q_y.
    """
    wy = trap.waist_y
    lo, hi = _axis_interval(sy.mean_q, sy.var_q, focus_y, _SPAN_WAIST * wy)
    if hi <= lo:
        return np.zeros_like(k)
    f = _CaptureIntegrand(sy, np.sqrt(2.0 * mass * U0 * k), focus_y, wy, method)
    edges = _capture_edges(f, lo, hi)
    # transition half-width around each edge, from the local boundary slope
    h = 1e-6 * (hi - lo)
    e0 = np.nan_to_num(edges, nan=lo)
    slope = np.abs((f.boundary(e0 + h) - f.boundary(e0 - h)) / (2 * h))
    with np.errstate(divide="ignore", invalid="ignore"):
        width = np.where(slope > 0, _EDGE_WIDTHS * f.sd / slope, 0.0)
    width = np.minimum(width, 0.05 * (hi - lo))
    M = k.size
    base = np.broadcast_to(np.linspace(lo, hi, panels + 1), (M, panels + 1))
    pts = np.concatenate(
        [base, np.nan_to_num(edges - width, nan=hi), np.nan_to_num(edges + width, nan=hi)],
        axis=1,
    )
    pts = np.sort(np.clip(pts, lo, hi), axis=1)
    t, w = _leggauss01(order)
    a, b = pts[:, :-1, None], pts[:, 1:, None]
    qy = a + (b - a) * t
    wts = (b - a) * w * _gaussian_pdf(qy, sy.mean_q, sy.var_q)
    kept = f.kept(qy.reshape(M, -1)).reshape(qy.shape)
    return np.sum(wts * kept, axis=(1, 2))


def _panel_nodes(a, b, sing_a, sing_b, panels, order):
    """Composite rule on [a, b] per row, with a square-root endpoint map where flagged.

    Near a flagged end the integrand behaves like sqrt(distance); the map
    x = end + (inner - end) s^2 makes it smooth in s.
    """
    t, w = _leggauss01(order)
    frac = np.linspace(0.0, 1.0, panels + 1)
    lo = a[:, None] + (b - a)[:, None] * frac[:-1]
    hi = a[:, None] + (b - a)[:, None] * frac[1:]
    x = lo[..., None] + (hi - lo)[..., None] * t
    dx = np.broadcast_to(((hi - lo)[..., None] * w), x.shape).copy()
    # first panel, singular at a: x = a + (hi0 - a) s^2
    L = (hi[:, 0] - a)[:, None]
    xa = a[:, None] + L * t**2
    x[:, 0] = np.where(sing_a[:, None], xa, x[:, 0])
    dx[:, 0] = np.where(sing_a[:, None], 2.0 * L * t * w, dx[:, 0])
    L = (b - lo[:, -1])[:, None]
    xb = b[:, None] - L * t**2
    x[:, -1] = np.where(sing_b[:, None], xb, x[:, -1])
    dx[:, -1] = np.where(sing_b[:, None], 2.0 * L * t * w, dx[:, -1])
    return x.reshape(a.size, -1), dx.reshape(a.size, -1)


def _transverse_survival(sx, sz, trap, k, panels, order):
    """S(k) = P(u_x(q_x) u_z(q_z) > k) for a grid of k in (0, 1)."""
    wx, wz = trap.waist_x, trap.rayleigh_z
    # u_x > k  <=>  |q_x| < x0
    x0 = wx * np.sqrt(0.5 * np.log(1.0 / k))
    lo_g, hi_g = _axis_interval(sx.mean_q, sx.var_q, 0.0, None)
    a = np.maximum(-x0, lo_g)
    b = np.minimum(x0, hi_g)
    empty = b <= a
    b = np.where(empty, a + 1.0, b)
    x, dx = _panel_nodes(a, b, a == -x0, b == x0, panels, order)
    ux = np.exp(-2.0 * x**2 / wx**2)
    c = np.clip(k[:, None] / ux, 0.0, 1.0)
    # u_z > c  <=>  |q_z| < wz sqrt(1/c - 1)
    with np.errstate(divide="ignore"):
        zc = wz * np.sqrt(np.maximum(1.0 / c - 1.0, 0.0))
    if sz.var_q > 0:
        sd = math.sqrt(sz.var_q)
        pz = special.ndtr((zc - sz.mean_q) / sd) - special.ndtr((-zc - sz.mean_q) / sd)
    else:
        pz = (np.abs(sz.mean_q) < zc).astype(float)
    if sx.var_q > 0:
        px = _gaussian_pdf(x, sx.mean_q, sx.var_q)
    else:
        raise DomainError("x variance must be > 0")
    S = np.sum(dx * px * pz, axis=1)
    return np.where(empty, 0.0, S)


def _k_grid(n):
    """Nodes on [0, 1]: uniform, merged with geometric approaches to both ends."""
    uni = np.linspace(0.0, 1.0, n + 1)
    geo = np.logspace(-16, 0, n + 1)
    return np.unique(np.concatenate([uni, geo, 1.0 - geo, [0.0, 1.0]]))


def _capture_quadrature(states, trap, focus_y, mass, U0, n_k, panels, order, method):
    """P_R = E[F(K)] with K = u_x u_z, as a Stieltjes sum over a k grid.

    F is the y-integrated capture probability at fixed K and S the survival
    function of K; P_R = sum of mean F over each cell times the drop of S.
    """
    sx, sy, sz = states
    k = _k_grid(n_k)
    inner = k[1:-1]
    S = np.empty_like(k)
    S[0], S[-1] = 1.0, 0.0
    S[1:-1] = _transverse_survival(sx, sz, trap, inner, panels, order)
    F = _capture_given_k(sy, k, trap, focus_y, mass, U0, panels, order, method)
    return float(np.sum(0.5 * (F[1:] + F[:-1]) * (S[:-1] - S[1:])))


def recapture_probability(
    states,
    trap: TrapParams,
    d,
    mass,
    depth=None,
    n_k=512,
    panels=4,
    order=16,
    tol=1e-4,
    method="conditional",
    max_refinements=3,
    transverse_limit=1e-2,
):
    """Probability that the recapture tweezer holds the particle.

    The particle is kept when its y momentum satisfies p_y^2 <= 2 m U0 u(q),
    i.e. when its kinetic energy stays below the local barrier. Since the
    barrier depends on (q_x, q_z) only through K = u_x u_z, the integral
    factorizes into a one-dimensional table of the capture probability at
    fixed K and the distribution of K, each evaluated by Gauss-Legendre
    rules. Grids are doubled until two successive results agree within
    ``tol``.

    Parameters
    ----------
    states : sequence of three GaussianState1D
        (x, y, z) states at recapture, in the release frame.
    d : float
        Downward displacement of the recapture focus.
    method : {"conditional", "marginal"}
        ``"conditional"`` uses the distribution of p_y given q_y (exact for
        the Gaussian state). ``"marginal"`` ignores the q-p correlation and
        uses the one-sided erf form with the momentum marginal.
    transverse_limit : float
        Maximum allowed x/z kinetic energy as a fraction of U0; the x and z
        kinetic energies are neglected, which this guards.
    """
    if method not in ("conditional", "marginal"):
        raise ValueError("method must be 'conditional' or 'marginal'")
    U0 = trap.depth(None) if depth is None else depth
    if U0 < 0:
        raise DomainError("depth must be >= 0")
    if U0 > 0 and transverse_kinetic_ratio(states, mass, U0) > transverse_limit:
        raise DomainError("x/z kinetic energy not negligible against the trap depth")
    focus_y = -d
    args = (states, trap, focus_y, mass, U0)
    keep = _capture_quadrature(*args, n_k, panels, order, method)
    err = math.inf
    for _ in range(max_refinements):
        n_k, panels = 2 * n_k, 2 * panels
        finer = _capture_quadrature(*args, n_k, panels, order, method)
        err = abs(finer - keep)
        keep = finer
        if err <= tol:
            break
    keep = min(max(keep, 0.0), 1.0)
    if err > tol:
        raise RecaptureIntegrationError(
            f"recapture quadrature error {err:.2e} above tolerance {tol:.1e}", keep, err
        )
    return RecaptureReport(recapture_probability=keep, error=err)


# ---------------------------------------------------------------------------
# loss / purity map


@dataclass
class LossMap:
    tau_grid: np.ndarray
    n0_grid: np.ndarray
    loss: np.ndarray  # shape (len(tau), len(n0))
    loss_error: np.ndarray
    purity: np.ndarray
    contours: dict  # purity level -> (n0 array, tau array)
    gamma: float
    Gamma_dec: float


def _map_point(tau, n0, particle, trap, env, U0, gamma, method, tol):
    mass = particle.mass
    states = []
    for axis, omega in zip("xyz", trap.frequencies):
        s0 = thermal_state(mass, omega, occupation=n0)
        states.append(propagate(s0, tau, axis, mass, gamma, env.gas_temperature, env.g))
    d = optimal_displacement(tau, env.g)
    try:
        rep = recapture_probability(states, trap, d, mass, depth=U0, tol=tol, method=method)
        return rep.loss_probability, rep.error
    except RecaptureIntegrationError as exc:
        return 1.0 - exc.estimate, exc.error


def purity_contour_time(level, n0, Gamma_dec, omega, t_max=1.0):
    """Free-fall time at which the first-order purity drops to ``level``."""
    V0 = n0 + 0.5
    if purity(V0, Gamma_dec, omega, 0.0) <= level:
        return 0.0
    hi = 1e-9
    while purity(V0, Gamma_dec, omega, hi) > level:
        hi *= 2.0
        if hi > t_max:
            return math.nan
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if purity(V0, Gamma_dec, omega, mid) > level:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


def loss_map(
    tau_grid,
    n0_grid,
    particle: ParticleParams,
    trap: TrapParams,
    env: EnvironmentParams,
    depth=None,
    purity_levels=(0.5, 0.25, 0.1),
    threads=1,
    method="conditional",
    tol=1e-4,
):
    """Loss probability at optimal displacement and purity on a (tau, n0) grid.

    Every grid point uses the same n0 on all three axes. Purity is the
    first-order gas-limited value on the y mode. Results do not depend on
    ``threads``.
    """
    tau_grid = np.asarray(tau_grid, dtype=float)
    n0_grid = np.asarray(n0_grid, dtype=float)
    for name, grid in (("tau_grid", tau_grid), ("n0_grid", n0_grid)):
        if grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise DomainError(f"{name} must be non-empty and strictly ascending")
    U0 = trap.depth(particle) if depth is None else depth
    gamma = env.gamma(particle)
    omega_y = trap.frequencies[1]
    Gamma_dec = gamma * K_B * env.gas_temperature / (HBAR * omega_y)

    jobs = [(t, n) for t in tau_grid for n in n0_grid]

    def run(job):
        return _map_point(job[0], job[1], particle, trap, env, U0, gamma, method, tol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    shape = (tau_grid.size, n0_grid.size)
    loss = np.array([r[0] for r in results]).reshape(shape)
    loss_err = np.array([r[1] for r in results]).reshape(shape)
    pur = np.array([[purity(n + 0.5, Gamma_dec, omega_y, t) for n in n0_grid] for t in tau_grid])
    contours = {}
    for level in purity_levels:
        taus = np.array([purity_contour_time(level, n, Gamma_dec, omega_y) for n in n0_grid])
        contours[level] = (n0_grid.copy(), taus)
    return LossMap(tau_grid, n0_grid, loss, loss_err, pur, contours, gamma, Gamma_dec)
