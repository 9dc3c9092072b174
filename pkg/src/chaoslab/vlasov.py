"""Reference kinetic solvers on a 1D x 1D phase-space grid.

The nonlinear equation

    dF/dt + v dF/dx = (grad V * F) dF/dv

and its linearization about a background F are integrated by Strang splitting:
the x-transport half-steps are exact per Fourier mode (phase factors), and the
v-advection is a conservative semi-Lagrangian step: the cumulative primitive
of each velocity column is interpolated by a clamped cubic spline and shifted,
so the column mass is preserved to machine precision.  The self-consistent
force is constant during a v-substep (a velocity shift cannot change the
spatial density), making that substep exact for the frozen-force flow.

State layout: complex modes k = -K..K against point values at the n_v cell
centers of [-v_max, v_max]; velocity integrals use the midpoint rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .model import InitialDensity, Observable, TorusPotential

TAU = 2.0 * math.pi


class DomainOverflowError(RuntimeError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseGrid:
    """Fourier cutoff K in x, uniform v grid (cell centers), time step."""

    modes: int                 # K: retained x-modes are -K..K
    n_v: int
    v_max: float
    dt: float = 1e-3

    def __post_init__(self):
        if self.n_v % 2 != 0:
            raise GridError("n_v must be even")
        if self.modes < 1 or self.v_max <= 0 or self.dt <= 0:
            raise GridError("bad grid parameters")
        if TAU * self.modes * self.v_max * self.dt >= 1.0:
            raise GridError("CFL-like guard: v_max * K * dt too large")

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / self.n_v

    @property
    def v_centers(self) -> np.ndarray:
        return -self.v_max + (np.arange(self.n_v) + 0.5) * self.dv

    @property
    def k_values(self) -> np.ndarray:
        """Integer mode indices -K..K (conjugate wavevectors are tau * k)."""
        return np.arange(-self.modes, self.modes + 1)

    @property
    def n_x(self) -> int:
        """Collocation points for the force evaluation (dealiasing margin)."""
        return 4 * self.modes

    def validate_support(self, density: InitialDensity, potential: TorusPotential,
                         t_end: float):
        need = density.velocity.support_radius + t_end * potential.grad_max()
        if self.v_max < need:
            raise GridError(f"v_max = {self.v_max} below support growth bound {need:.3f}")


@dataclass
class GridDensity:
    """Phase-space grid function: modes[k + K, i] with k = -K..K."""

    grid: PhaseGrid
    modes: np.ndarray          # complex (2K+1, n_v)
    time: float = 0.0

    def __post_init__(self):
        kk = self.grid.modes
        if self.modes.shape != (2 * kk + 1, self.grid.n_v):
            raise GridError("mode array shape mismatch")

    def copy(self) -> "GridDensity":
        return GridDensity(self.grid, self.modes.copy(), self.time)

    def check_reality(self, tol: float = 1e-10) -> float:
        kk = self.grid.modes
        err = 0.0
        for k in range(1, kk + 1):
            err = max(err, float(np.max(np.abs(
                self.modes[kk + k] - np.conj(self.modes[kk - k])))))
        err = max(err, float(np.max(np.abs(self.modes[kk].imag))))
        return err

    def mass(self) -> float:
        kk = self.grid.modes
        return float(np.sum(self.modes[kk].real) * self.grid.dv)

    def l2_norm(self) -> float:
        return float(math.sqrt(np.sum(np.abs(self.modes) ** 2) * self.grid.dv))

    def spatial_density_modes(self) -> np.ndarray:
        return self.modes.sum(axis=1) * self.grid.dv

    def velocity_density(self) -> np.ndarray:
        """int F dx = mode 0, real part."""
        return self.modes[self.grid.modes].real.copy()

    def real_space(self, n_x: int | None = None) -> np.ndarray:
        """F(x_c, v) on collocation points x_c = c / M."""
        m = n_x or self.grid.n_x
        kk = self.grid.modes
        spec = np.zeros((m, self.grid.n_v), dtype=complex)
        for idx, k in enumerate(self.grid.k_values):
            spec[k % m] += self.modes[idx]
        return np.fft.ifft(spec, axis=0).real * m

    def min_value(self) -> float:
        return float(self.real_space().min())

    def pair_observable(self, phi: Observable) -> float:
        """int phi F dx dv, computed mode by mode."""
        kk = self.grid.modes
        vc = self.grid.v_centers[:, None]
        acc = 0.0 + 0.0j
        for n, parts in phi.x_modes().items():
            k = n[0]
            if abs(k) > kk:
                continue
            col = self.modes[kk - k]     # int e^{i tau n x} F dx = F̂(-n)
            for c, h in parts:
                acc += c * np.sum(h(vc) * col) * self.grid.dv
        return float(acc.real)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("k,v,re,im\n")
            for idx, k in enumerate(self.grid.k_values):
                for i, v in enumerate(self.grid.v_centers):
                    z = self.modes[idx, i]
                    fh.write(f"{k},{v!r},{z.real!r},{z.imag!r}\n")


def grid_density_from_initial(density: InitialDensity, grid: PhaseGrid) -> GridDensity:
    if density.dim != 1:
        raise GridError("grid solvers are 1D x 1D")
    kk = grid.modes
    vc = grid.v_centers
    fv = density.velocity.density(vc[:, None])
    modes = np.zeros((2 * kk + 1, grid.n_v), dtype=complex)
    for idx, k in enumerate(grid.k_values):
        modes[idx] = density.spatial.mode_coefficient((k,)) * fv
    return GridDensity(grid, modes, 0.0)


# ---------------------------------------------------------------------------
# conservative spline shift machinery
# ---------------------------------------------------------------------------

class SplineShifter:
    """Clamped cubic splines of the cumulative primitives of many columns at
    once.  Columns enter as point values F[:, c] at cell centers; shifted
    values are returned as differenced primitives, preserving each column's
    midpoint-rule mass exactly (the primitive is clamped to its boundary
    values outside the domain)."""

    def __init__(self, f_cols: np.ndarray, dv: float, v0_edge: float):
        # f_cols: (n_v, M) real or complex; edges e_i = v0_edge + i dv
        self.dv = dv
        self.v0 = v0_edge
        n = f_cols.shape[0]
        self.n_edges = n + 1
        g = np.concatenate([np.zeros((1,) + f_cols.shape[1:], dtype=f_cols.dtype),
                            np.cumsum(f_cols, axis=0) * dv], axis=0)
        self.g = g
        # clamped spline (G' = F = 0 at both ends): tridiagonal system for
        # the second derivatives m_i
        rhs = np.empty_like(g)
        rhs[1:-1] = 6.0 * (g[2:] - 2.0 * g[1:-1] + g[:-2]) / dv ** 2
        rhs[0] = 6.0 * ((g[1] - g[0]) / dv - 0.0) / dv
        rhs[-1] = 6.0 * (0.0 - (g[-1] - g[-2]) / dv) / dv
        ab = np.zeros((3, self.n_edges))
        ab[0, 1:] = 1.0
        ab[1, :] = 4.0
        ab[1, 0] = ab[1, -1] = 2.0
        ab[2, :-1] = 1.0
        self.m = solve_banded((1, 1), ab, rhs)

    def _locate(self, y):
        # clip into the domain; shifted queries outside see the clamped
        # constant extension of the primitive
        t = np.clip((y - self.v0) / self.dv, 0.0, self.n_edges - 1 - 1e-12)
        i = np.floor(t).astype(np.int64)
        return i, t - i

    def eval(self, y: np.ndarray) -> np.ndarray:
        """Primitive G at per-column points y (same trailing shape as g[0])."""
        i, th = self._locate(y)
        cols = np.indices(i.shape)[1] if i.ndim > 1 else None
        g, m, h = self.g, self.m, self.dv
        if cols is None:
            gi, gi1, mi, mi1 = g[i], g[i + 1], m[i], m[i + 1]
        else:
            gi, gi1, mi, mi1 = (g[i, cols], g[i + 1, cols], m[i, cols], m[i + 1, cols])
        a = 1.0 - th
        return (gi * a + gi1 * th
                - (h * h / 6.0) * th * a * ((1.0 + a) * mi + (1.0 + th) * mi1))

    def deriv(self, y: np.ndarray) -> np.ndarray:
        """G' (the interpolated integrand) at per-column points y."""
        i, th = self._locate(y)
        cols = np.indices(i.shape)[1] if i.ndim > 1 else None
        g, m, h = self.g, self.m, self.dv
        if cols is None:
            gi, gi1, mi, mi1 = g[i], g[i + 1], m[i], m[i + 1]
        else:
            gi, gi1, mi, mi1 = (g[i, cols], g[i + 1, cols], m[i, cols], m[i + 1, cols])
        a = 1.0 - th
        return ((gi1 - gi) / h
                + (h / 6.0) * ((3.0 * th * th - 1.0) * mi1 - (3.0 * a * a - 1.0) * mi))


def shift_columns(f_cols: np.ndarray, shifts: np.ndarray, dv: float,
                  v0_edge: float) -> np.ndarray:
    """Conservative semi-Lagrangian shift: column c becomes F(v - shifts[c])."""
    n = f_cols.shape[0]
    sp = SplineShifter(f_cols, dv, v0_edge)
    edges = v0_edge + dv * np.arange(n + 1)
    q = edges[:, None] - shifts[None, :]
    ge = sp.eval(q)
    return (ge[1:] - ge[:-1]) / dv


# ---------------------------------------------------------------------------
# the nonlinear solver
# ---------------------------------------------------------------------------

def _transport_phases(grid: PhaseGrid, dt: float) -> np.ndarray:
    kv = TAU * grid.k_values[:, None] * grid.v_centers[None, :]
    return np.exp(-1j * kv * dt)


def _force_collocation(state_modes: np.ndarray, grid: PhaseGrid,
                       potential: TorusPotential) -> np.ndarray:
    """a(x_c) = -(grad V * rho)(x_c) at the n_x collocation points."""
    kk = grid.modes
    rho = state_modes.sum(axis=1) * grid.dv
    m = grid.n_x
    spec = np.zeros(m, dtype=complex)
    for idx, k in enumerate(grid.k_values):
        if k == 0:
            continue
        vh = potential.vhat((k,))
        if vh:
            spec[k % m] = -1j * TAU * k * vh * rho[idx]
    return np.fft.ifft(spec).real * m


def _x_modes_from_collocation(cols: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    m = grid.n_x
    spec = np.fft.fft(cols, axis=0) / m
    kk = grid.modes
    out = np.empty((2 * kk + 1, cols.shape[1]), dtype=complex)
    for idx, k in enumerate(grid.k_values):
        out[idx] = spec[k % m]
    return out


def _check_overflow(modes: np.ndarray, tol: float = 1e-10):
    edge = max(float(np.max(np.abs(modes[:, :2]))), float(np.max(np.abs(modes[:, -2:]))))
    peak = float(np.max(np.abs(modes)))
    if peak > 0 and edge > tol * max(peak, 1.0):
        raise DomainOverflowError(f"support reached the velocity boundary "
                                  f"(edge amplitude {edge:.2e})")


@dataclass
class VlasovResult:
    snapshots: dict           # time -> GridDensity
    mass_error: float
    l2_drift: float
    min_value: float


def solve_vlasov(density: InitialDensity, potential: TorusPotential,
                 grid: PhaseGrid, t_end: float, sample_times=()) -> VlasovResult:
    """Strang-split nonlinear solve from the factorized initial density."""
    grid.validate_support(density, potential, t_end)
    state = grid_density_from_initial(density, grid)
    return _evolve(state, potential, grid, t_end, sample_times, linear_about=None)[0]


def _evolve(state: GridDensity, potential: TorusPotential, grid: PhaseGrid,
            t_end: float, sample_times, linear_about: GridDensity | None,
            lin_state: GridDensity | None = None):
    """Shared Strang loop.  When linear_about is given, `state` is the
    background (advanced nonlinearly) and lin_state follows the linearized
    flow about it."""
    nsteps = int(round(t_end / grid.dt))
    if abs(nsteps * grid.dt - t_end) > 1e-9:
        raise GridError("t_end must align to dt")
    sample_steps = {int(round(t / grid.dt)): t for t in sample_times}
    for s, t in sample_steps.items():
        if abs(s * grid.dt - t) > 1e-9:
            raise GridError(f"sample time {t} not aligned to dt")
    half = _transport_phases(grid, 0.5 * grid.dt)
    mass0 = state.mass()
    l2_0 = state.l2_norm()
    mass_err = 0.0
    l2_drift = 0.0
    min_val = 0.0
    snapshots = {}
    lin_snapshots = {}
    edges0 = -grid.v_max
    track = lin_state if linear_about is not None else state

    if 0 in sample_steps:
        snapshots[0.0] = state.copy()
        if lin_state is not None:
            lin_snapshots[0.0] = lin_state.copy()

    for it in range(1, nsteps + 1):
        state.modes *= half
        if lin_state is not None:
            lin_state.modes *= half
        # v-advection at frozen x: force from the current spatial density
        acc = _force_collocation(state.modes, grid, potential)
        shifts = acc * grid.dt
        f_cols = state.real_space().T        # (n_v, M)
        if lin_state is not None:
            sp_bg = SplineShifter(f_cols, grid.dv, edges0)
            b = _force_collocation(lin_state.modes, grid, potential)
            u_cols = lin_state.real_space().T
            u_new = shift_columns(u_cols, shifts, grid.dv, edges0)
            edges = edges0 + grid.dv * np.arange(grid.n_v + 1)
            qmid = edges[:, None] - 0.5 * shifts[None, :]
            fmid = sp_bg.deriv(qmid)
            u_new += (grid.dt * b)[None, :] * (fmid[1:] - fmid[:-1]) / grid.dv
            lin_state.modes = _x_modes_from_collocation(u_new.T, grid)
        f_new = shift_columns(f_cols, shifts, grid.dv, edges0)
        state.modes = _x_modes_from_collocation(f_new.T, grid)
        state.modes *= half
        if lin_state is not None:
            lin_state.modes *= half
        state.time = it * grid.dt
        if lin_state is not None:
            lin_state.time = state.time
        if it % 50 == 0 or it == nsteps:
            _check_overflow(track.modes)
            mass_err = max(mass_err, abs(state.mass() - mass0))
            l2_drift = max(l2_drift, abs(state.l2_norm() - l2_0) / l2_0)
        if it in sample_steps:
            snapshots[sample_steps[it]] = state.copy()
            if lin_state is not None:
                lin_snapshots[sample_steps[it]] = lin_state.copy()
    min_val = state.min_value()
    res = VlasovResult(snapshots=snapshots, mass_error=mass_err,
                       l2_drift=l2_drift, min_value=min_val)
    return res, lin_snapshots


def solve_linearized(j0: GridDensity, background: InitialDensity,
                     potential: TorusPotential, grid: PhaseGrid, t_end: float,
                     sample_times=()) -> dict:
    """Linearized flow about the (co-evolved) background started from j0;
    returns {time: GridDensity}.  Linear by construction: every operation
    applied to the perturbation is a linear map."""
    grid.validate_support(background, potential, t_end)
    state = grid_density_from_initial(background, grid)
    lin = j0.copy()
    _, lin_snaps = _evolve(state, potential, grid, t_end, sample_times,
                           linear_about=state, lin_state=lin)
    return lin_snaps


# ---------------------------------------------------------------------------
# mean-field bias experiment
# ---------------------------------------------------------------------------

@dataclass
class BiasExperimentResult:
    target: float                       # int phi F^t from the grid solve
    bias_points: list                   # (N, bias, stderr)
    sd_points: list                     # (N, std dev of Y_t, stderr)
    bias_fit: object
    sd_fit: object
    solver: VlasovResult


def mean_field_bias_experiment(density: InitialDensity, potential: TorusPotential,
                               phi: Observable, t: float, n_list,
                               replicas, master_seed: int, grid: PhaseGrid,
                               particle_dt: float = 1e-2,
                               use_numba: bool = True,
                               budget: float = 8e12) -> BiasExperimentResult:
    """b_N = E[int phi dmu_N^t] - int phi F^t against the grid reference, with
    the free-flow control variate on the Monte Carlo side; returns weighted
    slopes of the bias (expected -1) and of the fluctuation size (-1/2)."""
    from .dynamics import SimConfig
    from .ensemble import ReplicaPlan, estimate_mean, run_replicas, scaling_slope

    vl = solve_vlasov(density, potential, grid, t, sample_times=(t,))
    target = vl.snapshots[t].pair_observable(phi)
    if isinstance(replicas, int):
        replicas = {n: replicas for n in n_list}
    bias_points = []
    sd_points = []
    for n in n_list:
        plan = ReplicaPlan(n_particles=(n,), replicas=replicas[n],
                           master_seed=master_seed,
                           sim=SimConfig(potential=potential, dt=particle_dt, t_end=t,
                                         use_numba=use_numba),
                           density=density, observables=(phi,),
                           sample_times=(t,), track_free_flow=True,
                           budget=budget)
        sm = run_replicas(plan)[n]
        est = estimate_mean(sm, phi.label, t, control="free", density=density, phi=phi)
        bias_points.append((n, est.value - target, est.stderr))
        y = sm.column(phi.label, t)
        sd = float(np.std(y, ddof=1))
        sd_points.append((n, sd, sd / math.sqrt(2.0 * (y.size - 1))))
    return BiasExperimentResult(target=target,
                                bias_points=bias_points, sd_points=sd_points,
                                bias_fit=scaling_slope(bias_points),
                                sd_fit=scaling_slope(sd_points),
                                solver=vl)
