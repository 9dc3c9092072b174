"""Two-particle correction dynamics in the spatially homogeneous setting.

With a homogeneous background f(v), the correction H(z1, z2) stays a function
of x1 - x2 and splits over Fourier modes: H = sum_k e^{i k.(x1-x2)} Ĥ_k with
the modes (k, -k) closed under the flow.  Per retained mode,

    dĤ_k/dt = -i k.(v1 - v2) Ĥ_k
              + i V̂(k) (k.grad f)(v1) <Ĥ_k(., v2)>
              - i V̂(k) (k.grad f)(v2) <Ĥ_k(v1, .)>
              + Ŝ_k,
    Ŝ_k(v1, v2) = i V̂(k) [ (k.grad f)(v1) f(v2) - f(v1) (k.grad f)(v2) ],

integrated by RK4 from zero initial data, with velocity averages <.> by
trapezoid quadrature at every stage.  Reality and particle exchange combine
into hermiticity of each stored mode: Ĥ_k(v1, v2) = conj Ĥ_k(v2, v1), and
Ĥ_{-k} = conj Ĥ_k is never stored.  Modes with V̂(k) = 0 have identically
zero source and stay zero; they are dropped structurally.

The induced next-order drive on the velocity density is

    drive(v) = div_v sum_k i k V̂(k) <Ĥ_k(v, .)>
             = div_v sum_{k > 0} -2 k V̂(k) Im <Ĥ_k(v, .)>,

real by construction, integrating to zero exactly (divergence form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import H2ModeStepper
from .model import InitialDensity, Observable, TorusPotential

TAU = 2.0 * math.pi


class H2Error(ValueError):
    pass


class VarianceInconsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor velocity grid with trapezoid weights, d = 1 or 2."""

    n_v: int
    v_max: float
    dim: int = 1
    dt: float = 2e-3

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.v_max, self.v_max, self.n_v)

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / (self.n_v - 1)

    @property
    def n_points(self) -> int:
        return self.n_v ** self.dim

    def nodes(self) -> np.ndarray:
        """(P, dim) array of grid points."""
        ax = self.axis
        if self.dim == 1:
            return ax[:, None]
        g = np.meshgrid(*([ax] * self.dim), indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, self.dim)

    def weights(self) -> np.ndarray:
        w1 = np.full(self.n_v, self.dv)
        w1[0] = w1[-1] = 0.5 * self.dv
        if self.dim == 1:
            return w1
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w.reshape(-1)

    def field_shape(self) -> tuple:
        return (self.n_v,) * self.dim


def retained_modes(potential: TorusPotential, k_cut: int) -> list[tuple[int, ...]]:
    """One-sided interaction modes with |n| <= k_cut; modes with vanishing
    coefficient are dropped (their correction is identically zero)."""
    modes, vhat = potential.one_sided()
    out = []
    for nvec, c in zip(modes, vhat):
        if c != 0.0 and float(np.linalg.norm(nvec)) <= k_cut + 1e-12:
            out.append(tuple(int(i) for i in nvec))
    return out


def source_mode(density: InitialDensity, potential: TorusPotential,
                mode: tuple[int, ...], grid: VelocityGrid) -> np.ndarray:
    """Per-mode source Ŝ_k on the (v1, v2) grid, shape (P, P)."""
    if not any(mode):
        raise H2Error("mode k = 0 carries no correction")
    if not density.homogeneous:
        raise H2Error("homogeneous background required")
    c, f = _mode_vectors(density, potential, mode, grid)
    return np.outer(c, f) - np.outer(f, c)


def _mode_vectors(density, potential, mode, grid):
    nodes = grid.nodes()
    k = TAU * np.asarray(mode, dtype=float)
    f = density.velocity.density(nodes)
    kgrad = density.velocity.grad_density(nodes) @ k
    c = 1j * potential.vhat(mode) * kgrad
    return c, f


@dataclass
class ModeCorrelation:
    """One-sided mode table of the two-particle correction at a given time."""

    grid: VelocityGrid
    modes: list
    arrays: dict                  # mode tuple -> (P, P) complex
    time: float

    def hermiticity_defect(self) -> float:
        """Reality + exchange symmetry combined: Ĥ_k must be Hermitian."""
        worst = 0.0
        for h in self.arrays.values():
            worst = max(worst, float(np.max(np.abs(h - h.conj().T))))
        return worst

    def array_for(self, mode: tuple) -> np.ndarray:
        """Ĥ_k for any signed mode, using Ĥ_{-k} = conj Ĥ_k."""
        if mode in self.arrays:
            return self.arrays[mode]
        neg = tuple(-i for i in mode)
        if neg in self.arrays:
            return np.conj(self.arrays[neg])
        return np.zeros((self.grid.n_points, self.grid.n_points), dtype=complex)

    def partial_average(self, mode: tuple) -> np.ndarray:
        """B_k(v) = <Ĥ_k(v, .)> over the second velocity."""
        return self.array_for(mode) @ self.grid.weights()

    def to_csv(self, mode: tuple, path):
        h = self.array_for(mode)
        nodes = self.grid.nodes()
        with open(path, "w") as fh:
            fh.write("v1,v2,re,im\n")
            for a in range(nodes.shape[0]):
                for b in range(nodes.shape[0]):
                    fh.write(f"{'|'.join(map(repr, nodes[a]))},"
                             f"{'|'.join(map(repr, nodes[b]))},"
                             f"{h[a, b].real!r},{h[a, b].imag!r}\n")


def _divergence(field: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """4th-order central-difference divergence of a (P, dim) vector field;
    exact telescoping makes the grid integral vanish identically for fields
    supported away from the boundary."""
    shape = grid.field_shape()
    out = np.zeros(shape)
    h = grid.dv
    for ax in range(grid.dim):
        g = field[:, ax].reshape(shape)
        d = np.zeros_like(g)
        sl = [slice(None)] * grid.dim

        def at(offset):
            s = list(sl)
            s[ax] = slice(2 + offset, g.shape[ax] - 2 + offset or None)
            return g[tuple(s)]

        core = [slice(None)] * grid.dim
        core[ax] = slice(2, -2)
        d[tuple(core)] = (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * h)
        out += d
    return out.reshape(-1)


def bogolyubov_drive(corr: ModeCorrelation, potential: TorusPotential) -> np.ndarray:
    """div_v sum_k i k V̂(k) <Ĥ_k(v, .)>, returned on the flat grid (real)."""
    grid = corr.grid
    flux = np.zeros((grid.n_points, grid.dim))
    for mode in corr.modes:
        k = TAU * np.asarray(mode, dtype=float)
        b = corr.partial_average(mode)
        flux += np.outer(-2.0 * potential.vhat(mode) * b.imag, k)
    return _divergence(flux, grid)


@dataclass
class H2Trajectory:
    grid: VelocityGrid
    modes: list
    snapshots: dict = field(default_factory=dict)    # time -> ModeCorrelation
    pair_times: np.ndarray | None = None
    pair_values: dict = field(default_factory=dict)  # label -> series
    dropped_tail: float = 0.0


def evolve_h2(density: InitialDensity, potential: TorusPotential,
              grid: VelocityGrid, t_end: float, sample_times=(),
              k_cut: int = 8, pair_observables=(), pair_stride: int = 10,
              use_numba: bool = True) -> H2Trajectory:
    """Integrate the per-mode correction system from zero initial data.

    pair_observables: (label, psi) pairs; int psi(v) drive(v) dv is recorded
    every pair_stride steps, which is what the long-time consistency check
    consumes.
    """
    if not density.homogeneous:
        raise H2Error("the homogeneous reduction requires f independent of x")
    if density.velocity.support_radius > grid.v_max:
        raise H2Error("velocity grid does not cover the support")
    modes = retained_modes(potential, k_cut)
    kmax = TAU * max((float(np.linalg.norm(m)) for m in modes), default=0.0)
    if kmax * grid.v_max * grid.dt >= 0.5:
        raise H2Error(f"CFL guard: |k| v_max dt = {kmax * grid.v_max * grid.dt:.3f} >= 0.5")
    # the interaction table is finite, so nothing is dropped beyond k_cut
    dropped = sum(abs(potential.vhat(m)) for m in
                  map(tuple, potential.one_sided()[0].tolist())
                  if float(np.linalg.norm(m)) > k_cut)

    nsteps = int(round(t_end / grid.dt))
    if abs(nsteps * grid.dt - t_end) > 1e-9:
        raise H2Error("t_end must align to dt")
    sample_steps = {int(round(t / grid.dt)): t for t in sample_times}
    nodes = grid.nodes()
    w = grid.weights()

    psi_vals = {lab: np.asarray(psi(nodes), dtype=float)
                for lab, psi in pair_observables}
    pair_steps = list(range(0, nsteps + 1, pair_stride))
    pair_series = {lab: np.zeros(len(pair_steps)) for lab in psi_vals}
    pair_index = {s: i for i, s in enumerate(pair_steps)}

    traj = H2Trajectory(grid=grid, modes=modes, dropped_tail=float(dropped))
    state = {}
    steppers = {}
    for mode in modes:
        c, f = _mode_vectors(density, potential, mode, grid)
        ka = nodes @ (TAU * np.asarray(mode, dtype=float))
        steppers[mode] = H2ModeStepper(ka, c, f, w, use_numba=use_numba)
        state[mode] = np.zeros((grid.n_points, grid.n_points), dtype=complex)

    def snapshot(t):
        return ModeCorrelation(grid=grid, modes=list(modes),
                               arrays={m: state[m].copy() for m in modes}, time=t)

    def record_pairs(step_idx):
        if not psi_vals or step_idx not in pair_index:
            return
        corr = ModeCorrelation(grid=grid, modes=list(modes), arrays=state,
                               time=step_idx * grid.dt)
        drive = bogolyubov_drive(corr, potential)
        for lab, pv in psi_vals.items():
            pair_series[lab][pair_index[step_idx]] = float(np.sum(pv * w * drive))

    if 0 in sample_steps:
        traj.snapshots[0.0] = snapshot(0.0)
    record_pairs(0)
    for it in range(1, nsteps + 1):
        for mode in modes:
            steppers[mode].step(state[mode], grid.dt)
        if it in sample_steps:
            traj.snapshots[sample_steps[it]] = snapshot(sample_steps[it])
        record_pairs(it)
    traj.pair_times = np.asarray(pair_steps, dtype=float) * grid.dt
    traj.pair_values = pair_series
    return traj


# ---------------------------------------------------------------------------
# limiting variance of empirical-measure fluctuations
# ---------------------------------------------------------------------------

def limiting_variance(phi: Observable, density: InitialDensity,
                      corr: ModeCorrelation, tol: float = 1e-10) -> float:
    """sigma^2 = (int phi^2 F - (int phi F)^2) + int (phi x phi) H^2, the
    pairing computed mode by mode in Fourier."""
    from .ensemble import observable_moment

    static = (observable_moment(density, phi, 2)
              - observable_moment(density, phi, 1) ** 2)
    nodes = corr.grid.nodes()
    w = corr.grid.weights()
    pairing = 0.0 + 0.0j
    xmodes = phi.x_modes()
    for n, parts in xmodes.items():
        if not any(n):
            continue   # mode 0 carries no correction
        neg = tuple(-i for i in n)
        if neg not in xmodes:
            continue
        h_k = corr.array_for(n)
        left = np.zeros(nodes.shape[0], dtype=complex)
        right = np.zeros(nodes.shape[0], dtype=complex)
        for cc, shape in xmodes[neg]:
            left += cc * shape(nodes)
        for cc, shape in parts:
            right += cc * shape(nodes)
        pairing += np.einsum("a,a,ab,b,b->", left, w, h_k, right, w)
    sigma2 = static + float(pairing.real)
    if abs(pairing.imag) > 1e-9 * max(1.0, abs(pairing.real)):
        raise VarianceInconsistencyError("pairing acquired an imaginary part")
    if sigma2 < -tol:
        raise VarianceInconsistencyError(f"negative limiting variance {sigma2}")
    return max(sigma2, 0.0)


@dataclass
class VarianceConvergenceResult:
    sigma2: float
    points: list                  # (N, |N Var_MC - sigma2|, stderr)
    raw: list                     # (N, N Var_MC, stderr)
    fit: object


def variance_convergence_experiment(density: InitialDensity, potential: TorusPotential,
                                    phi: Observable, t: float, n_list, replicas,
                                    master_seed: int, grid: VelocityGrid,
                                    particle_dt: float = 1e-2, k_cut: int = 8,
                                    use_numba: bool = True,
                                    budget: float = 8e12) -> VarianceConvergenceResult:
    """|N Var_MC[int phi dmu_N^t] - sigma_phi^2(t)| against N, with the
    free-flow control variate for the Monte Carlo variances."""
    from .dynamics import SimConfig
    from .ensemble import (ReplicaPlan, cumulant_free_exact, estimate_cumulant,
                           run_replicas, scaling_slope)

    traj = evolve_h2(density, potential, grid, t, sample_times=(t,),
                     k_cut=k_cut, use_numba=use_numba)
    sigma2 = limiting_variance(phi, density, traj.snapshots[t])
    if isinstance(replicas, int):
        replicas = {n: replicas for n in n_list}
    points = []
    raw = []
    for n in n_list:
        plan = ReplicaPlan(n_particles=(n,), replicas=replicas[n],
                           master_seed=master_seed,
                           sim=SimConfig(potential=potential, dt=particle_dt, t_end=t,
                                         use_numba=use_numba),
                           density=density, observables=(phi,),
                           sample_times=(t,), track_free_flow=True, budget=budget)
        sm = run_replicas(plan)[n]
        exact_free = cumulant_free_exact(density, phi, 2, n, t)
        est = estimate_cumulant(sm, phi.label, t, 2,
                                control_values=sm.free_column(phi.label, t),
                                control_exact=exact_free)
        raw.append((n, n * est.value, n * est.stderr))
        points.append((n, abs(n * est.value - sigma2), n * est.stderr))
    return VarianceConvergenceResult(sigma2=sigma2, points=points, raw=raw,
                                     fit=scaling_slope(points))
