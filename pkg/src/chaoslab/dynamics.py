"""Deterministic N-body mean-field flow on the torus.

Newton's equations with 1/N-weighted pairwise forces,

    dx_j/dt = v_j,   dv_j/dt = -(1/N) sum_{l != j} grad V(x_j - x_l),

integrated by velocity Verlet (kick-drift-kick).  Forces are evaluated either
by the direct O(N^2) pair sum or through the mode sums of the finite Fourier
table of V (both exact for smooth V; they agree to roundoff).  Self
interaction is excluded; since V is even, grad V(0) = 0 and the Fourier path
needs no self-term correction (asserted at import of the potential).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .model import InitialDensity, Observable, TorusPotential

TAU = 2.0 * math.pi


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleState:
    """N positions in [0,1)^d and N velocities in R^d at a common time."""

    x: np.ndarray
    v: np.ndarray
    t: float = 0.0
    seed: str | None = None
    steps: int = 0

    def __post_init__(self):
        if self.x.shape != self.v.shape or self.x.ndim != 2:
            raise ValueError("x and v must both have shape (N, d)")
        if np.any(self.x < 0.0) or np.any(self.x >= 1.0):
            raise ValueError("positions must be reduced to [0, 1)^d")
        if not np.all(np.isfinite(self.v)):
            raise ValueError("velocities must be finite")

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SimConfig:
    potential: TorusPotential
    dt: float = 1e-3
    t_end: float = 1.0
    force_method: str = "fourier"     # "direct" | "fourier"
    integrator: str = "velocity_verlet"
    use_numba: bool = True

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigurationError("dt must be positive")
        if self.force_method not in ("direct", "fourier"):
            raise ConfigurationError(f"unknown force method {self.force_method!r}")
        if self.integrator != "velocity_verlet":
            raise ConfigurationError("only velocity_verlet is supported")

    def stability_ratio(self) -> float:
        """dt over the heuristic cap 0.1 / (1 + max|k| * sum|V̂|); recorded in
        experiment outputs, not enforced."""
        modes, vhat = self.potential.one_sided()
        if len(vhat) == 0:
            return 0.0
        kmax = TAU * float(np.max(np.linalg.norm(modes, axis=1)))
        cap = 0.1 / (1.0 + kmax * float(np.sum(np.abs(vhat))) * 2.0)
        return self.dt / cap


def initial_state(density: InitialDensity, n: int, seed) -> ParticleState:
    """Draw N iid phase points from the one-particle density."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(ss))
    x, v = density.sample(rng, n)
    return ParticleState(x=x, v=v, t=0.0, seed=str(ss.entropy) + f"/{ss.spawn_key}")


# ---------------------------------------------------------------------------
# forces
# ---------------------------------------------------------------------------

def mean_field_force(state: ParticleState, potential: TorusPotential,
                     method: str = "fourier") -> np.ndarray:
    """F_j = -(1/N) sum_{l != j} grad V(x_j - x_l), shape (N, d)."""
    if method == "direct":
        return _force_direct(state.x, potential)
    if method == "fourier":
        return _force_fourier(state.x, potential)
    raise ConfigurationError(f"unknown force method {method!r}")


def _force_direct(x: np.ndarray, potential: TorusPotential) -> np.ndarray:
    n = x.shape[0]
    out = np.zeros_like(x)
    if n == 1:
        return out
    chunk = max(1, int(2_000_000 // max(n, 1)))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = x[lo:hi, None, :] - x[None, :, :]
        g = potential.gradient(diff)
        g[np.arange(lo, hi) - lo, np.arange(lo, hi), :] = 0.0  # l != j
        out[lo:hi] = -g.sum(axis=1) / n
    return out


def _force_fourier(x: np.ndarray, potential: TorusPotential) -> np.ndarray:
    n = x.shape[0]
    modes, vhat = potential.one_sided()
    out = np.zeros_like(x)
    if len(vhat) == 0 or n == 1:
        return out
    for nvec, c in zip(modes, vhat):
        theta = TAU * (x @ nvec)
        ereal = np.cos(theta)
        eimag = np.sin(theta)
        cs = ereal.sum()
        sn = eimag.sum()
        # -(1/N) * (-2 k V̂) Im(e^{ik.x_j} conj(S_k)), k = tau * nvec
        amp = (2.0 * TAU * c / n) * (eimag * cs - ereal * sn)
        out += amp[:, None] * nvec
    return out


def energy(state: ParticleState, potential: TorusPotential) -> float:
    """(1/2N) sum |v|^2 + (1/2N^2) sum_{j != l} V(x_j - x_l), via mode sums."""
    n = state.n_particles
    kin = 0.5 * float(np.sum(state.v ** 2)) / n
    modes, vhat = potential.one_sided()
    v0 = potential.coeffs.get((0,) * state.dim, 0.0)
    pair = v0 * n * n
    vat0 = v0
    for nvec, c in zip(modes, vhat):
        theta = TAU * (state.x @ nvec)
        pair += 2.0 * c * (np.cos(theta).sum() ** 2 + np.sin(theta).sum() ** 2)
        vat0 += 2.0 * c
    pair -= n * vat0  # remove the j = l diagonal
    return kin + 0.5 * pair / n ** 2


def momentum(state: ParticleState) -> np.ndarray:
    return state.v.mean(axis=0)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def step(state: ParticleState, cfg: SimConfig) -> ParticleState:
    """One velocity-Verlet step; positions re-reduced mod 1."""
    f = mean_field_force(state, cfg.potential, cfg.force_method)
    v_half = state.v + 0.5 * cfg.dt * f
    x_new = np.mod(state.x + cfg.dt * v_half, 1.0)
    mid = ParticleState(x=x_new, v=v_half, t=state.t, seed=state.seed, steps=state.steps)
    f_new = mean_field_force(mid, cfg.potential, cfg.force_method)
    v_new = v_half + 0.5 * cfg.dt * f_new
    return ParticleState(x=x_new, v=v_new, t=state.t + cfg.dt,
                         seed=state.seed, steps=state.steps + 1)


def _steps_for_times(sample_times, dt: float) -> list[int]:
    out = []
    for t in sample_times:
        s = t / dt
        if abs(s - round(s)) > 1e-9 * max(1.0, abs(s)) + 1e-12:
            raise ConfigurationError(f"sample time {t} not aligned to dt = {dt}")
        out.append(int(round(s)))
    if out != sorted(out):
        raise ConfigurationError("sample times must be nondecreasing")
    return out


@dataclass
class TrajectoryResult:
    times: np.ndarray
    labels: list[str]
    values: np.ndarray          # (n_times, n_observables)
    final_state: ParticleState | None = None
    particle_values: dict = field(default_factory=dict)   # label -> (n_times, N)


def run_trajectory(state0: ParticleState, cfg: SimConfig,
                   observables: list[Observable], sample_times,
                   keep_particle_values: bool = False,
                   keep_final_state: bool = False,
                   dump_path=None) -> TrajectoryResult:
    """Empirical-measure observable time series (1/N) sum_j phi(z_j(t))."""
    sample_steps = _steps_for_times(sample_times, cfg.dt)
    n_t = len(sample_steps)
    values = np.empty((n_t, len(observables)))
    particle_values = {o.label: np.empty((n_t, state0.n_particles))
                       for o in observables} if keep_particle_values else {}
    if sample_steps and sample_steps[-1] > 0 and cfg.t_end + 1e-12 < sample_steps[-1] * cfg.dt:
        raise ConfigurationError("sample time beyond t_end")

    use_fast = (state0.dim == 1 and cfg.force_method == "fourier")
    x = state0.x.copy()
    v = state0.v.copy()
    dump_rows = [] if dump_path is not None else None
    prev = 0
    state = state0
    for i, s in enumerate(sample_steps):
        nsteps = s - prev
        if use_fast:
            modes, vhat = cfg.potential.one_sided()
            _kernels.verlet_batch_d1(x[None, :, 0], v[None, :, 0],
                                     modes[:, 0], vhat, cfg.dt, nsteps,
                                     use_numba=cfg.use_numba)
            state = ParticleState(x=np.mod(x, 1.0), v=v, t=s * cfg.dt,
                                  seed=state0.seed, steps=s)
        else:
            for _ in range(nsteps):
                state = step(state, cfg)
        prev = s
        for j, phi in enumerate(observables):
            vals = phi(state.x, state.v)
            values[i, j] = float(np.mean(vals))
            if keep_particle_values:
                particle_values[phi.label][i] = vals
        if dump_rows is not None:
            for p in range(state.n_particles):
                dump_rows.append((state.t, p, *state.x[p], *state.v[p]))
    if dump_path is not None:
        _write_dump(dump_path, dump_rows, state0.dim)
    return TrajectoryResult(times=np.asarray(sample_times, dtype=float),
                            labels=[o.label for o in observables],
                            values=values,
                            final_state=state if keep_final_state else None,
                            particle_values=particle_values)


def _write_dump(path, rows, dim):
    header = ["time", "particle"] + [f"x{i}" for i in range(dim)] + [f"v{i}" for i in range(dim)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(c) if isinstance(c, float) else str(c) for c in r) + "\n")


def resampled_rerun(state0: ParticleState, replaced: dict, cfg: SimConfig,
                    observables: list[Observable], sample_times,
                    **kwargs) -> TrajectoryResult:
    """Identical deterministic run with initial data z_j replaced for j in
    `replaced` (index -> (x_j, v_j)); all other initial data bit-identical."""
    x = state0.x.copy()
    v = state0.v.copy()
    for j, (xj, vj) in replaced.items():
        x[j] = np.mod(np.asarray(xj, dtype=float), 1.0)
        v[j] = np.asarray(vj, dtype=float)
    st = ParticleState(x=x, v=v, t=state0.t, seed=state0.seed, steps=state0.steps)
    return run_trajectory(st, cfg, observables, sample_times, **kwargs)
