"""Monte Carlo engine over iid initial data.

Replicas are fully independent trajectories with per-replica seeds derived
from (master seed, particle count, replica index); reductions over replicas
are plain ordered numpy sums on arrays indexed by replica, so results are
bit-identical for any chunking or thread count.

Per-replica particle-level observable information is retained as power sums
sum_j phi(z_j)^r, r = 1..4, which is the exact sufficient statistic for every
symmetric U-statistic and k-statistic used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dynamics import ConfigurationError, SimConfig, _steps_for_times
from .model import InitialDensity, Observable, TorusPotential
from .partitions import (
    NestedPartition,
    coefficient_K_N,
    correlation_pairing_from_marginal_pairings,
    cumulant_pairing_terms,
    distinct_tuple_coefficients,
    enumerate_partitions,
    k_statistics,
    moments_to_cumulants,
)

TAU = 2.0 * math.pi


class BudgetError(RuntimeError):
    pass


class InsufficientReplicasError(ValueError):
    pass


# ---------------------------------------------------------------------------
# plans and sample matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicaPlan:
    """Monte Carlo scan: R replicas of the N-body flow for each N."""

    n_particles: tuple[int, ...]
    replicas: int
    master_seed: int
    sim: SimConfig
    density: InitialDensity
    observables: tuple[Observable, ...]
    sample_times: tuple[float, ...]
    chunk_size: int = 2048
    budget: float = 8.0e12          # particle-mode-steps guard
    track_free_flow: bool = False

    def cost_estimate(self) -> float:
        steps = max(1, int(round(max(self.sample_times) / self.sim.dt)))
        modes, _ = self.sim.potential.one_sided()
        return float(sum(self.n_particles) * self.replicas * steps * max(1, len(modes)))

    def replica_seed(self, n: int, r: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=(self.master_seed, n, r))


@dataclass
class SampleMatrix:
    """Replica-indexed table of empirical-measure observable values."""

    n_particles: int
    times: np.ndarray
    labels: list[str]
    power_sums: np.ndarray             # (R, T, O, 4): sum_j phi^r
    master_seed: int
    free_values: np.ndarray | None = None   # (R, T, O) free-flow control values
    config_hash: str = ""

    @property
    def replicas(self) -> int:
        return self.power_sums.shape[0]

    @property
    def values(self) -> np.ndarray:
        """(R, T, O) empirical means (1/N) sum_j phi(z_j^t)."""
        return self.power_sums[..., 0] / self.n_particles

    def column(self, label: str, time: float) -> np.ndarray:
        t = _index_of(self.times, time)
        o = self.labels.index(label)
        return self.values[:, t, o]

    def power_column(self, label: str, time: float) -> np.ndarray:
        t = _index_of(self.times, time)
        o = self.labels.index(label)
        return self.power_sums[:, t, o, :]

    def free_column(self, label: str, time: float) -> np.ndarray:
        if self.free_values is None:
            raise ValueError("free-flow values were not tracked")
        t = _index_of(self.times, time)
        o = self.labels.index(label)
        return self.free_values[:, t, o]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("replica,time,observable,value\n")
            vals = self.values
            for r in range(vals.shape[0]):
                for t, tv in enumerate(self.times):
                    for o, lab in enumerate(self.labels):
                        fh.write(f"{r},{tv!r},{lab},{vals[r, t, o]!r}\n")


def _index_of(times, t) -> int:
    idx = int(np.argmin(np.abs(np.asarray(times) - t)))
    if abs(times[idx] - t) > 1e-9:
        raise KeyError(f"time {t} not sampled (have {list(times)})")
    return idx


def _draw_chunk(density: InitialDensity, n: int, seeds) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica uniform streams, one elementwise inverse-CDF transform for
    the whole chunk (values identical to replica-by-replica sampling)."""
    b = len(seeds)
    ux = np.empty((b, n))
    uv = np.empty((b, n))
    for i, ss in enumerate(seeds):
        rng = np.random.Generator(np.random.Philox(ss))
        ux[i] = rng.random(n)
        uv[i] = rng.random(n)
    return density.spatial.transform_uniform(ux), density.velocity.transform_uniform(uv)


def _advance(x, v, potential: TorusPotential, dt: float, nsteps: int, use_numba: bool):
    modes, vhat = potential.one_sided()
    _kernels.verlet_batch_d1(x, v, modes[:, 0] if modes.size else modes.reshape(0),
                             vhat, dt, nsteps, use_numba=use_numba)


def run_replicas(plan: ReplicaPlan) -> dict[int, SampleMatrix]:
    """R independent trajectories per N; deterministic given the master seed."""
    if plan.density.dim != 1:
        raise ConfigurationError("replica scans run the d = 1 dynamics")
    cost = plan.cost_estimate()
    if cost > plan.budget:
        raise BudgetError(f"estimated cost {cost:.3e} particle-mode-steps "
                          f"exceeds budget {plan.budget:.3e}")
    out = {}
    sample_steps = _steps_for_times(plan.sample_times, plan.sim.dt)
    for n in plan.n_particles:
        r_total = plan.replicas
        psums = np.empty((r_total, len(sample_steps), len(plan.observables), 4))
        free = (np.empty((r_total, len(sample_steps), len(plan.observables)))
                if plan.track_free_flow else None)
        for lo in range(0, r_total, plan.chunk_size):
            hi = min(lo + plan.chunk_size, r_total)
            seeds = [plan.replica_seed(n, r) for r in range(lo, hi)]
            x, v = _draw_chunk(plan.density, n, seeds)
            x0 = x.copy() if plan.track_free_flow else None
            v0 = v.copy() if plan.track_free_flow else None
            prev = 0
            for ti, s in enumerate(sample_steps):
                _advance(x, v, plan.sim.potential, plan.sim.dt, s - prev,
                         plan.sim.use_numba)
                prev = s
                for oi, phi in enumerate(plan.observables):
                    vals = phi(x[..., None], v[..., None])
                    for r_pow in range(4):
                        psums[lo:hi, ti, oi, r_pow] = np.sum(vals ** (r_pow + 1), axis=1)
                    if plan.track_free_flow:
                        xf = np.mod(x0 + (s * plan.sim.dt) * v0, 1.0)
                        free[lo:hi, ti, oi] = np.mean(phi(xf[..., None], v0[..., None]), axis=1)
        out[n] = SampleMatrix(n_particles=n,
                              times=np.asarray(plan.sample_times, dtype=float),
                              labels=[o.label for o in plan.observables],
                              power_sums=psums,
                              master_seed=plan.master_seed,
                              free_values=free)
    return out


# ---------------------------------------------------------------------------
# closed-form t = 0 references (grid quadrature against the initial law)
# ---------------------------------------------------------------------------

def observable_moment(density: InitialDensity, phi: Observable, power: int = 1,
                      free_time: float = 0.0, nx: int = 256, nv: int = 4097) -> float:
    """< phi(x + v t, v)^power > under F = rho(x) f(v); periodic trapezoid in x
    (exact for trigonometric polynomials), fine trapezoid in v."""
    r = phi_support = density.velocity.support_radius
    vgrid = np.linspace(-r, r, nv)
    xgrid = (np.arange(nx) + 0.5) / nx
    xs, vs = np.meshgrid(xgrid, vgrid, indexing="ij")
    xf = np.mod(xs + free_time * vs, 1.0)
    vals = phi(xf[..., None], vs[..., None]) ** power
    fw = density.spatial.value(xs[..., None]) * density.velocity.density(vs[..., None])
    integrand = vals * fw
    return float(np.trapezoid(np.mean(integrand, axis=0), vgrid))


def cumulant_t0_exact(density: InitialDensity, phi: Observable, m: int, n: int) -> float:
    """kappa_m[int phi dmu_N(0)] = kappa_m[phi(z)] / N^{m-1} by iid additivity."""
    mus = [observable_moment(density, phi, power=p) for p in range(1, m + 1)]
    kap = moments_to_cumulants(mus)[m - 1]
    return float(kap / n ** (m - 1))


def cumulant_free_exact(density: InitialDensity, phi: Observable, m: int, n: int,
                        t: float) -> float:
    """Exact cumulant of the free-transported empirical observable: the free
    flow is a per-particle map, so iid additivity still applies."""
    mus = [observable_moment(density, phi, power=p, free_time=t) for p in range(1, m + 1)]
    kap = moments_to_cumulants(mus)[m - 1]
    return float(kap / n ** (m - 1))


# ---------------------------------------------------------------------------
# cumulant estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def consistent_with(self, target: float, nsigma: float = 3.0) -> bool:
        return abs(self.value - target) <= nsigma * max(self.stderr, 1e-300)


def estimate_cumulant(samples: SampleMatrix, label: str, time: float, m: int,
                      control_values: np.ndarray | None = None,
                      control_exact: float | None = None) -> Estimate:
    """Order-m k-statistic of the replica column.

    With a control column (t = 0 values, or the free-flow transport of the
    same initial data) of known exact cumulant, returns the control-variate
    estimator k_m(Y) - k_m(Y_cv) + kappa_cv, jackknifed as a pair.
    """
    y = samples.column(label, time)
    if y.size <= 10 * m:
        raise InsufficientReplicasError(f"need R > 10 m = {10 * m}, got {y.size}")
    if control_values is None:
        v, se = k_statistics(y, m)
        return Estimate(v, se)
    if control_exact is None:
        raise ValueError("control_exact required with control_values")
    diff, se = _jackknife_k_difference(y, np.asarray(control_values, dtype=float), m)
    return Estimate(diff + control_exact, se)


def _k_from_psums(s, n, m):
    from .partitions import _k_stats_from_power_sums
    return _k_stats_from_power_sums(s, n, m)


def _jackknife_k_difference(y: np.ndarray, y0: np.ndarray, m: int) -> tuple[float, float]:
    r = y.size
    out = []
    thetas = []
    for arr in (y, y0):
        c = arr - np.mean(arr)
        pows = np.stack([c, c ** 2, c ** 3, c ** 4])
        s_full = pows.sum(axis=1)
        out.append(float(_k_from_psums(s_full, r, m)) + (np.mean(arr) if m == 1 else 0.0))
        thetas.append(_k_from_psums(s_full[:, None] - pows, r - 1, m))
    diff = out[0] - out[1]
    theta = thetas[0] - thetas[1]
    se = float(np.sqrt((r - 1) / r * np.sum((theta - np.mean(theta)) ** 2)))
    return diff, se


def estimate_mean(samples: SampleMatrix, label: str, time: float,
                  control: str | None = None,
                  density: InitialDensity | None = None,
                  phi: Observable | None = None) -> Estimate:
    """Replica mean of Y_t, optionally variance-reduced by the free-flow
    control variate whose expectation is computed by quadrature."""
    y = samples.column(label, time)
    if control is None:
        return Estimate(float(np.mean(y)), float(np.std(y, ddof=1) / math.sqrt(y.size)))
    if control != "free":
        raise ValueError("control must be None or 'free'")
    yf = samples.free_column(label, time)
    exact = observable_moment(density, phi, power=1, free_time=time)
    resid = y - yf
    return Estimate(float(np.mean(resid) + exact),
                    float(np.std(resid, ddof=1) / math.sqrt(y.size)))


# ---------------------------------------------------------------------------
# correlation pairings: U-statistic route and cumulant-inversion route
# ---------------------------------------------------------------------------

def _falling(n: int, ell: int) -> float:
    out = 1.0
    for i in range(ell):
        out *= n - i
    return out


def _u_statistic_rows(psums: np.ndarray, n: int, powers: tuple[int, ...]) -> np.ndarray:
    """Per-replica unbiased estimate of int (tensor_i phi^{a_i}) F_N^ell via the
    power-sum expansion of the sum over distinct ordered index tuples."""
    ell = len(powers)
    if n < ell:
        raise InsufficientReplicasError(f"need N >= {ell}")
    acc = np.zeros(psums.shape[0])
    for coeff, merged in distinct_tuple_coefficients(powers):
        term = float(coeff) * np.ones_like(acc)
        for p in merged:
            term = term * psums[:, p - 1]
        acc += term
    return acc / _falling(n, ell)


class _Jackknife:
    """Delete-one jackknife for smooth functions of replica means.

    Ingredients are per-replica rows; an estimator is any callable of
    (get, count) where get(key) returns the ingredient mean.  The leave-one-out
    evaluation feeds arrays through the same callable.
    """

    def __init__(self):
        self.rows: dict = {}

    def add(self, key, rows: np.ndarray):
        self.rows[key] = np.asarray(rows, dtype=np.float64)

    def estimate(self, fn) -> Estimate:
        r = next(iter(self.rows.values())).size
        means = {k: float(np.mean(v)) for k, v in self.rows.items()}
        value = float(fn(lambda k: means[k], float(r)))
        loo = {k: (r * means[k] - v) / (r - 1.0) for k, v in self.rows.items()}
        theta = np.asarray(fn(lambda k: loo[k], float(r - 1)), dtype=np.float64)
        se = float(np.sqrt((r - 1) / r * np.sum((theta - np.mean(theta)) ** 2)))
        return Estimate(value, se)


def _g_pairing_expr(get, n: int, powers: tuple[int, ...]):
    """int (tensor phi^{a_i}) G^ell by partition inversion of the marginal
    pairings; `get(("u", key))` supplies the marginal-pairing means."""
    acc = 0.0
    for pi in enumerate_partitions(len(powers)):
        coeff = float((-1) ** (len(pi) - 1) * math.factorial(len(pi) - 1))
        term = coeff
        for b in pi.blocks:
            term = term * get(("u", tuple(sorted(powers[i] for i in b))))
        acc = acc + term
    return acc


def _needed_u_keys(m: int) -> set[tuple[int, ...]]:
    keys = set()
    for pi, rho, _ in cumulant_pairing_terms(m):
        for d_block in rho.outer.blocks:
            powers = tuple(sorted(len(pi.blocks[i]) for i in d_block))
            for sub in enumerate_partitions(len(powers)):
                for b in sub.blocks:
                    keys.add(tuple(sorted(powers[i] for i in b)))
    return keys


@dataclass(frozen=True)
class PairingEstimates:
    route_a: Estimate
    route_b: Estimate

    def agree(self, nsigma: float = 3.0) -> bool:
        se = math.hypot(self.route_a.stderr, self.route_b.stderr)
        return abs(self.route_a.value - self.route_b.value) <= nsigma * se


def estimate_correlation_pairing(samples: SampleMatrix, label: str, time: float,
                                 m: int) -> PairingEstimates:
    """Two estimates of int phi^{tensor m} G_N^m.

    Route A: U-statistics for the marginal pairings, then the partition
    inversion.  Route B: k-statistic of the empirical-measure observable,
    inverted through the finite-N coefficient identity tying cumulants to
    correlation pairings (the diagonal term carries prod_{i<m} (1 - i/N)).
    Both are smooth functions of replica means and get delete-one jackknife
    errors over the full pipeline.
    """
    if m > 3:
        raise ConfigurationError("correlation pairings implemented for m <= 3")
    n = samples.n_particles
    psums = samples.power_column(label, time)
    r = psums.shape[0]
    if r <= 10 * m:
        raise InsufficientReplicasError(f"need R > {10 * m}")

    jack = _Jackknife()
    for key in _needed_u_keys(m):
        jack.add(("u", key), _u_statistic_rows(psums, n, key))
    y = psums[:, 0] / n
    for j in range(1, m + 1):
        jack.add(("y", j), y ** j)

    def route_a_fn(get, cnt):
        marginal = {ell: get(("u", (1,) * ell)) for ell in range(1, m + 1)}
        return correlation_pairing_from_marginal_pairings(marginal, m)

    route_a = jack.estimate(route_a_fn)

    terms = cumulant_pairing_terms(m)
    coef_diag = 0.0
    off_diag = []
    for pi, rho, expo in terms:
        coef = coefficient_K_N(rho, n) * float(n) ** expo
        if len(pi) == m and len(rho.outer) == 1:
            coef_diag += coef
        else:
            powers_per_d = tuple(tuple(len(pi.blocks[i]) for i in d)
                                 for d in rho.outer.blocks)
            off_diag.append((coef, powers_per_d))

    def route_b(get, cnt):
        s = [cnt * get(("y", j)) for j in range(1, m + 1)]
        while len(s) < 4:
            s.append(0.0 * s[0])
        kap = _k_from_psums(np.stack([np.asarray(x) for x in s]), cnt, m)
        corr = 0.0
        for coef, powers_per_d in off_diag:
            term = coef
            for powers in powers_per_d:
                term = term * _g_pairing_expr(get, n, powers)
            corr = corr + term
        return (kap - corr) / coef_diag

    return PairingEstimates(route_a=route_a, route_b=jack.estimate(route_b))


# ---------------------------------------------------------------------------
# Glauber (resampling) sensitivity estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlauberEstimate:
    order: int
    p: float
    norm: float                 # sup over index tuples of ||D_J Y||_p
    norm_sq: float              # debiased squared norm at the sup tuple (p = 2)
    stderr_sq: float
    stderr: float
    resamples: int
    outer_replicas: int
    tuples: int
    per_tuple_sq: tuple[float, ...] = ()


def _subsets(tup):
    out = []
    m = len(tup)
    for mask in range(1, 1 << m):
        out.append(tuple(tup[i] for i in range(m) if mask >> i & 1))
    return out


def estimate_glauber_norm(density: InitialDensity, potential: TorusPotential,
                          n: int, phi: Observable, t: float, dt: float,
                          order: int, master_seed: int,
                          n_outer: int = 192, resamples: int = 16,
                          n_tuples: int = 8, p: float = 2.0,
                          use_numba: bool = True,
                          chunk_outer: int = 32) -> GlauberEstimate:
    """Monte Carlo estimate of the iterated-resampling sensitivity norm
    sup_J ||D_J Y||_p for Y = int phi dmu_N^t, |J| = order in {1, 2}.

    Conditional expectations over replaced coordinates are approximated by
    averaging `resamples` independent reruns per subset and combined by
    inclusion-exclusion; for p = 2 the inner-noise bias E s^2 / M is
    subtracted, giving an unbiased estimate of the squared norm.
    """
    if order not in (1, 2):
        raise ConfigurationError("order must be 1 or 2")
    if resamples < 8:
        raise ConfigurationError("need at least 8 resamples")
    if n < 2 * n_tuples * order:
        raise ConfigurationError("not enough particles for disjoint index tuples")
    tuples = [tuple(range(i * order, (i + 1) * order)) for i in range(n_tuples)]
    subsets = {j: _subsets(tup) for j, tup in enumerate(tuples)}
    n_variants = 1 + sum(len(s) for s in subsets.values()) * resamples
    nsteps = int(round(t / dt))
    if abs(nsteps * dt - t) > 1e-9:
        raise ConfigurationError("t must align to dt")

    # accumulators per tuple
    sq_rows = np.empty((n_outer, n_tuples))      # debiased |D|^2 per outer replica
    raw_rows = np.empty((n_outer, n_tuples))     # |D|^p without debias
    modes, vhat = potential.one_sided()
    for lo in range(0, n_outer, chunk_outer):
        hi = min(lo + chunk_outer, n_outer)
        b_out = hi - lo
        xb = np.empty((b_out * n_variants, n))
        vb = np.empty((b_out * n_variants, n))
        for i, r in enumerate(range(lo, hi)):
            base = i * n_variants
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(entropy=(master_seed, n, r))))
            x0, v0 = density.sample(rng, n)
            xb[base] = x0[:, 0]
            vb[base] = v0[:, 0]
            row = base + 1
            for j, tup in enumerate(tuples):
                for s_idx, sub in enumerate(subsets[j]):
                    for mu in range(resamples):
                        rrng = np.random.Generator(np.random.Philox(
                            np.random.SeedSequence(entropy=(
                                master_seed, n, r, 101, j, s_idx, mu))))
                        xr, vr = density.sample(rrng, len(sub))
                        xb[row] = xb[base]
                        vb[row] = vb[base]
                        xb[row, list(sub)] = xr[:, 0]
                        vb[row, list(sub)] = vr[:, 0]
                        row += 1
        _kernels.verlet_batch_d1(xb, vb, modes[:, 0] if modes.size else modes.reshape(0),
                                 vhat, dt, nsteps, use_numba=use_numba)
        yvals = np.mean(phi(xb[..., None], vb[..., None]), axis=1)
        for i, r in enumerate(range(lo, hi)):
            base = i * n_variants
            y_base = yvals[base]
            row = base + 1
            for j, tup in enumerate(tuples):
                d_hat = y_base
                var_inner = 0.0
                for sub in subsets[j]:
                    block = yvals[row:row + resamples]
                    row += resamples
                    sign = (-1) ** len(sub)
                    d_hat = d_hat + sign * float(np.mean(block))
                    var_inner += float(np.var(block, ddof=1)) / resamples
                sq_rows[r, j] = d_hat ** 2 - var_inner
                raw_rows[r, j] = abs(d_hat) ** p
    mean_sq = sq_rows.mean(axis=0)
    se_sq = sq_rows.std(axis=0, ddof=1) / math.sqrt(n_outer)
    jstar = int(np.argmax(mean_sq))
    if p == 2.0:
        nsq = float(mean_sq[jstar])
        norm = math.sqrt(max(nsq, 0.0))
        se = float(se_sq[jstar]) / (2.0 * norm) if norm > 0 else float("inf")
    else:
        vals = raw_rows.mean(axis=0)
        jstar = int(np.argmax(vals))
        norm = float(vals[jstar]) ** (1.0 / p)
        nsq = float(mean_sq[jstar])
        se = float(raw_rows[:, jstar].std(ddof=1) / math.sqrt(n_outer))
    return GlauberEstimate(order=order, p=p, norm=norm, norm_sq=nsq,
                           stderr_sq=float(se_sq[jstar]), stderr=se,
                           resamples=resamples, outer_replicas=n_outer,
                           tuples=n_tuples, per_tuple_sq=tuple(map(float, mean_sq)))


# ---------------------------------------------------------------------------
# scaling regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    noise_dominated: bool
    points: tuple = ()

    def within(self, target: float, tol: float) -> bool:
        return (not self.noise_dominated) and abs(self.slope - target) <= tol


def scaling_slope(points) -> SlopeFit:
    """Weighted least-squares slope of log|value| against log N.

    points: iterable of (N, value, stderr).  If the values are neither all of
    one sign nor all individually 3-sigma significant, the fit is refused and
    the noise-dominated flag raised instead.
    """
    pts = [(float(n), float(v), float(se)) for n, v, se in points]
    if len(pts) < 3:
        raise ConfigurationError("need at least 3 scan points")
    vals = np.array([p[1] for p in pts])
    ses = np.array([p[2] for p in pts])
    same_sign = np.all(vals > 0) or np.all(vals < 0)
    significant = np.all(np.abs(vals) > 3.0 * ses)
    if not (same_sign or significant):
        return SlopeFit(slope=float("nan"), stderr=float("inf"), intercept=float("nan"),
                        noise_dominated=True, points=tuple(pts))
    logn = np.log(np.array([p[0] for p in pts]))
    logv = np.log(np.abs(vals))
    sig = ses / np.abs(vals)             # stderr of log|value|
    w = 1.0 / np.maximum(sig, 1e-12) ** 2
    sw = np.sum(w)
    xbar = np.sum(w * logn) / sw
    ybar = np.sum(w * logv) / sw
    sxx = np.sum(w * (logn - xbar) ** 2)
    slope = float(np.sum(w * (logn - xbar) * (logv - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    stderr = float(math.sqrt(1.0 / sxx))
    return SlopeFit(slope=slope, stderr=stderr, intercept=intercept,
                    noise_dominated=False, points=tuple(pts))
