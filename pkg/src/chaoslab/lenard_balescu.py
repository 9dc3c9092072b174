"""Dispersion function, screened collision operator, and resolvent limit.

Everything reduces through the projected density pi_k(y) = int delta(y -
k.v/|k|) f(v) dv: the dielectric response is

    eps(k, w) = 1 - V̂(k) int pi_k'(y) / (y - w/|k|) dy,

with boundary values on the real axis by principal value (midpoint-offset
quadrature with singularity subtraction and the analytic log term) plus the
Sokhotskii-Plemelj residue  +- i pi V̂(k) pi_k'(y0).

The collision operator in d = 2 is assembled per interaction mode on
resonance lines k.v_* = k.v.  Integer modes make the lines lattice-aligned
(direction (-n2, n1)), so line integrals are plain lattice sums with step
measure dv/tau, the resonance is satisfied exactly, and the line sums make
mass, momentum, and kinetic-energy conservation identities telescope to
machine zero (4th-order-difference divergence differentiates linear and
quadratic moments exactly).  In d = 1 the resonance forces v_* = v where the
collision bracket vanishes: the operator is identically zero and is returned
as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import InitialDensity, TorusPotential

TAU = 2.0 * math.pi


class DirectionError(ValueError):
    pass


class HalfPlaneError(ValueError):
    pass


class NearSingularDispersionError(RuntimeError):
    pass


class EntropyDomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# projected densities
# ---------------------------------------------------------------------------

@dataclass
class ProjectedDensity:
    """pi_k on a uniform y grid with its 4th-order-difference derivative."""

    direction: np.ndarray
    y: np.ndarray
    pi: np.ndarray
    dpi: np.ndarray

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    def mass(self) -> float:
        return float(np.trapezoid(self.pi, self.y))

    def vlasov_stable(self, tol: float = 1e-9) -> bool:
        return bool(np.max(self.y * self.dpi) <= tol * max(1.0, float(np.max(np.abs(self.dpi)))))


def _fd4(vals: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(vals)
    out[2:-2] = (-vals[4:] + 8.0 * vals[3:-1] - 8.0 * vals[1:-3] + vals[:-4]) / (12.0 * h)
    out[0] = (vals[1] - vals[0]) / h
    out[1] = (vals[2] - vals[0]) / (2 * h)
    out[-2] = (vals[-1] - vals[-3]) / (2 * h)
    out[-1] = (vals[-1] - vals[-2]) / h
    return out


def project_density(density: InitialDensity, k, n_y: int = 1025,
                    pad: float = 0.25, n_w: int = 2049) -> ProjectedDensity:
    """pi_k for the velocity factor of a (homogeneous) initial density."""
    kvec = np.asarray(k, dtype=float)
    nk = float(np.linalg.norm(kvec))
    if nk == 0.0:
        raise DirectionError("k = 0 has no direction")
    khat = kvec / nk
    prof = density.velocity
    r = prof.support_radius + pad
    y = np.linspace(-r, r, n_y)
    if density.dim == 1:
        pi = prof.density((y * khat[0])[:, None])
    else:
        # per-y transverse range adapted to the support circle, so the
        # truncation edge sits exactly at the quadrature endpoints
        perp = np.array([-khat[1], khat[0]])
        rsup = prof.support_radius
        wmax = np.sqrt(np.clip(rsup * rsup - y * y, 0.0, None))
        s = np.linspace(-1.0, 1.0, n_w)
        w = wmax[:, None] * s[None, :]
        pts = y[:, None, None] * khat[None, None, :] + w[:, :, None] * perp[None, None, :]
        vals = prof.density(pts)
        pi = np.trapezoid(vals, dx=2.0 / (n_w - 1), axis=1) * wmax
    dpi = _fd4(pi, float(y[1] - y[0]))
    return ProjectedDensity(direction=khat, y=y, pi=pi, dpi=dpi)


# ---------------------------------------------------------------------------
# principal values and the dispersion function
# ---------------------------------------------------------------------------

def _cubic_midpoints(g: np.ndarray) -> np.ndarray:
    """4-point interpolation of node values onto cell midpoints (zero-padded
    ends, valid for compactly supported data)."""
    gp = np.concatenate([[0.0], g, [0.0]])
    return (-gp[:-3] + 9.0 * gp[1:-2] + 9.0 * gp[2:-1] - gp[3:]) / 16.0


def pv_integral(g: np.ndarray, y: np.ndarray, y0: float, g_at_y0: float) -> float:
    """PV int g(y)/(y - y0) dy over the grid range by midpoint-offset
    quadrature with singularity subtraction and the analytic log term."""
    h = float(y[1] - y[0])
    mids = 0.5 * (y[:-1] + y[1:])
    gm = _cubic_midpoints(g)
    a, b = float(y[0]), float(y[-1])
    if not a < y0 < b:
        return float(np.sum(gm / (mids - y0)) * h)
    core = float(np.sum((gm - g_at_y0) / (mids - y0)) * h)
    return core + g_at_y0 * math.log((b - y0) / (y0 - a))


def _interp_value(y: np.ndarray, g: np.ndarray, y0: float) -> float:
    return float(np.interp(y0, y, g))


@dataclass(frozen=True)
class BoundaryOmega:
    """Real frequency approached from above (+1) or below (-1) the axis."""

    y: float
    side: int

    def __post_init__(self):
        if self.side not in (+1, -1):
            raise ValueError("side must be +1 (y + i0) or -1 (y - i0)")


@dataclass(frozen=True)
class DispersionSample:
    k: tuple
    y: float
    side: int
    value: complex


def dispersion_from_projection(proj: ProjectedDensity, vhat: float, knorm: float,
                               omega) -> complex:
    """eps = 1 - V̂(k) int pi'(y)/(y - omega/|k|) dy; omega either complex
    off-axis or a BoundaryOmega."""
    if vhat == 0.0:
        return 1.0 + 0.0j
    if isinstance(omega, BoundaryOmega):
        y0 = omega.y / knorm
        g0 = _interp_value(proj.y, proj.dpi, y0)
        pv = pv_integral(proj.dpi, proj.y, y0, g0)
        return 1.0 - vhat * pv + 1j * omega.side * math.pi * vhat * g0
    omega = complex(omega)
    if omega.imag == 0.0:
        raise HalfPlaneError("real omega must be passed as BoundaryOmega")
    h = proj.dy
    mids = 0.5 * (proj.y[:-1] + proj.y[1:])
    gm = _cubic_midpoints(proj.dpi)
    integral = complex(np.sum(gm / (mids - omega / knorm)) * h)
    return 1.0 - vhat * integral


def dispersion(density: InitialDensity, potential: TorusPotential, k, omega,
               n_y: int = 1025) -> complex:
    """Dielectric function of the homogeneous state for wavevector tau * k."""
    kvec = np.atleast_1d(np.asarray(k, dtype=float))
    if not np.any(kvec):
        raise DirectionError("k = 0 is not a valid direction")
    proj = project_density(density, kvec, n_y=n_y)
    vhat = potential.vhat(tuple(int(i) for i in kvec))
    return dispersion_from_projection(proj, vhat, TAU * float(np.linalg.norm(kvec)), omega)


def cauchy_average(proj: ProjectedDensity, knorm: float, omega: complex) -> complex:
    """<f/(k.v - omega)> = (1/|k|) int pi(y)/(y - omega/|k|) dy, off-axis."""
    h = proj.dy
    mids = 0.5 * (proj.y[:-1] + proj.y[1:])
    gm = _cubic_midpoints(proj.pi)
    return complex(np.sum(gm / (mids - omega / knorm)) * h) / knorm


# ---------------------------------------------------------------------------
# velocity grid for the d = 2 operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LBGrid:
    """Uniform square node grid [-v_max, v_max]^2, inclusive endpoints."""

    n_v: int
    v_max: float

    @property
    def dv(self) -> float:
        return 2.0 * self.v_max / (self.n_v - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.v_max, self.v_max, self.n_v)

    def mesh(self):
        return np.meshgrid(self.axis, self.axis, indexing="ij")


def density_on_grid(density: InitialDensity, grid: LBGrid) -> np.ndarray:
    vx, vy = grid.mesh()
    return density.velocity.density(np.stack([vx, vy], axis=-1))


def _gradient_fd4(f: np.ndarray, h: float):
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[2:-2, :] = (-f[4:, :] + 8 * f[3:-1, :] - 8 * f[1:-3, :] + f[:-4, :]) / (12 * h)
    gy[:, 2:-2] = (-f[:, 4:] + 8 * f[:, 3:-1] - 8 * f[:, 1:-3] + f[:, :-4]) / (12 * h)
    return gx, gy


def _divergence_fd4(px: np.ndarray, py: np.ndarray, h: float) -> np.ndarray:
    gx, _ = _gradient_fd4(px, h)
    _, gy = _gradient_fd4(py, h)
    return gx + gy


def _line_ids(grid: LBGrid, mode) -> tuple[np.ndarray, int]:
    """Nonnegative label of the resonance line through each node, plus the
    raw offset: raw = n . i, shifted so labels start at zero."""
    n1, n2 = int(mode[0]), int(mode[1])
    i1, i2 = np.meshgrid(np.arange(grid.n_v), np.arange(grid.n_v), indexing="ij")
    raw = n1 * i1 + n2 * i2
    off = int(raw.min())
    return raw - off, off


def _line_sums(values: np.ndarray, ids: np.ndarray, n_lines: int) -> np.ndarray:
    return np.bincount(ids.ravel(), weights=values.ravel(), minlength=n_lines)


def _projection_from_grid(f: np.ndarray, grid: LBGrid, mode) -> tuple[np.ndarray, np.ndarray]:
    """(y values, pi values) of the direction-projected density, assembled
    from lattice line sums: pi(y_l) = |n| dv sum_{line} f."""
    ids, off = _line_ids(grid, mode)
    n_lines = int(ids.max()) + 1
    nn = math.hypot(mode[0], mode[1])
    sums = _line_sums(f, ids, n_lines)
    base = -grid.v_max * (mode[0] + mode[1]) + grid.dv * off
    y = (base + grid.dv * np.arange(n_lines)) / nn
    return y, sums * grid.dv * nn


def _eps_on_lines(f: np.ndarray, grid: LBGrid, mode, vhat: float,
                  guard: float = 0.1) -> np.ndarray:
    """|eps(k, k.v - i0; grad f)|^2 per resonance line, screening computed
    from the argument density itself."""
    y, pi = _projection_from_grid(f, grid, mode)
    dy = float(y[1] - y[0])
    dpi = _fd4(pi, dy)
    knorm = TAU * math.hypot(mode[0], mode[1])
    out = np.empty(len(y), dtype=complex)
    for ell in range(len(y)):
        y0 = y[ell]
        pv = pv_integral(dpi, y, y0, dpi[ell])
        out[ell] = 1.0 - vhat * pv - 1j * math.pi * vhat * dpi[ell]
    amin = float(np.min(np.abs(out)))
    if amin < guard:
        raise NearSingularDispersionError(
            f"|eps| = {amin:.3f} on a resonance line (mode {mode})")
    return np.abs(out) ** 2


def lb_operator(f: np.ndarray, potential: TorusPotential, grid: LBGrid,
                guard: float = 0.1, return_flux: bool = False):
    """Screened collision operator on the velocity grid.

    d = 1 (1D array input): identically zero by the resonance degeneracy.
    d = 2: LB(f) = div_v sum_k pi V̂(k)^2 (k x k) int_{line} |eps|^{-2}
    (f_* grad f - f grad_* f_*) ds/|k|, exact lattice line sums.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        return np.zeros_like(f)
    if potential.dim != 2:
        raise DirectionError("2-D operator needs a 2-D potential")
    h = grid.dv
    gx, gy = _gradient_fd4(f, h)
    modes, vhats = potential.one_sided()
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    for nvec, vhat in zip(modes, vhats):
        if vhat == 0.0:
            continue
        k = TAU * nvec.astype(float)
        g = k[0] * gx + k[1] * gy              # k . grad f
        ids, _ = _line_ids(grid, nvec)
        n_lines = int(ids.max()) + 1
        f_line = _line_sums(f, ids, n_lines)
        g_line = _line_sums(g, ids, n_lines)
        eps2 = _eps_on_lines(f, grid, nvec, vhat, guard)
        bracket = g * f_line[ids] - f * g_line[ids]
        # both +-k contribute equally: factor 2; lattice measure ds/|k| = dv/tau
        w = 2.0 * math.pi * vhat ** 2 * (grid.dv / TAU) / eps2[ids]
        px += w * bracket * k[0]
        py += w * bracket * k[1]
    div = _divergence_fd4(px, py, h)
    if return_flux:
        return div, (px, py)
    return div


def conservation_integrals(lb: np.ndarray, grid: LBGrid) -> tuple[float, float, float]:
    """(mass, |momentum|, energy) integrals of the operator output."""
    vx, vy = grid.mesh()
    w = grid.dv ** 2
    mass = float(np.sum(lb)) * w
    mom = math.hypot(float(np.sum(vx * lb)) * w, float(np.sum(vy * lb)) * w)
    ener = float(np.sum((vx ** 2 + vy ** 2) * lb)) * w
    return mass, mom, ener


def entropy_production(f: np.ndarray, potential: TorusPotential, grid: LBGrid,
                       guard: float = 0.1, floor: float = 1e-13) -> float:
    """- sum over resonance pairs of ((grad - grad_*) sqrt(f f_*)) . B .
    (same); nonpositive by construction of the quadrature."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise EntropyDomainError("entropy production implemented in d = 2")
    if np.min(f) < -floor:
        raise EntropyDomainError("f must be nonnegative")
    h = grid.dv
    fmax = float(np.max(f))
    sq = np.sqrt(np.clip(f, 0.0, None))
    gx, gy = _gradient_fd4(f, h)
    mask = f > floor * fmax
    with np.errstate(divide="ignore", invalid="ignore"):
        dsx = np.where(mask, gx / (2.0 * sq), 0.0)
        dsy = np.where(mask, gy / (2.0 * sq), 0.0)
    modes, vhats = potential.one_sided()
    total = 0.0
    for nvec, vhat in zip(modes, vhats):
        if vhat == 0.0:
            continue
        k = TAU * nvec.astype(float)
        ids, _ = _line_ids(grid, nvec)
        n_lines = int(ids.max()) + 1
        eps2 = _eps_on_lines(f, grid, nvec, vhat, guard)
        a = k[0] * dsx + k[1] * dsy            # k . grad sqrt f
        accum = np.zeros(n_lines)
        # w(v, v*) = sqrt(f*) (k.grad sqrt f)(v) - sqrt(f) (k.grad sqrt f)(v*)
        # sum over ordered pairs on each line of w^2 expands into line sums
        s_ff = _line_sums(sq * sq, ids, n_lines)
        s_aa = _line_sums(a * a, ids, n_lines)
        s_fa = _line_sums(sq * a, ids, n_lines)
        pair_sum = s_ff * s_aa - s_fa ** 2
        total += float(np.sum(2.0 * math.pi * vhat ** 2 / eps2 * pair_sum)
                       ) * (grid.dv / TAU) * grid.dv ** 2
    value = -2.0 * total
    return value


# ---------------------------------------------------------------------------
# the closed-form resolvent field T_omega
# ---------------------------------------------------------------------------

@dataclass
class TOmegaResult:
    field: np.ndarray            # (n, n, 2)
    divergence: np.ndarray
    bound_ratio: float           # max |T| / ((|f| + |grad f|) log(2 + |Re|/|Im|))


def t_omega(density: InitialDensity, potential: TorusPotential, omega: complex,
            grid: LBGrid, n_alpha: int = 4001, n_y: int = 2049) -> TOmegaResult:
    """Closed-form field whose divergence converges to the collision operator
    as omega -> 0 in the upper half-plane:

      T(v) = sum_k k V̂(k) [ i f(v) (1/eps(k, k.v + omega) - 1)
                             + (k.grad f)(v) Lambda_k(k.v) ],

    with Lambda_k the symmetrized alpha-integral of the two-sided Cauchy
    averages against 1/(k.v + alpha +- omega/2).
    """
    omega = complex(omega)
    if omega.imag <= 0.0:
        raise HalfPlaneError("need Im omega > 0")
    vx, vy = grid.mesh()
    f = density_on_grid(density, grid)
    gx, gy = _gradient_fd4(f, grid.dv)
    tx = np.zeros_like(f)
    ty = np.zeros_like(f)
    modes, vhats = potential.one_sided()
    for nvec, vhat in zip(modes, vhats):
        if vhat == 0.0:
            continue
        for sign in (+1, -1):
            mode = sign * nvec
            k = TAU * mode.astype(float)
            knorm = float(np.linalg.norm(k))
            proj_p = project_density(density, mode, n_y=n_y)
            proj_m = project_density(density, -mode, n_y=n_y)
            kv = k[0] * vx + k[1] * vy
            kgf = k[0] * gx + k[1] * gy
            # term 1: i f (1/eps(k, k.v + omega) - 1) on an X-grid
            xg = np.linspace(kv.min() - 1e-9, kv.max() + 1e-9, 801)
            e1 = np.array([1.0 / dispersion_from_projection(proj_p, vhat, knorm,
                                                            complex(x, 0) + omega) - 1.0
                           for x in xg])
            lam = _lambda_alpha(proj_p, proj_m, vhat, knorm, omega, xg, n_alpha)
            t1 = 1j * f * (np.interp(kv, xg, e1.real) + 1j * np.interp(kv, xg, e1.imag))
            t2 = kgf * (np.interp(kv, xg, lam.real) + 1j * np.interp(kv, xg, lam.imag))
            tot = t1 + t2
            tx = tx + k[0] * vhat * tot
            ty = ty + k[1] * vhat * tot
    # evenness of V̂ makes the field real; fold residual imaginary roundoff
    txr, tyr = tx.real, ty.real
    div = _divergence_fd4(txr, tyr, grid.dv)
    norm_t = np.sqrt(txr ** 2 + tyr ** 2)
    weight = (np.abs(f) + np.sqrt(gx ** 2 + gy ** 2)) * math.log(
        2.0 + abs(omega.real) / omega.imag)
    dmax = float(np.max(norm_t))
    ratio = float(np.max(norm_t / np.maximum(weight, 1e-3 * np.max(weight))))
    field = np.stack([txr, tyr], axis=-1)
    return TOmegaResult(field=field, divergence=div, bound_ratio=ratio)


def _lambda_alpha(proj_p: ProjectedDensity, proj_m: ProjectedDensity, vhat: float,
                  knorm: float, omega: complex, xg: np.ndarray,
                  n_alpha: int) -> np.ndarray:
    """Lambda(X) = (1/2pi) int dalpha (1/2)[(X + a + w/2)^{-1} - (X + a - w/2)^{-1}]
    * V̂ / (eps(k, w/2 - a) eps(-k, w/2 + a)) * [<f/(k.v + a - w/2)> - <f/(k.v + a + w/2)>]."""
    y_sup = max(abs(proj_p.y[0]), abs(proj_p.y[-1]))
    a_max = knorm * y_sup + max(60.0 * abs(omega), 12.0) + float(np.max(np.abs(xg)))
    alpha = np.linspace(-a_max, a_max, n_alpha)
    da = alpha[1] - alpha[0]
    eps_m = np.array([dispersion_from_projection(proj_p, vhat, knorm, 0.5 * omega - a)
                      for a in alpha])
    eps_p = np.array([dispersion_from_projection(proj_m, vhat, knorm, 0.5 * omega + a)
                      for a in alpha])
    cav_m = np.array([cauchy_average(proj_p, knorm, -a + 0.5 * omega) for a in alpha])
    cav_p = np.array([cauchy_average(proj_p, knorm, -a - 0.5 * omega) for a in alpha])
    core = vhat / (eps_m * eps_p) * (cav_m - cav_p)
    out = np.empty(len(xg), dtype=complex)
    for i, x in enumerate(xg):
        first = 0.5 * (1.0 / (x + alpha + 0.5 * omega) - 1.0 / (x + alpha - 0.5 * omega))
        out[i] = np.sum(first * core) * da / TAU
    return out


# ---------------------------------------------------------------------------
# long-time consistency of the time-domain drive with the operator
# ---------------------------------------------------------------------------

@dataclass
class LaplaceConsistencyResult:
    t_n: list
    deviations: list              # relative deviation per t_N (max over tests)
    lhs: dict                     # label -> per-t_N weighted averages
    rhs: dict                     # label -> int chi * <psi, LB f>
    details: dict


def smooth_window(tau: np.ndarray, lo: float = 0.5, hi: float = 1.5) -> np.ndarray:
    """C^inf bump on (lo, hi), normalized to unit integral on return."""
    t = (tau - lo) / (hi - lo)
    inside = (t > 0) & (t < 1)
    out = np.zeros_like(tau)
    tt = np.clip(t, 1e-12, 1 - 1e-12)
    out[inside] = np.exp(-1.0 / (tt[inside] * (1.0 - tt[inside])))
    return out


def laplace_consistency(density: InitialDensity, potential: TorusPotential,
                        pair_times: np.ndarray, pair_values: dict,
                        psi_fields: dict, grid: LBGrid, t_n_list=(2.0, 4.0, 8.0),
                        window=(0.5, 1.5)) -> LaplaceConsistencyResult:
    """Compare int chi(tau) D_psi(t_N tau) dtau from the time-domain drive
    series with (int chi) <psi, LB(f)> for each test function psi."""
    lo, hi = window
    if potential.dim == 1:
        # the resonance degeneracy makes the d = 1 operator identically zero
        rhs = {lab: 0.0 for lab in psi_fields}
    else:
        f = density_on_grid(density, grid)
        lb = lb_operator(f, potential, grid)
        w2 = grid.dv ** 2
        rhs = {lab: float(np.sum(psi * lb)) * w2 for lab, psi in psi_fields.items()}
    tq = np.linspace(lo, hi, 257)
    chi = smooth_window(tq, lo, hi)
    chi /= np.trapezoid(chi, tq)
    lhs = {lab: [] for lab in psi_fields}
    deviations = []
    # one common scale: deviations of individually tiny pairings should not
    # blow up the relative measure
    scale = max(math.sqrt(sum(v * v for v in rhs.values()) / max(len(rhs), 1)), 1e-300)
    for t_n in t_n_list:
        if t_n * hi > pair_times[-1] + 1e-9:
            raise ValueError(f"drive series too short for t_N = {t_n}")
        devs = []
        for lab in psi_fields:
            series = np.interp(t_n * tq, pair_times, pair_values[lab])
            val = float(np.trapezoid(chi * series, tq))
            lhs[lab].append(val)
            devs.append(abs(val - rhs[lab]) / scale)
        deviations.append(max(devs))
    return LaplaceConsistencyResult(t_n=list(t_n_list), deviations=deviations,
                                    lhs=lhs, rhs=rhs,
                                    details={"window": window, "scale": scale})
