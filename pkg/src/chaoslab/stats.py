"""Distributional distances to the standard Gaussian and the CLT harness.

Distances are computed against the analytic normal CDF (scipy's erf-based
ndtr, accurate to machine precision), not a Gaussian sample: this halves the
noise of every comparison.  The 1-Wasserstein distance uses the exact
per-order-statistic quantile coupling, with segments split at the crossing
point and the closed-form antiderivative of the normal quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri


class DegenerateObservableError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalSample:
    """Sorted sample values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("need a finite 1-D sample")
        if np.any(np.diff(v) < 0):
            object.__setattr__(self, "values", np.sort(v))

    @property
    def count(self) -> int:
        return self.values.size


def _require_size(sample: EmpiricalSample, n: int = 100):
    if sample.count < n:
        raise ValueError(f"need at least {n} sample points")


def kolmogorov_distance(sample: EmpiricalSample) -> float:
    """sup_x |F_emp(x) - Phi(x)|, both one-sided gaps at every data point."""
    _require_size(sample)
    x = sample.values
    r = x.size
    cdf = ndtr(x)
    upper = np.max(np.abs(np.arange(1, r + 1) / r - cdf))
    lower = np.max(np.abs(cdf - np.arange(0, r) / r))
    return float(max(upper, lower))


def _quantile_antiderivative(u: np.ndarray) -> np.ndarray:
    """A(u) = int_0^u Phi^{-1} = -phi(Phi^{-1}(u)), with A(0) = A(1) = 0."""
    uu = np.clip(u, 1e-300, 1.0 - 1e-16)
    q = ndtri(uu)
    val = -np.exp(-0.5 * q * q) / math.sqrt(2.0 * math.pi)
    return np.where((u <= 0.0) | (u >= 1.0), 0.0, val)


def wasserstein1_distance(sample: EmpiricalSample) -> float:
    """int_0^1 |F_emp^{-1}(u) - Phi^{-1}(u)| du, exact per order statistic."""
    _require_size(sample)
    x = sample.values
    r = x.size
    u_lo = np.arange(0, r) / r
    u_hi = np.arange(1, r + 1) / r
    u_star = np.clip(ndtr(x), u_lo, u_hi)     # crossing point inside segment
    a_lo = _quantile_antiderivative(u_lo)
    a_hi = _quantile_antiderivative(u_hi)
    a_st = _quantile_antiderivative(u_star)
    # below the crossing x >= quantile, above it x <= quantile
    below = x * (u_star - u_lo) - (a_st - a_lo)
    above = (a_hi - a_st) - x * (u_hi - u_star)
    return float(np.sum(below + above))


def distances_with_bootstrap(sample: EmpiricalSample, n_boot: int = 64,
                             seed: int = 0):
    """(d_K, se, d_W, se) with a deterministic resampling bootstrap."""
    dk = kolmogorov_distance(sample)
    dw = wasserstein1_distance(sample)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed, 777))))
    r = sample.count
    dks = np.empty(n_boot)
    dws = np.empty(n_boot)
    for b in range(n_boot):
        res = EmpiricalSample(np.sort(rng.choice(sample.values, size=r, replace=True)))
        dks[b] = kolmogorov_distance(res)
        dws[b] = wasserstein1_distance(res)
    return dk, float(np.std(dks, ddof=1)), dw, float(np.std(dws, ddof=1))


# ---------------------------------------------------------------------------
# CLT harness
# ---------------------------------------------------------------------------

@dataclass
class CltRow:
    n: int
    replicas: int
    d_k: float
    d_k_stderr: float
    d_w: float
    d_w_stderr: float
    sigma_used: float
    noise_floor: float


@dataclass
class CltResult:
    rows: list
    slope: object                 # SlopeFit of log d_K vs log N (or None)
    monotone_within_floor: bool

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("N,R,d_K,stderr,d_W,stderr,sigma_used\n")
            for r in self.rows:
                fh.write(f"{r.n},{r.replicas},{r.d_k!r},{r.d_k_stderr!r},"
                         f"{r.d_w!r},{r.d_w_stderr!r},{r.sigma_used!r}\n")


def clt_experiment(samples_by_n: dict, sigma_by_n: dict | None = None,
                   sigma_floor: float = 1e-8, seed: int = 0) -> CltResult:
    """Standardize X = sqrt(N) (Y - mean) / sigma per N and measure both
    distances to the standard normal.

    samples_by_n: {N: array of replica values Y}; sigma_by_n optionally
    supplies the fluctuation scale sigma = sqrt(N Var) (e.g. the limiting
    variance from the correction solver); by default the Monte Carlo value
    is used.  The R^{-1/2} noise floor is reported next to every distance.
    """
    from .ensemble import scaling_slope

    rows = []
    for n in sorted(samples_by_n):
        y = np.asarray(samples_by_n[n], dtype=np.float64)
        r = y.size
        if sigma_by_n is not None and n in sigma_by_n:
            sigma = float(sigma_by_n[n])
        else:
            sigma = float(np.std(y, ddof=1) * math.sqrt(n))
        if sigma < sigma_floor:
            raise DegenerateObservableError(
                f"fluctuation scale {sigma} below threshold (constant observable?)")
        x = math.sqrt(n) * (y - float(np.mean(y))) / sigma
        dk, dk_se, dw, dw_se = distances_with_bootstrap(EmpiricalSample(np.sort(x)),
                                                        seed=seed + n)
        rows.append(CltRow(n=n, replicas=r, d_k=dk, d_k_stderr=dk_se,
                           d_w=dw, d_w_stderr=dw_se, sigma_used=sigma,
                           noise_floor=1.0 / math.sqrt(r)))
    monotone = all(rows[i + 1].d_k <= rows[i].d_k + 2.0 * rows[i + 1].noise_floor
                   for i in range(len(rows) - 1))
    slope = None
    if len(rows) >= 3:
        pts = [(row.n, row.d_k, max(row.d_k_stderr, 1e-12)) for row in rows
               if row.d_k > 2.0 * row.noise_floor]
        if len(pts) >= 3:
            slope = scaling_slope(pts)
    return CltResult(rows=rows, slope=slope, monotone_within_floor=monotone)
