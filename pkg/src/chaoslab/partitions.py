"""Set-partition combinatorics: the exact algebra linking moments, cumulants,
marginal pairings, and correlation-function pairings, plus the unbiased
k-statistics used by the Monte Carlo estimators.

All partition-sum coefficients are assembled in exact integer/rational
arithmetic and converted to float only when multiplied into data; the
alternating sums involved cancel catastrophically otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
import math

import numpy as np

MAX_PARTITION_ORDER = 10


class PartitionSizeError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# set partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SetPartition:
    """Partition of {0, ..., m-1}; blocks sorted by least element."""

    size: int
    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = sorted(i for b in self.blocks for i in b)
        if seen != list(range(self.size)):
            raise ValueError("blocks must partition {0..m-1} disjointly")
        if list(self.blocks) != sorted((tuple(sorted(b)) for b in self.blocks),
                                       key=lambda b: b[0]):
            raise ValueError("blocks not in canonical order")

    def __len__(self) -> int:
        return len(self.blocks)

    def block_sizes(self) -> tuple[int, ...]:
        return tuple(len(b) for b in self.blocks)


def make_partition(blocks) -> SetPartition:
    """Canonicalize and wrap a collection of blocks."""
    canon = tuple(sorted((tuple(sorted(b)) for b in blocks), key=lambda b: b[0]))
    size = sum(len(b) for b in canon)
    return SetPartition(size=size, blocks=canon)


def enumerate_partitions(m: int) -> list[SetPartition]:
    """All partitions of {0..m-1} via restricted-growth strings, each once,
    in canonical (lexicographic RGS) order."""
    if not 1 <= m <= MAX_PARTITION_ORDER:
        raise PartitionSizeError(
            f"m = {m} outside [1, {MAX_PARTITION_ORDER}] (Bell growth guard)")
    out = []
    rgs = [0] * m
    maxes = [0] * m

    def rec(i: int):
        if i == m:
            nblocks = max(rgs) + 1
            blocks = [[] for _ in range(nblocks)]
            for idx, b in enumerate(rgs):
                blocks[b].append(idx)
            out.append(make_partition(blocks))
            return
        top = maxes[i - 1] if i > 0 else -1
        for b in range(top + 2):
            rgs[i] = b
            maxes[i] = max(top, b)
            rec(i + 1)

    rec(0)
    return out


@lru_cache(maxsize=None)
def bell_number(n: int) -> int:
    """Bell numbers by the Bell-triangle recurrence (independent oracle)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


@dataclass(frozen=True)
class NestedPartition:
    """A partition `outer` of the blocks of an inner partition of {0..m-1}.

    `outer` partitions the block-index set {0..len(inner)-1}.
    """

    inner: SetPartition
    outer: SetPartition

    def __post_init__(self):
        if self.outer.size != len(self.inner):
            raise ValueError("outer must partition the blocks of inner")


# ---------------------------------------------------------------------------
# moment <-> cumulant transforms
# ---------------------------------------------------------------------------

def _mobius_weight(nblocks: int) -> int:
    return (-1) ** (nblocks - 1) * math.factorial(nblocks - 1)


def moments_to_cumulants(moments) -> np.ndarray:
    """kappa_m = sum over partitions of (-1)^{|pi|-1} (|pi|-1)! prod mu_{|B|}."""
    mu = np.asarray(moments, dtype=np.float64)
    out = np.empty_like(mu)
    for m in range(1, len(mu) + 1):
        acc = 0.0
        for pi in enumerate_partitions(m):
            term = Fraction(_mobius_weight(len(pi)))
            val = float(term)
            for b in pi.blocks:
                val *= mu[len(b) - 1]
            acc += val
        out[m - 1] = acc
    return out


def cumulants_to_moments(cumulants) -> np.ndarray:
    """mu_m = sum over partitions of prod kappa_{|B|} (cluster expansion)."""
    ka = np.asarray(cumulants, dtype=np.float64)
    out = np.empty_like(ka)
    for m in range(1, len(ka) + 1):
        acc = 0.0
        for pi in enumerate_partitions(m):
            val = 1.0
            for b in pi.blocks:
                val *= ka[len(b) - 1]
            acc += val
        out[m - 1] = acc
    return out


def correlation_pairing_from_marginal_pairings(marginal: dict, m: int) -> float:
    """Pair the m-point connected (correlation) function against phi^{tensor m}
    given the marginal pairings marginal[l] = int phi^{tensor l} F^l, l = 1..m.

    Valid because phi^{tensor m} is symmetric, so only block sizes enter.
    """
    for ell in range(1, m + 1):
        if ell not in marginal:
            raise KeyError(f"marginal pairing for l = {ell} missing")
    acc = 0.0
    for pi in enumerate_partitions(m):
        val = float(_mobius_weight(len(pi)))
        for b in pi.blocks:
            val *= marginal[len(b)]
        acc += val
    return acc


def distinct_tuple_coefficients(powers: tuple[int, ...]) -> list[tuple[int, tuple[int, ...]]]:
    """Expansion of sum over distinct ordered index tuples of prod_i x_{j_i}^{a_i}
    in power sums: returns (coefficient, merged-power tuple) per partition,
    with coefficient prod_B (-1)^{|B|-1}(|B|-1)!."""
    ell = len(powers)
    out = []
    for pi in enumerate_partitions(ell):
        coeff = 1
        merged = []
        for b in pi.blocks:
            coeff *= (-1) ** (len(b) - 1) * math.factorial(len(b) - 1)
            merged.append(sum(powers[i] for i in b))
        out.append((coeff, tuple(merged)))
    return out


# ---------------------------------------------------------------------------
# the finite-N coefficients tying empirical-measure cumulants to correlation
# pairings
# ---------------------------------------------------------------------------

def _falling_product(r: int, N: int) -> Fraction:
    """prod_{i=1}^{r-1} (1 - i/N), exactly."""
    out = Fraction(1)
    for i in range(1, r):
        out *= Fraction(N - i, N)
    return out


def coefficient_K_N(rho: NestedPartition, N: int) -> float:
    """K_N over re-partitions sigma of the outer blocks:
    sum_sigma (-1)^{|sigma|-1}(|sigma|-1)! prod_{C in sigma}
    prod_{i=1}^{r_C - 1} (1 - i/N), with r_C the number of inner blocks
    covered by C."""
    if N < rho.inner.size:
        raise ValueError(f"need N >= ground size {rho.inner.size}, got {N}")
    sizes = [len(d) for d in rho.outer.blocks]
    acc = Fraction(0)
    for sigma in enumerate_partitions(len(sizes)):
        term = Fraction(_mobius_weight(len(sigma)))
        for c in sigma.blocks:
            term *= _falling_product(sum(sizes[i] for i in c), N)
        acc += term
    return float(acc)


def cumulant_pairing_terms(m: int):
    """All (pi, rho, n_exponent) triplets in the expansion of the m-th
    cumulant of the empirical-measure observable:

        kappa_m = sum_pi N^{|pi| - m} sum_{rho | pi} K_N(rho)
                  prod_{D in rho} int (tensor_{B in D} phi^{|B|}) G^{|D|}.

    n_exponent is |pi| - m.
    """
    out = []
    for pi in enumerate_partitions(m):
        for outer in enumerate_partitions(len(pi)):
            out.append((pi, NestedPartition(pi, outer), len(pi) - m))
    return out


# ---------------------------------------------------------------------------
# k-statistics: unbiased cumulant estimators
# ---------------------------------------------------------------------------

def _k_stats_from_power_sums(s: np.ndarray, n, m: int):
    """k-statistics of orders 1..4 from raw power sums s[r-1] = sum x^r.

    `s` has shape (4, ...) and `n` broadcasts; returns the order-m statistic.
    """
    n = np.asarray(n, dtype=np.float64)
    s1, s2, s3, s4 = s[0], s[1], s[2], s[3]
    if m == 1:
        return s1 / n
    if m == 2:
        return (n * s2 - s1 ** 2) / (n * (n - 1.0))
    if m == 3:
        return (n ** 2 * s3 - 3.0 * n * s2 * s1 + 2.0 * s1 ** 3) / (
            n * (n - 1.0) * (n - 2.0))
    if m == 4:
        num = (-6.0 * s1 ** 4 + 12.0 * n * s1 ** 2 * s2 - 3.0 * n * (n - 1.0) * s2 ** 2
               - 4.0 * n * (n + 1.0) * s1 * s3 + n ** 2 * (n + 1.0) * s4)
        return num / (n * (n - 1.0) * (n - 2.0) * (n - 3.0))
    raise PartitionSizeError("k-statistics implemented for m <= 4 only")


def k_statistics(samples, m: int) -> tuple[float, float]:
    """Fisher k-statistic of order m (unbiased: E[k_m] = kappa_m) with a
    delete-one jackknife standard error.

    Sample values are centered by their mean before forming power sums
    (k_m is shift invariant for m >= 2), which removes the dominant
    cancellation in the raw-moment formulas.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    r = x.size
    if not 1 <= m <= 4:
        raise PartitionSizeError("order must be in 1..4")
    if r <= m:
        raise InsufficientDataError(f"need more than m = {m} samples, got {r}")
    shift = float(np.mean(x)) if m >= 2 else 0.0
    xc = x - shift
    pows = np.stack([xc, xc ** 2, xc ** 3, xc ** 4])
    s_full = pows.sum(axis=1)
    value = float(_k_stats_from_power_sums(s_full, r, m))
    if m == 1:
        value += shift
    # jackknife over deleted samples, vectorized through the power sums
    s_del = s_full[:, None] - pows
    theta = _k_stats_from_power_sums(s_del, r - 1, m)
    stderr = float(np.sqrt((r - 1) / r * np.sum((theta - np.mean(theta)) ** 2)))
    return value, stderr
