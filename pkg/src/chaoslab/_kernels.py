"""Hot inner loops (batched velocity-Verlet trajectories, two-particle
correlation-mode RK4) compiled with numba when available, with vectorized
numpy fallbacks of identical semantics.

Replicas are strictly independent inside every parallel region: each prange
iteration touches only its own rows, so results are bit-identical for any
thread count.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAVE_NUMBA = False

TAU = 2.0 * math.pi


# ---------------------------------------------------------------------------
# batched velocity Verlet, d = 1, Fourier-sum forces
# ---------------------------------------------------------------------------

def _force_batch_py(x, modes, vhat):
    N = x.shape[1]
    kk = modes.astype(np.float64)
    ang = TAU * x[:, :, None] * kk[None, None, :]
    c = np.cos(ang)
    s = np.sin(ang)
    C = c.sum(axis=1)
    S = s.sum(axis=1)
    w = 2.0 * TAU * kk * vhat / N
    return np.einsum("k,bnk->bn", w, s * C[:, None, :] - c * S[:, None, :])


def _verlet_batch_d1_py(x, v, modes, vhat, dt, nsteps):
    """Numpy fallback; kick-drift-kick with force reuse across steps."""
    f = _force_batch_py(x, modes, vhat)
    half = 0.5 * dt
    for _ in range(nsteps):
        v += half * f
        x += dt * v
        x %= 1.0
        f = _force_batch_py(x, modes, vhat)
        v += half * f
    return x, v


if HAVE_NUMBA:

    # Taylor coefficients valid to < 2e-16 relative for |d| <= 1.0; the
    # wrapper asserts tau*dt*|v| stays inside that window.
    _S3, _S5, _S7 = -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0
    _S9, _S11, _S13 = 1.0 / 362880.0, -1.0 / 39916800.0, 1.0 / 6227020800.0
    _S15, _S17 = -1.0 / 1307674368000.0, 1.0 / 355687428096000.0
    _C2, _C4, _C6 = -0.5, 1.0 / 24.0, -1.0 / 720.0
    _C8, _C10, _C12 = 1.0 / 40320.0, -1.0 / 3628800.0, 1.0 / 479001600.0
    _C14, _C16 = -1.0 / 87178291200.0, 1.0 / 20922789888000.0
    _C18 = -1.0 / 6402373705728000.0

    @nb.njit(inline="always")
    def _force_from_phases(c1, s1, cn, sn, modes, vhat, nmax, C, S, f):  # pragma: no cover
        """Mean-field force from per-particle phases e^{i tau x_j}; higher
        modes by the Chebyshev recurrence, vectorizable array sweeps."""
        N = c1.shape[0]
        K = modes.shape[0]
        for j in range(N):
            f[j] = 0.0
        acc_c = 0.0
        acc_s = 0.0
        for j in range(N):
            cn[j] = c1[j]
            sn[j] = s1[j]
            acc_c += c1[j]
            acc_s += s1[j]
        C[1] = acc_c
        S[1] = acc_s
        for n in range(2, nmax + 1):
            acc_c = 0.0
            acc_s = 0.0
            for j in range(N):
                cj = cn[j] * c1[j] - sn[j] * s1[j]
                sj = sn[j] * c1[j] + cn[j] * s1[j]
                cn[j] = cj
                sn[j] = sj
                acc_c += cj
                acc_s += sj
            C[n] = acc_c
            S[n] = acc_s
        # second sweep: rebuild per-mode phases and accumulate the force
        for j in range(N):
            cn[j] = 1.0
            sn[j] = 0.0
        prev = 0
        for k in range(K):
            n = modes[k]
            while prev < n:
                for j in range(N):
                    cj = cn[j] * c1[j] - sn[j] * s1[j]
                    sj = sn[j] * c1[j] + cn[j] * s1[j]
                    cn[j] = cj
                    sn[j] = sj
                prev += 1
            w = 2.0 * TAU * n * vhat[k] / N
            cw = C[n]
            sw = S[n]
            for j in range(N):
                f[j] += w * (sn[j] * cw - cn[j] * sw)

    @nb.njit(parallel=True, fastmath=True, cache=True)
    def _verlet_kdk_nb(x, v, modes, vhat, dt, nsteps):  # pragma: no cover
        B, N = x.shape
        nmax = 0
        for k in range(modes.shape[0]):
            if modes[k] > nmax:
                nmax = modes[k]
        half = 0.5 * dt
        rot = TAU * dt
        for b in nb.prange(B):
            c1 = np.empty(N)
            s1 = np.empty(N)
            cn = np.empty(N)
            sn = np.empty(N)
            f = np.empty(N)
            C = np.empty(nmax + 1)
            S = np.empty(nmax + 1)
            for j in range(N):
                a = TAU * x[b, j]
                c1[j] = math.cos(a)
                s1[j] = math.sin(a)
            _force_from_phases(c1, s1, cn, sn, modes, vhat, nmax, C, S, f)
            for it in range(nsteps):
                # half kick + drift; phases rotate by exactly tau dt v_half
                for j in range(N):
                    vh = v[b, j] + half * f[j]
                    v[b, j] = vh
                    x[b, j] += dt * vh
                    d = rot * vh
                    d2 = d * d
                    sd = d * (1.0 + d2 * (_S3 + d2 * (_S5 + d2 * (_S7 + d2 * (_S9
                        + d2 * (_S11 + d2 * (_S13 + d2 * (_S15 + d2 * _S17))))))))
                    cd = 1.0 + d2 * (_C2 + d2 * (_C4 + d2 * (_C6 + d2 * (_C8
                        + d2 * (_C10 + d2 * (_C12 + d2 * (_C14 + d2 * (_C16
                        + d2 * _C18))))))))
                    cj = c1[j] * cd - s1[j] * sd
                    sj = s1[j] * cd + c1[j] * sd
                    c1[j] = cj
                    s1[j] = sj
                if it % 64 == 63:
                    for j in range(N):
                        r = 1.5 - 0.5 * (c1[j] * c1[j] + s1[j] * s1[j])
                        c1[j] *= r
                        s1[j] *= r
                _force_from_phases(c1, s1, cn, sn, modes, vhat, nmax, C, S, f)
                for j in range(N):
                    v[b, j] += half * f[j]
            for j in range(N):
                x[b, j] %= 1.0
        return x, v


def verlet_batch_d1(x, v, modes, vhat, dt, nsteps, use_numba=True):
    """Advance a (B, N) batch by nsteps velocity-Verlet steps, in place."""
    if nsteps == 0:
        return x, v
    modes = np.ascontiguousarray(modes, dtype=np.int64)
    vhat = np.ascontiguousarray(vhat, dtype=np.float64)
    if modes.size == 0:
        x += (dt * nsteps) * v
        x %= 1.0
        return x, v
    if HAVE_NUMBA and use_numba:
        # the compiled kernel's phase rotation is a short Taylor series,
        # accurate only while single-step angles stay below ~1 rad; bound
        # the velocity growth over this segment by the force sup-norm
        grad_sup = float(np.sum(2.0 * TAU * np.abs(modes) * np.abs(vhat)))
        vmax = float(np.max(np.abs(v))) + grad_sup * dt * nsteps
        if vmax < 1.0 / (TAU * dt):
            return _verlet_kdk_nb(x, v, modes, vhat, dt, nsteps)
    return _verlet_batch_d1_py(x, v, modes, vhat, dt, nsteps)


# ---------------------------------------------------------------------------
# two-particle mode correlation: RK4 on
#   dH/dt = -i (ka_a - ka_b) H + c_a A_b - c_b B_a + S,
#   A_b = sum_a w_a H[a,b],  B_a = sum_b w_b H[a,b],
#   S[a,b] = c_a f_b - f_a c_b.
# ---------------------------------------------------------------------------

def h2_rhs_numpy(H, ka, c, f, w):
    """Reference implementation of the mode right-hand side."""
    B = H @ w
    A = w @ H
    phase = -1j * (ka[:, None] - ka[None, :])
    return phase * H + np.outer(c, A + f) - np.outer(B + f, c)


if HAVE_NUMBA:

    @nb.njit(parallel=True, cache=True)
    def _h2_rhs_nb(H, ka, c, f, w, out):  # pragma: no cover
        P = H.shape[0]
        A = np.zeros(P, dtype=np.complex128)
        B = np.zeros(P, dtype=np.complex128)
        for a in nb.prange(P):
            acc = 0.0 + 0.0j
            for b in range(P):
                acc += w[b] * H[a, b]
            B[a] = acc
        for b in nb.prange(P):
            acc = 0.0 + 0.0j
            for a in range(P):
                acc += w[a] * H[a, b]
            A[b] = acc
        for a in nb.prange(P):
            for b in range(P):
                out[a, b] = (-1j * (ka[a] - ka[b])) * H[a, b] \
                    + c[a] * (A[b] + f[b]) - (B[a] + f[a]) * c[b]
        return out

    @nb.njit(parallel=True, cache=True)
    def _axpy_nb(out, H, coef, K):  # pragma: no cover
        P = H.shape[0]
        for a in nb.prange(P):
            for b in range(P):
                out[a, b] = H[a, b] + coef * K[a, b]
        return out

    @nb.njit(parallel=True, cache=True)
    def _rk4_combine_nb(H, dt, k1, k2, k3, k4):  # pragma: no cover
        P = H.shape[0]
        c = dt / 6.0
        for a in nb.prange(P):
            for b in range(P):
                H[a, b] += c * (k1[a, b] + 2.0 * (k2[a, b] + k3[a, b]) + k4[a, b])
        return H


class H2ModeStepper:
    """RK4 integrator for one retained mode of the correlation system."""

    def __init__(self, ka, c, f, w, use_numba=True):
        P = ka.shape[0]
        self.ka = np.ascontiguousarray(ka, dtype=np.float64)
        self.c = np.ascontiguousarray(c, dtype=np.complex128)
        self.f = np.ascontiguousarray(f, dtype=np.float64)
        self.fc = self.f.astype(np.complex128)
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.use_numba = HAVE_NUMBA and use_numba
        if self.use_numba:
            self._buf = [np.empty((P, P), dtype=np.complex128) for _ in range(5)]

    def rhs(self, H):
        if self.use_numba:
            out = np.empty_like(H)
            return _h2_rhs_nb(H, self.ka, self.c, self.fc, self.w, out)
        return h2_rhs_numpy(H, self.ka, self.c, self.f, self.w)

    def step(self, H, dt):
        if self.use_numba:
            k1, k2, k3, k4, tmp = self._buf
            _h2_rhs_nb(H, self.ka, self.c, self.fc, self.w, k1)
            _axpy_nb(tmp, H, 0.5 * dt, k1)
            _h2_rhs_nb(tmp, self.ka, self.c, self.fc, self.w, k2)
            _axpy_nb(tmp, H, 0.5 * dt, k2)
            _h2_rhs_nb(tmp, self.ka, self.c, self.fc, self.w, k3)
            _axpy_nb(tmp, H, dt, k3)
            _h2_rhs_nb(tmp, self.ka, self.c, self.fc, self.w, k4)
            _rk4_combine_nb(H, dt, k1, k2, k3, k4)
        else:
            k1 = self.rhs(H)
            k2 = self.rhs(H + 0.5 * dt * k1)
            k3 = self.rhs(H + 0.5 * dt * k2)
            k4 = self.rhs(H + dt * k3)
            H += (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        return H


def set_threads(n: int | None):
    """Bound the numba thread pool; no-op without numba."""
    if HAVE_NUMBA and n is not None:
        nb.set_num_threads(max(1, int(n)))
