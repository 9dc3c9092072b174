import math

import numpy as np
import pytest

from chaoslab.bogolyubov import (
    H2Error,
    ModeCorrelation,
    VelocityGrid,
    bogolyubov_drive,
    evolve_h2,
    limiting_variance,
    retained_modes,
    source_mode,
)
from chaoslab.model import (
    density_preset,
    observable_preset,
    potential_from_cosines,
    potential_preset,
)

TAU = 2.0 * math.pi


def _grid(n_v=65, v_max=2.2, dt=2e-3, dim=1):
    return VelocityGrid(n_v=n_v, v_max=v_max, dim=dim, dt=dt)


def _homog():
    return density_preset("homogeneous_narrow")   # bump radius 1.5


def test_source_zero_coupling():
    dens = _homog()
    pot = potential_from_cosines(1, {(2,): 0.3})
    s = source_mode(dens, pot, (1,), _grid())
    assert np.max(np.abs(s)) == 0.0


def test_source_matches_hand_formula():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6})
    grid = _grid()
    s = source_mode(dens, pot, (1,), grid)
    nodes = grid.nodes()
    f = dens.velocity.density(nodes)
    fp = dens.velocity.grad_density(nodes)[:, 0]
    vhat = 0.3
    idx = [3, 17, 30, 41, 60]
    for a in idx:
        for b in idx:
            expect = 1j * vhat * TAU * (fp[a] * f[b] - f[a] * fp[b])
            assert s[a, b] == pytest.approx(expect, abs=1e-14)


def test_source_hermitian():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6})
    s = source_mode(dens, pot, (1,), _grid())
    assert np.max(np.abs(s - s.conj().T)) < 1e-15


def test_zero_coupling_evolution_stays_zero():
    dens = _homog()
    pot = potential_from_cosines(1, {})
    traj = evolve_h2(dens, pot, _grid(), 0.2, sample_times=(0.2,))
    assert traj.modes == []
    drive = bogolyubov_drive(traj.snapshots[0.2], pot)
    assert np.max(np.abs(drive)) == 0.0


def test_short_time_duhamel():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid(dt=1e-3)
    traj = evolve_h2(dens, pot, grid, 1e-3, sample_times=(1e-3,))
    h = traj.snapshots[1e-3].arrays[(1,)]
    s = source_mode(dens, pot, (1,), grid)
    assert np.max(np.abs(h - grid.dt * s)) < 5.0 * grid.dt ** 2 * np.max(np.abs(s))


def test_hermiticity_preserved_long_run():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid(n_v=49, dt=4e-3)
    traj = evolve_h2(dens, pot, grid, 4.0, sample_times=(4.0,))
    assert traj.snapshots[4.0].hermiticity_defect() < 1e-9


def test_rk4_self_convergence():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    a = evolve_h2(dens, pot, _grid(n_v=49, dt=4e-3), 1.0, sample_times=(1.0,))
    b = evolve_h2(dens, pot, _grid(n_v=49, dt=2e-3), 1.0, sample_times=(1.0,))
    diff = np.max(np.abs(a.snapshots[1.0].arrays[(1,)] - b.snapshots[1.0].arrays[(1,)]))
    scale = np.max(np.abs(b.snapshots[1.0].arrays[(1,)]))
    assert diff < 1e-6 * scale


def test_drive_real_and_conservative():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid()
    traj = evolve_h2(dens, pot, grid, 1.0, sample_times=(1.0,))
    drive = bogolyubov_drive(traj.snapshots[1.0], pot)
    assert np.max(np.abs(drive)) > 0
    # divergence form: the weighted grid sum telescopes to zero exactly
    total = float(np.sum(drive * grid.weights()))
    assert abs(total) < 1e-10 * np.max(np.abs(drive))


def test_one_dimensional_drive_relaxes():
    # the resonance k (v - v*) = 0 forces v = v* in d = 1 where the source
    # bracket vanishes: after phase mixing the drive must die out
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid(n_v=97, dt=2e-3)

    def psi(nodes):
        return nodes[:, 0] ** 2

    traj = evolve_h2(dens, pot, grid, 6.0, pair_observables=[("v2", psi)],
                     pair_stride=25)
    series = np.abs(traj.pair_values["v2"])
    early = series[(traj.pair_times > 0.1) & (traj.pair_times < 1.0)].max()
    late = series[traj.pair_times > 5.0].max()
    assert late < 0.05 * early


def test_cfl_guard():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6})
    with pytest.raises(H2Error, match="CFL"):
        evolve_h2(dens, pot, _grid(dt=0.1), 0.4)


def test_retained_modes_drop_zero_coefficients():
    pot = potential_from_cosines(1, {(1,): 0.4, (3,): 0.0})
    assert retained_modes(pot, 8) == [(1,)]


def test_limiting_variance_t0_static():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid()
    traj = evolve_h2(dens, pot, grid, 0.0, sample_times=(0.0,))
    phi = observable_preset("mode_bump")
    from chaoslab.ensemble import observable_moment
    static = observable_moment(dens, phi, 2) - observable_moment(dens, phi, 1) ** 2
    got = limiting_variance(phi, dens, traj.snapshots[0.0])
    assert got == pytest.approx(static, rel=1e-10)


def test_limiting_variance_constant_observable():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    traj = evolve_h2(dens, pot, _grid(), 0.5, sample_times=(0.5,))
    phi = observable_preset("one")
    assert limiting_variance(phi, dens, traj.snapshots[0.5]) == pytest.approx(0.0, abs=1e-12)


def test_limiting_variance_nonnegative_and_moving():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    phi = observable_preset("mode_bump")
    traj = evolve_h2(dens, pot, _grid(), 1.0, sample_times=(0.0, 0.5, 1.0))
    vals = [limiting_variance(phi, dens, traj.snapshots[t]) for t in (0.0, 0.5, 1.0)]
    assert all(v >= 0.0 for v in vals)
    assert abs(vals[2] - vals[0]) > 1e-5   # the correction actually acts


def test_stepper_numba_matches_numpy():
    dens = _homog()
    pot = potential_from_cosines(1, {(1,): 0.6}, positive_definite=True)
    grid = _grid(n_v=33, dt=5e-3)
    a = evolve_h2(dens, pot, grid, 0.1, sample_times=(0.1,), use_numba=True)
    b = evolve_h2(dens, pot, grid, 0.1, sample_times=(0.1,), use_numba=False)
    diff = np.max(np.abs(a.snapshots[0.1].arrays[(1,)] - b.snapshots[0.1].arrays[(1,)]))
    assert diff < 1e-13
