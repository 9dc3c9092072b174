import math

import numpy as np
import pytest

from chaoslab import _kernels
from chaoslab.dynamics import (
    ConfigurationError,
    ParticleState,
    SimConfig,
    energy,
    initial_state,
    mean_field_force,
    momentum,
    resampled_rerun,
    run_trajectory,
    step,
)
from chaoslab.model import density_preset, observable_preset, potential_from_cosines, potential_preset

TAU = 2.0 * math.pi


def _state(x, v):
    x = np.atleast_2d(np.asarray(x, dtype=float)).T if np.ndim(x) == 1 else x
    v = np.atleast_2d(np.asarray(v, dtype=float)).T if np.ndim(v) == 1 else v
    return ParticleState(x=x, v=v)


def test_single_particle_zero_force():
    pot = potential_preset("standard")
    st = _state([0.3], [0.1])
    for method in ("direct", "fourier"):
        assert np.all(mean_field_force(st, pot, method) == 0.0)


def test_two_particle_hand_value():
    pot = potential_from_cosines(1, {(1,): 1.0})
    st = _state([0.0, 0.25], [0.0, 0.0])
    for method in ("direct", "fourier"):
        f = mean_field_force(st, pot, method)
        assert f[0, 0] == pytest.approx(-math.pi, rel=1e-12)
        assert f[1, 0] == pytest.approx(math.pi, rel=1e-12)


def test_force_methods_agree():
    rng = np.random.default_rng(0)
    pot = potential_from_cosines(1, {(1,): 0.5, (2,): 0.2, (3,): -0.1})
    st = ParticleState(x=rng.random((64, 1)), v=rng.normal(size=(64, 1)))
    fd = mean_field_force(st, pot, "direct")
    ff = mean_field_force(st, pot, "fourier")
    assert np.max(np.abs(fd - ff)) < 1e-10


def test_force_methods_agree_2d():
    rng = np.random.default_rng(1)
    pot = potential_from_cosines(2, {(1, 0): 0.2, (0, 1): 0.15, (1, 1): 0.05})
    st = ParticleState(x=rng.random((32, 2)), v=rng.normal(size=(32, 2)))
    fd = mean_field_force(st, pot, "direct")
    ff = mean_field_force(st, pot, "fourier")
    assert np.max(np.abs(fd - ff)) < 1e-10


def test_free_transport_exact():
    pot = potential_from_cosines(1, {})
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=1.0)
    rng = np.random.default_rng(3)
    x0 = rng.random((16, 1))
    v0 = rng.normal(size=(16, 1))
    st = ParticleState(x=x0.copy(), v=v0.copy())
    for _ in range(100):
        st = step(st, cfg)
    assert np.allclose(st.x, np.mod(x0 + 1.0 * v0, 1.0), atol=1e-12)
    assert np.allclose(st.v, v0)


def test_reversibility():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-3, t_end=1.0)
    rng = np.random.default_rng(4)
    st0 = ParticleState(x=rng.random((32, 1)), v=rng.normal(size=(32, 1)))
    st = st0
    for _ in range(200):
        st = step(st, cfg)
    st = ParticleState(x=st.x, v=-st.v)
    for _ in range(200):
        st = step(st, cfg)
    assert np.max(np.abs(st.x - st0.x)) < 1e-9
    assert np.max(np.abs(-st.v - st0.v)) < 1e-9


def test_energy_drift_small_and_second_order():
    # moderate fixed coupling: the drift bound is an integrator property and
    # the Verlet energy-oscillation amplitude scales with the force strength
    pot = potential_from_cosines(1, {(1,): 0.5, (2,): 0.15})
    dens = density_preset("standard")
    st0 = initial_state(dens, 128, 12)
    drifts = {}
    for dt in (2e-3, 1e-3):
        cfg = SimConfig(potential=pot, dt=dt, t_end=0.5)
        st = st0
        e0 = energy(st, pot)
        worst = 0.0
        for _ in range(int(round(0.5 / dt))):
            st = step(st, cfg)
            worst = max(worst, abs(energy(st, pot) - e0))
        drifts[dt] = worst / abs(e0)
    assert drifts[1e-3] < 1e-6
    # second-order integrator: halving dt cuts the energy error ~4x
    ratio = drifts[2e-3] / drifts[1e-3]
    assert 2.5 < ratio < 6.0


def test_momentum_conserved():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-3, t_end=1.0)
    rng = np.random.default_rng(5)
    st = ParticleState(x=rng.random((64, 1)), v=rng.normal(size=(64, 1)))
    p0 = momentum(st)
    for _ in range(300):
        st = step(st, cfg)
    assert np.max(np.abs(momentum(st) - p0)) < 1e-13


def test_batch_kernel_matches_numpy_fallback():
    pot = potential_preset("standard")
    modes, vhat = pot.one_sided()
    rng = np.random.default_rng(6)
    x = rng.random((4, 32))
    v = rng.normal(size=(4, 32))
    x2, v2 = x.copy(), v.copy()
    _kernels.verlet_batch_d1(x, v, modes[:, 0], vhat, 1e-3, 50, use_numba=True)
    _kernels._verlet_batch_d1_py(x2, v2, modes[:, 0], vhat, 1e-3, 50)
    assert np.max(np.abs(x - x2)) < 1e-12
    assert np.max(np.abs(v - v2)) < 1e-12


def test_batch_kernel_matches_step():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-3, t_end=1.0)
    rng = np.random.default_rng(7)
    st = ParticleState(x=rng.random((24, 1)), v=rng.normal(size=(24, 1)))
    ref = st
    for _ in range(40):
        ref = step(ref, cfg)
    modes, vhat = pot.one_sided()
    x = st.x.T.copy()
    v = st.v.T.copy()
    _kernels.verlet_batch_d1(x, v, modes[:, 0], vhat, 1e-3, 40, use_numba=True)
    assert np.max(np.abs(x.T - ref.x)) < 1e-11
    assert np.max(np.abs(v.T - ref.v)) < 1e-11


def test_run_trajectory_constant_observable():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.5)
    st = initial_state(density_preset("standard"), 64, 9)
    res = run_trajectory(st, cfg, [observable_preset("one")], [0.0, 0.25, 0.5])
    assert np.allclose(res.values, 1.0, atol=1e-14)


def test_run_trajectory_free_flow_velocity_observable_constant():
    pot = potential_from_cosines(1, {})
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.5)
    st = initial_state(density_preset("homogeneous_bump"), 64, 10)
    from chaoslab.model import Observable, ObservableTerm, VelocityShape
    phi = Observable((ObservableTerm("const", (0,), 1.0, VelocityShape((0.0, 0.0, 1.0), 4.0, 4)),),
                     "v2", 1)
    res = run_trajectory(st, cfg, [phi], [0.0, 0.5])
    assert res.values[0, 0] == pytest.approx(res.values[1, 0], rel=1e-12)


def test_run_trajectory_t0_sample_mean():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.1)
    st = initial_state(density_preset("standard"), 128, 11)
    phi = observable_preset("skewed")
    res = run_trajectory(st, cfg, [phi], [0.0])
    assert res.values[0, 0] == pytest.approx(float(np.mean(phi(st.x, st.v))), rel=1e-13)


def test_sample_time_alignment_guard():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=1.0)
    st = initial_state(density_preset("standard"), 8, 13)
    with pytest.raises(ConfigurationError):
        run_trajectory(st, cfg, [observable_preset("one")], [0.005])


def test_resampled_rerun_empty_identical():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.3)
    st = initial_state(density_preset("standard"), 32, 14)
    phi = observable_preset("skewed")
    base = run_trajectory(st, cfg, [phi], [0.0, 0.3])
    rerun = resampled_rerun(st, {}, cfg, [phi], [0.0, 0.3])
    assert np.array_equal(base.values, rerun.values)


def test_resampled_rerun_t0_single_swap():
    pot = potential_preset("standard")
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.0)
    st = initial_state(density_preset("standard"), 32, 15)
    phi = observable_preset("skewed")
    base = run_trajectory(st, cfg, [phi], [0.0])
    xa, va = 0.123, -0.456
    rerun = resampled_rerun(st, {5: (xa, va)}, cfg, [phi], [0.0])
    old = float(phi(st.x[5:6], st.v[5:6])[0])
    new = float(phi(np.array([[xa]]), np.array([[va]]))[0])
    assert base.values[0, 0] - rerun.values[0, 0] == pytest.approx((old - new) / 32, abs=1e-14)


def test_resampled_rerun_free_flow_localized():
    pot = potential_from_cosines(1, {})
    cfg = SimConfig(potential=pot, dt=1e-2, t_end=0.5)
    st = initial_state(density_preset("homogeneous_bump"), 16, 16)
    base = run_trajectory(st, cfg, [observable_preset("one")], [0.5],
                          keep_final_state=True)
    rerun = resampled_rerun(st, {3: (0.9, 1.1)}, cfg, [observable_preset("one")], [0.5],
                            keep_final_state=True)
    diff = np.abs(base.final_state.x - rerun.final_state.x)
    assert diff[3, 0] > 0
    mask = np.ones(16, dtype=bool)
    mask[3] = False
    assert np.max(diff[mask]) == 0.0


def test_determinism_same_seed():
    dens = density_preset("standard")
    a = initial_state(dens, 64, 99)
    b = initial_state(dens, 64, 99)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
