import math

import numpy as np
import pytest

from chaoslab import _kernels
from chaoslab.dynamics import SimConfig, initial_state, run_trajectory
from chaoslab.ensemble import (
    BudgetError,
    ReplicaPlan,
    SampleMatrix,
    cumulant_t0_exact,
    estimate_correlation_pairing,
    estimate_cumulant,
    estimate_glauber_norm,
    estimate_mean,
    observable_moment,
    run_replicas,
    scaling_slope,
)
from chaoslab.model import (
    density_preset,
    observable_preset,
    potential_from_cosines,
    potential_preset,
)


def _plan(**kw):
    args = dict(
        n_particles=(32,),
        replicas=400,
        master_seed=2024,
        sim=SimConfig(potential=potential_preset("standard"), dt=1e-2, t_end=1.0),
        density=density_preset("standard"),
        observables=(observable_preset("skewed"),),
        sample_times=(0.0, 0.5),
        chunk_size=128,
    )
    args.update(kw)
    return ReplicaPlan(**args)


def test_single_replica_matches_run_trajectory():
    plan = _plan(replicas=1)
    sm = run_replicas(plan)[32]
    st = initial_state(plan.density, 32, plan.replica_seed(32, 0))
    res = run_trajectory(st, plan.sim, list(plan.observables), list(plan.sample_times))
    assert np.allclose(sm.values[0], res.values, atol=1e-13)


def test_t0_mean_matches_quadrature():
    plan = _plan(replicas=600)
    sm = run_replicas(plan)[32]
    est = estimate_mean(sm, "skewed", 0.0)
    exact = observable_moment(plan.density, plan.observables[0])
    assert abs(est.value - exact) < 3.5 * est.stderr


def test_determinism_chunks_and_threads():
    base = run_replicas(_plan(replicas=64, chunk_size=64))[32]
    rechunk = run_replicas(_plan(replicas=64, chunk_size=7))[32]
    assert np.array_equal(base.power_sums, rechunk.power_sums)
    _kernels.set_threads(1)
    t1 = run_replicas(_plan(replicas=64, chunk_size=16))[32]
    _kernels.set_threads(2)
    t2 = run_replicas(_plan(replicas=64, chunk_size=16))[32]
    assert np.array_equal(t1.power_sums, t2.power_sums)


def test_budget_guard():
    plan = _plan(replicas=10_000_000, budget=1e9)
    with pytest.raises(BudgetError, match="budget"):
        run_replicas(plan)


def test_t0_variance_closed_form():
    plan = _plan(replicas=4000)
    sm = run_replicas(plan)[32]
    est = estimate_cumulant(sm, "skewed", 0.0, 2)
    phi, dens = plan.observables[0], plan.density
    var1 = (observable_moment(dens, phi, 2) - observable_moment(dens, phi, 1) ** 2)
    assert abs(est.value - var1 / 32) < 3.5 * est.stderr


def test_t0_third_cumulant_closed_form():
    plan = _plan(n_particles=(16,), replicas=20_000)
    sm = run_replicas(plan)[16]
    est = estimate_cumulant(sm, "skewed", 0.0, 3)
    exact = cumulant_t0_exact(plan.density, plan.observables[0], 3, 16)
    assert abs(est.value - exact) < 3.5 * est.stderr


def test_constant_observable_cumulants():
    plan = _plan(observables=(observable_preset("one"),), replicas=50)
    sm = run_replicas(plan)[32]
    assert estimate_cumulant(sm, "one", 0.5, 1).value == pytest.approx(1.0, abs=1e-12)
    for m in (2, 3):
        assert estimate_cumulant(sm, "one", 0.5, m).value == pytest.approx(0.0, abs=1e-12)


def test_control_variate_consistent_with_raw():
    plan = _plan(n_particles=(24,), replicas=6000)
    sm = run_replicas(plan)[24]
    exact0 = cumulant_t0_exact(plan.density, plan.observables[0], 2, 24)
    raw = estimate_cumulant(sm, "skewed", 0.5, 2)
    cv = estimate_cumulant(sm, "skewed", 0.5, 2,
                           control_values=sm.column("skewed", 0.0), control_exact=exact0)
    assert abs(cv.value - raw.value) < 3.5 * math.hypot(cv.stderr, raw.stderr)


def test_free_control_variate_zero_noise_when_free():
    # with V = 0 the trajectory IS the free flow: the control removes all noise
    plan = _plan(sim=SimConfig(potential=potential_from_cosines(1, {}), dt=1e-2, t_end=1.0),
                 n_particles=(24,), replicas=500, track_free_flow=True)
    sm = run_replicas(plan)[24]
    from chaoslab.ensemble import cumulant_free_exact
    exact = cumulant_free_exact(plan.density, plan.observables[0], 2, 24, 0.5)
    cv = estimate_cumulant(sm, "skewed", 0.5, 2,
                           control_values=sm.free_column("skewed", 0.5), control_exact=exact)
    assert cv.stderr < 1e-13
    assert cv.value == pytest.approx(exact, abs=1e-10)


def test_free_flow_control_variate_exact_when_free():
    plan = _plan(sim=SimConfig(potential=potential_from_cosines(1, {}), dt=1e-2, t_end=1.0),
                 replicas=200, track_free_flow=True)
    sm = run_replicas(plan)[32]
    est = estimate_mean(sm, "skewed", 0.5, control="free",
                        density=plan.density, phi=plan.observables[0])
    exact = observable_moment(plan.density, plan.observables[0], free_time=0.5)
    assert est.stderr < 1e-12
    assert est.value == pytest.approx(exact, abs=1e-10)


# ---------------------------------------------------------------------------
# correlation pairings
# ---------------------------------------------------------------------------

def test_pairings_vanish_at_t0():
    plan = _plan(n_particles=(24,), replicas=8000)
    sm = run_replicas(plan)[24]
    for m in (2, 3):
        est = estimate_correlation_pairing(sm, "skewed", 0.0, m)
        assert abs(est.route_a.value) < 3.5 * est.route_a.stderr
        assert abs(est.route_b.value) < 3.5 * est.route_b.stderr


def test_pairing_routes_agree_interacting():
    plan = _plan(n_particles=(24,), replicas=8000)
    sm = run_replicas(plan)[24]
    for m in (2, 3):
        est = estimate_correlation_pairing(sm, "skewed", 0.5, m)
        assert est.agree(nsigma=3.5)


def test_pairing_m2_nonzero_when_interacting():
    plan = _plan(n_particles=(32,), replicas=12_000)
    sm = run_replicas(plan)[32]
    est = estimate_correlation_pairing(sm, "skewed", 0.5, 2)
    assert abs(est.route_a.value) > 3 * est.route_a.stderr


def test_degenerate_synthetic_pairing():
    # all particles equal within a replica: the pair pairing reduces to the
    # population variance of the common value across replicas
    rng = np.random.default_rng(8)
    c = rng.normal(size=40_000)
    n = 16
    psums = np.empty((c.size, 1, 1, 4))
    for p in range(1, 5):
        psums[:, 0, 0, p - 1] = n * c ** p
    sm = SampleMatrix(n_particles=n, times=np.array([0.0]), labels=["synthetic"],
                      power_sums=psums, master_seed=0)
    est = estimate_correlation_pairing(sm, "synthetic", 0.0, 2)
    target = np.mean(c ** 2) - np.mean(c) ** 2
    assert est.route_a.value == pytest.approx(target, abs=4 * est.route_a.stderr + 1e-3)
    # route B must agree with route A on the same data
    assert est.agree(nsigma=3.5)


def test_exchangeability_of_estimators():
    plan = _plan(replicas=50)
    sm = run_replicas(plan)[32]
    # permuting particle labels inside a replica changes only summation order
    st = initial_state(plan.density, 32, plan.replica_seed(32, 0))
    perm = np.random.default_rng(0).permutation(32)
    from chaoslab.dynamics import ParticleState
    st_p = ParticleState(x=st.x[perm], v=st.v[perm])
    res = run_trajectory(st, plan.sim, list(plan.observables), [0.5])
    res_p = run_trajectory(st_p, plan.sim, list(plan.observables), [0.5])
    assert res.values[0, 0] == pytest.approx(res_p.values[0, 0], abs=1e-12)


# ---------------------------------------------------------------------------
# Glauber sensitivity
# ---------------------------------------------------------------------------

def test_glauber_order1_t0_closed_form():
    dens = density_preset("standard")
    phi = observable_preset("skewed")
    pot = potential_preset("standard")
    n = 32
    est = estimate_glauber_norm(dens, pot, n, phi, t=0.0, dt=1e-2, order=1,
                                master_seed=11, n_outer=256, resamples=16)
    sigma = math.sqrt(observable_moment(dens, phi, 2) - observable_moment(dens, phi, 1) ** 2)
    target_sq = (sigma / n) ** 2
    assert abs(est.norm_sq - target_sq) < 3.5 * est.stderr_sq


def test_glauber_order2_t0_consistent_with_zero():
    dens = density_preset("standard")
    phi = observable_preset("skewed")
    pot = potential_preset("standard")
    est = estimate_glauber_norm(dens, pot, 32, phi, t=0.0, dt=1e-2, order=2,
                                master_seed=12, n_outer=128, resamples=8)
    # sup over tuples of a zero quantity: allow the max of 8 noisy zeros
    assert est.norm_sq < 5 * est.stderr_sq + 1e-12


def test_glauber_free_flow_closed_form():
    dens = density_preset("standard")
    phi = observable_preset("skewed")
    pot = potential_from_cosines(1, {})
    n, t = 32, 0.5
    est = estimate_glauber_norm(dens, pot, n, phi, t=t, dt=1e-2, order=1,
                                master_seed=13, n_outer=256, resamples=16)
    m1 = observable_moment(dens, phi, 1, free_time=t)
    m2 = observable_moment(dens, phi, 2, free_time=t)
    target_sq = (m2 - m1 ** 2) / n ** 2
    assert abs(est.norm_sq - target_sq) < 3.5 * est.stderr_sq


def test_efron_stein_inequality():
    dens = density_preset("standard")
    phi = observable_preset("skewed")
    pot = potential_preset("standard")
    n = 32
    plan = _plan(n_particles=(n,), replicas=4000)
    sm = run_replicas(plan)[n]
    for t in (0.0, 0.5):
        var = estimate_cumulant(sm, "skewed", t, 2)
        gl = estimate_glauber_norm(dens, pot, n, phi, t=t, dt=1e-2, order=1,
                                   master_seed=14, n_outer=192, resamples=16)
        lhs = var.value
        rhs = n * gl.norm_sq
        noise = 3 * (var.stderr + n * gl.stderr_sq)
        assert lhs <= rhs + noise


# ---------------------------------------------------------------------------
# scaling regression
# ---------------------------------------------------------------------------

def test_slope_exact_inverse_n():
    pts = [(n, 2.5 / n, 1e-6) for n in (64, 128, 256, 512)]
    fit = scaling_slope(pts)
    assert not fit.noise_dominated
    assert fit.slope == pytest.approx(-1.0, abs=0.01)


def test_slope_inverse_n_squared_with_noise():
    rng = np.random.default_rng(21)
    pts = []
    for n in (64, 128, 256, 512, 1024):
        v = 3.0 / n ** 2
        pts.append((n, v * (1 + 0.01 * rng.normal()), 0.01 * v))
    fit = scaling_slope(pts)
    assert fit.slope == pytest.approx(-2.0, abs=0.05)


def test_slope_noise_dominated_flag():
    pts = [(64, 1e-9, 1e-6), (128, -2e-9, 1e-6), (256, 5e-10, 1e-6), (512, -1e-9, 1e-6)]
    fit = scaling_slope(pts)
    assert fit.noise_dominated
    assert math.isnan(fit.slope)


def test_sample_matrix_csv(tmp_path):
    plan = _plan(replicas=3)
    sm = run_replicas(plan)[32]
    path = tmp_path / "samples.csv"
    sm.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "replica,time,observable,value"
    assert len(lines) == 1 + 3 * 2 * 1
