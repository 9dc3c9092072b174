import math

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from chaoslab.model import (
    InitialDensity,
    PolynomialBump,
    SpatialDensity,
    density_preset,
    observable_preset,
    potential_from_cosines,
    potential_preset,
)
from chaoslab.vlasov import (
    GridError,
    PhaseGrid,
    SplineShifter,
    grid_density_from_initial,
    shift_columns,
    solve_linearized,
    solve_vlasov,
)

TAU = 2.0 * math.pi


def _grid(modes=8, n_v=192, v_max=4.5, dt=2e-3):
    return PhaseGrid(modes=modes, n_v=n_v, v_max=v_max, dt=dt)


# ---------------------------------------------------------------------------
# spline machinery
# ---------------------------------------------------------------------------

def test_spline_matches_scipy_clamped():
    rng = np.random.default_rng(0)
    n = 64
    dv = 0.1
    f = np.exp(-((np.arange(n) - 30.0) / 6.0) ** 2)
    sp = SplineShifter(f[:, None], dv, 0.0)
    edges = dv * np.arange(n + 1)
    g = np.concatenate([[0.0], np.cumsum(f) * dv])
    ref = CubicSpline(edges, g, bc_type="clamped")
    pts = rng.uniform(0, edges[-1], 200)
    assert np.max(np.abs(sp.eval(pts[:, None]) - ref(pts)[:, None])) < 1e-12
    assert np.max(np.abs(sp.deriv(pts[:, None]) - ref(pts, 1)[:, None])) < 1e-11


def test_shift_columns_conserves_mass_exactly():
    # compactly supported columns with margin: conservation is exact
    rng = np.random.default_rng(1)
    n = 128
    dv = 0.05
    v = dv * (np.arange(n) + 0.5)
    f = np.clip(1 - ((v - 3.0) / 1.5) ** 2, 0, None) ** 4
    f = f[:, None] * np.ones((1, 5))
    shifts = rng.uniform(-0.02, 0.02, 5)
    out = shift_columns(f, shifts, dv, 0.0)
    assert np.max(np.abs(out.sum(axis=0) - f.sum(axis=0))) < 1e-12 * f.sum()


def test_shift_columns_accuracy():
    n = 256
    dv = 6.0 / n
    v = -3.0 + dv * (np.arange(n) + 0.5)
    f = np.exp(-((v) / 0.5) ** 2)[:, None]
    s = 0.013
    out = shift_columns(f, np.array([s]), dv, -3.0)
    exact = np.exp(-(((v - s)) / 0.5) ** 2)
    assert np.max(np.abs(out[:, 0] - exact)) < 2e-7


# ---------------------------------------------------------------------------
# nonlinear solver
# ---------------------------------------------------------------------------

def test_free_transport_matches_mode_formula():
    dens = density_preset("standard")
    pot = potential_from_cosines(1, {})
    grid = _grid()
    res = solve_vlasov(dens, pot, grid, 0.5, sample_times=(0.5,))
    state = res.snapshots[0.5]
    init = grid_density_from_initial(dens, grid)
    phases = np.exp(-1j * TAU * grid.k_values[:, None] * grid.v_centers[None, :] * 0.5)
    assert np.max(np.abs(state.modes - init.modes * phases)) < 1e-6


def test_homogeneous_background_is_stationary():
    dens = density_preset("homogeneous_bump")
    pot = potential_preset("standard")
    grid = _grid()
    res = solve_vlasov(dens, pot, grid, 0.5, sample_times=(0.5,))
    state = res.snapshots[0.5]
    init = grid_density_from_initial(dens, grid)
    assert np.max(np.abs(state.modes - init.modes)) < 1e-12


def test_mass_conservation_and_reality():
    dens = density_preset("standard")
    pot = potential_preset("standard")
    grid = PhaseGrid(modes=8, n_v=384, v_max=6.5, dt=2e-3)
    res = solve_vlasov(dens, pot, grid, 1.0, sample_times=(1.0,))
    assert res.mass_error < 1e-12
    assert res.snapshots[1.0].check_reality() < 1e-12
    assert res.l2_drift < 1e-4
    assert res.min_value > -1e-6


def test_time_reversal():
    dens = density_preset("standard")
    pot = potential_preset("standard")
    grid = _grid(n_v=192)
    res = solve_vlasov(dens, pot, grid, 0.5, sample_times=(0.5,))
    fwd = res.snapshots[0.5]
    # reflect velocities: F(x, -v); mode array flips in v
    reflected = fwd.copy()
    reflected.modes = fwd.modes[:, ::-1].copy()
    # continue from reflected state using the internal evolve
    from chaoslab.vlasov import _evolve
    reflected.time = 0.0
    res2, _ = _evolve(reflected, pot, grid, 0.5, (0.5,), linear_about=None)
    back = res2.snapshots[0.5]
    init = grid_density_from_initial(dens, grid)
    assert np.max(np.abs(back.modes[:, ::-1] - init.modes)) < 1e-5


def test_self_convergence_of_observable():
    dens = density_preset("standard")
    pot = potential_preset("standard")
    phi = observable_preset("skewed")
    coarse = solve_vlasov(dens, pot, _grid(modes=8, n_v=128, dt=2e-3), 0.5,
                          sample_times=(0.5,)).snapshots[0.5].pair_observable(phi)
    fine = solve_vlasov(dens, pot, _grid(modes=8, n_v=256, dt=1e-3), 0.5,
                        sample_times=(0.5,)).snapshots[0.5].pair_observable(phi)
    assert abs(coarse - fine) < 1e-5


def test_support_guard():
    dens = density_preset("standard")
    pot = potential_preset("standard")
    with pytest.raises(GridError, match="support"):
        solve_vlasov(dens, pot, PhaseGrid(modes=8, n_v=128, v_max=3.0, dt=1e-3), 1.0)


def test_pair_observable_t0_matches_quadrature():
    dens = density_preset("standard")
    phi = observable_preset("skewed")
    grid = _grid(n_v=512)
    state = grid_density_from_initial(dens, grid)
    from chaoslab.ensemble import observable_moment
    exact = observable_moment(dens, phi)
    assert state.pair_observable(phi) == pytest.approx(exact, abs=5e-6)


# ---------------------------------------------------------------------------
# linearized solver
# ---------------------------------------------------------------------------

def test_linearized_zero_stays_zero():
    dens = density_preset("homogeneous_bump")
    pot = potential_preset("standard")
    grid = _grid()
    j0 = grid_density_from_initial(dens, grid)
    j0.modes[:] = 0.0
    out = solve_linearized(j0, dens, pot, grid, 0.2, sample_times=(0.2,))
    assert np.max(np.abs(out[0.2].modes)) == 0.0


def test_linearized_free_transport():
    dens = density_preset("homogeneous_bump")
    pot = potential_from_cosines(1, {})
    grid = _grid()
    j0 = grid_density_from_initial(density_preset("standard"), grid)
    out = solve_linearized(j0, dens, pot, grid, 0.4, sample_times=(0.4,))
    phases = np.exp(-1j * TAU * grid.k_values[:, None] * grid.v_centers[None, :] * 0.4)
    assert np.max(np.abs(out[0.4].modes - j0.modes * phases)) < 1e-10


def test_linearized_is_linear():
    dens = density_preset("homogeneous_bump")
    pot = potential_preset("standard")
    grid = _grid()
    j1 = grid_density_from_initial(density_preset("standard"), grid)
    j2 = grid_density_from_initial(
        InitialDensity(SpatialDensity(1, {(2,): 0.4}), PolynomialBump(1.7, 3, 1), 1), grid)
    a, b = 0.7, -1.3
    combo = j1.copy()
    combo.modes = a * j1.modes + b * j2.modes
    o1 = solve_linearized(j1, dens, pot, grid, 0.3, sample_times=(0.3,))[0.3]
    o2 = solve_linearized(j2, dens, pot, grid, 0.3, sample_times=(0.3,))[0.3]
    oc = solve_linearized(combo, dens, pot, grid, 0.3, sample_times=(0.3,))[0.3]
    assert np.max(np.abs(oc.modes - (a * o1.modes + b * o2.modes))) < 1e-9


def test_landau_damping_envelope():
    # stable homogeneous background: the mode-1 perturbation energy decays
    dens = density_preset("homogeneous_bump")
    pot = potential_from_cosines(1, {(1,): 0.1}, positive_definite=True)
    grid = _grid(modes=4, n_v=256, v_max=4.6, dt=2e-3)
    pert = InitialDensity(SpatialDensity(1, {(1,): 0.2}), PolynomialBump(2.0, 4, 1), 1)
    j0 = grid_density_from_initial(pert, grid)
    j0.modes[grid.modes] = 0.0       # keep only the k != 0 fluctuation
    times = (1.0, 2.0, 4.0)
    out = solve_linearized(j0, dens, pot, grid, 4.0, sample_times=times)
    amp = {t: float(np.sum(np.abs(out[t].modes[grid.modes + 1]))) * grid.dv
           for t in times}
    amp0 = float(np.sum(np.abs(j0.modes[grid.modes + 1]))) * grid.dv
    assert amp[1.0] < amp0
    assert amp[2.0] < amp[1.0]
    assert amp[4.0] < amp[2.0]
