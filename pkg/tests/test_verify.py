"""Verification experiments at smoke scale: dualities, rates, gap scans,
brute force, and the slope-fitting helper."""
import numpy as np
import pytest

from helpers import make_scenario
from spde_control.ensemble import PathEnsemble
from spde_control.forward import simulate_state
from spde_control.adjoint import solve_adjoint1, solve_adjoint2_mollified
from spde_control.verify import (_fit_slope, block_control_candidates,
                                 brute_force_search, check_duality1,
                                 check_duality2, check_tensor_identity,
                                 hamiltonian, make_random_probes,
                                 make_tensor_probes, rate_experiment, smp_gap,
                                 smp_scan)


def test_probe_sets_are_reproducible():
    scn = make_scenario(n=8, n_t=16)
    a = make_random_probes(scn, 3, seed=5)
    b = make_random_probes(scn, 3, seed=5)
    for (pa, sa), (pb, sb) in zip(a, b):
        assert np.array_equal(pa, pb) and np.array_equal(sa, sb)
    c = make_random_probes(scn, 3, seed=6)
    assert not np.array_equal(a[0][0], c[0][0])


def test_tensor_probes_are_symmetric():
    scn = make_scenario(n=8, n_t=16)
    for Phi, Psi in make_tensor_probes(scn, 2):
        assert np.allclose(Phi, np.swapaxes(Phi, -1, -2), atol=1e-12)
        assert np.allclose(Psi, np.swapaxes(Psi, 1, 2), atol=1e-12)


@pytest.mark.parametrize("preset", ["additive", "bilinear"])
def test_first_order_duality_smoke(preset):
    scn = make_scenario(preset, n=8, n_t=64)
    ens = PathEnsemble.for_scenario(scn, n_paths=1200)
    probes = make_random_probes(scn, 2, seed=scn.seed)
    rep = check_duality1(scn, scn.base_control, ens, probes)
    assert rep.passed(0.10)
    assert len(rep.rows) == 2
    for row in rep.rows:
        assert row["lhs_se"] > 0.0 and row["rhs_se"] > 0.0


def test_second_order_duality_smoke():
    scn = make_scenario("bilinear", n=8, n_t=64)
    ens = PathEnsemble.for_scenario(scn, n_paths=1200)
    probes = make_tensor_probes(scn, 2, seed=scn.seed)
    rep = check_duality2(scn, scn.base_control, ens, 4.0 * scn.grid.h ** 2,
                         probes)
    assert rep.passed(0.15)


def test_tensor_identity_smoke():
    scn = make_scenario("logistic-drift", n=8, n_t=128, T=0.5)
    ens = PathEnsemble.for_scenario(scn, n_paths=200)
    out = check_tensor_identity(scn, scn.base_control, [0.8], tau=0.1,
                                eps=0.1, ens=ens)
    assert out["relative_error"] < 0.10
    assert out["ref_norm"] > 0.0


def test_fit_slope_recovers_known_exponent():
    eps = np.array([2.0 ** -k for k in range(3, 8)])
    slope, lo, hi = _fit_slope(eps, 5.0 * eps ** 2)
    assert slope == pytest.approx(2.0, abs=1e-10)
    assert lo <= 2.0 <= hi
    assert _fit_slope(eps, np.zeros(5)) is None
    assert _fit_slope(eps[:2], 5.0 * eps[:2]) is None


def test_rate_experiment_reports_undefined_for_degenerate_spike():
    scn = make_scenario("additive", n=8, n_t=64, T=0.2, base=(0.3,))
    rep = rate_experiment(scn, scn.base_control, [0.3], tau=0.025,
                          eps_fractions=[2 ** -3, 2 ** -4, 2 ** -5],
                          n_paths=20)
    assert rep.slopes["y_moment"] is None
    assert any("slope undefined" in note for note in rep.notes)


def test_gap_vanishes_at_the_reference_control():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=200)
    xbar = simulate_state(scn, scn.base_control, ens)
    pair1 = solve_adjoint1(scn, xbar, scn.base_control, ens)
    pair2 = solve_adjoint2_mollified(scn, xbar, scn.base_control, ens, pair1,
                                     4.0 * scn.grid.h ** 2, store_steps={10})
    k = 10
    uk = scn.base_control.evaluate(k, scn)
    g = smp_gap(scn, xbar[k], uk, uk, pair1.p[k], pair1.q[k],
                pair2.stored_steps[k])
    assert np.max(np.abs(g)) == 0.0


def test_hamiltonian_matches_direct_sum():
    scn = make_scenario("bilinear", n=4, n_t=8)
    x = np.full((2, 4), 0.3)
    u = np.array([0.5])
    p = np.full((2, 4), 0.1)
    q = np.full((2, 4, scn.n_modes), 0.2)
    h = scn.grid.h
    expect = h * (np.sum(scn.coeffs.l(x, u), axis=-1)
                  + np.sum(p * scn.coeffs.b(x, u), axis=-1)
                  + np.sum(q * scn.sigma_eff(x, u), axis=(-2, -1)))
    assert np.allclose(hamiltonian(scn, x, u, p, q), expect, rtol=1e-12)


def test_smp_scan_shapes_and_scale():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=300)
    rep = smp_scan(scn, scn.base_control, ens, 4.0 * scn.grid.h ** 2,
                   n_times=4)
    assert rep.mean_gaps.shape == (len(rep.sample_steps), len(rep.lattice))
    assert rep.scale > 0.0
    assert all(0 < k < scn.n_t for k in rep.sample_steps)


def test_block_candidates_enumerate_the_lattice_power():
    scn = make_scenario(n=8, n_t=32, control_points=((-1.0,), (1.0,)))
    combos, controls = block_control_candidates(scn, n_blocks=4)
    assert len(combos) == 2 ** 4
    assert len(set(combos)) == len(combos)
    assert all(len(c.points) == scn.n_t for c in controls)


def test_brute_force_picks_the_cheapest_candidate():
    # with pure control cost and no state cost the zero control must win
    scn = make_scenario("additive", n=8, n_t=32, state_weight=0.0,
                        term_weight=0.0, ctrl_weight=1.0,
                        control_points=((0.0,), (1.0,)))
    combos, controls = block_control_candidates(scn, n_blocks=2)
    ens = PathEnsemble.for_scenario(scn, n_paths=50)
    rep = brute_force_search(scn, controls, ens, labels=combos)
    assert rep.candidates[rep.best] == (0, 0)
    assert not rep.ties
    assert not rep.excluded
    assert rep.cost_matrix.shape == (4, 50)
    # costs are ordered by how many blocks apply the expensive control
    order = np.argsort(rep.costs)
    assert rep.candidates[order[0]] == (0, 0)
    assert rep.candidates[order[-1]] == (1, 1)
