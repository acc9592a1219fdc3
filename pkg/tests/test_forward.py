"""Forward simulation: state, linearizations, product process, cost."""
import numpy as np
import pytest

from helpers import make_scenario
from spde_control.ensemble import PathEnsemble
from spde_control.forward import (BlowUpError, cost, first_variation_system,
                                  probe_system, simulate_cost, simulate_linear,
                                  simulate_state, simulate_tensor,
                                  spike_expansion_stats)
from spde_control.operators import SpectralBasis
from spde_control.scenario import DeterministicControl, SpikeControl
from spde_control.verify import make_tensor_probes, zero_noise_oracle


def _det_scn(**kw):
    """Noise-free affine scenario (sigma == 0, drift rate 0)."""
    kw.setdefault("preset", "additive")
    kw.setdefault("noise_amp", 0.0)
    kw.setdefault("drift", 0.0)
    kw.setdefault("shapes", False)
    kw.setdefault("K", 1)
    return make_scenario(**kw)


def test_eigenmode_decays_at_resolvent_rate():
    # with zero drift and zero noise each step is one implicit solve, so an
    # eigenmode contracts by exactly 1/(1 + dt lambda) per step
    scn = _det_scn(n=12, n_t=16, T=0.1, base=(0.0,))
    basis = SpectralBasis.build(scn.grid, scn.op)
    mode = basis.vectors[:, 0]
    scn.x0.values[:] = mode
    ens = PathEnsemble.for_scenario(scn, n_paths=2)
    traj = simulate_state(scn, scn.base_control, ens)
    lam = basis.eigenvalues[0]
    for k in (1, 8, 16):
        expect = mode / (1.0 + scn.dt * lam) ** k
        assert np.allclose(traj[k], expect, atol=1e-13)


def test_state_matches_fine_step_oracle():
    scn = _det_scn(a=0.0, b=2.0, n=12, n_t=512, T=0.25, base=(0.5,),
                   drift=0.5)
    ens = PathEnsemble.for_scenario(scn, n_paths=1)
    traj = simulate_state(scn, scn.base_control, ens)
    oracle = zero_noise_oracle(scn, scn.base_control)
    scale = np.abs(oracle["x"]).max()
    assert np.abs(traj.values[:, 0] - oracle["x"]).max() / scale < 2e-3


def test_unstored_trajectory_refuses_indexing():
    scn = _det_scn(n=4, n_t=4)
    ens = PathEnsemble.for_scenario(scn, n_paths=1)
    traj = simulate_state(scn, scn.base_control, ens, store=False)
    assert traj.final.shape == (1, 4)
    with pytest.raises(ValueError):
        traj[0]


def test_blow_up_detected_with_step_index():
    scn = make_scenario("additive", n=6, n_t=64, noise_amp=0.0, drift=1e8,
                        shapes=False, K=1)
    ens = PathEnsemble.for_scenario(scn, n_paths=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(BlowUpError) as exc:
            simulate_state(scn, scn.base_control, ens)
    assert 0 < exc.value.step <= 64


def test_linear_equation_is_linear_in_the_sources():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=20)
    xbar = simulate_state(scn, scn.base_control, ens)
    gen = np.random.Generator(np.random.Philox(key=2))
    phi = gen.normal(size=(scn.n_t, scn.grid.n))
    psi = gen.normal(size=(scn.n_t, scn.grid.n, scn.n_modes))
    y1 = simulate_linear(scn, probe_system(scn, xbar, scn.base_control,
                                           phi, psi), ens)
    y3 = simulate_linear(scn, probe_system(scn, xbar, scn.base_control,
                                           3.0 * phi, 3.0 * psi), ens)
    assert np.allclose(y3.final, 3.0 * y1.final, rtol=1e-9, atol=1e-12)


def test_first_variation_vanishes_without_a_spike():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=10)
    xbar = simulate_state(scn, scn.base_control, ens)
    ueps = SpikeControl(scn.base_control, [0.0], tau=0.2, eps=0.1)
    sys = first_variation_system(scn, xbar, scn.base_control, ueps)
    y = simulate_linear(scn, sys, ens)
    assert np.max(np.abs(y.values)) == 0.0


def test_tensor_simulation_preserves_symmetry():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=10)
    xbar = simulate_state(scn, scn.base_control, ens)
    Phi, Psi = make_tensor_probes(scn, 1)[0]
    m, n, K = 10, 8, scn.n_modes
    Y = simulate_tensor(scn, xbar, scn.base_control, ens,
                        phi=lambda k: np.broadcast_to(Phi[k], (m, n, n)),
                        psi=lambda k: np.broadcast_to(Psi[k], (m, n, n, K)))
    asym = np.abs(Y.values - np.swapaxes(Y.values, -1, -2)).max()
    assert asym < 1e-10


def test_control_only_cost_is_exact():
    # state_weight = term_weight = 0 leaves only the control running cost,
    # whose left-endpoint quadrature is T * (h n) * cw u^2 / 2 exactly
    scn = make_scenario("additive", n=10, n_t=16, T=0.5, base=(0.8,),
                        state_weight=0.0, term_weight=0.0, ctrl_weight=0.4)
    ens = PathEnsemble.for_scenario(scn, n_paths=6)
    est = simulate_cost(scn, scn.base_control, ens)
    expect = 0.5 * scn.grid.h * scn.grid.n * 0.5 * 0.4 * 0.8 ** 2
    assert est.mean == pytest.approx(expect, rel=1e-12)
    assert est.se == 0.0


def test_streaming_cost_matches_stored_cost():
    scn = make_scenario("bilinear", n=8, n_t=32)
    ens = PathEnsemble.for_scenario(scn, n_paths=25)
    traj = simulate_state(scn, scn.base_control, ens)
    a = cost(scn, traj)
    b = simulate_cost(scn, scn.base_control, ens)
    assert np.array_equal(a.per_path, b.per_path)


def test_spike_expansion_stats_sign_structure():
    scn = make_scenario("logistic-drift", n=8, n_t=128, T=0.5)
    ens = PathEnsemble.for_scenario(scn, n_paths=40)
    st = spike_expansion_stats(scn, scn.base_control, [0.8], tau=0.1,
                               eps=0.05, ens=ens)
    assert st.y_moment > 0.0
    assert st.z_moment > 0.0
    assert st.hgamma > 0.0
    # the expansion residual is higher order than the response itself
    assert st.residual < st.y_moment


def test_degenerate_spike_gives_identically_zero_stats():
    scn = make_scenario("logistic-drift", n=8, n_t=64, T=0.5, base=(0.3,))
    ens = PathEnsemble.for_scenario(scn, n_paths=10)
    st = spike_expansion_stats(scn, scn.base_control, [0.3], tau=0.1,
                               eps=0.05, ens=ens)
    assert st.y_moment == 0.0
    assert st.z_moment == 0.0
    assert st.residual == 0.0


def test_block_control_applies_per_step():
    scn = make_scenario("additive", n=6, n_t=4, noise_amp=0.0, shapes=False,
                        K=1)
    u = DeterministicControl.from_blocks([(0.0,), (1.0,)], scn.n_t)
    ens = PathEnsemble.for_scenario(scn, n_paths=1)
    traj = simulate_state(scn, u, ens)
    assert [c[0] for c in traj.controls] == [0.0, 0.0, 1.0, 1.0]
