"""Coefficient presets, control processes, config loading and validation."""
import os

import numpy as np
import pytest

from helpers import make_scenario
from spde_control.grids import Field, Grid1D
from spde_control.scenario import (ConfigError, ControlSet,
                                   DeterministicControl, FeedbackControl,
                                   NoiseModel, ScenarioValidationError,
                                   SpikeControl, eval_coefficient,
                                   load_scenario, make_coefficients,
                                   sine_mode_shapes, validate_coefficients)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture(name):
    return os.path.join(FIXTURES, name)


# -- coefficient presets -----------------------------------------------------

def test_unknown_preset_rejected():
    with pytest.raises(ScenarioValidationError):
        make_coefficients("cubic", 1)


def test_unknown_parameter_rejected():
    with pytest.raises(ConfigError):
        make_coefficients("additive", 1, viscosity=2.0)


@pytest.mark.parametrize("preset", ["additive", "bilinear", "logistic-drift",
                                    "quadratic-cost"])
def test_preset_derivatives_consistent(preset):
    cs = make_coefficients(preset, 2)
    report = validate_coefficients(cs, [np.array([0.0]), np.array([0.7])])
    assert all(err < 1e-5 for err in report.values())


def test_mismatched_preset_fails_validation():
    cs = make_coefficients("mismatched", 1)
    with pytest.raises(ScenarioValidationError, match="b/b_x"):
        validate_coefficients(cs, [np.array([0.0])])


def test_sigma_returns_per_mode_values():
    cs = make_coefficients("additive", 3, noise_amp=0.5)
    out = cs.sigma(np.zeros(7), np.array([0.0]))
    assert out.shape == (7, 3)
    assert np.allclose(out, 0.5)


def test_eval_coefficient_fields():
    grid = Grid1D(0.0, 1.0, 8)
    cs = make_coefficients("bilinear", 2)
    x = Field(grid, np.linspace(0.1, 0.8, 8))
    fields = eval_coefficient(cs, "sigma", x, np.array([0.5]))
    assert len(fields) == 2
    assert fields[0].grid == grid
    with pytest.raises(ScenarioValidationError):
        eval_coefficient(cs, "params", x)


# -- control sets / processes ------------------------------------------------

def test_control_set_lattice():
    finite = ControlSet("finite", points=((0.0,), (1.0,)))
    assert len(finite.lattice()) == 2
    box = ControlSet("box", low=(-1.0,), high=(1.0,), lattice_size=5)
    lat = box.lattice()
    assert len(lat) == 5
    assert lat[0][0] == -1.0 and lat[-1][0] == 1.0


def test_control_set_validation():
    with pytest.raises(ScenarioValidationError):
        ControlSet("finite", points=())
    with pytest.raises(ScenarioValidationError):
        ControlSet("box", low=(1.0,), high=(-1.0,))
    with pytest.raises(ScenarioValidationError):
        ControlSet("ring")


def test_spike_control_window():
    scn = make_scenario(n_t=10, T=1.0)
    base = DeterministicControl.constant([0.0])
    spike = SpikeControl(base, [1.0], tau=0.3, eps=0.2)
    active = [spike.active(k, scn) for k in range(10)]
    # left-closed window [0.3, 0.5): steps 3 and 4 only
    assert active == [False] * 3 + [True] * 2 + [False] * 5
    assert np.allclose(spike.evaluate(3, scn), [1.0])
    assert np.allclose(spike.evaluate(5, scn), [0.0])


def test_spike_horizon_invariant():
    base = DeterministicControl.constant([0.0])
    spike = SpikeControl(base, [1.0], tau=0.9, eps=0.2)
    with pytest.raises(ScenarioValidationError, match="tau \\+ eps"):
        spike.validate_horizon(1.0)
    with pytest.raises(ScenarioValidationError):
        SpikeControl(base, [1.0], tau=0.0, eps=0.1)


def test_zero_length_spike_is_identity():
    scn = make_scenario(n_t=8, T=1.0)
    base = DeterministicControl.constant([0.25])
    spike = SpikeControl(base, [9.0], tau=0.5, eps=0.0)
    for k in range(8):
        assert np.allclose(spike.evaluate(k, scn), [0.25])


def test_block_control_table():
    u = DeterministicControl.from_blocks([(0.0,), (1.0,)], n_t=6)
    assert [u.evaluate(k, None)[0] for k in range(6)] == [0, 0, 0, 1, 1, 1]
    with pytest.raises(ScenarioValidationError):
        DeterministicControl.from_blocks([(0.0,), (1.0,), (2.0,)], n_t=7)


def test_feedback_control_binning():
    scn = make_scenario(n=4, n_t=4)
    fb = FeedbackControl(bin_edges=[0.0], points=[(-1.0,), (1.0,)])
    lo = fb.evaluate(0, scn, -np.ones((3, 4)))
    hi = fb.evaluate(0, scn, np.ones((3, 4)))
    assert np.all(lo[:, 0] == -1.0) and np.all(hi[:, 0] == 1.0)
    with pytest.raises(ScenarioValidationError):
        fb.evaluate(0, scn, None)


def test_mode_shapes_orthonormal():
    grid = Grid1D(0.0, 1.0, 32)
    shapes = sine_mode_shapes(grid, 4)
    gram = grid.h * shapes.T @ shapes
    assert np.allclose(gram, np.eye(4), atol=1e-12)
    with pytest.raises(ScenarioValidationError):
        NoiseModel(2, 2.0 * shapes[:, :2]).validate_shapes(grid)


# -- scenario invariants -----------------------------------------------------

def test_scenario_invariants():
    with pytest.raises(ScenarioValidationError):
        make_scenario(n_t=1)
    with pytest.raises(ScenarioValidationError):
        make_scenario(T=-1.0)


def test_sigma_eff_applies_shapes():
    scn = make_scenario("additive", shapes=True, noise_amp=0.3)
    x = np.zeros((5, scn.grid.n))
    eff = scn.sigma_eff(x, np.array([0.0]))
    assert np.allclose(eff, 0.3 * scn.noise.mode_shapes)


# -- config loading ----------------------------------------------------------

def test_load_scenario_round_trip():
    scn = load_scenario(fixture("bilinear.cfg"))
    assert scn.grid.n == 16
    assert scn.n_t == 64
    assert scn.T == 0.5
    assert scn.n_modes == 2
    assert scn.coeffs.name == "bilinear"
    assert scn.default_paths == 2000
    assert np.allclose(scn.base_control.evaluate(0, scn), [0.0])


def test_load_scenario_with_spike():
    scn = load_scenario(fixture("logistic_spike.cfg"))
    assert isinstance(scn.spike_control, SpikeControl)
    assert scn.spike_control.tau == pytest.approx(0.025)


def test_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grid]\nn = 8\n[coefficients]\npreset = additive\n"
                   "[time]\nhorizon = 1\nsteps = 8\n[plotting]\nstyle = x\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_scenario(cfg)


def test_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grid]\nn = 8\ncolor = red\n[coefficients]\n"
                   "preset = additive\n[time]\nhorizon = 1\nsteps = 8\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_scenario(cfg)


def test_missing_section_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grid]\nn = 8\n[time]\nhorizon = 1\nsteps = 8\n")
    with pytest.raises(ConfigError, match="missing config section"):
        load_scenario(cfg)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_scenario(tmp_path / "nope.cfg")


def test_mismatched_coefficients_rejected_at_load(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grid]\nn = 8\n[coefficients]\npreset = mismatched\n"
                   "[time]\nhorizon = 1\nsteps = 8\n")
    with pytest.raises(ScenarioValidationError, match="derivative-consistency"):
        load_scenario(cfg)


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SPDE_CONTROL_SEED", "99")
    scn = load_scenario(fixture("bilinear.cfg"))
    assert scn.seed == 99
