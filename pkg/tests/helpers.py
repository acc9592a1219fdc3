"""Shared scenario builders for the test suite."""
import numpy as np

from spde_control.grids import Field, Grid1D
from spde_control.operators import EllipticOperator
from spde_control.scenario import (ControlSet, DeterministicControl,
                                   NoiseModel, Scenario, SpikeControl,
                                   make_coefficients, sine_mode_shapes)


def make_scenario(preset="bilinear", a=0.0, b=1.0, n=16, n_t=64, T=0.5, K=2,
                  seed=7, x0_amp=1.0, base=(0.0,), spike=None, shapes=True,
                  control_points=((-0.5,), (0.5,)), default_paths=1000,
                  **params):
    """One-call scenario assembly with sensible smoke-test defaults.

    spike, when given, is a (v, tau, eps) triple wrapping the base control.
    """
    grid = Grid1D(a, b, n)
    coeffs = make_coefficients(preset, K, **params)
    noise = NoiseModel(K, sine_mode_shapes(grid, K) if shapes else None)
    x0 = Field(grid, x0_amp * np.sin(np.pi * (grid.nodes - a) / (b - a)))
    bc = DeterministicControl.constant(np.asarray(base, float))
    sc = None
    if spike is not None:
        v, tau, eps = spike
        sc = SpikeControl(bc, np.asarray(v, float), tau, eps)
    return Scenario(grid=grid, op=EllipticOperator(), coeffs=coeffs,
                    controls=ControlSet(kind="finite", points=control_points),
                    noise=noise, T=T, n_t=n_t, x0=x0, seed=seed,
                    default_paths=default_paths, base_control=bc,
                    spike_control=sc, name=preset)
