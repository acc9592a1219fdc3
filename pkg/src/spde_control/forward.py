"""Path simulation: state equation, spike-perturbed state, first and second
order response equations, and the associated product process on the square.

Time stepping is semi-implicit Euler-Maruyama, implicit only in the linear
elliptic part: (I - dt A) x_{k+1} = x_k + dt drift(x_k) + diffusion(x_k) dW_k.
All simulations of one experiment share a PathEnsemble (common random
numbers) and are vectorized over paths; reductions run in fixed order so
repeated runs are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ensemble import PathEnsemble
from .operators import ImplicitStepper, sobolev_norms_batch, SpectralBasis
from .scenario import ControlProcess, Scenario, SpikeControl


class BlowUpError(RuntimeError):
    """Simulation produced non-finite values; carries the offending step."""

    def __init__(self, step: int):
        super().__init__(f"simulation blew up at step {step}")
        self.step = step


@dataclass
class Trajectory:
    """Stored path ensemble trajectory plus the controls actually applied."""

    values: Optional[np.ndarray]  # (n_t+1, M, n) or (n_t+1, M, n, n)
    controls: list
    final: np.ndarray

    def __getitem__(self, k):
        if self.values is None:
            raise ValueError("trajectory was simulated without storage")
        return self.values[k]


@dataclass
class SourcedLinearSPDE:
    """Linearized dynamics along a reference path: multiplicative drift and
    diffusion coefficients plus additive sources, all per time step.

    The four members are per-step providers k -> array so that coefficient
    trajectories need not be materialized; shapes are (M, n) for drift
    pieces and (M, n, K) for diffusion pieces.
    """

    drift_coeff: Callable
    diffusion_coeff: Callable
    drift_source: Callable
    diffusion_source: Callable


def _stepper(scn: Scenario) -> ImplicitStepper:
    return ImplicitStepper(scn.grid, scn.op, scn.dt)


def _check_finite(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)):
        raise BlowUpError(step)


def _noise_sum(diffusion: np.ndarray, dw: np.ndarray) -> np.ndarray:
    return np.einsum("pnk,pk->pn", diffusion, dw)


def simulate_state(scn: Scenario, u: ControlProcess, ens: PathEnsemble,
                   store: bool = True, step_hook: Callable = None) -> Trajectory:
    """Simulate the controlled state over the ensemble.

    step_hook(k, x_k, u_k) is called at every left endpoint before the
    step, which lets cost-style accumulators run without trajectory
    storage.
    """
    m, n = ens.n_paths, scn.grid.n
    stepper = _stepper(scn)
    x = np.tile(scn.x0.values, (m, 1))
    values = np.empty((scn.n_t + 1, m, n)) if store else None
    if store:
        values[0] = x
    controls = []
    for k in range(scn.n_t):
        uk = u.evaluate(k, scn, x)
        controls.append(np.asarray(uk, dtype=float))
        if step_hook is not None:
            step_hook(k, x, uk)
        rhs = x + scn.dt * scn.coeffs.b(x, uk) \
            + _noise_sum(scn.sigma_eff(x, uk), ens.dW[:, k])
        x = stepper.solve1(rhs)
        _check_finite(x, k + 1)
        if store:
            values[k + 1] = x
    return Trajectory(values, controls, x)


def simulate_linear(scn: Scenario, sys: SourcedLinearSPDE, ens: PathEnsemble,
                    store: bool = True, step_hook: Callable = None) -> Trajectory:
    """Simulate a sourced linear equation (zero initial condition) with the
    same semi-implicit scheme and frozen adapted coefficients."""
    m, n = ens.n_paths, scn.grid.n
    stepper = _stepper(scn)
    y = np.zeros((m, n))
    values = np.empty((scn.n_t + 1, m, n)) if store else None
    if store:
        values[0] = y
    for k in range(scn.n_t):
        if step_hook is not None:
            step_hook(k, y)
        drift = sys.drift_coeff(k) * y + sys.drift_source(k)
        diffusion = sys.diffusion_coeff(k) * y[..., None] + sys.diffusion_source(k)
        y = stepper.solve1(y + scn.dt * drift + _noise_sum(diffusion, ens.dW[:, k]))
        _check_finite(y, k + 1)
        if store:
            values[k + 1] = y
    return Trajectory(values, [], y)


def simulate_tensor(scn: Scenario, xbar: Trajectory, ubar: ControlProcess,
                    ens: PathEnsemble, phi: Callable = None, psi: Callable = None,
                    store: bool = True, step_hook: Callable = None) -> Trajectory:
    """Simulate the product-space linear equation on the square.

    The elliptic part is the Kronecker-sum operator; the drift multiplier
    couples both coordinates of the reference state and the diffusion
    multiplier acts per retained noise mode.  phi/psi are per-step source
    providers k -> (M, n, n) and k -> (M, n, n, K); None means zero.
    """
    m, n = ens.n_paths, scn.grid.n
    stepper = _stepper(scn)
    Y = np.zeros((m, n, n))
    values = np.empty((scn.n_t + 1, m, n, n)) if store else None
    if store:
        values[0] = Y
    for k in range(scn.n_t):
        if step_hook is not None:
            step_hook(k, Y)
        x = xbar[k]
        ub = ubar.evaluate(k, scn, x)
        bx = scn.coeffs.b_x(x, ub)
        sx = scn.sigma_x_eff(x, ub)
        c = bx[:, :, None] + bx[:, None, :] + np.einsum("pik,pjk->pij", sx, sx)
        drift = c * Y
        phik = phi(k) if phi is not None else None
        if phik is not None:
            drift = drift + phik
        psik = psi(k) if psi is not None else None
        noise = np.zeros((m, n, n))
        for mode in range(scn.n_modes):
            dmode = sx[:, :, mode][:, :, None] + sx[:, :, mode][:, None, :]
            z = dmode * Y
            if psik is not None:
                z = z + psik[..., mode]
            noise += z * ens.dW[:, k, mode][:, None, None]
        Y = stepper.solve2(Y + scn.dt * drift + noise)
        _check_finite(Y, k + 1)
        if store:
            values[k + 1] = Y
    return Trajectory(values, [], Y)


# -- coefficient providers along a reference path ---------------------------

class _Memo:
    """Caches the provider output for the most recent step index."""

    def __init__(self, fn):
        self.fn = fn
        self.k = None
        self.val = None

    def __call__(self, k):
        if k != self.k:
            self.val = self.fn(k)
            self.k = k
        return self.val


def _spike_inactive(u: ControlProcess, k: int, scn: Scenario) -> bool:
    return isinstance(u, SpikeControl) and not u.active(k, scn)


def first_variation_system(scn, xbar: Trajectory, ubar: ControlProcess,
                           ueps: ControlProcess) -> SourcedLinearSPDE:
    """Linearization along xbar sourced by the control perturbation: the
    drift source is b(xbar, u_eps) - b(xbar, ubar) and analogously for the
    diffusion, both vanishing off the spike window."""

    def terms(k):
        x = xbar[k]
        ub = ubar.evaluate(k, scn, x)
        a = scn.coeffs.b_x(x, ub)
        s = scn.sigma_x_eff(x, ub)
        if _spike_inactive(ueps, k, scn):
            return a, s, np.zeros_like(x), np.zeros_like(s)
        ue = ueps.evaluate(k, scn, x)
        phi = scn.coeffs.b(x, ue) - scn.coeffs.b(x, ub)
        psi = scn.sigma_eff(x, ue) - scn.sigma_eff(x, ub)
        return a, s, phi, psi

    memo = _Memo(terms)
    return SourcedLinearSPDE(lambda k: memo(k)[0], lambda k: memo(k)[1],
                             lambda k: memo(k)[2], lambda k: memo(k)[3])


def second_variation_system(scn, xbar: Trajectory, ubar: ControlProcess,
                            ueps: ControlProcess, y: Trajectory) -> SourcedLinearSPDE:
    """Second-order response: quadratic curvature sources in the first
    order response y plus the spike-window derivative jumps acting on y."""

    def terms(k):
        x = xbar[k]
        yk = y[k]
        ub = ubar.evaluate(k, scn, x)
        a = scn.coeffs.b_x(x, ub)
        s = scn.sigma_x_eff(x, ub)
        phi = 0.5 * scn.coeffs.b_xx(x, ub) * yk ** 2
        psi = 0.5 * scn.sigma_xx_eff(x, ub) * (yk ** 2)[..., None]
        if not _spike_inactive(ueps, k, scn):
            ue = ueps.evaluate(k, scn, x)
            phi = phi + (scn.coeffs.b_x(x, ue) - a) * yk
            psi = psi + (scn.sigma_x_eff(x, ue) - s) * yk[..., None]
        return a, s, phi, psi

    memo = _Memo(terms)
    return SourcedLinearSPDE(lambda k: memo(k)[0], lambda k: memo(k)[1],
                             lambda k: memo(k)[2], lambda k: memo(k)[3])


def probe_system(scn, xbar: Trajectory, ubar: ControlProcess,
                 phi: np.ndarray, psi: np.ndarray) -> SourcedLinearSPDE:
    """Linearization along xbar driven by deterministic probe sources
    phi (n_t, n) and psi (n_t, n, K)."""
    m = xbar[0].shape[0]
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)

    def terms(k):
        x = xbar[k]
        ub = ubar.evaluate(k, scn, x)
        return (scn.coeffs.b_x(x, ub), scn.sigma_x_eff(x, ub),
                np.broadcast_to(phi[k], x.shape),
                np.broadcast_to(psi[k], x.shape + (scn.n_modes,)))

    memo = _Memo(terms)
    return SourcedLinearSPDE(lambda k: memo(k)[0], lambda k: memo(k)[1],
                             lambda k: memo(k)[2], lambda k: memo(k)[3])


def spike_tensor_sources(scn, xbar: Trajectory, ubar: ControlProcess,
                         ueps: ControlProcess, y: Trajectory):
    """Source pair driving the product process of the first order response.

    Both sources combine the response with the spike-window coefficient
    increments symmetrically in the two coordinates; they vanish off the
    spike window."""

    def phi(k):
        if _spike_inactive(ueps, k, scn):
            return None
        x = xbar[k]
        yk = y[k]
        ub = ubar.evaluate(k, scn, x)
        ue = ueps.evaluate(k, scn, x)
        db = scn.coeffs.b(x, ue) - scn.coeffs.b(x, ub)
        ds = scn.sigma_eff(x, ue) - scn.sigma_eff(x, ub)
        sxy = scn.sigma_x_eff(x, ub) * yk[..., None]
        out = yk[:, :, None] * db[:, None, :] + yk[:, None, :] * db[:, :, None]
        cross = np.einsum("pik,pjk->pij", sxy, ds)
        out += cross + np.swapaxes(cross, 1, 2)
        out += np.einsum("pik,pjk->pij", ds, ds)
        return out

    def psi(k):
        if _spike_inactive(ueps, k, scn):
            return None
        x = xbar[k]
        yk = y[k]
        ub = ubar.evaluate(k, scn, x)
        ue = ueps.evaluate(k, scn, x)
        ds = scn.sigma_eff(x, ue) - scn.sigma_eff(x, ub)
        return (ds[:, :, None, :] * yk[:, None, :, None]
                + ds[:, None, :, :] * yk[:, :, None, None])

    return phi, psi


# -- cost functional --------------------------------------------------------

@dataclass
class CostEstimate:
    mean: float
    se: float
    per_path: np.ndarray


def _finalize_cost(scn, acc: np.ndarray, x_final: np.ndarray) -> CostEstimate:
    acc = acc + scn.grid.h * np.sum(scn.coeffs.h(x_final), axis=-1)
    return CostEstimate(float(np.mean(acc)),
                        float(np.std(acc, ddof=1) / np.sqrt(len(acc))), acc)


def cost(scn: Scenario, traj: Trajectory, u: ControlProcess = None) -> CostEstimate:
    """Monte Carlo cost: left-endpoint time quadrature of the running cost
    plus the terminal term, with the standard error of the mean."""
    m = traj[0].shape[0]
    acc = np.zeros(m)
    for k in range(scn.n_t):
        uk = traj.controls[k] if traj.controls else u.evaluate(k, scn, traj[k])
        acc += scn.dt * scn.grid.h * np.sum(scn.coeffs.l(traj[k], uk), axis=-1)
    return _finalize_cost(scn, acc, traj.final)


def simulate_cost(scn: Scenario, u: ControlProcess, ens: PathEnsemble) -> CostEstimate:
    """Cost without trajectory storage (streaming accumulation)."""
    acc = np.zeros(ens.n_paths)

    def hook(k, x, uk):
        acc[:] += scn.dt * scn.grid.h * np.sum(scn.coeffs.l(x, uk), axis=-1)

    traj = simulate_state(scn, u, ens, store=False, step_hook=hook)
    return _finalize_cost(scn, acc, traj.final)


# -- joint spike-expansion statistics ---------------------------------------

@dataclass
class ExpansionStats:
    """Sup-over-time moments of the spike expansion, with standard errors.

    Statistics: first-order response second moment, second-order response
    first moment, squared expansion residual, and the fractional-order
    terminal moment of the first-order response.
    """

    y_moment: float
    y_moment_se: float
    z_moment: float
    z_moment_se: float
    residual: float
    residual_se: float
    hgamma: float
    hgamma_se: float


def spike_expansion_stats(scn: Scenario, ubar: ControlProcess, v, tau: float,
                          eps: float, ens: PathEnsemble,
                          gamma: float = 0.25) -> ExpansionStats:
    """Lockstep simulation of the reference state, the spike-perturbed
    state and both response processes on common noise, streaming the
    moment statistics without trajectory storage."""
    m, n = ens.n_paths, scn.grid.n
    stepper = _stepper(scn)
    ueps = SpikeControl(ubar, v, tau, eps)
    ueps.validate_horizon(scn.T)
    h = scn.grid.h
    xb = np.tile(scn.x0.values, (m, 1))
    xe = xb.copy()
    y = np.zeros((m, n))
    z = np.zeros((m, n))
    y_sq = np.zeros((scn.n_t + 1, m))
    z_nrm = np.zeros((scn.n_t + 1, m))
    r_sq = np.zeros((scn.n_t + 1, m))
    for k in range(scn.n_t):
        ub = ubar.evaluate(k, scn, xb)
        ue = ueps.evaluate(k, scn, xe)
        dwk = ens.dW[:, k]
        bx = scn.coeffs.b_x(xb, ub)
        sx = scn.sigma_x_eff(xb, ub)
        if _spike_inactive(ueps, k, scn):
            phi1 = 0.0
            psi1 = 0.0
            phi2 = 0.5 * scn.coeffs.b_xx(xb, ub) * y ** 2
            psi2 = 0.5 * scn.sigma_xx_eff(xb, ub) * (y ** 2)[..., None]
        else:
            phi1 = scn.coeffs.b(xb, ue) - scn.coeffs.b(xb, ub)
            psi1 = scn.sigma_eff(xb, ue) - scn.sigma_eff(xb, ub)
            phi2 = (0.5 * scn.coeffs.b_xx(xb, ub) * y ** 2
                    + (scn.coeffs.b_x(xb, ue) - bx) * y)
            psi2 = (0.5 * scn.sigma_xx_eff(xb, ub) * (y ** 2)[..., None]
                    + (scn.sigma_x_eff(xb, ue) - sx) * y[..., None])
        rhs_b = xb + scn.dt * scn.coeffs.b(xb, ub) \
            + _noise_sum(scn.sigma_eff(xb, ub), dwk)
        rhs_e = xe + scn.dt * scn.coeffs.b(xe, ue) \
            + _noise_sum(scn.sigma_eff(xe, ue), dwk)
        rhs_y = y + scn.dt * (bx * y + phi1) \
            + _noise_sum(sx * y[..., None] + psi1, dwk)
        rhs_z = z + scn.dt * (bx * z + phi2) \
            + _noise_sum(sx * z[..., None] + psi2, dwk)
        xb = stepper.solve1(rhs_b)
        xe = stepper.solve1(rhs_e)
        y = stepper.solve1(rhs_y)
        z = stepper.solve1(rhs_z)
        _check_finite(xe, k + 1)
        y_sq[k + 1] = h * np.sum(y ** 2, axis=-1)
        z_nrm[k + 1] = np.sqrt(h * np.sum(z ** 2, axis=-1))
        res = xe - xb - y - z
        r_sq[k + 1] = h * np.sum(res ** 2, axis=-1)
    basis = SpectralBasis.build(scn.grid, scn.op)
    hg = sobolev_norms_batch(y, basis, gamma) ** 2

    def sup_stat(per_step):
        means = per_step.mean(axis=1)
        k = int(np.argmax(means))
        se = float(per_step[k].std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
        return float(means[k]), se

    ym, yse = sup_stat(y_sq)
    zm, zse = sup_stat(z_nrm)
    rm, rse = sup_stat(r_sq)
    return ExpansionStats(ym, yse, zm, zse, rm, rse, float(hg.mean()),
                          float(hg.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0)
