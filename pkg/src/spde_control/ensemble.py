"""Shared Monte Carlo noise ensembles.

Increments are generated per path from a counter-based generator keyed by
(base seed, path index), so any path's block is regenerable bit-exactly
without touching the others.  Every comparison-style computation in this
package (spike expansions, duality checks, brute-force cost tables) reuses
one ensemble: common random numbers are structural, not optional.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _path_block(seed: int, path: int, n_steps: int, n_modes: int, dt: float) -> np.ndarray:
    key = (int(seed) << 64) + path
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal((n_steps, n_modes)) * np.sqrt(dt)


@dataclass
class PathEnsemble:
    """M paths of K-mode N(0, dt) Wiener increments on a fixed time grid."""

    seed: int
    n_paths: int
    n_steps: int
    n_modes: int
    dt: float
    dW: np.ndarray = field(repr=False, default=None)

    @classmethod
    def generate(cls, seed: int, n_paths: int, n_steps: int, n_modes: int,
                 dt: float) -> "PathEnsemble":
        dW = np.empty((n_paths, n_steps, n_modes))
        for i in range(n_paths):
            dW[i] = _path_block(seed, i, n_steps, n_modes, dt)
        return cls(seed, n_paths, n_steps, n_modes, dt, dW)

    @classmethod
    def for_scenario(cls, scn, n_paths=None, seed=None) -> "PathEnsemble":
        return cls.generate(scn.seed if seed is None else seed,
                            n_paths or scn.default_paths,
                            scn.n_t, scn.n_modes, scn.dt)

    def regenerate_path(self, path: int) -> np.ndarray:
        """Bit-exact reconstruction of one path's increment block."""
        return _path_block(self.seed, path, self.n_steps, self.n_modes, self.dt)
