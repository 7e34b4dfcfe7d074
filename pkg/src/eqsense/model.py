"""The full reconstruction model: sampling operator plus iteration block.

Bundles construction, parameter flattening, the numpy-facing iteration
map used by the fixed-point solvers, and single-image reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from eqsense.autodiff import Tensor, no_grad
from eqsense.block import BlockConfig, IstaBlockParams, ista_block_forward, validate_mask
from eqsense.equilibrium import FixedPointResult, SolverConfig, anderson_solve
from eqsense.sampling import StpOperator

__all__ = ["Model", "FULL_MASK"]

FULL_MASK = (1, 1, 1, 1, 1, 1, 1)


@dataclass
class Model:
    stp: StpOperator
    block: IstaBlockParams
    config: BlockConfig

    @classmethod
    def create(cls, n: int, ratio: float, config: Optional[BlockConfig] = None, seed: int = 0) -> "Model":
        """Fresh model at an image side and sampling ratio.

        The step size starts at 1/L for the initial measurement pair,
        which keeps the immediate-reconstruction map non-expansive.
        """
        config = config or BlockConfig()
        stp = StpOperator.initialize(n, ratio, seed)
        rho0 = 1.0 / max(stp.lipschitz(), 1e-12)
        block = IstaBlockParams.initialize(config, rho0=rho0, seed=seed + 17)
        return cls(stp, block, config)

    @property
    def n(self) -> int:
        return self.stp.n

    @property
    def m(self) -> int:
        return self.stp.m

    def parameters(self) -> dict:
        out = dict(self.stp.parameters())
        out.update(self.block.parameters())
        return out

    def iteration_map(self, y: np.ndarray, mask=FULL_MASK):
        """Numpy-in, numpy-out iteration map closed over a measurement batch.

        Runs with detached parameters and no recording, which is what the
        forward fixed-point solve wants.
        """
        mask = validate_mask(mask)
        stp = self.stp.detached()
        block = self.block.detached()
        y_t = Tensor(np.asarray(y, dtype=np.float64))

        def f(x: np.ndarray) -> np.ndarray:
            with no_grad():
                out, _ = ista_block_forward(Tensor(x), y_t, stp, block, mask)
            return out.data

        return f

    def tensor_step(self, x_t: Tensor, y_t: Tensor, mask=FULL_MASK):
        """Recorded application with live parameters (for gradient work)."""
        return ista_block_forward(x_t, y_t, self.stp, self.block, mask)

    def detached_step_fn(self, mask=FULL_MASK):
        stp = self.stp.detached()
        block = self.block.detached()

        def fn(x_t: Tensor, y_t: Tensor):
            return ista_block_forward(x_t, y_t, stp, block, mask)

        return fn

    def initial_estimate(self, Y: np.ndarray) -> np.ndarray:
        return self.stp.initial_reconstruct_array(Y)

    def reconstruct(
        self,
        Y: np.ndarray,
        solver: Optional[SolverConfig] = None,
        mask=FULL_MASK,
        x0: Optional[np.ndarray] = None,
    ) -> FixedPointResult:
        """Equilibrium reconstruction of one m-by-m measurement."""
        solver = solver or SolverConfig()
        z0 = self.initial_estimate(Y) if x0 is None else np.asarray(x0, dtype=np.float64)
        f = self.iteration_map(Y.reshape(1, 1, self.m, self.m), mask)
        result = anderson_solve(f, z0.reshape(1, 1, self.n, self.n), solver)
        result.x_star = result.x_star.reshape(self.n, self.n)
        return result
