"""Compressive-sensing image reconstruction toolkit.

Whole-image measurement through a learnable semi-tensor-product
operator, a classical ISTA solver, a neural ISTA iteration block, and a
deep-equilibrium fixed-point layer with Anderson acceleration, plus
training, evaluation and ablation tooling around them.
"""

from eqsense.autodiff import Tensor, no_grad, AdamState, adam_step
from eqsense.sampling import StpOperator, size_for_ratio, gaussian_init
from eqsense.equilibrium import SolverConfig, FixedPointResult
from eqsense.block import BlockConfig
from eqsense.model import Model

__version__ = "0.1.0"
