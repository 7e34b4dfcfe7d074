"""Classical iterative shrinkage-thresholding for sparse recovery.

Solves  min_x 0.5 * ||A x - y||^2 + lam * ||psi(x)||_1  by alternating a
gradient step on the data term with soft thresholding in the transform
domain. The threshold applied each step is rho * lam, the proximal
scaling of the step size; lam's free scale absorbs the convention.

The measurement A may be a dense matrix acting on a vector, or a
semi-tensor-product operator pair acting on a square image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import fft as spfft

from eqsense.autodiff import ShapeError
from eqsense.sampling import StpOperator, _power_iteration_sq

__all__ = [
    "SparseProblem",
    "OrthoTransform",
    "soft_threshold_array",
    "gradient_step",
    "ista_step",
    "objective",
    "ista_solve",
    "lipschitz_bound",
]


def soft_threshold_array(v: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


class OrthoTransform:
    """Orthonormal sparsifying transform: identity or 2-D type-II DCT.

    The DCT variant treats a length n*n vector as the column-stacked
    n-by-n image. Forward followed by inverse is exact to float
    round-off, which is what the solver's transform-domain step relies
    on.
    """

    def __init__(self, kind: str = "dct2", n: Optional[int] = None):
        if kind not in ("identity", "dct2"):
            raise ValueError(f"unknown transform kind {kind!r}")
        if kind == "dct2" and n is None:
            raise ValueError("dct2 transform needs the image side n")
        self.kind = kind
        self.n = n

    def _to_image(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 2:
            return x
        if x.size != self.n * self.n:
            raise ShapeError(f"signal of size {x.size} is not {self.n}x{self.n}")
        return x.reshape(self.n, self.n, order="F")

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.asarray(x, dtype=np.float64).copy()
        img = self._to_image(np.asarray(x, dtype=np.float64))
        out = spfft.dctn(img, type=2, norm="ortho")
        return out if np.asarray(x).ndim == 2 else out.flatten(order="F")

    def inverse(self, c: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.asarray(c, dtype=np.float64).copy()
        coef = self._to_image(np.asarray(c, dtype=np.float64))
        out = spfft.idctn(coef, type=2, norm="ortho")
        return out if np.asarray(c).ndim == 2 else out.flatten(order="F")


@dataclass
class SparseProblem:
    """Measurement model, data and solver constants for one instance."""

    phi: Union[np.ndarray, StpOperator]
    y: np.ndarray
    lam: float = 0.01
    rho: Optional[float] = None  # defaults to 1/L at solve time

    def apply(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.phi, StpOperator):
            return self.phi.measure_array(x)
        return self.phi @ x

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        if isinstance(self.phi, StpOperator):
            op = self.phi
            phi1 = op.phi1.data.reshape(op.m, op.n)
            phi2 = op.phi2.data.reshape(op.m, op.n)
            return phi1.T @ r @ phi2
        return self.phi.T @ r


def lipschitz_bound(phi: Union[np.ndarray, StpOperator]) -> float:
    """Largest eigenvalue of the normal operator, by power iteration."""
    if isinstance(phi, StpOperator):
        return phi.lipschitz()
    return _power_iteration_sq(np.asarray(phi, dtype=np.float64))


def gradient_step(x_prev: np.ndarray, phi, y: np.ndarray, rho: float) -> np.ndarray:
    """r = x - rho * A^T (A x - y), the descent step on the data term."""
    problem = phi if isinstance(phi, SparseProblem) else SparseProblem(phi, y)
    try:
        resid = problem.apply(x_prev) - y
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return x_prev - rho * problem.adjoint(resid)


def ista_step(x_prev: np.ndarray, problem: SparseProblem, psi: OrthoTransform) -> np.ndarray:
    rho = problem.rho if problem.rho is not None else 1.0 / lipschitz_bound(problem.phi)
    r = gradient_step(x_prev, problem.phi, problem.y, rho)
    return psi.inverse(soft_threshold_array(psi.forward(r), rho * problem.lam))


def objective(x: np.ndarray, problem: SparseProblem, psi: OrthoTransform) -> float:
    resid = problem.apply(x) - problem.y
    return 0.5 * float(np.sum(resid * resid)) + problem.lam * float(
        np.sum(np.abs(psi.forward(x)))
    )


def ista_solve(
    problem: SparseProblem,
    psi: OrthoTransform,
    max_iter: int = 200,
    tol: float = 1e-6,
    x0: Optional[np.ndarray] = None,
):
    """Iterate to convergence or the iteration cap.

    Stops when the relative l2 change of the iterate drops below tol.
    Returns the final iterate and the objective value after every step.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if tol < 0:
        raise ValueError("tol must be non-negative")
    if problem.rho is None:
        problem = SparseProblem(problem.phi, problem.y, problem.lam, 1.0 / lipschitz_bound(problem.phi))
    x = np.zeros_like(problem.adjoint(problem.y)) if x0 is None else np.asarray(x0, dtype=np.float64)
    history = []
    for _ in range(max_iter):
        x_next = ista_step(x, problem, psi)
        history.append(objective(x_next, problem, psi))
        change = np.linalg.norm(x_next - x) / max(np.linalg.norm(x), 1e-12)
        x = x_next
        if change < tol:
            break
    return x, history
