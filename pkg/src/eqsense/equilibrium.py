"""Fixed-point solvers and the implicit backward pass.

The forward problem is x = f(x) for the iteration map of the
reconstruction block. ``picard_solve`` iterates plainly;
``anderson_solve`` extrapolates with the affine combination of recent
iterates that minimizes the combined residual, which is what keeps the
iteration from stalling or wandering off.

The backward problem is the adjoint fixed point v = g + J^T v at the
solution, solved with the same machinery; parameter gradients then come
from a single seeded reverse pass through one recorded application of
the block. ``unrolled_solve_with_grad`` keeps the whole iteration on
the tape instead and exists to validate the implicit route.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from eqsense.autodiff import Tensor, backward_from, zero_grads

__all__ = [
    "SolverConfig",
    "FixedPointResult",
    "DivergenceError",
    "picard_solve",
    "anderson_solve",
    "BlockTape",
    "DeqGradients",
    "deq_backward",
    "unrolled_solve_with_grad",
]

_OVERFLOW_NORM = 1e12


@dataclass
class SolverConfig:
    max_iter: int = 50
    tol: float = 1e-5
    anderson_memory: int = 5
    beta: float = 1.0
    ls_reg: float = 1e-4

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.anderson_memory < 1:
            raise ValueError("anderson_memory must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")


@dataclass
class FixedPointResult:
    x_star: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    residual_trace: list = field(default_factory=list)


class DivergenceError(RuntimeError):
    """Iteration left the finite regime; carries the last finite iterate."""

    def __init__(self, message: str, last_state: Optional[np.ndarray] = None):
        super().__init__(message)
        self.last_state = last_state


def _residual(fx: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(fx - x) / max(np.linalg.norm(x), 1e-12))


def _check_finite(fx: np.ndarray, last_good: np.ndarray) -> None:
    if not np.all(np.isfinite(fx)) or np.linalg.norm(fx) > _OVERFLOW_NORM:
        raise DivergenceError(
            "fixed-point iteration diverged (NaN or norm above 1e12)",
            last_state=last_good.copy(),
        )


def picard_solve(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Plain iteration x <- f(x) with the shared stopping rule."""
    x = np.asarray(x0, dtype=np.float64).copy()
    trace = []
    for k in range(cfg.max_iter):
        fx = f(x)
        _check_finite(fx, x)
        res = _residual(fx, x)
        trace.append(res)
        if res <= cfg.tol:
            return FixedPointResult(x, res, k + 1, True, trace)
        x = fx
    return FixedPointResult(x, trace[-1], cfg.max_iter, False, trace)


def anderson_solve(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Anderson-accelerated fixed-point iteration.

    Keeps the last `anderson_memory` iterates X and images F, solves

        min_a ||(F - X) a||^2   subject to   sum(a) = 1

    through ridge-regularized normal equations, and steps to
    (1-beta) * X a + beta * F a. With memory 1 the combination collapses
    to a = [1] and the update is exactly a Picard step. A singular
    solve, if the ridge somehow fails, falls back to Picard for that
    iteration.

    The reported residual is always evaluated at the returned iterate.
    """
    shape = np.asarray(x0).shape
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    mem = cfg.anderson_memory
    xs: list = []
    fs: list = []
    trace = []
    for k in range(cfg.max_iter):
        fx = f(x.reshape(shape)).reshape(-1)
        _check_finite(fx, x)
        res = _residual(fx, x)
        trace.append(res)
        if res <= cfg.tol:
            return FixedPointResult(x.reshape(shape).copy(), res, k + 1, True, trace)
        xs.append(x.copy())
        fs.append(fx.copy())
        if len(xs) > mem:
            xs.pop(0)
            fs.pop(0)
        p = len(xs)
        if p == 1:
            x = fx.copy()
            continue
        X = np.stack(xs, axis=1)
        F = np.stack(fs, axis=1)
        G = F - X
        # ridge on the scale-normalized Gram matrix: scaling G does not move
        # the constrained minimizer, but an absolute ridge would swamp the
        # normal equations once residuals get small
        gscale = np.linalg.norm(G, axis=0).max()
        if gscale <= 0 or not np.isfinite(gscale):
            x = fx.copy()
            continue
        Gn = G / gscale
        H = Gn.T @ Gn + cfg.ls_reg * np.eye(p)
        try:
            alpha = np.linalg.solve(H, np.ones(p))
            s = alpha.sum()
            if not np.isfinite(s) or abs(s) < 1e-300:
                raise np.linalg.LinAlgError("degenerate combination")
            alpha /= s
            x = (1.0 - cfg.beta) * (X @ alpha) + cfg.beta * (F @ alpha)
        except np.linalg.LinAlgError:
            x = fx.copy()
    return FixedPointResult(x.reshape(shape).copy(), trace[-1], cfg.max_iter, False, trace)


class BlockTape:
    """One recorded application of the iteration map at a point.

    Two recordings are kept: a full one whose leaves are the state, the
    injection and every parameter (for the final gradient pass), and a
    parameter-detached one used for the repeated state-only
    vector-Jacobian products of the adjoint solve, which skips all
    kernel-gradient work.
    """

    def __init__(self, fn, fn_detached, x_star: np.ndarray, y: np.ndarray, params: dict):
        self.shape = x_star.shape
        self.params = params
        self.x_leaf = Tensor(np.asarray(x_star, dtype=np.float64), requires_grad=True)
        self.y_leaf = Tensor(np.asarray(y, dtype=np.float64), requires_grad=True)
        self.out, self.aux = fn(self.x_leaf, self.y_leaf)
        self._x_only = Tensor(self.x_leaf.data, requires_grad=True)
        self._out_x, _ = fn_detached(self._x_only, self.y_leaf.detach())

    def value(self) -> np.ndarray:
        return self.out.data

    def vjp_state(self, seed: np.ndarray) -> np.ndarray:
        """J^T seed where J is the Jacobian of the map in the state."""
        self._x_only.zero_grad()
        backward_from(self._out_x, seed.reshape(self._out_x.data.shape))
        g = self._x_only.grad
        return np.zeros(self.shape) if g is None else g.reshape(self.shape).copy()

    def vjp_full(self, seed: np.ndarray) -> tuple:
        """Seeded pass through the full recording.

        Returns (parameter gradient dict, gradient wrt the injection).
        """
        leaves = list(self.params.values()) + [self.x_leaf, self.y_leaf]
        zero_grads(leaves)
        backward_from(self.out, seed.reshape(self.out.data.shape))
        theta = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
            for name, t in self.params.items()
        }
        gy = self.y_leaf.grad
        gy = np.zeros_like(self.y_leaf.data) if gy is None else gy.copy()
        zero_grads(leaves)
        return theta, gy


@dataclass
class DeqGradients:
    theta: dict
    y: np.ndarray
    adjoint: np.ndarray
    converged: bool


def deq_backward(
    tape: BlockTape,
    upstream_grad: np.ndarray,
    cfg: SolverConfig,
    neumann_only: bool = False,
) -> DeqGradients:
    """Implicit-differentiation backward pass at a converged fixed point.

    Solves the adjoint equation v = g + J^T v with Anderson acceleration
    and returns v^T dF/dtheta and v^T dF/dy from one seeded reverse pass.
    If the adjoint solve does not converge, the truncated Neumann sum
    with max_iter terms is returned instead, flagged as such; that sum
    equals the gradient of a max_iter-step unrolled solve. Callers that
    already know the forward point is off its fixed point (so the
    adjoint cannot converge) can set `neumann_only` and skip straight
    to the truncated sum.
    """
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(tape.shape)
    converged = False
    v = None
    if not neumann_only:
        def adjoint_map(vv: np.ndarray) -> np.ndarray:
            return g + tape.vjp_state(vv)

        try:
            result = anderson_solve(adjoint_map, g, cfg)
            v = result.x_star
            converged = result.converged
        except DivergenceError:
            converged = False
        if not converged:
            warnings.warn(
                "adjoint fixed-point solve did not converge; using truncated Neumann sum"
            )
    if not converged:
        v = g.copy()
        term = g.copy()
        for _ in range(cfg.max_iter):
            term = tape.vjp_state(term)
            v += term
    theta, gy = tape.vjp_full(v)
    return DeqGradients(theta=theta, y=gy, adjoint=v, converged=converged)


def unrolled_solve_with_grad(fn, x0: np.ndarray, k_steps: int) -> Tensor:
    """k Picard steps recorded on the tape; memory grows with k.

    `fn` maps a state Tensor to the next state Tensor (the injection is
    closed over). A backward pass from any scalar of the returned tensor
    yields exact unrolled gradients through all k applications.
    """
    if k_steps < 1:
        raise ValueError("k_steps must be at least 1")
    x = Tensor(np.asarray(x0, dtype=np.float64))
    for _ in range(k_steps):
        x = fn(x)
    return x
