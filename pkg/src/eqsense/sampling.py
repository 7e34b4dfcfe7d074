"""Whole-image measurement through a semi-tensor product operator.

A small matrix pair (phi1, phi2) measures an n-by-n image as
Y = phi1 @ X @ phi2.T without block partitioning; a second learnable
pair (rec1, rec2) maps the measurement back to an initial estimate
X0 = rec1 @ Y @ rec2.T. With t = n, the matrix form is the same linear
map as the Kronecker-lifted product (phi ⊗ I_t) acting on the
column-stacked image, which is what ``stp_left_product`` computes
without ever materializing the Kronecker factor.
"""

from __future__ import annotations

import math

import numpy as np

from eqsense.autodiff import ShapeError, Tensor, matmul, no_grad, transpose2d

__all__ = [
    "StpOperator",
    "size_for_ratio",
    "gaussian_init",
    "stp_left_product",
    "measure_single",
    "mutual_coherence",
    "operator_lipschitz",
    "vectorize",
    "unvectorize",
]


def vectorize(X: np.ndarray) -> np.ndarray:
    """Column-stack a matrix into a vector; the layout every lifted
    product in this module assumes."""
    return np.asarray(X, dtype=np.float64).flatten(order="F")


def unvectorize(v: np.ndarray, rows: int) -> np.ndarray:
    """Inverse of ``vectorize``; the round trip is exact."""
    return np.asarray(v, dtype=np.float64).reshape(rows, -1, order="F")


def size_for_ratio(n: int, ratio: float) -> int:
    """Measurement side length m with (m/n)^2 as close to `ratio` as rounding allows.

    Rounds half up, so n=256 at 10% gives m = round(80.95...) = 81.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    m = int(math.floor(n * math.sqrt(ratio) + 0.5))
    return max(1, min(n, m))


def gaussian_init(m: int, n: int, seed: int) -> np.ndarray:
    """Seeded i.i.d. N(0, 1/m) matrix, so columns have unit expected energy."""
    if m > n:
        raise ValueError(f"measurement side {m} exceeds image side {n}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(m), size=(m, n))


def stp_left_product(phi: np.ndarray, x: np.ndarray, t: int) -> np.ndarray:
    """Apply (phi ⊗ I_t) to a vector without building the Kronecker product.

    phi has shape (M/t, N/t) and x has length N; the result has length M.
    """
    if t < 1:
        raise ValueError(f"shrinkage factor must be positive, got {t}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rows, cols = phi.shape
    if cols * t != x.size:
        raise ValueError(
            f"t={t} does not divide the signal: phi is {rows}x{cols}, |x|={x.size}"
        )
    xr = x.reshape(cols, t)
    return (phi @ xr).reshape(-1)


def measure_single(X: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """One-sided measurement Y = X @ phi.T of an n-by-n image."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or phi.ndim != 2 or X.shape[1] != phi.shape[1]:
        raise ShapeError(f"measure_single: X {X.shape} vs phi {phi.shape}")
    return X @ phi.T


def mutual_coherence(A: np.ndarray) -> float:
    """Largest normalized inner product between distinct columns."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] < 2:
        raise ValueError("mutual_coherence needs a matrix with at least two columns")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise ValueError("mutual_coherence: zero column")
    G = np.abs((A / norms).T @ (A / norms))
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def _power_iteration_sq(phi: np.ndarray, iters: int = 200, tol: float = 1e-6) -> float:
    """Largest eigenvalue of phi.T @ phi by power iteration."""
    rng = np.random.default_rng(0)
    v = rng.normal(size=phi.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = phi.T @ (phi @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ (phi.T @ (phi @ v_new)))
        if lam > 0 and abs(lam_new - lam) <= tol * lam:
            return lam_new
        lam, v = lam_new, v_new
    return lam


def operator_lipschitz(phi1: np.ndarray, phi2: np.ndarray) -> float:
    """Largest eigenvalue of the normal operator of X -> phi1 @ X @ phi2.T.

    The map factors over the two sides, so the constant is the product of
    the per-side largest eigenvalues.
    """
    return _power_iteration_sq(phi1) * _power_iteration_sq(phi2)


class StpOperator:
    """The four learnable matrices of measurement and initial reconstruction.

    phi1, phi2 are m-by-n; rec1, rec2 are n-by-m. All live as rank-4
    tensors so they take part in gradient computation.
    """

    def __init__(self, phi1, phi2, rec1, rec2, requires_grad: bool = True):
        mats = []
        for name, a in (("phi1", phi1), ("phi2", phi2), ("rec1", rec1), ("rec2", rec2)):
            t = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
            t.requires_grad = requires_grad
            mats.append(t)
        self.phi1, self.phi2, self.rec1, self.rec2 = mats
        m, n = self.phi1.shape[-2:]
        if self.phi2.shape[-2:] != (m, n):
            raise ShapeError("phi1 and phi2 must have the same shape")
        if self.rec1.shape[-2:] != (n, m) or self.rec2.shape[-2:] != (n, m):
            raise ShapeError("rec matrices must be the transpose shape of phi")
        if m > n:
            raise ShapeError(f"measurement side {m} exceeds image side {n}")
        self.m = m
        self.n = n

    @classmethod
    def initialize(cls, n: int, ratio: float, seed: int) -> "StpOperator":
        """Gaussian measurement pair with adjoint-initialized reconstruction."""
        m = size_for_ratio(n, ratio)
        phi1 = gaussian_init(m, n, seed)
        phi2 = gaussian_init(m, n, seed + 1)
        return cls(phi1, phi2, phi1.T.copy(), phi2.T.copy())

    @classmethod
    def identity(cls, n: int) -> "StpOperator":
        """Lossless m = n operator; measurement and reconstruction are exact."""
        eye = np.eye(n)
        return cls(eye, eye.copy(), eye.copy(), eye.copy())

    @property
    def ratio(self) -> float:
        return (self.m / self.n) ** 2

    def measure(self, x: Tensor) -> Tensor:
        """Y = phi1 @ X @ phi2.T, an m-by-m measurement per image."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-2:] != (self.n, self.n):
            raise ShapeError(f"measure: image is {x.shape[-2:]}, operator expects {(self.n, self.n)}")
        return matmul(matmul(self.phi1, x), transpose2d(self.phi2))

    def initial_reconstruct(self, y: Tensor) -> Tensor:
        """X0 = rec1 @ Y @ rec2.T, the learnable zero-iteration estimate."""
        y = y if isinstance(y, Tensor) else Tensor(y)
        if y.shape[-2:] != (self.m, self.m):
            raise ShapeError(f"initial_reconstruct: got {y.shape[-2:]}, expected {(self.m, self.m)}")
        return matmul(matmul(self.rec1, y), transpose2d(self.rec2))

    def measure_array(self, X: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.measure(Tensor(X)).data.reshape(self.m, self.m)

    def initial_reconstruct_array(self, Y: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.initial_reconstruct(Tensor(Y)).data.reshape(self.n, self.n)

    def lipschitz(self) -> float:
        phi1 = self.phi1.data.reshape(self.m, self.n)
        phi2 = self.phi2.data.reshape(self.m, self.n)
        return operator_lipschitz(phi1, phi2)

    def parameters(self) -> dict:
        return {
            "stp.phi1": self.phi1,
            "stp.phi2": self.phi2,
            "stp.rec1": self.rec1,
            "stp.rec2": self.rec2,
        }

    def detached(self) -> "StpOperator":
        op = StpOperator.__new__(StpOperator)
        op.phi1 = self.phi1.detach()
        op.phi2 = self.phi2.detach()
        op.rec1 = self.rec1.detach()
        op.rec2 = self.rec2.detach()
        op.m, op.n = self.m, self.n
        return op

    def storage_floats(self) -> int:
        """Stored operator size in scalars: four m-by-n matrices."""
        return 4 * self.m * self.n
