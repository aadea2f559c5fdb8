"""Phase-space points, mass matrices and the Hamiltonian."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg


class MassMatrix:
    """Positive-definite mass matrix used by the kinetic energy.

    Build one with :meth:`identity`, :meth:`diagonal` or :meth:`dense`.
    Identity and diagonal kinds avoid linear algebra entirely; the dense
    kind keeps a Cholesky factor for momentum draws and inverse products.
    """

    def __init__(self, kind, dim, diag=None, matrix=None):
        if kind not in ("identity", "diagonal", "dense"):
            raise ValueError(f"unknown mass matrix kind {kind!r}")
        self.kind = kind
        self.dim = int(dim)
        self._diag = None
        self._inv_diag = None
        self._sqrt_diag = None
        self._matrix = None
        self._chol = None
        if kind == "diagonal":
            diag = np.array(diag, dtype=float)
            if diag.shape != (self.dim,) or not np.all(np.isfinite(diag)) or np.any(diag <= 0):
                raise ValueError("diagonal mass entries must be finite and strictly positive")
            self._diag = diag
            self._inv_diag = 1.0 / diag
            self._sqrt_diag = np.sqrt(diag)
        elif kind == "dense":
            matrix = np.array(matrix, dtype=float)
            if matrix.shape != (self.dim, self.dim):
                raise ValueError("dense mass matrix must be square with side dim")
            if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-12 * np.abs(matrix).max()):
                raise ValueError("dense mass matrix must be symmetric")
            try:
                self._chol = np.linalg.cholesky(matrix)
            except np.linalg.LinAlgError as err:
                raise ValueError("dense mass matrix must be positive definite") from err
            self._matrix = matrix

    @classmethod
    def identity(cls, dim):
        return cls("identity", dim)

    @classmethod
    def diagonal(cls, diag):
        diag = np.asarray(diag, dtype=float)
        return cls("diagonal", diag.size, diag=diag)

    @classmethod
    def dense(cls, matrix):
        matrix = np.asarray(matrix, dtype=float)
        return cls("dense", matrix.shape[0], matrix=matrix)

    @classmethod
    def from_csv(cls, path):
        """Read a mass matrix from a comma-separated file: a single row is a
        diagonal, a square block is dense."""
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        if values.shape[0] == 1 and values.shape[1] > 1:
            return cls.diagonal(values[0])
        return cls.dense(values)

    def to_array(self):
        if self.kind == "identity":
            return np.eye(self.dim)
        if self.kind == "diagonal":
            return np.diag(self._diag)
        return self._matrix.copy()

    def apply(self, v):
        """Return M v."""
        if self.kind == "identity":
            return v
        if self.kind == "diagonal":
            return self._diag * v
        return self._matrix @ v

    def inv_apply(self, v):
        """Return M^{-1} v."""
        if self.kind == "identity":
            return v
        if self.kind == "diagonal":
            return self._inv_diag * v
        return scipy.linalg.cho_solve((self._chol, True), v)

    def kinetic(self, rho):
        """Kinetic energy 0.5 * rho^T M^{-1} rho."""
        if self.kind == "identity":
            return 0.5 * float(rho @ rho)
        if self.kind == "diagonal":
            return 0.5 * float(rho @ (self._inv_diag * rho))
        return 0.5 * float(rho @ self.inv_apply(rho))

    def sample(self, rng):
        """Draw a momentum from N(0, M)."""
        z = rng.standard_normal(self.dim)
        if self.kind == "identity":
            return z
        if self.kind == "diagonal":
            return self._sqrt_diag * z
        return self._chol @ z

    def __repr__(self):
        return f"MassMatrix(kind={self.kind!r}, dim={self.dim})"


@dataclass
class PhasePoint:
    """A position/momentum pair.

    ``logp`` and ``grad`` optionally cache the log density and its gradient
    at ``theta`` so integrators can skip re-evaluating the start point.
    """

    theta: np.ndarray
    rho: np.ndarray
    logp: Optional[float] = None
    grad: Optional[np.ndarray] = None

    @property
    def cached(self):
        return self.grad is not None

    def flip(self):
        return PhasePoint(self.theta, -self.rho, self.logp, self.grad)

    def copy(self):
        grad = None if self.grad is None else self.grad.copy()
        return PhasePoint(self.theta.copy(), self.rho.copy(), self.logp, grad)


def momentum_flip(z):
    """Return (theta, -rho)."""
    return z.flip()


def sample_momentum(M, rng):
    return M.sample(rng)


def hamiltonian(model, M, z):
    """H = -log mu(theta) + 0.5 rho^T M^{-1} rho."""
    theta = np.asarray(z.theta, dtype=float)
    rho = np.asarray(z.rho, dtype=float)
    if theta.shape != (M.dim,) or rho.shape != (M.dim,) or M.dim != model.dim:
        raise ValueError("dimension mismatch between state, mass matrix and model")
    logp = z.logp if z.logp is not None else model.log_density(theta)
    return -logp + M.kinetic(rho)
