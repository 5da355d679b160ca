"""Factored zero-mean Gaussians and the linear algebra built on them.

The whole analysis lives inside one covariance family,

    Sigma = spike * F F^T + floor * I_d,

where ``F`` is a d x r matrix with orthonormal columns.  Data distributions,
their noisy counterparts, and every perturbed marginal are members, so
covariances are kept factored as ``(F, spike, floor)`` and only densified at
test boundaries.  Inverses, traces, and Wasserstein distances all run in
O(d * r^2) or better.

Matrices are plain float64 ``numpy`` arrays, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    InsufficientDataError,
    PreconditionError,
    SingularCovarianceError,
)

ORTHONORMAL_TOL = 1e-10
COMMUTE_TOL = 1e-8


def check_orthonormal(f: np.ndarray, tol: float = ORTHONORMAL_TOL, name: str = "factor") -> None:
    """Raise unless ``f`` has orthonormal columns within ``tol`` (max-norm)."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 2 or f.shape[0] < f.shape[1]:
        raise PreconditionError(f"{name} must be a tall d x r matrix, got shape {f.shape}")
    gram_err = np.max(np.abs(f.T @ f - np.eye(f.shape[1])))
    if gram_err > tol:
        raise PreconditionError(
            f"{name} columns are not orthonormal: max |F^T F - I| = {gram_err:.3e} > {tol:.0e}"
        )


@dataclass(frozen=True)
class LowRankGaussian:
    """Zero-mean Gaussian with covariance ``spike * F F^T + floor * I``.

    ``floor == 0`` is a legal degenerate distribution (mass confined to
    ``col(F)``); it is rejected only where an inverse is required.
    """

    factor: np.ndarray  # d x r, orthonormal columns
    spike: float
    floor: float

    def __post_init__(self):
        f = np.asarray(self.factor, dtype=float)
        if not np.all(np.isfinite(f)):
            raise PreconditionError("factor contains non-finite entries")
        check_orthonormal(f)
        if self.spike < 0 or self.floor < 0 or self.spike + self.floor <= 0:
            raise PreconditionError(
                f"need spike >= 0, floor >= 0, spike + floor > 0; got ({self.spike}, {self.floor})"
            )
        object.__setattr__(self, "factor", f)

    @property
    def dim(self) -> int:
        return self.factor.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def dense_cov(self) -> np.ndarray:
        """Materialize the d x d covariance. Test/reporting boundary only."""
        f = self.factor
        return self.spike * (f @ f.T) + self.floor * np.eye(self.dim)

    def eigenvalues(self) -> np.ndarray:
        """Full spectrum, descending: spike+floor (r times), floor (d-r times)."""
        top = np.full(self.rank, self.spike + self.floor)
        rest = np.full(self.dim - self.rank, self.floor)
        vals = np.concatenate([top, rest])
        return np.sort(vals)[::-1]


@dataclass(frozen=True)
class EigenDecomp:
    """Symmetric eigendecomposition, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray  # orthonormal columns, vectors[:, i] pairs with values[i]


def structured_inverse(g: LowRankGaussian) -> tuple[float, float]:
    """Invert ``Sigma = s F F^T + c I`` without densifying.

    Returns ``(floor_inv, correction)`` such that
    ``Sigma^{-1} = floor_inv * I - correction * F F^T``, i.e. the rank-r
    downdate form with ``floor_inv = 1/c`` and ``correction = s / (c (c+s))``.
    """
    if g.floor == 0:
        raise SingularCovarianceError("covariance with floor = 0 is singular")
    floor_inv = 1.0 / g.floor
    correction = g.spike / (g.floor * (g.floor + g.spike))
    return floor_inv, correction


def apply_inverse(g: LowRankGaussian, x: np.ndarray) -> np.ndarray:
    """``Sigma^{-1} x`` for vectors or row-stacked batches (n x d)."""
    floor_inv, correction = structured_inverse(g)
    x = np.asarray(x, dtype=float)
    f = g.factor
    if x.ndim == 1:
        return floor_inv * x - correction * (f @ (f.T @ x))
    return floor_inv * x - correction * (x @ f) @ f.T


def _pair_cost(lam_a: np.ndarray, lam_b: np.ndarray) -> float:
    la = np.clip(np.asarray(lam_a, dtype=float), 0.0, None)
    lb = np.clip(np.asarray(lam_b, dtype=float), 0.0, None)
    return float(np.sum(la + lb - 2.0 * np.sqrt(la * lb)))


def w2_commuting(a: LowRankGaussian, b: LowRankGaussian) -> float:
    """Squared Wasserstein-2 distance between two commuting members.

    For commuting covariances the distance decouples in the shared eigenbasis
    into sum_i [lambda_i(A) + lambda_i(B) - 2 sqrt(lambda_i(A) lambda_i(B))].
    Eigenvalues of B are resolved per eigenspace of A, where A is constant, so
    the pairing inside each block is immaterial.  Non-commuting inputs
    (commutator max-norm > 1e-8) are rejected; covariances sharing a factor
    always commute.
    """
    if a.dim != b.dim:
        raise PreconditionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    d = a.dim
    fa, fb = a.factor, b.factor

    cross = fa.T @ fb  # r_a x r_b
    if a.spike > 0 and b.spike > 0:
        m = fa @ cross @ fb.T
        comm_norm = a.spike * b.spike * np.max(np.abs(m - m.T))
        if comm_norm > COMMUTE_TOL:
            raise DomainError(
                f"covariances do not commute: commutator max-norm {comm_norm:.3e} > {COMMUTE_TOL:.0e}"
            )

    if a.spike == 0:
        # A is isotropic; pair its single eigenvalue against B's full spectrum.
        return _pair_cost(np.full(d, a.floor), b.eigenvalues())

    # Eigenspace col(F_a), eigenvalue spike_a + floor_a: B restricted there is
    # spike_b * (F_a^T F_b)(F_a^T F_b)^T + floor_b * I.
    top_block = b.spike * (cross @ cross.T)
    lam_b_top = b.floor + np.linalg.eigvalsh((top_block + top_block.T) / 2.0)

    # Orthogonal complement, eigenvalue floor_a: B restricted there is
    # spike_b * G G^T + floor_b * I with G the projected factor.
    g = fb - fa @ cross
    gram = b.spike * (g.T @ g)
    nu = np.linalg.eigvalsh((gram + gram.T) / 2.0)[::-1]
    n_rest = d - a.rank
    lam_b_rest = b.floor + np.concatenate([nu[:n_rest], np.zeros(max(0, n_rest - nu.size))])

    total = _pair_cost(np.full(a.rank, a.spike + a.floor), lam_b_top)
    total += _pair_cost(np.full(n_rest, a.floor), lam_b_rest)
    return max(total, 0.0)


def symmetric_eigen(a: np.ndarray, sym_tol: float = 1e-10) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Delegates to LAPACK's symmetric solver, which meets the 1e-8
    reconstruction bound with orders of magnitude to spare for d <= 64.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise PreconditionError(f"expected a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > sym_tol:
        raise PreconditionError(f"matrix is not symmetric: max |A - A^T| = {asym:.3e}")
    values, vectors = np.linalg.eigh((a + a.T) / 2.0)
    order = np.argsort(values)[::-1]
    return EigenDecomp(values=values[order], vectors=vectors[:, order])


def sample(g: LowRankGaussian, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from ``g`` as ``sqrt(s) F z_r + sqrt(c) z_d``.

    The latent draw ``z_r`` always precedes the ambient draw ``z_d`` so that a
    fixed stream yields identical matrices regardless of degeneracies.
    """
    if n < 1:
        raise PreconditionError(f"need n >= 1, got {n}")
    z_r = rng.standard_normal((n, g.rank))
    z_d = rng.standard_normal((n, g.dim))
    return np.sqrt(g.spike) * (z_r @ g.factor.T) + np.sqrt(g.floor) * z_d


def fit_gaussian(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (n-1) covariance of row-stacked samples."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise PreconditionError(f"expected an n x d sample matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit a covariance, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    return mean, (cov + cov.T) / 2.0
