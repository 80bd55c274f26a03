"""
Dense symmetric-matrix primitives for the PLDA back-end.

Covers covariance estimation, symmetric eigendecomposition with a fixed sign
convention, fractional matrix powers, the CORAL (ZCA) alignment transform,
simultaneous diagonalization of two covariances and the multivariate normal
log-density. Every function is pure: inputs are never modified and the
results do not share memory with them.

Symmetric matrices are plain (d, d) numpy arrays whose two triangles are kept
bitwise equal by `symmetrize`.

The primitives are exact: none of them adds a ridge on its own. Callers that
work with covariances estimated from small samples call `regularize` first.
An eigenvalue at or below EPS_EIG where an inverse or fractional power is
needed raises SingularityError.
"""
import logging
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.stats import multivariate_normal

from backend_errors import (
    InsufficientDataError,
    NumericError,
    ShapeError,
    SingularityError,
)

logger = logging.getLogger(__name__)

EPS_REG = 1e-6
EPS_EIG = 1e-10


class EigPair(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # column k pairs with values[k]


def symmetrize(m):
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + m.T)


def as_sym_matrix(m, name="matrix"):
    """Validate a square real matrix and return its symmetrized float64 copy."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty square matrix, got shape {m.shape}")
    return symmetrize(m)


def regularize(m, eps_reg=EPS_REG):
    """Add eps_reg * trace(m) / d to the diagonal."""
    m = as_sym_matrix(m)
    if eps_reg <= 0:
        return m
    d = m.shape[0]
    ridge = eps_reg * np.trace(m) / d
    return m + ridge * np.eye(d)


def estimate_mean_cov(vectors):
    """Arithmetic mean and biased (divide-by-N) covariance of a set of vectors."""
    try:
        x = np.asarray(vectors, dtype=np.float64)
    except ValueError as e:
        raise ShapeError(f"Vectors do not share one dimension: {e}") from e
    if x.ndim == 1:
        # a flat list of scalars is a set of 1-dim vectors
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ShapeError(f"Expected a collection of vectors, got array of shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"Need at least 2 vectors to estimate a covariance, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = symmetrize(centered.T @ centered / n)
    return mean, cov


def _apply_sign_convention(vectors):
    # largest-magnitude component of each column positive; argmax keeps the lowest index on ties
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    lead = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[lead, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(m):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    m = as_sym_matrix(m)
    if not np.all(np.isfinite(m)):
        raise NumericError("Cannot eigendecompose a matrix with non-finite entries")
    values, vectors = scipy.linalg.eigh(m)
    values = values[::-1].copy()
    vectors = _apply_sign_convention(vectors[:, ::-1])
    return EigPair(values, vectors)


def check_floor(values, eps_eig=EPS_EIG, what="matrix"):
    smallest = float(np.min(values))
    if smallest <= eps_eig:
        raise SingularityError(smallest, eps_eig, what)


def sym_power(m, p, eps_eig=EPS_EIG):
    """m ** p for a symmetric matrix, through its eigendecomposition."""
    m = as_sym_matrix(m)
    if p == 1:
        return m
    if p == 0:
        return np.eye(m.shape[0])
    eig = sym_eig(m)
    if p < 0 or float(p) != int(p):
        check_floor(eig.values, eps_eig)
    powered = eig.values ** p
    return symmetrize((eig.vectors * powered) @ eig.vectors.T)


def coral_transform(c_in, c_out, eps_eig=EPS_EIG):
    """
    CORAL alignment A = c_in^(1/2) c_out^(-1/2).

    For x with covariance c_out, A x has covariance A c_out A^T == c_in.
    """
    c_in = as_sym_matrix(c_in, "in-domain covariance")
    c_out = as_sym_matrix(c_out, "out-of-domain covariance")
    if c_in.shape != c_out.shape:
        raise ShapeError(f"Covariance shapes differ: {c_in.shape} vs {c_out.shape}")
    if np.array_equal(c_in, c_out):
        check_floor(sym_eig(c_out).values, eps_eig, "out-of-domain covariance")
        return np.eye(c_in.shape[0])
    return sym_power(c_in, 0.5, eps_eig) @ sym_power(c_out, -0.5, eps_eig)


def simul_diag(phi1, phi2, eps_eig=EPS_EIG):
    """
    Simultaneous diagonalization: B^T phi1 B = I and B^T phi2 B = diag(lambda).

    lambda is sorted descending and the columns of B follow the sym_eig sign
    convention.
    """
    phi1 = as_sym_matrix(phi1, "phi1")
    phi2 = as_sym_matrix(phi2, "phi2")
    if phi1.shape != phi2.shape:
        raise ShapeError(f"Matrix shapes differ: {phi1.shape} vs {phi2.shape}")
    if not (np.all(np.isfinite(phi1)) and np.all(np.isfinite(phi2))):
        raise NumericError("Cannot diagonalize matrices with non-finite entries")
    check_floor(scipy.linalg.eigvalsh(phi1), eps_eig, "phi1")
    try:
        lam, b = scipy.linalg.eigh(phi2, phi1)
    except np.linalg.LinAlgError as e:
        raise SingularityError(0.0, eps_eig, "phi1") from e
    lam = lam[::-1].copy()
    b = _apply_sign_convention(b[:, ::-1])
    return b, lam


def gauss_logpdf(x, mean, cov, eps_eig=EPS_EIG):
    """
    Multivariate normal log density.

    `x` is a single d-vector (returns a float) or an (n, d) batch (returns an
    n-vector).
    """
    cov = as_sym_matrix(cov, "covariance")
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    d = cov.shape[0]
    if mean.shape != (d,):
        raise ShapeError(f"Mean has shape {mean.shape}, covariance is {d}x{d}")
    single = x.ndim <= 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != d:
        raise ShapeError(f"Point dimension {x2.shape[1]} does not match covariance {d}x{d}")
    if not np.all(np.isfinite(cov)):
        raise NumericError("Covariance has non-finite entries")
    check_floor(scipy.linalg.eigvalsh(cov), eps_eig, "covariance")
    logp = np.atleast_1d(multivariate_normal(mean=mean, cov=cov).logpdf(x2))
    return float(logp[0]) if single else logp
