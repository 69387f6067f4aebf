"""Gaussian primitives on Cholesky factors.

Covariances are carried as lower-triangular factors with strictly positive
diagonals. Log-densities and KL divergences are computed through triangular
solves; no routine forms an explicit inverse. Factorization of raw covariance
matrices goes through a jitter ladder: diagonal loading starting at
1e-10 * tr(C)/d and escalating tenfold until 1e-4 * tr(C)/d, after which a
``FactorizationError`` is raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from assim.errors import FactorizationError
from assim.rng import SeededRng

LOG_2PI = math.log(2.0 * math.pi)

_JITTER_RUNGS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def chol_jittered(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric matrix, with diagonal loading.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute diagonal load
    that was required (0.0 on the clean path). The input is symmetrized
    first; asymmetry of more than round-off is the caller's bug.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise FactorizationError("non-finite covariance entries")
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    base = float(np.trace(cov)) / d
    if base <= 0.0:
        raise FactorizationError("covariance trace is not positive")
    eye = np.eye(d)
    for rung in _JITTER_RUNGS:
        try:
            load = rung * base
            return np.linalg.cholesky(cov + load * eye), load
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"not positive definite after diagonal loading up to {1e-4 * base:.3e}"
    )


def chol_batch(covs: np.ndarray) -> np.ndarray:
    """Batched lower Cholesky with per-item jitter fallback."""
    covs = np.asarray(covs, dtype=float)
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        out = np.empty_like(covs)
        for i in range(covs.shape[0]):
            out[i], _ = chol_jittered(covs[i])
        return out


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Square-root factor of a possibly singular PSD matrix (eigh based).

    Used where genuinely degenerate covariances are legitimate inputs
    (deterministic test systems, point-mass conditionals). Eigenvalues below
    ``-1e-10 * max_eig`` raise; small negatives are clipped to zero.
    """
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    top = max(float(w[-1]), 0.0)
    if w[0] < -1e-10 * max(top, 1.0):
        raise FactorizationError(f"matrix has negative eigenvalue {w[0]:.3e}")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal stored as (mean, lower Cholesky factor)."""

    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        chol = np.asarray(self.chol, dtype=float)
        if chol.ndim != 2 or chol.shape != (mean.size, mean.size):
            raise ValueError(
                f"factor shape {chol.shape} does not match dimension {mean.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(chol))):
            raise ValueError("non-finite Gaussian parameters")
        if np.any(np.triu(chol, 1) != 0.0):
            raise ValueError("factor must be lower triangular")
        if np.any(np.diag(chol) <= 0.0):
            raise ValueError("factor diagonal must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def from_cov(cls, mean: np.ndarray, cov: np.ndarray) -> "Gaussian":
        L, _ = chol_jittered(cov)
        return cls(mean, L)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def logdet_cov(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def logpdf(self, x: np.ndarray):
        return gaussian_logpdf(x, self)

    def sample(self, n: int, rng: SeededRng) -> np.ndarray:
        return sample_gaussian(self, n, rng)


def gaussian_logpdf(x: np.ndarray, g: Gaussian):
    """Log density of ``g`` at ``x`` (last axis is the coordinate axis)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (g.dim,):
        raise ValueError(f"point dimension {x.shape} != Gaussian dimension {g.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite evaluation point")
    resid = x - g.mean
    z = solve_triangular(g.chol, resid.reshape(-1, g.dim).T, lower=True)
    quad = np.sum(z * z, axis=0).reshape(x.shape[:-1])
    out = -0.5 * (g.dim * LOG_2PI + g.logdet_cov + quad)
    return float(out) if out.ndim == 0 else out


def gaussian_kl(p: Gaussian, q: Gaussian) -> float:
    """KL(p || q) in closed form; never negative."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    m = solve_triangular(q.chol, p.chol, lower=True)
    trace = float(np.sum(m * m))
    z = solve_triangular(q.chol, p.mean - q.mean, lower=True)
    quad = float(z @ z)
    kl = 0.5 * (q.logdet_cov - p.logdet_cov - d + trace + quad)
    return max(kl, 0.0)


def sample_gaussian(g: Gaussian, n: int, rng: SeededRng) -> np.ndarray:
    """n i.i.d. draws, shape (n, d); mutates only ``rng``."""
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    z = rng.standard_normal((n, g.dim))
    return g.mean + z @ g.chol.T


def logpdf_batch(y: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(y; means[i], covs[i]) over a batch, shape (B,).

    Uses a batched Cholesky plus batched solve; feeds the vectorized
    evidence evaluations where the batch axis ranges over parameter draws.
    """
    y = np.asarray(y, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    r = y.shape[-1] if y.ndim else 1
    chols = chol_batch(covs)
    resid = (y - means)[..., None]
    z = np.linalg.solve(chols, resid)[..., 0]
    quad = np.sum(z * z, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (r * LOG_2PI + logdet + quad)
