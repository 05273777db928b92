"""Spectral functions of symmetric PSD matrices.

Everything the composite kernels need reduces to three primitives: an
eigendecomposition, a matrix function applied through it, and a regularized
positive-definite solve.  The inner-loop damping map

    g(S) = S^{-1} (I - e^{-lam * S * tau}),   g(0) = lam * tau

is computed as a spectral function of S rather than as an inverse times a
matrix: g is smooth at 0, so near-singular NNGP blocks (which approach rank
one at large depth) need no explicit inversion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "SpectralDecomposition",
    "PsdSolveResult",
    "sym_eig",
    "apply_spectral",
    "phi_damping",
    "psd_solve",
]

log = logging.getLogger(__name__)

# Eigenvalues below this fraction of the largest one take the g(0) branch.
ZERO_EIGENVALUE_FRACTION = 1e-12
# Jitter escalation: multiply by 10 at most 4 times, i.e. 1e-10 -> 1e-6 max.
JITTER_GROWTH = 10.0
MAX_JITTER_ESCALATIONS = 4


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (ascending) and orthonormal basis of a symmetric matrix."""

    eigenvalues: np.ndarray
    basis: np.ndarray

    def validate(self, original=None):
        v = self.basis
        ortho_err = np.abs(v.T @ v - np.eye(v.shape[0])).max()
        if ortho_err > 1e-9:
            raise ValueError(f"basis is not orthonormal: error {ortho_err:.3e}")
        if original is not None:
            rec = (v * self.eigenvalues) @ v.T
            scale = max(np.linalg.norm(original), 1.0)
            if np.linalg.norm(rec - original) > 1e-8 * scale:
                raise ValueError("reconstruction does not reproduce the input")
        return self

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


class PsdSolveResult(NamedTuple):
    solution: np.ndarray
    jitter: float


def _check_symmetric(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("matrix contains non-finite entries")
    scale = max(np.abs(s).max(), 1.0)
    asym = np.abs(s - s.T).max()
    if asym > 1e-9 * scale:
        raise ValueError(f"matrix is not symmetric: asymmetry {asym:.3e}")
    return (s + s.T) / 2


def sym_eig(s) -> SpectralDecomposition:
    """Eigendecomposition of a (numerically) symmetric matrix."""
    sym = _check_symmetric(s)
    evals, basis = np.linalg.eigh(sym)
    return SpectralDecomposition(eigenvalues=evals, basis=basis)


def apply_spectral(s, f: Callable) -> np.ndarray:
    """Apply a scalar function to a symmetric matrix through its spectrum."""
    dec = sym_eig(s)
    with np.errstate(all="ignore"):
        vals = np.asarray(f(dec.eigenvalues), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = dec.eigenvalues[~np.isfinite(vals)][0]
        raise ValueError(f"function is not finite at eigenvalue {bad!r}")
    out = (dec.basis * vals) @ dec.basis.T
    return (out + out.T) / 2


def phi_damping(s, rate: float, steps: float) -> np.ndarray:
    """The damping map g(S) with g(x) = (1 - e^{-rate*x*steps}) / x.

    Equals S^{-1} (I - e^{-rate*S*steps}) on invertible S, but is defined on
    all PSD matrices through g(0) = rate * steps.
    """
    if rate < 0:
        raise ValueError(f"rate must be >= 0, got {rate}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    dec = sym_eig(s)
    evals = dec.eigenvalues
    floor = ZERO_EIGENVALUE_FRACTION * max(evals.max(initial=0.0), 0.0)
    small = evals <= floor
    safe = np.where(small, 1.0, evals)
    g = np.where(small, rate * steps, -np.expm1(-rate * steps * safe) / safe)
    out = (dec.basis * g) @ dec.basis.T
    return (out + out.T) / 2


def psd_solve(s, b, jitter: float = 1e-10) -> PsdSolveResult:
    """Solve (S + eps * (trace(S)/m) * I) Z = B by Cholesky factorization.

    ``eps`` starts at ``jitter`` and is escalated tenfold (at most four
    times, each escalation logged) if factorization fails; it is never
    silently pushed past 1e-6 of the mean eigenvalue.  The eps actually used
    is returned alongside the solution.
    """
    sym = _check_symmetric(s)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side contains non-finite entries")
    m = sym.shape[0]
    scale = np.trace(sym) / m
    if scale <= 0:
        scale = 1.0
    eye = np.eye(m)
    eps = jitter
    for attempt in range(MAX_JITTER_ESCALATIONS + 1):
        try:
            chol = np.linalg.cholesky(sym + eps * scale * eye)
        except np.linalg.LinAlgError:
            if attempt == MAX_JITTER_ESCALATIONS:
                raise np.linalg.LinAlgError(
                    f"factorization failed at maximum jitter {eps:.1e}"
                )
            log.warning("psd_solve: factorization failed at jitter %.1e, escalating", eps)
            eps *= JITTER_GROWTH
            continue
        z = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
        return PsdSolveResult(solution=z, jitter=eps)
