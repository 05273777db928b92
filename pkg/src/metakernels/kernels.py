"""Exact infinite-width NNGP and NTK Gram matrices for deep ReLU networks.

Both kernels are computed with the layerwise arc-cosine recursion for ReLU
activations under critical He initialization (weight variance 2, no bias).
Inputs are normalized row-wise to squared norm ``d`` so the zeroth-layer
covariance ``x . x' / d`` has unit diagonal; the recursion then keeps the
NNGP diagonal at 1 and grows the NTK diagonal by exactly 1 per layer, so a
depth-``L`` network has ``diag(K) = 1`` and ``diag(Theta) = L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetworkSpec",
    "SampleMatrix",
    "GramPack",
    "normalize_inputs",
    "relu_dual",
    "compute_grampack",
    "cross_grampack",
    "task_block_index",
]

# Relative slack allowed when clamping cos(angle) into [-1, 1]; anything
# farther out than this is treated as invalid input, not rounding noise.
COS_CLAMP_TOL = 1e-12
# Correlations this close to +-1 are rounding images of exactly +-1 (true
# kernel correlations of distinct points stay orders of magnitude farther
# away at any depth in scope) and are snapped, since arccos amplifies noise
# near the endpoints by ~1e8.  This keeps the diagonal law exact.
COS_SNAP_TOL = 1e-11


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture parameters that determine the analytic kernels.

    ``depth`` counts the arc-cosine steps of the kernel recursion, i.e. the
    ReLU layers of the network.  Only scalar outputs are supported; larger
    output dimensions would add a Kronecker factor that is out of scope.
    """

    depth: int
    weight_variance: float = 2.0
    bias_variance: float = 0.0
    output_dim: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if not self.weight_variance > 0:
            raise ValueError(f"weight_variance must be > 0, got {self.weight_variance}")
        if self.bias_variance < 0:
            raise ValueError(f"bias_variance must be >= 0, got {self.bias_variance}")
        if self.output_dim != 1:
            raise ValueError(
                f"output_dim must be 1 (scalar regression); got {self.output_dim}. "
                "Vector outputs are not supported."
            )


@dataclass(frozen=True)
class SampleMatrix:
    """A set of input rows, optionally normalized to squared norm d per row."""

    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise ValueError(f"expected a 2-d sample matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("sample matrix contains non-finite entries")
        object.__setattr__(self, "rows", rows)
        if self.normalized:
            sq = np.einsum("ij,ij->i", rows, rows)
            if not np.allclose(sq, self.dim, rtol=1e-12, atol=0):
                worst = int(np.argmax(np.abs(sq - self.dim)))
                raise ValueError(
                    f"row {worst} has squared norm {sq[worst]!r}, expected {self.dim} "
                    "(matrix is flagged normalized)"
                )
        uniq = np.unique(rows, axis=0)
        if uniq.shape[0] != rows.shape[0]:
            raise ValueError("sample matrix contains duplicate rows")

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class GramPack:
    """Paired NNGP/NTK Gram matrices over one stacked sample set.

    ``block_index`` delimits task blocks as ``(task_id, start, stop)`` row
    ranges of the stack; it is what the composite-kernel assembly keys on.
    """

    nngp: np.ndarray
    ntk: np.ndarray
    block_index: tuple = field(default=())
    depth: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nngp", np.asarray(self.nngp, dtype=float))
        object.__setattr__(self, "ntk", np.asarray(self.ntk, dtype=float))
        object.__setattr__(self, "block_index", tuple(tuple(b) for b in self.block_index))

    @property
    def m(self) -> int:
        return self.nngp.shape[0]

    def validate(self, check_diagonal: bool = True):
        """Check symmetry, positive semidefiniteness and the diagonal law."""
        for name, mat in (("nngp", self.nngp), ("ntk", self.ntk)):
            scale = np.abs(mat).max()
            asym = np.abs(mat - mat.T).max()
            if asym > 1e-10 * max(scale, 1.0):
                raise ValueError(f"{name} asymmetry {asym:.3e} exceeds tolerance")
            evals = np.linalg.eigvalsh((mat + mat.T) / 2)
            floor = -1e-8 * np.trace(mat) / self.m
            if evals[0] < floor:
                raise ValueError(
                    f"{name} is not PSD: min eigenvalue {evals[0]:.3e} < {floor:.3e}"
                )
        if check_diagonal:
            if not np.allclose(np.diag(self.nngp), 1.0, rtol=1e-9, atol=0):
                raise ValueError("nngp diagonal deviates from 1")
            if not np.allclose(np.diag(self.ntk), float(self.depth), rtol=1e-9, atol=0):
                raise ValueError(f"ntk diagonal deviates from depth {self.depth}")
        return self

    def task_slice(self, task_id) -> slice:
        for tid, start, stop in self.block_index:
            if tid == task_id:
                return slice(start, stop)
        raise KeyError(f"no block for task id {task_id!r}")


def task_block_index(num_tasks: int, points_per_task: int) -> tuple:
    """Block index for a task-major stack of equally sized tasks."""
    return tuple(
        (i, i * points_per_task, (i + 1) * points_per_task) for i in range(num_tasks)
    )


def normalize_inputs(x) -> SampleMatrix:
    """Rescale every row to squared Euclidean norm d (the input dimension).

    Raises on zero rows, which carry no direction to normalize.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d input matrix, got shape {x.shape}")
    d = x.shape[1]
    sq = np.einsum("ij,ij->i", x, x)
    if np.any(sq == 0.0):
        bad = int(np.argmin(sq))
        raise ValueError(f"zero-norm input row at index {bad}")
    scale = np.sqrt(d / sq)
    # rows already within the normalized tolerance are left untouched, so
    # normalization is exactly idempotent
    scale[np.abs(sq - d) <= 1e-12 * d] = 1.0
    return SampleMatrix(x * scale[:, None], normalized=True)


def relu_dual(q_a, q_b, c, spec: NetworkSpec):
    """One arc-cosine step: next-layer NNGP entry and derivative-kernel entry.

    For pre-activations with variances ``q_a``, ``q_b`` and covariance ``c``,
    with ``cos(angle) = c / sqrt(q_a q_b)``:

        next  = sw2 * sqrt(q_a q_b) / (2 pi) * (sin t + (pi - t) cos t) + sb2
        deriv = sw2 * (pi - t) / (2 pi)

    All three arguments broadcast elementwise.  Covariances beyond the valid
    range by more than a relative rounding slack are rejected rather than
    clamped.
    """
    q_a = np.asarray(q_a, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(q_a <= 0) or np.any(q_b <= 0):
        raise ValueError("diagonal variances must be positive")
    denom = np.sqrt(q_a * q_b)
    cos = c / denom
    if np.any(np.abs(cos) > 1.0 + COS_CLAMP_TOL):
        worst = float(np.max(np.abs(cos)))
        raise ValueError(
            f"covariance exceeds the valid range: |cos| = {worst!r} > 1 + {COS_CLAMP_TOL}"
        )
    cos = np.clip(cos, -1.0, 1.0)
    t = np.arccos(cos)
    sw2, sb2 = spec.weight_variance, spec.bias_variance
    nxt = sw2 * (denom / (2 * np.pi)) * (np.sin(t) + (np.pi - t) * cos) + sb2
    deriv = sw2 * (np.pi - t) / (2 * np.pi)
    return nxt, deriv


def _recursion(cov0, q0, spec: NetworkSpec):
    """Run the depth-L recursion from zeroth-layer covariance ``cov0``.

    All rows share the diagonal variance ``q0`` (unit-norm inputs), so the
    diagonal track is a scalar recurrence ``q <- sw2 * q / 2 + sb2`` that is
    exact in floating point at the critical initialization.
    """
    sw2, sb2 = spec.weight_variance, spec.bias_variance
    cov = cov0
    q = q0
    ntk = None
    for _ in range(spec.depth):
        cos = np.clip(cov / q, -1.0, 1.0)
        cos[cos >= 1.0 - COS_SNAP_TOL] = 1.0
        cos[cos <= -1.0 + COS_SNAP_TOL] = -1.0
        t = np.arccos(cos)
        cov = sw2 * (q / (2 * np.pi)) * (np.sin(t) + (np.pi - t) * cos) + sb2
        deriv = sw2 * (np.pi - t) / (2 * np.pi)
        ntk = cov if ntk is None else cov + deriv * ntk
        q = sw2 * q / 2 + sb2
    return cov, ntk


def compute_grampack(x: SampleMatrix, block_index=(), spec: NetworkSpec = None) -> GramPack:
    """NNGP and NTK Gram matrices of a normalized sample stack at depth L."""
    if spec is None:
        raise ValueError("a NetworkSpec is required")
    if not x.normalized:
        raise ValueError("inputs must be normalized before kernel computation")
    cov0 = x.rows @ x.rows.T / x.dim
    nngp, ntk = _recursion(cov0, 1.0, spec)
    nngp = (nngp + nngp.T) / 2
    ntk = (ntk + ntk.T) / 2
    pack = GramPack(nngp=nngp, ntk=ntk, block_index=block_index, depth=spec.depth)
    critical = spec.weight_variance == 2.0 and spec.bias_variance == 0.0
    return pack.validate(check_diagonal=critical)


def cross_grampack(x_a: SampleMatrix, x_b: SampleMatrix, spec: NetworkSpec):
    """Rectangular NNGP/NTK blocks between two normalized sample sets.

    Consistent with :func:`compute_grampack` on the stacked set: extracting
    the corresponding sub-block of the square Gram matrices gives the same
    values.
    """
    if not (x_a.normalized and x_b.normalized):
        raise ValueError("both sample sets must be normalized")
    if x_a.dim != x_b.dim:
        raise ValueError(f"input dimension mismatch: {x_a.dim} vs {x_b.dim}")
    cov0 = x_a.rows @ x_b.rows.T / x_a.dim
    return _recursion(cov0, 1.0, spec)
