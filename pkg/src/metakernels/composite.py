"""Composite train/test kernels and test-time predictors for MTL and ANIL.

For a stack of N training tasks, the multi-task training kernel keeps the
NTK on its diagonal blocks and subtracts the NNGP off the diagonal (distinct
heads share no parameters), while the head-adapted (ANIL) training kernel is
the NTK damped on both sides by the block-diagonal matrix

    D = diag{ e^{-lam * K(X_i, X_i) * tau} },

which encodes partial inner-loop convergence of each task head.  Test-time
predictors combine a support-adaptation term G with a kernel-regression term
against the training labels; the ANIL variant regresses the residual left by
the inner loop.  All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import (
    GramPack,
    NetworkSpec,
    SampleMatrix,
    compute_grampack,
    cross_grampack,
    task_block_index,
)
from .matrixops import PsdSolveResult, apply_spectral, phi_damping, psd_solve

__all__ = [
    "TrainingSet",
    "TestTask",
    "AdaptConfig",
    "CompositeKernels",
    "TestKernels",
    "train_grampack",
    "test_kernels",
    "mtl_train_kernel",
    "anil_train_kernel",
    "mtl_test_kernel",
    "anil_test_kernel",
    "g_function",
    "predict_mtl",
    "predict_anil",
    "prediction_gap",
    "kernel_inverse_gap",
    "spectra_report",
    "SpectraReport",
]

# Depth below which the large-depth spectral formulas are not expected to
# describe the Gram matrices; reports flag such depths instead of scoring.
ASYMPTOTIC_DEPTH = 16


@dataclass(frozen=True)
class TrainingSet:
    """N tasks of n labeled points each, stacked task-major."""

    xs: tuple  # of SampleMatrix, normalized
    ys: tuple  # of label vectors

    def __post_init__(self):
        if len(self.xs) == 0:
            raise ValueError("training set needs at least one task")
        if len(self.xs) != len(self.ys):
            raise ValueError("tasks and labels differ in count")
        xs = tuple(self.xs)
        ys = tuple(np.asarray(y, dtype=float).ravel() for y in self.ys)
        n, d = xs[0].m, xs[0].dim
        for x, y in zip(xs, ys):
            if x.m != n or x.dim != d:
                raise ValueError("all tasks must share the same n and d")
            if y.shape[0] != x.m:
                raise ValueError("labels must match the number of rows")
            if not x.normalized:
                raise ValueError("task inputs must be normalized")
        stack = np.vstack([x.rows for x in xs])
        if np.unique(stack, axis=0).shape[0] != stack.shape[0]:
            raise ValueError("duplicate rows across the training stack")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def num_tasks(self) -> int:
        return len(self.xs)

    @property
    def points_per_task(self) -> int:
        return self.xs[0].m

    @property
    def dim(self) -> int:
        return self.xs[0].dim

    @property
    def stacked_x(self) -> SampleMatrix:
        return SampleMatrix(np.vstack([x.rows for x in self.xs]), normalized=True)

    @property
    def stacked_y(self) -> np.ndarray:
        return np.concatenate(self.ys)

    @property
    def block_index(self) -> tuple:
        return task_block_index(self.num_tasks, self.points_per_task)


@dataclass(frozen=True)
class TestTask:
    """Query and support sample sets of one unseen task."""

    query_x: SampleMatrix
    query_y: np.ndarray
    support_x: SampleMatrix
    support_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "query_y", np.asarray(self.query_y, dtype=float).ravel())
        object.__setattr__(self, "support_y", np.asarray(self.support_y, dtype=float).ravel())
        if self.query_x.dim != self.support_x.dim:
            raise ValueError("query and support dimensions differ")
        if self.query_y.shape[0] != self.query_x.m:
            raise ValueError("query labels do not match query rows")
        if self.support_y.shape[0] != self.support_x.m:
            raise ValueError("support labels do not match support rows")


@dataclass(frozen=True)
class AdaptConfig:
    """Inner-loop rate and (real-valued) step counts, plus optional finite
    outer-training time (eta, t); the default is training to convergence."""

    inner_rate: float = 0.1
    train_steps: float = 0.0
    test_steps: float = 10.0
    outer_time: Optional[tuple] = None

    def __post_init__(self):
        if self.inner_rate < 0 or self.train_steps < 0 or self.test_steps < 0:
            raise ValueError("adaptation parameters must be nonnegative")
        if self.outer_time is not None:
            eta, t = self.outer_time
            if eta < 0 or t < 0:
                raise ValueError("outer_time entries must be nonnegative")
            object.__setattr__(self, "outer_time", (float(eta), float(t)))

    @property
    def lrtau(self) -> float:
        return self.inner_rate * self.train_steps


@dataclass(frozen=True)
class CompositeKernels:
    """Training kernels of both algorithms over one task stack."""

    mtl_train: np.ndarray
    anil_train: np.ndarray
    damping_blocks: tuple
    base: GramPack

    def validate(self):
        for name, mat in (("mtl_train", self.mtl_train), ("anil_train", self.anil_train)):
            scale = max(np.abs(mat).max(), 1.0)
            if np.abs(mat - mat.T).max() > 1e-9 * scale:
                raise ValueError(f"{name} is not symmetric")
            evals = np.linalg.eigvalsh((mat + mat.T) / 2)
            if evals[0] < -1e-8 * np.trace(mat) / mat.shape[0]:
                raise ValueError(f"{name} is not PSD")
        for _, start, stop in self.base.block_index:
            blk = slice(start, stop)
            if not np.array_equal(self.mtl_train[blk, blk], self.base.ntk[blk, blk]):
                raise ValueError("mtl_train diagonal blocks must equal the NTK blocks")
        d_full = _block_diag(self.damping_blocks, self.base.m, self.base.block_index)
        ref = d_full @ self.base.ntk @ d_full
        if not np.allclose(self.anil_train, ref, rtol=1e-9, atol=1e-12):
            raise ValueError("anil_train does not factor as D * NTK * D")
        return self


def _block_diag(blocks: Sequence[np.ndarray], m: int, block_index) -> np.ndarray:
    out = np.zeros((m, m))
    for (tid, start, stop), blk in zip(block_index, blocks):
        out[start:stop, start:stop] = blk
    return out


def train_grampack(train: TrainingSet, spec: NetworkSpec) -> GramPack:
    """Stacked NNGP/NTK Gram matrices of a training set."""
    return compute_grampack(train.stacked_x, train.block_index, spec)


def mtl_train_kernel(gram: GramPack) -> np.ndarray:
    """Multi-task training kernel: NTK minus NNGP off the diagonal blocks.

    Equivalently: NTK - NNGP + blockdiag{NNGP task blocks}.
    """
    if not gram.block_index:
        raise ValueError("GramPack carries no task block index")
    out = gram.ntk - gram.nngp
    for _, start, stop in gram.block_index:
        blk = slice(start, stop)
        out[blk, blk] = gram.ntk[blk, blk]
    return out


def damping_block(k_task: np.ndarray, adapt: AdaptConfig) -> np.ndarray:
    """e^{-lam * K * tau} for one task's NNGP block."""
    lt = adapt.lrtau
    return apply_spectral(k_task, lambda s: np.exp(-lt * s))


def anil_train_kernel(gram: GramPack, adapt: AdaptConfig):
    """Head-adapted training kernel: block (i, j) is D_i NTK(X_i, X_j) D_j.

    Returns the kernel together with the per-task damping blocks D_i.
    """
    if not gram.block_index:
        raise ValueError("GramPack carries no task block index")
    blocks = tuple(
        damping_block(gram.nngp[start:stop, start:stop], adapt)
        for _, start, stop in gram.block_index
    )
    d_full = _block_diag(blocks, gram.m, gram.block_index)
    anil = d_full @ gram.ntk @ d_full
    return (anil + anil.T) / 2, blocks


def composite_kernels(gram: GramPack, adapt: AdaptConfig) -> CompositeKernels:
    """Bundle both training kernels (validated) for one task stack."""
    anil, blocks = anil_train_kernel(gram, adapt)
    return CompositeKernels(
        mtl_train=mtl_train_kernel(gram),
        anil_train=anil,
        damping_blocks=blocks,
        base=gram,
    ).validate()


@dataclass(frozen=True)
class TestKernels:
    """Cross Gram blocks connecting one test task to the training stack."""

    depth: int
    k_query_train: np.ndarray
    t_query_train: np.ndarray
    k_support_train: np.ndarray
    t_support_train: np.ndarray
    k_query_support: np.ndarray
    k_support_support: np.ndarray


def test_kernels(test: TestTask, train: TrainingSet, spec: NetworkSpec) -> TestKernels:
    """All cross blocks a test-time predictor needs, at one depth."""
    stacked = train.stacked_x
    kqt, tqt = cross_grampack(test.query_x, stacked, spec)
    kst, tst = cross_grampack(test.support_x, stacked, spec)
    kqs, _ = cross_grampack(test.query_x, test.support_x, spec)
    kss, _ = cross_grampack(test.support_x, test.support_x, spec)
    return TestKernels(
        depth=spec.depth,
        k_query_train=kqt,
        t_query_train=tqt,
        k_support_train=kst,
        t_support_train=tst,
        k_query_support=kqs,
        k_support_support=(kss + kss.T) / 2,
    )


def _support_damping(tk: TestKernels, adapt: AdaptConfig) -> np.ndarray:
    """phi_damping of the support NNGP block at the test-time exponent."""
    return phi_damping(tk.k_support_support, adapt.inner_rate, adapt.test_steps)


def mtl_test_kernel(tk: TestKernels, gram: GramPack, adapt: AdaptConfig) -> np.ndarray:
    """Query-by-stack test kernel of the multi-task predictor.

    Block j:  (NTK - NNGP)(X, X_j)
              - NNGP(X, X') T(X') (NTK - NNGP)(X', X_j),
    with T(X') the support damping map at the test exponent.
    """
    if tk.depth != gram.depth:
        raise ValueError(f"depth mismatch: test blocks at {tk.depth}, gram at {gram.depth}")
    t_map = _support_damping(tk, adapt)
    return (tk.t_query_train - tk.k_query_train) - tk.k_query_support @ t_map @ (
        tk.t_support_train - tk.k_support_train
    )


def anil_test_kernel(
    tk: TestKernels,
    gram: GramPack,
    adapt: AdaptConfig,
    damping_blocks: Sequence[np.ndarray] = None,
    body_only: bool = True,
) -> np.ndarray:
    """Query-by-stack test kernel of the head-adapted predictor.

    The default (``body_only=True``) carries the NNGP subtraction inherited
    from test-head gradients that live in the body only, which makes the
    identity ``anil_test = mtl_test @ D`` exact.  ``body_only=False`` drops
    that subtraction (a diagnostic variant that keeps the full NTK blocks).
    """
    if tk.depth != gram.depth:
        raise ValueError(f"depth mismatch: test blocks at {tk.depth}, gram at {gram.depth}")
    if damping_blocks is None:
        damping_blocks = [
            damping_block(gram.nngp[start:stop, start:stop], adapt)
            for _, start, stop in gram.block_index
        ]
    d_full = _block_diag(damping_blocks, gram.m, gram.block_index)
    if body_only:
        return mtl_test_kernel(tk, gram, adapt) @ d_full
    t_map = _support_damping(tk, adapt)
    undamped = tk.t_query_train - tk.k_query_support @ t_map @ tk.t_support_train
    return undamped @ d_full


def g_function(k_query_support, k_support_support, support_y, adapt: AdaptConfig,
               steps: float = None) -> np.ndarray:
    """Support-adaptation prediction term.

    G = NNGP(X, X') * [NNGP(X', X')^{-1} (I - e^{-lam K tau})] * Y', computed
    through the damping map so a singular support block needs no inversion.
    ``steps`` overrides the test-time exponent (the per-task variant of G
    uses the training exponent instead).
    """
    support_y = np.asarray(support_y, dtype=float).ravel()
    if support_y.size == 0:
        raise ValueError("empty support set")
    if steps is None:
        steps = adapt.test_steps
    t_map = phi_damping(k_support_support, adapt.inner_rate, steps)
    return np.asarray(k_query_support) @ t_map @ support_y


def g_train_stack(gram: GramPack, ys: Sequence[np.ndarray], adapt: AdaptConfig) -> np.ndarray:
    """Task-wise stack of G evaluated on each task's own points at the
    training exponent; equals (I - D_i) Y_i blockwise."""
    parts = []
    for (tid, start, stop), y in zip(gram.block_index, ys):
        k_task = gram.nngp[start:stop, start:stop]
        parts.append(g_function(k_task, k_task, y, adapt, steps=adapt.train_steps))
    return np.concatenate(parts)


@dataclass(frozen=True)
class Prediction:
    """Query predictions plus the regularization actually used."""

    values: np.ndarray
    jitter: float


def _train_solve(train_kernel: np.ndarray, rhs: np.ndarray, adapt: AdaptConfig,
                 jitter: float):
    """Kernel-regression weights, with the finite-training-time factor
    (I - e^{-eta * M * t}) folded in when outer_time is set."""
    if adapt.outer_time is None:
        return psd_solve(train_kernel, rhs, jitter=jitter)
    eta, t = adapt.outer_time
    return PsdSolveResult(solution=phi_damping(train_kernel, eta, t) @ rhs, jitter=0.0)


@dataclass(frozen=True)
class TaskKernelBundle:
    """Precomputed pieces shared by both predictors on one (train, test, L)."""

    spec: NetworkSpec
    gram: GramPack
    tk: TestKernels

    @classmethod
    def build(cls, train: TrainingSet, test: TestTask, spec: NetworkSpec,
              gram: GramPack = None):
        if gram is None:
            gram = train_grampack(train, spec)
        return cls(spec=spec, gram=gram, tk=test_kernels(test, train, spec))


def predict_mtl(train: TrainingSet, test: TestTask, adapt: AdaptConfig,
                spec: NetworkSpec, bundle: TaskKernelBundle = None,
                jitter: float = 1e-10) -> Prediction:
    """Test-time predictions of the converged multi-task model."""
    if bundle is None:
        bundle = TaskKernelBundle.build(train, test, spec)
    tk, gram = bundle.tk, bundle.gram
    g_test = g_function(tk.k_query_support, tk.k_support_support, test.support_y, adapt)
    kernel = mtl_train_kernel(gram)
    cross = mtl_test_kernel(tk, gram, adapt)
    weights = _train_solve(kernel, train.stacked_y, adapt, jitter)
    return Prediction(values=g_test + cross @ weights.solution, jitter=weights.jitter)


def predict_anil(train: TrainingSet, test: TestTask, adapt: AdaptConfig,
                 spec: NetworkSpec, bundle: TaskKernelBundle = None,
                 jitter: float = 1e-10, body_only: bool = True) -> Prediction:
    """Test-time predictions of the converged head-adapted model.

    Regresses the inner-loop residual (labels minus the per-task G stack)
    against the damped training kernel.
    """
    if bundle is None:
        bundle = TaskKernelBundle.build(train, test, spec)
    tk, gram = bundle.tk, bundle.gram
    g_test = g_function(tk.k_query_support, tk.k_support_support, test.support_y, adapt)
    kernel, blocks = anil_train_kernel(gram, adapt)
    cross = anil_test_kernel(tk, gram, adapt, damping_blocks=blocks, body_only=body_only)
    residual = train.stacked_y - g_train_stack(gram, train.ys, adapt)
    weights = _train_solve(kernel, residual, adapt, jitter)
    return Prediction(values=g_test + cross @ weights.solution, jitter=weights.jitter)


@dataclass(frozen=True)
class GapResult:
    gap_l2: float
    gap_rms: float
    jitter: float
    f_mtl: np.ndarray
    f_anil: np.ndarray


def prediction_gap(train: TrainingSet, test: TestTask, adapt: AdaptConfig,
                   spec: NetworkSpec, bundle: TaskKernelBundle = None,
                   jitter: float = 1e-10) -> GapResult:
    """l2 and per-query RMS distance between the two predictors on one task."""
    if bundle is None:
        bundle = TaskKernelBundle.build(train, test, spec)
    f_mtl = predict_mtl(train, test, adapt, spec, bundle=bundle, jitter=jitter)
    f_anil = predict_anil(train, test, adapt, spec, bundle=bundle, jitter=jitter)
    diff = f_anil.values - f_mtl.values
    gap = float(np.linalg.norm(diff))
    return GapResult(
        gap_l2=gap,
        gap_rms=gap / np.sqrt(diff.size),
        jitter=max(f_mtl.jitter, f_anil.jitter),
        f_mtl=f_mtl.values,
        f_anil=f_anil.values,
    )


def kernel_inverse_gap(gram: GramPack, jitter: float = 1e-10) -> float:
    """Operator norm of the difference between the regularized inverses of
    the NTK and the multi-task training kernel."""
    eye = np.eye(gram.m)
    inv_ntk = psd_solve(gram.ntk, eye, jitter=jitter).solution
    inv_mtl = psd_solve(mtl_train_kernel(gram), eye, jitter=jitter).solution
    return float(np.linalg.norm(inv_ntk - inv_mtl, 2))


@dataclass(frozen=True)
class SpectraReport:
    """Measured vs predicted extreme/bulk eigenvalues at one depth.

    The predictions ((m+3)L/4 for the top NTK eigenvalue, 3L/4 for the NTK
    bulk mean, m for the top NNGP eigenvalue) describe the large-depth
    regime only; shallow reports carry ``asymptotic_regime=False`` and are
    not meant to be scored against tolerances.
    """

    depth: int
    num_points: int
    ntk_largest: float
    ntk_largest_predicted: float
    ntk_bulk_mean: float
    ntk_bulk_predicted: float
    nngp_largest: float
    nngp_largest_predicted: float
    asymptotic_regime: bool

    @property
    def ntk_largest_rel_error(self) -> float:
        return abs(self.ntk_largest / self.ntk_largest_predicted - 1.0)

    @property
    def ntk_bulk_rel_error(self) -> float:
        return abs(self.ntk_bulk_mean / self.ntk_bulk_predicted - 1.0)

    @property
    def nngp_largest_rel_error(self) -> float:
        return abs(self.nngp_largest / self.nngp_largest_predicted - 1.0)

    def as_dict(self) -> dict:
        return {
            "depth": self.depth,
            "num_points": self.num_points,
            "asymptotic_regime": self.asymptotic_regime,
            "ntk_largest": {
                "measured": self.ntk_largest,
                "predicted": self.ntk_largest_predicted,
                "rel_error": self.ntk_largest_rel_error,
            },
            "ntk_bulk_mean": {
                "measured": self.ntk_bulk_mean,
                "predicted": self.ntk_bulk_predicted,
                "rel_error": self.ntk_bulk_rel_error,
            },
            "nngp_largest": {
                "measured": self.nngp_largest,
                "predicted": self.nngp_largest_predicted,
                "rel_error": self.nngp_largest_rel_error,
            },
        }


def spectra_report(gram: GramPack) -> SpectraReport:
    """Compare Gram spectra against their large-depth predictions."""
    m, depth = gram.m, gram.depth
    ev_ntk = np.linalg.eigvalsh((gram.ntk + gram.ntk.T) / 2)
    ev_nngp = np.linalg.eigvalsh((gram.nngp + gram.nngp.T) / 2)
    return SpectraReport(
        depth=depth,
        num_points=m,
        ntk_largest=float(ev_ntk[-1]),
        ntk_largest_predicted=(m + 3) * depth / 4.0,
        ntk_bulk_mean=float(ev_ntk[:-1].mean()) if m > 1 else float("nan"),
        ntk_bulk_predicted=3 * depth / 4.0,
        nngp_largest=float(ev_nngp[-1]),
        nngp_largest_predicted=float(m),
        asymptotic_regime=depth >= ASYMPTOTIC_DEPTH,
    )
