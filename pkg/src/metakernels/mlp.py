"""Finite-width ReLU networks with exact gradients, as an empirical oracle.

Architecture for kernel depth L: a frozen random embedding layer (input to
width h), then L-1 trainable hidden matrices, then a linear head, all scaled
by sqrt(weight_variance / fan-in) in the forward pass with unit-variance raw
entries.  The tangent kernel over the trainable parameters (hidden matrices
plus head) then converges to the depth-L analytic NTK, and the head-only
kernel to the analytic NNGP.

Two conventions make the finite nets comparable to the analytic predictors:

* every head (per-task heads, the shared head, the appended test head) is a
  copy of one shared random vector at initialization, so the body-gradient
  couplings between different output functions realize the NTK-minus-NNGP
  cross kernels instead of averaging to zero;
* training and fine-tuning act on centered outputs f(x) - f_init(x), which
  removes the initial-output terms the kernel predictors drop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .composite import TestTask, TrainingSet
from .kernels import NetworkSpec

__all__ = [
    "MLPParams",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergence",
    "init_network",
    "forward",
    "features",
    "empirical_ntk",
    "mtl_loss_and_grad",
    "anil_loss_and_grad",
    "train_mtl",
    "train_anil",
    "fine_tune_and_predict",
]

DIVERGENCE_LOSS = 1e6


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class MLPParams:
    """Raw network parameters plus an optional pointer to their init state."""

    spec: NetworkSpec
    width: int
    embed: np.ndarray        # width x d, frozen at initialization
    hidden: tuple            # L-1 matrices, width x width, trainable body
    heads: dict              # head name -> width vector
    init: Optional["MLPParams"] = None

    @property
    def depth(self) -> int:
        return self.spec.depth

    def head(self, name) -> np.ndarray:
        try:
            return self.heads[name]
        except KeyError:
            raise KeyError(f"unknown head {name!r}; have {sorted(self.heads)}") from None

    def init_or_self(self) -> "MLPParams":
        return self.init if self.init is not None else self


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch gradient descent settings.

    ``outer_rate=None`` selects 1 / (largest empirical train-kernel
    eigenvalue), a conventional stable step size for the linearized dynamics.
    Inner steps are integer gradient-descent steps here; the analytic
    counterpart maps (inner_rate, inner_steps) to the exponent
    inner_rate * inner_steps.
    """

    outer_rate: Optional[float] = None
    outer_steps: int = 500
    inner_rate: float = 0.0
    inner_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.outer_rate is not None and not self.outer_rate > 0:
            raise ValueError("outer_rate must be positive (or None for automatic)")
        if self.outer_steps < 1:
            raise ValueError("outer_steps must be >= 1")
        if self.inner_rate < 0:
            raise ValueError("inner_rate must be >= 0")
        if not isinstance(self.inner_steps, (int, np.integer)) or self.inner_steps < 0:
            raise ValueError("inner_steps must be a nonnegative integer")


@dataclass(frozen=True)
class TrainResult:
    params: MLPParams
    loss_trace: np.ndarray
    outer_rate: float


def init_network(spec: NetworkSpec, width: int, input_dim: int, heads=1,
                 seed: int = 0) -> MLPParams:
    """Draw a network; all heads start as copies of one shared random vector."""
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    head_names = tuple(range(heads)) if isinstance(heads, (int, np.integer)) else tuple(heads)
    if not head_names:
        raise ValueError("at least one head is required")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    embed = rng.standard_normal((width, input_dim))
    hidden = tuple(rng.standard_normal((width, width)) for _ in range(spec.depth - 1))
    shared = rng.standard_normal(width)
    heads_map = {name: shared.copy() for name in head_names}
    return MLPParams(spec=spec, width=width, embed=embed, hidden=hidden, heads=heads_map)


def _relu(t):
    return np.maximum(t, 0.0)


def _forward_cached(params: MLPParams, x: np.ndarray):
    """Activations after every ReLU layer and the pre-activations."""
    sw2 = params.spec.weight_variance
    h = params.width
    pre0 = x @ params.embed.T * np.sqrt(sw2 / x.shape[1])
    z = _relu(pre0)
    activations, pres = [z], []
    for w in params.hidden:
        pre = z @ w.T * np.sqrt(sw2 / h)
        pres.append(pre)
        z = _relu(pre)
        activations.append(z)
    return activations, pres


def features(params: MLPParams, x) -> np.ndarray:
    """Last hidden-layer activations (the representation the heads act on)."""
    return _forward_cached(params, np.asarray(x, dtype=float))[0][-1]


def forward(params: MLPParams, x, head=0) -> np.ndarray:
    """Raw (uncentered) network outputs under the selected head."""
    phi = features(params, x)
    return phi @ params.head(head) / np.sqrt(params.width)


def _body_backward(params: MLPParams, activations, pres, d_last):
    """Gradients of the trainable body given the adjoint at the last
    activations; the frozen embedding layer receives none."""
    sw2 = params.spec.weight_variance
    h = params.width
    grads = [None] * len(params.hidden)
    dz = d_last
    for l in range(len(params.hidden) - 1, -1, -1):
        dpre = dz * (pres[l] > 0)
        grads[l] = np.sqrt(sw2 / h) * dpre.T @ activations[l]
        if l > 0:
            dz = np.sqrt(sw2 / h) * dpre @ params.hidden[l]
    return grads


def empirical_ntk(params: MLPParams, x_a, x_b, scope: str = "all", head=0) -> np.ndarray:
    """Gram matrix of parameter-gradient inner products.

    ``scope='all'`` covers the trainable parameters (hidden matrices and the
    selected head); ``scope='head-only'`` keeps just the head part, i.e. the
    feature Gram matrix phi(X_a) phi(X_b)^T / width.
    """
    if scope not in ("all", "head-only"):
        raise ValueError(f"unknown scope {scope!r}")
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    same = x_a is x_b or (x_a.shape == x_b.shape and np.array_equal(x_a, x_b))
    sw2 = params.spec.weight_variance
    h = params.width
    za, pa = _forward_cached(params, x_a)
    zb, pb = (za, pa) if same else _forward_cached(params, x_b)
    gram = za[-1] @ zb[-1].T / h
    if scope == "head-only":
        return (gram + gram.T) / 2 if same else gram
    w = params.head(head)
    da = (w / np.sqrt(h))[None, :] * (pa[-1] > 0) if params.hidden else None
    db = da if same else ((w / np.sqrt(h))[None, :] * (pb[-1] > 0) if params.hidden else None)
    for l in range(len(params.hidden) - 1, -1, -1):
        gram = gram + (sw2 / h) * (za[l] @ zb[l].T) * (da @ db.T)
        if l > 0:
            da = (da @ params.hidden[l]) * np.sqrt(sw2 / h) * (pa[l - 1] > 0)
            db = da if same else (db @ params.hidden[l]) * np.sqrt(sw2 / h) * (pb[l - 1] > 0)
    return (gram + gram.T) / 2 if same else gram


def _centers(params: MLPParams, train: TrainingSet, head_for_task) -> tuple:
    """Initial outputs on every task (the centering reference)."""
    ref = params.init_or_self()
    phi = features(ref, train.stacked_x.rows)
    h = params.width
    out = []
    for i, (_, start, stop) in enumerate(train.block_index):
        out.append(phi[start:stop] @ ref.head(head_for_task(i)) / np.sqrt(h))
    return tuple(out)


def mtl_loss_and_grad(params: MLPParams, train: TrainingSet, centers=None):
    """Joint squared loss over per-task heads and its exact gradients.

    Returns (loss, body gradients, {head name: gradient}).  ``centers`` are
    per-task constant offsets subtracted from the outputs (the centering
    reference); None means uncentered.
    """
    h = params.width
    stacked = train.stacked_x.rows
    activations, pres = _forward_cached(params, stacked)
    phi = activations[-1]
    if centers is None:
        centers = tuple(np.zeros(train.points_per_task) for _ in range(train.num_tasks))
    loss = 0.0
    head_grads = {}
    d_phi = np.zeros_like(phi)
    for i, (_, start, stop) in enumerate(train.block_index):
        w = params.head(i)
        residual = phi[start:stop] @ w / np.sqrt(h) - centers[i] - train.ys[i]
        loss += 0.5 * float(residual @ residual)
        head_grads[i] = phi[start:stop].T @ residual / np.sqrt(h)
        d_phi[start:stop] = np.outer(residual, w) / np.sqrt(h)
    body_grads = _body_backward(params, activations, pres, d_phi)
    return loss, body_grads, head_grads


def anil_loss_and_grad(params: MLPParams, train: TrainingSet, cfg: TrainConfig,
                       centers=None, train_head: bool = False, head=0):
    """Loss of the unrolled inner loop and its exact parameter gradients.

    Each task adapts the shared head for ``cfg.inner_steps`` gradient steps
    at rate ``cfg.inner_rate`` on its own squared loss; the outer gradient
    differentiates through the unrolled trajectory.  For a linear head the
    adapted outputs are Y + A^tau (u0 - Y) with A = I - rate * phi phi^T / h,
    which is differentiated in the task output space.

    Returns (loss, body gradients, head gradient); the head gradient is zero
    unless ``train_head`` is set.
    """
    lam, tau = cfg.inner_rate, cfg.inner_steps
    h = params.width
    stacked = train.stacked_x.rows
    activations, pres = _forward_cached(params, stacked)
    phi_all = activations[-1]
    w = params.head(head)
    if centers is None:
        centers = tuple(np.zeros(train.points_per_task) for _ in range(train.num_tasks))
    loss = 0.0
    head_grad = np.zeros(h)
    d_phi = np.zeros_like(phi_all)
    for i, (_, start, stop) in enumerate(train.block_index):
        phi = phi_all[start:stop]
        n = phi.shape[0]
        task_y = train.ys[i]
        u0 = phi @ w / np.sqrt(h) - centers[i]
        if tau == 0 or lam == 0.0:
            residual = u0 - task_y
            if not np.all(np.isfinite(residual)):
                raise TrainingDivergence(f"non-finite inner-loop state on task {i}")
            loss += 0.5 * float(residual @ residual)
            d_u0 = residual
            d_phi[start:stop] = np.outer(d_u0, w) / np.sqrt(h)
            if train_head:
                head_grad += phi.T @ d_u0 / np.sqrt(h)
            continue
        gram = phi @ phi.T / h
        step = np.eye(n) - lam * gram
        powers = [np.eye(n)]
        for _ in range(tau):
            powers.append(powers[-1] @ step)
        g0 = u0 - task_y
        residual = powers[tau] @ g0
        if not np.all(np.isfinite(residual)):
            raise TrainingDivergence(f"non-finite inner-loop state on task {i}")
        loss += 0.5 * float(residual @ residual)
        d_u0 = powers[tau] @ residual          # A^tau is symmetric
        d_phi_task = np.outer(d_u0, w) / np.sqrt(h)
        d_gram = np.zeros((n, n))
        for m in range(tau):
            d_gram -= lam * np.outer(powers[m] @ residual, powers[tau - 1 - m] @ g0)
        d_phi_task += (d_gram + d_gram.T) @ phi / h
        d_phi[start:stop] = d_phi_task
        if train_head:
            head_grad += phi.T @ d_u0 / np.sqrt(h)
    body_grads = _body_backward(params, activations, pres, d_phi)
    return loss, body_grads, head_grad


def _auto_rate(params: MLPParams, train: TrainingSet, mode: str,
               cfg: TrainConfig, train_head: bool) -> float:
    """1 / (largest eigenvalue of the empirical train kernel at init)."""
    stacked = train.stacked_x.rows
    body = empirical_ntk(params, stacked, stacked, scope="all", head=0)
    head_k = empirical_ntk(params, stacked, stacked, scope="head-only")
    body = body - head_k  # hidden-matrix part only
    if mode == "mtl":
        kernel = body.copy()
        for _, start, stop in train.block_index:
            blk = slice(start, stop)
            kernel[blk, blk] += head_k[blk, blk]
    else:
        kernel = body + head_k if train_head else body
        lt = cfg.inner_rate * cfg.inner_steps
        damp = np.zeros_like(kernel)
        for _, start, stop in train.block_index:
            blk = slice(start, stop)
            evals, basis = np.linalg.eigh((head_k[blk, blk] + head_k[blk, blk].T) / 2)
            damp[blk, blk] = (basis * np.exp(-lt * evals)) @ basis.T
        kernel = damp @ kernel @ damp
    top = np.linalg.eigvalsh((kernel + kernel.T) / 2)[-1]
    if top <= 0:
        raise ValueError("empirical train kernel has no positive eigenvalue")
    return 1.0 / top


def _descend(params: MLPParams, train: TrainingSet, cfg: TrainConfig, mode: str,
             train_head: bool, head=0) -> TrainResult:
    head_for_task = (lambda i: i) if mode == "mtl" else (lambda i: head)
    centers = _centers(params, train, head_for_task)
    rate = cfg.outer_rate
    if rate is None:
        rate = _auto_rate(params, train, mode, cfg, train_head)
    hidden = [w.copy() for w in params.hidden]
    heads = {k: v.copy() for k, v in params.heads.items()}
    current = replace(params, hidden=tuple(hidden), heads=heads,
                      init=params.init_or_self())
    trace = np.empty(cfg.outer_steps)
    for t in range(cfg.outer_steps):
        if mode == "mtl":
            loss, body_grads, head_grads = mtl_loss_and_grad(current, train, centers)
        else:
            loss, body_grads, hg = anil_loss_and_grad(
                current, train, cfg, centers, train_head=train_head, head=head)
            head_grads = {head: hg} if train_head else {}
        trace[t] = loss
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise TrainingDivergence(f"loss {loss!r} at step {t}")
        hidden = [w - rate * g for w, g in zip(hidden, body_grads)]
        for k, g in head_grads.items():
            heads[k] = heads[k] - rate * g
        current = replace(current, hidden=tuple(hidden), heads=dict(heads))
    return TrainResult(params=current, loss_trace=trace, outer_rate=rate)


def train_mtl(params: MLPParams, train: TrainingSet, cfg: TrainConfig) -> TrainResult:
    """Full-batch gradient descent on the joint multi-head squared loss."""
    missing = [i for i in range(train.num_tasks) if i not in params.heads]
    if missing:
        raise ValueError(f"multi-head plan is missing heads for tasks {missing}")
    return _descend(params, train, cfg, mode="mtl", train_head=True)


def train_anil(params: MLPParams, train: TrainingSet, cfg: TrainConfig,
               train_head: bool = False, head=0) -> TrainResult:
    """Outer-loop gradient descent on the unrolled inner-loop objective.

    By default the shared head stays frozen across outer training and only
    the body is updated; ``train_head=True`` also descends the shared head,
    which makes the training dynamics follow the damped full tangent kernel
    (the kernel the analytic head-adapted predictor regresses against).
    """
    params.head(head)
    return _descend(params, train, cfg, mode="anil", train_head=train_head, head=head)


def fine_tune_and_predict(params: MLPParams, test: TestTask, inner_rate: float,
                          steps: int, seed: int = 0, head_init: str = "shared") -> np.ndarray:
    """Append a test head, adapt it on the support set, predict the queries.

    The head starts from the network's shared initial head vector and the
    outputs are centered against the initial network carrying that same head
    (``head_init='shared'``, the convention under which the trained body's
    displacement reproduces the analytic test kernels).  ``'zero'`` starts
    from a zero head with no centering, making the zero-step prediction
    exactly zero; ``'fresh'`` draws a new random head from ``seed`` and
    centers against it.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    h = params.width
    ref = params.init_or_self()
    phi_support = features(params, test.support_x.rows)
    phi_query = features(params, test.query_x.rows)
    if head_init == "shared":
        w = next(iter(ref.heads.values())).copy()
    elif head_init == "zero":
        w = np.zeros(h)
    elif head_init == "fresh":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
        w = rng.standard_normal(h)
    else:
        raise ValueError(f"unknown head_init {head_init!r}")
    if head_init == "zero":
        center_support = np.zeros(test.support_x.m)
        center_query = np.zeros(test.query_x.m)
    else:
        center_support = features(ref, test.support_x.rows) @ w / np.sqrt(h)
        center_query = features(ref, test.query_x.rows) @ w / np.sqrt(h)
    for _ in range(steps):
        residual = phi_support @ w / np.sqrt(h) - center_support - test.support_y
        w = w - inner_rate * (phi_support.T @ residual) / np.sqrt(h)
        if not np.all(np.isfinite(w)):
            raise TrainingDivergence("non-finite head during fine-tuning")
    return phi_query @ w / np.sqrt(h) - center_query
