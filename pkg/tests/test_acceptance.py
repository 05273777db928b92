"""Acceptance suite: each test enforces one stated criterion at its stated
tolerance and prints a PASS line (run with ``pytest -s`` to see them)."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from metakernels.cli import main
from metakernels.composite import (
    AdaptConfig,
    TaskKernelBundle,
    anil_test_kernel,
    anil_train_kernel,
    g_function,
    mtl_test_kernel,
    mtl_train_kernel,
    predict_anil,
    predict_mtl,
    train_grampack,
)
from metakernels.composite import test_kernels as build_test_kernels
from metakernels.experiments import (
    SweepConfig,
    run_depth_sweep,
    run_finite_width_check,
    run_inverse_gap,
    run_lrtau_sweep,
    run_spectra,
)
from metakernels.kernels import NetworkSpec, normalize_inputs, relu_dual
from metakernels.matrixops import psd_solve
from metakernels.mlp import (
    TrainConfig,
    anil_loss_and_grad,
    features,
    init_network,
    mtl_loss_and_grad,
)
from metakernels.composite import TrainingSet
from metakernels.tasks import sample_test_task, sample_training_set

BASE_SEED = 20240801


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def sweep_outputs(tmp_path_factory):
    """Criteria 1 and 2 share the experiment defaults and base seed."""
    out = tmp_path_factory.mktemp("sweeps")
    cfg = SweepConfig(seed=BASE_SEED)
    t0 = time.time()
    depth_detail, depth_summary = run_depth_sweep(cfg, out / "depth")
    depth_elapsed = time.time() - t0
    t0 = time.time()
    _, lrtau_summary = run_lrtau_sweep(cfg, out / "lrtau")
    lrtau_elapsed = time.time() - t0
    return depth_summary, depth_elapsed, lrtau_summary, lrtau_elapsed


@pytest.fixture(scope="module")
def finite_width_outputs(tmp_path_factory):
    """Criteria 6c and 7 share one finite-width cross-check run."""
    out = tmp_path_factory.mktemp("fw")
    cfg = SweepConfig(seed=BASE_SEED)
    _, summary = run_finite_width_check(cfg, out)
    return summary


def test_criterion_1_depth_trend(sweep_outputs):
    depth_summary, elapsed, _, _ = sweep_outputs
    means = [s["mean_gap_l2"] for s in depth_summary]
    depths = [s["depth"] for s in depth_summary]
    strictly_decreasing = all(a > b for a, b in zip(means, means[1:]))
    ok = strictly_decreasing and depths == [5, 10, 20, 40] and elapsed < 300
    report("1 depth trend", ok,
           f"means={['%.3f' % m for m in means]} elapsed={elapsed:.1f}s")


def test_criterion_2_lrtau_trend(sweep_outputs):
    _, _, lrtau_summary, elapsed = sweep_outputs
    means = [s["mean_gap_l2"] for s in lrtau_summary]
    halves = [s["ci95_gap_l2"] for s in lrtau_summary]
    nondecreasing = all(
        means[i + 1] >= means[i] - 0.5 * halves[i] for i in range(len(means) - 1))
    ok = nondecreasing and len(means) == 6 and elapsed < 300
    report("2 lrtau trend", ok,
           f"means={['%.4f' % m for m in means]} elapsed={elapsed:.1f}s")


def test_criterion_3_spectra(tmp_path):
    cfg = SweepConfig(seed=BASE_SEED, num_train_tasks=20, points_per_task=1,
                      spectra_depths=(128,))
    reports = run_spectra(cfg, tmp_path)
    r = reports[0]
    ok = (r["ntk_largest"]["rel_error"] < 0.15
          and r["ntk_bulk_mean"]["rel_error"] < 0.15
          and r["nngp_largest"]["rel_error"] < 0.10
          and r["ntk_largest"]["predicted"] == 5.75 * 128
          and r["nngp_largest"]["predicted"] == 20.0)
    report("3 spectra", ok,
           "rel errors: ntk_max=%.3f bulk=%.3f nngp_max=%.3f" % (
               r["ntk_largest"]["rel_error"], r["ntk_bulk_mean"]["rel_error"],
               r["nngp_largest"]["rel_error"]))


def test_criterion_4_inverse_gap_rate(tmp_path):
    cfg = SweepConfig(seed=BASE_SEED, num_train_tasks=10, points_per_task=2,
                      inverse_gap_depths=(16, 32, 64, 128))
    t0 = time.time()
    _, slope = run_inverse_gap(cfg, tmp_path)
    elapsed = time.time() - t0
    ok = -2.6 <= slope <= -1.4 and elapsed < 60
    report("4 inverse-gap rate", ok, f"slope={slope:.3f} elapsed={elapsed:.1f}s")


def test_criterion_5_kernel_identities():
    rng = np.random.default_rng(BASE_SEED)
    worst_train, worst_test, worst_collapse = 0.0, 0.0, 0.0
    for instance in range(10):
        num_tasks = int(rng.integers(2, 5))
        n = int(rng.integers(2, 4))
        d = int(rng.integers(5, 9))
        depth = int(rng.integers(2, 8))
        xs = tuple(normalize_inputs(rng.standard_normal((n, d)))
                   for _ in range(num_tasks))
        ys = tuple(rng.standard_normal(n) for _ in range(num_tasks))
        train = TrainingSet(xs=xs, ys=ys)
        test = sample_test_task(
            replace(SweepConfig().task, input_dim=d, seed=int(rng.integers(1 << 30))), 0).task
        spec = NetworkSpec(depth=depth)
        adapt = AdaptConfig(inner_rate=float(rng.uniform(0.05, 0.5)),
                            train_steps=float(rng.uniform(0.0, 4.0)),
                            test_steps=float(rng.uniform(1.0, 20.0)))
        gram = train_grampack(train, spec)
        tk = build_test_kernels(test, train, spec)

        # independent damping assembly through the Pade matrix exponential
        damp = np.zeros((gram.m, gram.m))
        for _, start, stop in gram.block_index:
            blk = slice(start, stop)
            damp[blk, blk] = scipy.linalg.expm(-adapt.lrtau * gram.nngp[blk, blk])
        anil_train, _ = anil_train_kernel(gram, adapt)
        ref_train = damp @ gram.ntk @ damp
        worst_train = max(worst_train,
                          np.abs(anil_train - ref_train).max() / np.abs(ref_train).max())
        anil_cross = anil_test_kernel(tk, gram, adapt)
        ref_cross = mtl_test_kernel(tk, gram, adapt) @ damp
        scale = max(np.abs(ref_cross).max(), 1e-30)
        worst_test = max(worst_test, np.abs(anil_cross - ref_cross).max() / scale)

        # zero inner loop collapses the head-adapted predictor onto the
        # plain-NTK regression, so the remaining gap to the multi-task
        # predictor is the kernel effect alone
        frozen = AdaptConfig(inner_rate=adapt.inner_rate, train_steps=0.0,
                             test_steps=adapt.test_steps)
        bundle = TaskKernelBundle.build(train, test, spec, gram=gram)
        f_anil = predict_anil(train, test, frozen, spec, bundle=bundle).values
        g_test = g_function(tk.k_query_support, tk.k_support_support,
                            test.support_y, frozen)
        cross = mtl_test_kernel(tk, gram, frozen)
        collapse = g_test + cross @ psd_solve(gram.ntk, train.stacked_y).solution
        f_mtl = predict_mtl(train, test, frozen, spec, bundle=bundle).values
        gap = np.linalg.norm(f_anil - f_mtl)
        kernel_effect = np.linalg.norm(
            cross @ (psd_solve(gram.ntk, train.stacked_y).solution
                     - psd_solve(mtl_train_kernel(gram), train.stacked_y).solution))
        worst_collapse = max(
            worst_collapse,
            np.linalg.norm(f_anil - collapse) / max(np.linalg.norm(collapse), 1e-30),
            abs(gap - kernel_effect) / max(kernel_effect, 1e-30),
        )
    ok = worst_train < 1e-9 and worst_test < 1e-9 and worst_collapse < 1e-9
    report("5 kernel identities", ok,
           f"factorization={worst_train:.2e} test-relation={worst_test:.2e} "
           f"collapse={worst_collapse:.2e}")


def test_criterion_6a_relu_pair_monte_carlo():
    rng = np.random.default_rng(BASE_SEED)
    m = 10 ** 6
    u = rng.standard_normal(m)
    w = rng.standard_normal(m)
    spec = NetworkSpec(depth=1)
    worst_sigma = 0.0
    for rho in (-1.0, -0.5, 0.0, 0.5, 1.0):
        v = rho * u + math.sqrt(max(0.0, 1 - rho * rho)) * w
        prod = np.maximum(u, 0) * np.maximum(v, 0)
        ind = (u > 0).astype(float) * (v > 0).astype(float)
        nxt, deriv = relu_dual(1.0, 1.0, rho, spec)
        for sample, value in ((prod, nxt / 2.0), (ind, deriv / 2.0)):
            se = sample.std(ddof=1) / math.sqrt(m)
            err = abs(sample.mean() - value)
            assert err <= 3 * se + 1e-12
            if se > 0:
                worst_sigma = max(worst_sigma, err / se)
    report("6a relu pair vs Monte Carlo", True, f"worst deviation {worst_sigma:.2f} SE")


def test_criterion_6b_gradient_checks():
    rng = np.random.default_rng(BASE_SEED + 1)
    xs = tuple(normalize_inputs(rng.standard_normal((2, 3))) for _ in range(2))
    ys = tuple(rng.standard_normal(2) for _ in range(2))
    train = TrainingSet(xs=xs, ys=ys)
    params = init_network(NetworkSpec(depth=3), 8, 3, heads=2, seed=4)
    centers = tuple(0.1 * rng.standard_normal(2) for _ in range(2))
    step = 1e-4
    worst = 0.0

    def check_body(loss_fn, analytic):
        nonlocal worst
        scale = max(np.abs(g).max() for g in analytic)
        for idx, mat in enumerate(params.hidden):
            for pos in rng.choice(mat.size, size=20, replace=False):
                i, j = np.unravel_index(pos, mat.shape)
                up = [m.copy() for m in params.hidden]
                down = [m.copy() for m in params.hidden]
                up[idx][i, j] += step
                down[idx][i, j] -= step
                fd = (loss_fn(replace(params, hidden=tuple(up)))
                      - loss_fn(replace(params, hidden=tuple(down)))) / (2 * step)
                worst = max(worst, abs(fd - analytic[idx][i, j]) / scale)

    _, mtl_body, _ = mtl_loss_and_grad(params, train, centers)
    check_body(lambda p: mtl_loss_and_grad(p, train, centers)[0], mtl_body)

    cfg = TrainConfig(inner_rate=0.3, inner_steps=3)
    _, anil_body, _ = anil_loss_and_grad(params, train, cfg, centers)
    check_body(lambda p: anil_loss_and_grad(p, train, cfg, centers)[0], anil_body)

    # fine-tuning loss: squared support loss in the appended head
    support = xs[0].rows
    target = ys[0]
    w_head = rng.standard_normal(8)

    def head_loss(w):
        r = features(params, support) @ w / math.sqrt(8) - target
        return 0.5 * float(r @ r)

    phi = features(params, support)
    analytic_head = phi.T @ (phi @ w_head / math.sqrt(8) - target) / math.sqrt(8)
    scale = np.abs(analytic_head).max()
    for j in range(8):
        up, down = w_head.copy(), w_head.copy()
        up[j] += step
        down[j] -= step
        fd = (head_loss(up) - head_loss(down)) / (2 * step)
        worst = max(worst, abs(fd - analytic_head[j]) / scale)

    report("6b gradients vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}")


def test_criterion_6c_empirical_kernel_convergence(finite_width_outputs):
    errors = {s["width"]: s["kernel_error"] for s in finite_width_outputs}
    widths = sorted(errors)
    decreasing = all(errors[a] > errors[b] for a, b in zip(widths, widths[1:]))
    ok = decreasing and widths == [64, 256, 1024] and errors[1024] < 0.15
    report("6c empirical kernel convergence", ok,
           " ".join(f"h={w}:{errors[w]:.3f}" for w in widths))


def test_criterion_7_linearization_crosscheck(finite_width_outputs):
    rows = {s["width"]: s for s in finite_width_outputs}
    ok = (rows[1024]["pred_gap_mtl"] < rows[256]["pred_gap_mtl"]
          and rows[1024]["pred_gap_anil"] < rows[256]["pred_gap_anil"])
    report("7 linearization cross-check", ok,
           "mtl: %.3f->%.3f anil: %.3f->%.3f" % (
               rows[256]["pred_gap_mtl"], rows[1024]["pred_gap_mtl"],
               rows[256]["pred_gap_anil"], rows[1024]["pred_gap_anil"]))


def test_criterion_8_cli_determinism(tmp_path):
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text("\n".join([
        "input_dim = 4",
        "num_train_tasks = 3",
        "points_per_task = 2",
        "support_size = 2",
        "query_size = 3",
        "seed = 7",
        "depths = 2,3",
        "lrtau_values = 0,0.2",
        "fixed_depth = 3",
        "num_test_tasks = 2",
        "num_seeds = 2",
        "spectra_depths = 4,8",
        "inverse_gap_depths = 4,8,16",
        "fw_widths = 16,32",
        "fw_seeds = 1",
        "fw_num_train_tasks = 2",
        "fw_points_per_task = 2",
        "fw_num_test_tasks = 1",
        "fw_outer_steps = 20",
    ]) + "\n")
    commands = {
        "sweep-depth": "depth_sweep.csv",
        "sweep-lrtau": "lrtau_sweep.csv",
        "spectra": "spectra.json",
        "inverse-gap": "inverse_gap.csv",
        "finite-width": "finite_width.csv",
        "gen-tasks": "tasks.csv",
    }
    checked = []
    for command, filename in commands.items():
        payloads = []
        for tag, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
            out = tmp_path / command / tag
            code = main([command, "--config", str(cfg_file), "--jobs", jobs,
                         "--out", str(out)])
            assert code == 0
            payloads.append((out / filename).read_bytes())
        assert payloads[0] == payloads[1] == payloads[2], command
        checked.append(command)
    report("8 CLI determinism", len(checked) == 6,
           "byte-identical reruns incl. jobs=2 for " + ", ".join(checked))
