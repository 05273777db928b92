"""Experiment runners: sweeps, spectra reports, scaling fits, width checks.

Every run is a pure function of its configuration.  Grid points are
independent work units; with ``jobs > 1`` they execute in a process pool,
but output files are always assembled in canonical grid order and are
byte-identical for any parallelism degree.  Floats are printed with 17
significant digits so reruns can be compared bytewise.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .composite import (
    AdaptConfig,
    TaskKernelBundle,
    TestTask,
    TrainingSet,
    anil_test_kernel,
    anil_train_kernel,
    g_function,
    g_train_stack,
    kernel_inverse_gap,
    mtl_test_kernel,
    mtl_train_kernel,
    predict_anil,
    predict_mtl,
    spectra_report,
    test_kernels,
    train_grampack,
)
from .kernels import NetworkSpec
from .matrixops import psd_solve
from .mlp import TrainConfig, empirical_ntk, fine_tune_and_predict, init_network, train_anil, train_mtl
from .tasks import TaskDistributionConfig, sample_test_task, sample_training_set, save_tasks

__all__ = [
    "SweepConfig",
    "parse_config_file",
    "config_from_mapping",
    "run_depth_sweep",
    "run_lrtau_sweep",
    "run_spectra",
    "run_inverse_gap",
    "run_finite_width_check",
    "run_gen_tasks",
    "summarize_rows",
]

FLOAT_FMT = "%.17g"
SCHEMA = {
    "sweep": "metakernels/sweep/v1",
    "inverse-gap": "metakernels/inverse-gap/v1",
    "spectra": "metakernels/spectra/v1",
    "finite-width": "metakernels/finite-width/v1",
}


@dataclass(frozen=True)
class SweepConfig:
    """All knobs of the experiment surface, mirrored by the config file."""

    # task distribution
    input_dim: int = 10
    num_train_tasks: int = 20
    points_per_task: int = 10
    support_size: int = 5
    query_size: int = 10
    nu_low: float = 1.3
    nu_high: float = 1.6
    seed: int = 0
    # sweep grids
    depths: tuple = (5, 10, 20, 40)
    lrtau_values: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    fixed_lrtau: float = 0.0
    fixed_depth: int = 10
    lambda_split: float = 0.1
    test_adapt_steps: float = 10.0
    num_test_tasks: int = 20
    num_seeds: int = 5
    # diagnostics
    spectra_depths: tuple = (32, 64, 128)
    inverse_gap_depths: tuple = (16, 32, 64, 128)
    # finite-width cross-check
    fw_widths: tuple = (64, 256, 1024)
    fw_depth: int = 3
    fw_seeds: int = 3
    fw_num_train_tasks: int = 5
    fw_points_per_task: int = 5
    fw_num_test_tasks: int = 5
    fw_outer_steps: int = 600
    fw_inner_rate: float = 0.02
    fw_inner_steps: int = 5
    fw_test_steps: int = 50
    # execution
    jobs: int = 1
    out_format: str = "csv"

    def __post_init__(self):
        if self.lambda_split <= 0:
            raise ValueError("lambda_split must be positive")
        if self.num_seeds < 1 or self.num_test_tasks < 1:
            raise ValueError("num_seeds and num_test_tasks must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.out_format not in ("csv", "json"):
            raise ValueError(f"format must be csv or json, got {self.out_format!r}")
        for name in ("depths", "lrtau_values", "spectra_depths", "inverse_gap_depths", "fw_widths"):
            value = getattr(self, name)
            if not value:
                raise ValueError(f"{name} must be a nonempty list")
            object.__setattr__(self, name, tuple(value))

    @property
    def task(self) -> TaskDistributionConfig:
        return TaskDistributionConfig(
            input_dim=self.input_dim,
            num_train_tasks=self.num_train_tasks,
            points_per_task=self.points_per_task,
            support_size=self.support_size,
            query_size=self.query_size,
            nu_range=(self.nu_low, self.nu_high),
            seed=self.seed,
        )

    def adapt_for(self, lrtau: float) -> AdaptConfig:
        """Split a lrtau product into (rate, steps) with the fixed rate."""
        return AdaptConfig(
            inner_rate=self.lambda_split,
            train_steps=lrtau / self.lambda_split,
            test_steps=self.test_adapt_steps,
        )

    def config_hash(self) -> str:
        """Digest of the experiment identity; execution knobs (parallelism)
        are excluded so results are comparable across them."""
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "jobs":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(_fmt(v) for v in value)
            else:
                text = _fmt(value)
            parts.append(f"{f.name}={text}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]


def _fmt(value) -> str:
    if isinstance(value, float):
        return FLOAT_FMT % value
    return str(value)


_INT_KEYS = {
    "input_dim", "num_train_tasks", "points_per_task", "support_size",
    "query_size", "seed", "fixed_depth", "num_test_tasks", "num_seeds",
    "fw_depth", "fw_seeds", "fw_num_train_tasks", "fw_points_per_task",
    "fw_num_test_tasks", "fw_outer_steps", "fw_inner_steps", "jobs",
}
_FLOAT_KEYS = {
    "nu_low", "nu_high", "fixed_lrtau", "lambda_split", "test_adapt_steps",
    "fw_inner_rate", "fw_test_steps",
}
_INT_LIST_KEYS = {"depths", "fixed_depth_list", "spectra_depths", "inverse_gap_depths", "fw_widths"}
_FLOAT_LIST_KEYS = {"lrtau_values"}
_STR_KEYS = {"format"}


def parse_config_file(path) -> dict:
    """Read a flat key = value config file; unknown keys are errors."""
    known = _INT_KEYS | _FLOAT_KEYS | _INT_LIST_KEYS | _FLOAT_LIST_KEYS | _STR_KEYS
    known -= {"fixed_depth_list"}
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: {sorted(known)}"
                )
            if key in mapping:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            mapping[key] = value
    return mapping


def config_from_mapping(mapping: dict) -> SweepConfig:
    kwargs = {}
    for key, value in mapping.items():
        if key == "format":
            kwargs["out_format"] = value
        elif key in _INT_KEYS:
            kwargs[key] = int(value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        elif key in _INT_LIST_KEYS:
            kwargs[key] = tuple(int(v.strip()) for v in value.split(",") if v.strip())
        elif key in _FLOAT_LIST_KEYS:
            kwargs[key] = tuple(float(v.strip()) for v in value.split(",") if v.strip())
        else:
            raise ValueError(f"unknown config key {key!r}")
    return SweepConfig(**kwargs)


# ---------------------------------------------------------------------------
# prediction-gap evaluation shared by both sweeps


def _seed_data(cfg: SweepConfig, seed_index: int):
    task_cfg = replace(cfg.task, seed=cfg.seed + seed_index)
    training = sample_training_set(task_cfg).train
    tests = [sample_test_task(task_cfg, j).task for j in range(cfg.num_test_tasks)]
    return training, tests


def _gaps_for_seed(cfg: SweepConfig, seed_index: int, depths, lrtaus):
    """Detail rows (depth, lrtau, seed, task, gap_l2, gap_rms, jitter) for
    one seed's data over a (depth x lrtau) grid.

    The kernel-regression weights are shared across test tasks, so they are
    solved once per grid point; per-task predictions then agree bitwise with
    the standalone predictor operations.
    """
    training, tests = _seed_data(cfg, seed_index)
    labels = training.stacked_y
    rows = []
    for depth in depths:
        spec = NetworkSpec(depth=depth)
        gram = train_grampack(training, spec)
        blocks = [test_kernels(t, training, spec) for t in tests]
        kernel_mtl = mtl_train_kernel(gram)
        for lrtau in lrtaus:
            adapt = cfg.adapt_for(lrtau)
            kernel_anil, damping = anil_train_kernel(gram, adapt)
            residual = labels - g_train_stack(gram, training.ys, adapt)
            w_mtl = psd_solve(kernel_mtl, labels)
            w_anil = psd_solve(kernel_anil, residual)
            jitter = max(w_mtl.jitter, w_anil.jitter)
            for task_id, (test, tk) in enumerate(zip(tests, blocks)):
                g_test = g_function(
                    tk.k_query_support, tk.k_support_support, test.support_y, adapt)
                f_mtl = g_test + mtl_test_kernel(tk, gram, adapt) @ w_mtl.solution
                cross_anil = anil_test_kernel(tk, gram, adapt, damping_blocks=damping)
                f_anil = g_test + cross_anil @ w_anil.solution
                gap = float(np.linalg.norm(f_anil - f_mtl))
                rows.append({
                    "seed": seed_index,
                    "task_id": task_id,
                    "depth": depth,
                    "lrtau": lrtau,
                    "gap_l2": gap,
                    "gap_rms": gap / np.sqrt(f_mtl.size),
                    "jitter": jitter,
                })
    return rows


def summarize_rows(rows, keys=("depth", "lrtau")):
    """Mean and 95% Student-t interval (over per-seed means) per grid point."""
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    summaries = []
    for group_key in sorted(groups):
        group = groups[group_key]
        by_seed = {}
        for row in group:
            by_seed.setdefault(row["seed"], []).append(row["gap_l2"])
        seed_means = np.array([np.mean(v) for _, v in sorted(by_seed.items())])
        mean = float(seed_means.mean())
        if seed_means.size > 1:
            half = float(
                stats.t.ppf(0.975, seed_means.size - 1)
                * seed_means.std(ddof=1) / np.sqrt(seed_means.size)
            )
        else:
            half = float("nan")
        summary = dict(zip(keys, group_key))
        summary.update({
            "mean_gap_l2": mean,
            "ci95_gap_l2": half,
            "num_rows": len(group),
            "jitter": max(r["jitter"] for r in group),
        })
        summaries.append(summary)
    return summaries


def _run_units(units, worker, jobs: int):
    """Evaluate independent work units, preserving the given unit order.

    Workers are picklable instances, so the pooled path computes exactly
    what the inline path computes; only wall time differs.
    """
    if jobs <= 1 or len(units) <= 1:
        return [worker(u) for u in units]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, units))


def _sweep(cfg: SweepConfig, depths, lrtaus, sweep_name: str, out_path):
    worker = _SweepSeedWorker(cfg, tuple(depths), tuple(lrtaus))
    per_seed = _run_units(list(range(cfg.num_seeds)), worker, cfg.jobs)
    detail = [row for rows in per_seed for row in rows]
    detail.sort(key=lambda r: (r["depth"], r["lrtau"], r["seed"], r["task_id"]))
    summary = summarize_rows(detail)
    _audit_summary(detail, summary)
    pragma = (
        f"# schema={SCHEMA['sweep']} sweep={sweep_name} config={cfg.config_hash()} "
        f"lambda_split={FLOAT_FMT % cfg.lambda_split}"
    )
    columns = ["kind", "seed", "task_id", "depth", "lrtau", "gap_l2", "gap_rms",
               "jitter", "mean_gap_l2", "ci95_gap_l2", "num_rows", "config"]
    rows = []
    for r in detail:
        rows.append(["detail", r["seed"], r["task_id"], r["depth"], _fmt(r["lrtau"]),
                     _fmt(r["gap_l2"]), _fmt(r["gap_rms"]), _fmt(r["jitter"]),
                     "", "", "", cfg.config_hash()])
    for s in summary:
        rows.append(["summary", "", "", s["depth"], _fmt(s["lrtau"]), "", "",
                     _fmt(s["jitter"]), _fmt(s["mean_gap_l2"]), _fmt(s["ci95_gap_l2"]),
                     s["num_rows"], cfg.config_hash()])
    _write_table(out_path, pragma, columns, rows, cfg.out_format)
    return detail, summary


class _SweepSeedWorker:
    def __init__(self, cfg, depths, lrtaus):
        self.cfg, self.depths, self.lrtaus = cfg, depths, lrtaus

    def __call__(self, seed_index):
        return _gaps_for_seed(self.cfg, seed_index, self.depths, self.lrtaus)


def _audit_summary(detail, summary):
    """Recompute the summary from the detail rows and insist on equality."""
    again = summarize_rows(detail)
    if len(again) != len(summary):
        raise AssertionError("summary audit failed: group count mismatch")
    for a, b in zip(again, summary):
        for key in a:
            va, vb = a[key], b[key]
            equal = va == vb or (
                isinstance(va, float) and np.isnan(va) and np.isnan(vb))
            if not equal:
                raise AssertionError(f"summary audit failed on {key}: {va!r} != {vb!r}")


def run_depth_sweep(cfg: SweepConfig, out_dir):
    """Prediction gap across depths at one fixed lrtau (default 0)."""
    path = _out_path(out_dir, "depth_sweep", cfg.out_format)
    return _sweep(cfg, cfg.depths, [cfg.fixed_lrtau], "depth", path)


def run_lrtau_sweep(cfg: SweepConfig, out_dir):
    """Prediction gap across lrtau values at one fixed depth (default 10)."""
    path = _out_path(out_dir, "lrtau_sweep", cfg.out_format)
    return _sweep(cfg, [cfg.fixed_depth], cfg.lrtau_values, "lrtau", path)


# ---------------------------------------------------------------------------
# spectra and inverse-gap diagnostics


class _SpectraWorker:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, depth):
        training = sample_training_set(self.cfg.task).train
        gram = train_grampack(training, NetworkSpec(depth=depth))
        return spectra_report(gram).as_dict()


def run_spectra(cfg: SweepConfig, out_dir):
    """Measured vs predicted Gram spectra, one report per depth."""
    reports = _run_units(sorted(cfg.spectra_depths), _SpectraWorker(cfg), cfg.jobs)
    doc = {
        "schema": SCHEMA["spectra"],
        "config": cfg.config_hash(),
        "reports": reports,
    }
    path = os.path.join(out_dir, "spectra.json")
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return reports


class _InverseGapWorker:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, depth):
        training = sample_training_set(self.cfg.task).train
        gram = train_grampack(training, NetworkSpec(depth=depth))
        inv_jitter = 1e-10
        return {
            "depth": depth,
            "gap_op_norm": kernel_inverse_gap(gram, jitter=inv_jitter),
            "jitter": inv_jitter,
        }


def run_inverse_gap(cfg: SweepConfig, out_dir):
    """Operator-norm gap between kernel inverses per depth, plus the
    least-squares log-log slope across depths."""
    depths = sorted(cfg.inverse_gap_depths)
    rows = _run_units(depths, _InverseGapWorker(cfg), cfg.jobs)
    gaps = np.array([r["gap_op_norm"] for r in rows])
    if np.all(gaps > 0) and len(depths) >= 2:
        slope = float(np.polyfit(np.log(np.array(depths, dtype=float)), np.log(gaps), 1)[0])
    else:
        slope = float("nan")  # degenerate (e.g. single-task) configurations
    pragma = f"# schema={SCHEMA['inverse-gap']} config={cfg.config_hash()}"
    columns = ["kind", "depth", "gap_op_norm", "slope", "jitter", "config"]
    table = [["detail", r["depth"], _fmt(r["gap_op_norm"]), "", _fmt(r["jitter"]),
              cfg.config_hash()] for r in rows]
    table.append(["summary", "", "", _fmt(slope), "", cfg.config_hash()])
    path = _out_path(out_dir, "inverse_gap", cfg.out_format)
    _write_table(path, pragma, columns, table, cfg.out_format)
    return rows, slope


# ---------------------------------------------------------------------------
# finite-width cross-check


def _fw_task_config(cfg: SweepConfig) -> TaskDistributionConfig:
    return TaskDistributionConfig(
        input_dim=cfg.input_dim,
        num_train_tasks=cfg.fw_num_train_tasks,
        points_per_task=cfg.fw_points_per_task,
        support_size=cfg.support_size,
        query_size=cfg.query_size,
        nu_range=(cfg.nu_low, cfg.nu_high),
        seed=cfg.seed,
    )


def _rescale_labels(training: TrainingSet, tests):
    """Shrink all labels to unit RMS: both sides of the comparison are
    linear in labels, and modest label scale keeps finite nets in the
    linearized regime that the analytic predictors describe."""
    scale = float(np.sqrt(np.mean(training.stacked_y ** 2)))
    scaled_train = TrainingSet(
        xs=training.xs, ys=tuple(y / scale for y in training.ys))
    scaled_tests = [
        TestTask(query_x=t.query_x, query_y=t.query_y / scale,
                 support_x=t.support_x, support_y=t.support_y / scale)
        for t in tests
    ]
    return scaled_train, scaled_tests, scale


class _WidthSeedWorker:
    def __init__(self, cfg):
        self.cfg = cfg
        task_cfg = _fw_task_config(cfg)
        training = sample_training_set(task_cfg).train
        tests = [sample_test_task(task_cfg, j).task for j in range(cfg.fw_num_test_tasks)]
        self.training, self.tests, _ = _rescale_labels(training, tests)
        self.spec = NetworkSpec(depth=cfg.fw_depth)
        self.adapt = AdaptConfig(
            inner_rate=cfg.fw_inner_rate,
            train_steps=float(cfg.fw_inner_steps),
            test_steps=float(cfg.fw_test_steps),
        )
        self.gram = train_grampack(self.training, self.spec)
        bundles = [
            TaskKernelBundle.build(self.training, t, self.spec, gram=self.gram)
            for t in self.tests
        ]
        self.ref_mtl = [
            predict_mtl(self.training, t, self.adapt, self.spec, bundle=b).values
            for t, b in zip(self.tests, bundles)
        ]
        self.ref_anil = [
            predict_anil(self.training, t, self.adapt, self.spec, bundle=b).values
            for t, b in zip(self.tests, bundles)
        ]

    def __call__(self, unit):
        width, seed_index = unit
        cfg = self.cfg
        stack = self.training.stacked_x.rows
        net_seed = cfg.seed + 1000 * (seed_index + 1)
        params = init_network(self.spec, width, cfg.input_dim,
                              heads=self.training.num_tasks, seed=net_seed)
        emp = empirical_ntk(params, stack, stack, scope="all", head=0)
        kernel_error = float(
            np.linalg.norm(emp - self.gram.ntk) / np.linalg.norm(self.gram.ntk))

        train_cfg = TrainConfig(outer_steps=cfg.fw_outer_steps)
        fitted = train_mtl(params, self.training, train_cfg)
        gap_mtl = self._mean_gap(fitted.params, self.ref_mtl)

        anil_cfg = TrainConfig(
            outer_steps=cfg.fw_outer_steps,
            inner_rate=cfg.fw_inner_rate,
            inner_steps=cfg.fw_inner_steps,
        )
        params_single = init_network(self.spec, width, cfg.input_dim, heads=1,
                                     seed=net_seed)
        fitted_anil = train_anil(params_single, self.training, anil_cfg, train_head=True)
        gap_anil = self._mean_gap(fitted_anil.params, self.ref_anil)
        return {
            "width": width,
            "seed": seed_index,
            "kernel_error": kernel_error,
            "pred_gap_mtl": gap_mtl,
            "pred_gap_anil": gap_anil,
        }

    def _mean_gap(self, params, refs):
        gaps = []
        for test, ref in zip(self.tests, refs):
            pred = fine_tune_and_predict(
                params, test, self.cfg.fw_inner_rate, int(self.cfg.fw_test_steps))
            gaps.append(float(np.linalg.norm(pred - ref)))
        return float(np.mean(gaps))


def run_finite_width_check(cfg: SweepConfig, out_dir):
    """Empirical-kernel error and net-vs-kernel prediction gaps per width."""
    units = [(w, s) for w in sorted(cfg.fw_widths) for s in range(cfg.fw_seeds)]
    rows = _run_units(units, _WidthSeedWorker(cfg), cfg.jobs)
    rows.sort(key=lambda r: (r["width"], r["seed"]))
    pragma = f"# schema={SCHEMA['finite-width']} config={cfg.config_hash()}"
    columns = ["kind", "width", "seed", "kernel_error", "pred_gap_mtl",
               "pred_gap_anil", "config"]
    table = [["detail", r["width"], r["seed"], _fmt(r["kernel_error"]),
              _fmt(r["pred_gap_mtl"]), _fmt(r["pred_gap_anil"]), cfg.config_hash()]
             for r in rows]
    summary = []
    for width in sorted(cfg.fw_widths):
        group = [r for r in rows if r["width"] == width]
        entry = {
            "width": width,
            "kernel_error": float(np.mean([r["kernel_error"] for r in group])),
            "pred_gap_mtl": float(np.mean([r["pred_gap_mtl"] for r in group])),
            "pred_gap_anil": float(np.mean([r["pred_gap_anil"] for r in group])),
        }
        summary.append(entry)
        table.append(["summary", width, "", _fmt(entry["kernel_error"]),
                      _fmt(entry["pred_gap_mtl"]), _fmt(entry["pred_gap_anil"]),
                      cfg.config_hash()])
    path = _out_path(out_dir, "finite_width", cfg.out_format)
    _write_table(path, pragma, columns, table, cfg.out_format)
    return rows, summary


def run_gen_tasks(cfg: SweepConfig, out_dir):
    """Materialize the task distribution into the replayable tabular file."""
    synth = sample_training_set(cfg.task)
    tests = [sample_test_task(cfg.task, j) for j in range(cfg.num_test_tasks)]
    path = os.path.join(out_dir, "tasks.csv")
    os.makedirs(out_dir, exist_ok=True)
    save_tasks(path, synth, tests)
    return path


# ---------------------------------------------------------------------------
# output plumbing


def _out_path(out_dir, stem: str, out_format: str) -> str:
    return os.path.join(out_dir, f"{stem}.{ 'csv' if out_format == 'csv' else 'json' }")


def _write_text(path, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_table(path, pragma: str, columns, rows, out_format: str):
    if out_format == "csv":
        buf = io.StringIO()
        buf.write(pragma + "\n")
        buf.write(",".join(columns) + "\n")
        for row in rows:
            buf.write(",".join(str(cell) for cell in row) + "\n")
        _write_text(path, buf.getvalue())
    else:
        doc = {
            "schema": pragma.lstrip("# ").strip(),
            "columns": list(columns),
            "rows": [[str(cell) for cell in row] for row in rows],
        }
        _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
