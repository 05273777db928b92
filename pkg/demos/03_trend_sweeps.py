"""Sweep runners: prediction-gap trends and the kernel-inverse scaling law.

Runs reduced versions of the experiment grids and prints the summary rows
the CSV files carry.  The per-depth trend of the prediction gap and the
near-quadratic decay of the inverse discrepancy are the two quantitative
signatures this library is built to exhibit.
"""

import tempfile

from metakernels.experiments import (
    SweepConfig,
    run_depth_sweep,
    run_inverse_gap,
    run_lrtau_sweep,
)

cfg = SweepConfig(seed=7, num_seeds=3, num_test_tasks=10)

with tempfile.TemporaryDirectory() as out:
    _, depth_summary = run_depth_sweep(cfg, out)
    print("gap vs depth (lrtau = 0):")
    for row in depth_summary:
        print(f"  L={row['depth']:>2}: mean={row['mean_gap_l2']:.3f} "
              f"+- {row['ci95_gap_l2']:.3f}")

    _, lrtau_summary = run_lrtau_sweep(cfg, out)
    print("\ngap vs lrtau (L = 10, converged outer training):")
    for row in lrtau_summary:
        print(f"  lrtau={row['lrtau']:.1f}: mean={row['mean_gap_l2']:.4f} "
              f"+- {row['ci95_gap_l2']:.4f}")

    rows, slope = run_inverse_gap(
        SweepConfig(seed=7, num_train_tasks=10, points_per_task=2,
                    inverse_gap_depths=(16, 32, 64, 128)), out)
    print("\noperator-norm gap between kernel inverses:")
    for row in rows:
        print(f"  L={row['depth']:>3}: {row['gap_op_norm']:.3e}")
    print(f"log-log slope: {slope:.3f} (quadratic decay would be -2)")
