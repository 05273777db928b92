import json

import numpy as np
import pytest

from metakernels.cli import main
from metakernels.composite import (
    AdaptConfig,
    TaskKernelBundle,
    kernel_inverse_gap,
    prediction_gap,
    train_grampack,
)
from metakernels.experiments import (
    SweepConfig,
    config_from_mapping,
    parse_config_file,
    run_depth_sweep,
    run_gen_tasks,
    run_inverse_gap,
    run_lrtau_sweep,
    run_spectra,
    summarize_rows,
)
from metakernels.kernels import NetworkSpec
from metakernels.tasks import TaskDistributionConfig, load_tasks, sample_test_task, sample_training_set


def tiny_config(**kw):
    base = dict(
        input_dim=4, num_train_tasks=3, points_per_task=2, support_size=2,
        query_size=3, seed=5, depths=(2, 3), lrtau_values=(0.0, 0.2),
        fixed_lrtau=0.0, fixed_depth=3, num_test_tasks=2, num_seeds=2,
        spectra_depths=(4, 8), inverse_gap_depths=(4, 8, 16, 32),
    )
    base.update(kw)
    return SweepConfig(**base)


class TestConfigParsing:
    def test_round_trip_types(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "# comment line\n"
            "input_dim = 6\n"
            "depths = 2, 4\n"
            "lrtau_values = 0, 0.3\n"
            "nu_low = 1.1\n"
            "format = json\n"
        )
        cfg = config_from_mapping(parse_config_file(path))
        assert cfg.input_dim == 6
        assert cfg.depths == (2, 4)
        assert cfg.lrtau_values == (0.0, 0.3)
        assert cfg.nu_low == 1.1
        assert cfg.out_format == "json"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("bogus_key = 3\n")
        with pytest.raises(ValueError, match="unknown key"):
            parse_config_file(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_file(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("seed: 1\n")
        with pytest.raises(ValueError, match="expected"):
            parse_config_file(path)

    def test_config_hash_stable_and_sensitive(self):
        assert tiny_config().config_hash() == tiny_config().config_hash()
        assert tiny_config().config_hash() != tiny_config(seed=6).config_hash()

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(lambda_split=0.0)
        with pytest.raises(ValueError):
            tiny_config(depths=())
        with pytest.raises(ValueError):
            SweepConfig(out_format="yaml")


class TestSweeps:
    def test_depth_sweep_row_counts(self, tmp_path):
        cfg = tiny_config()
        detail, summary = run_depth_sweep(cfg, tmp_path)
        # seeds x tasks x depths detail rows, one summary per depth
        assert len(detail) == 2 * 2 * 2
        assert len(summary) == 2
        assert [s["depth"] for s in summary] == [2, 3]

    def test_lrtau_sweep_row_counts(self, tmp_path):
        detail, summary = run_lrtau_sweep(tiny_config(), tmp_path)
        assert len(detail) == 2 * 2 * 2
        assert [s["lrtau"] for s in summary] == [0.0, 0.2]

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = tiny_config()
        run_depth_sweep(cfg, tmp_path / "a")
        run_depth_sweep(cfg, tmp_path / "b")
        assert ((tmp_path / "a" / "depth_sweep.csv").read_bytes()
                == (tmp_path / "b" / "depth_sweep.csv").read_bytes())

    def test_parallel_run_is_byte_identical(self, tmp_path):
        run_depth_sweep(tiny_config(jobs=1), tmp_path / "serial")
        run_depth_sweep(tiny_config(jobs=2), tmp_path / "pool")
        assert ((tmp_path / "serial" / "depth_sweep.csv").read_bytes()
                == (tmp_path / "pool" / "depth_sweep.csv").read_bytes())

    def test_cross_sweep_consistency_at_zero_lrtau(self, tmp_path):
        cfg = tiny_config(depths=(2, 3), fixed_depth=3, fixed_lrtau=0.0)
        depth_detail, _ = run_depth_sweep(cfg, tmp_path / "d")
        lrtau_detail, _ = run_lrtau_sweep(cfg, tmp_path / "l")
        a = {(r["seed"], r["task_id"]): r["gap_l2"]
             for r in depth_detail if r["depth"] == 3}
        b = {(r["seed"], r["task_id"]): r["gap_l2"]
             for r in lrtau_detail if r["lrtau"] == 0.0}
        assert a == b  # bitwise float equality

    def test_rows_match_standalone_predictors(self, tmp_path):
        cfg = tiny_config(num_seeds=1, num_test_tasks=1, depths=(3,), lrtau_values=(0.2,),
                          fixed_depth=3)
        detail, _ = run_lrtau_sweep(cfg, tmp_path)
        row = [r for r in detail if r["lrtau"] == 0.2][0]
        task_cfg = cfg.task
        training = sample_training_set(task_cfg).train
        test = sample_test_task(task_cfg, 0).task
        gap = prediction_gap(training, test, cfg.adapt_for(0.2), NetworkSpec(depth=3))
        assert row["gap_l2"] == gap.gap_l2

    def test_csv_layout(self, tmp_path):
        cfg = tiny_config()
        run_depth_sweep(cfg, tmp_path)
        lines = (tmp_path / "depth_sweep.csv").read_text().splitlines()
        assert lines[0].startswith("# schema=metakernels/sweep/v1 sweep=depth")
        assert lines[1].split(",")[:5] == ["kind", "seed", "task_id", "depth", "lrtau"]
        kinds = [line.split(",")[0] for line in lines[2:]]
        assert kinds.count("detail") == 8 and kinds.count("summary") == 2
        # floats roundtrip through the 17-significant-digit format
        value = lines[2].split(",")[5]
        assert float(value) == float(f"{float(value):.17g}")
        assert all(line.split(",")[-1] == cfg.config_hash() for line in lines[2:])

    def test_json_format(self, tmp_path):
        cfg = tiny_config(out_format="json")
        run_depth_sweep(cfg, tmp_path)
        doc = json.loads((tmp_path / "depth_sweep.json").read_text())
        assert doc["columns"][0] == "kind"
        assert len(doc["rows"]) == 10

    def test_summary_matches_manual_recount(self, tmp_path):
        detail, summary = run_depth_sweep(tiny_config(), tmp_path)
        again = summarize_rows(detail)
        assert again == summary


class TestSpectraRunner:
    def test_report_structure_and_determinism(self, tmp_path):
        cfg = tiny_config()
        run_spectra(cfg, tmp_path / "a")
        run_spectra(cfg, tmp_path / "b")
        a = (tmp_path / "a" / "spectra.json").read_bytes()
        assert a == (tmp_path / "b" / "spectra.json").read_bytes()
        doc = json.loads(a)
        assert doc["schema"] == "metakernels/spectra/v1"
        assert [r["depth"] for r in doc["reports"]] == [4, 8]
        for report in doc["reports"]:
            assert {"measured", "predicted", "rel_error"} == set(report["ntk_largest"])

    def test_errors_shrink_with_depth(self, tmp_path):
        cfg = tiny_config(num_train_tasks=10, points_per_task=2, input_dim=10,
                          spectra_depths=(32, 128))
        reports = run_spectra(cfg, tmp_path)
        assert (reports[1]["ntk_largest"]["rel_error"]
                < reports[0]["ntk_largest"]["rel_error"])


class TestInverseGapRunner:
    def test_slope_and_rows(self, tmp_path):
        cfg = tiny_config(num_train_tasks=5, points_per_task=2, input_dim=8,
                          inverse_gap_depths=(8, 16, 32, 64))
        rows, slope = run_inverse_gap(cfg, tmp_path)
        gaps = [r["gap_op_norm"] for r in rows]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert -3.0 < slope < -1.0
        lines = (tmp_path / "inverse_gap.csv").read_text().splitlines()
        assert lines[0].startswith("# schema=metakernels/inverse-gap/v1")
        assert lines[-1].split(",")[0] == "summary"

    def test_single_task_degenerates_to_nan_slope(self, tmp_path):
        cfg = tiny_config(num_train_tasks=1, inverse_gap_depths=(4, 8, 16, 32))
        rows, slope = run_inverse_gap(cfg, tmp_path)
        assert all(r["gap_op_norm"] == 0.0 for r in rows)
        assert np.isnan(slope)
        summary_line = (tmp_path / "inverse_gap.csv").read_text().splitlines()[-1]
        assert summary_line.split(",")[3] == "nan"

    def test_jitter_floor_robustness(self):
        task_cfg = TaskDistributionConfig(
            input_dim=10, num_train_tasks=10, points_per_task=2, seed=3)
        training = sample_training_set(task_cfg).train
        gram = train_grampack(training, NetworkSpec(depth=64))
        base = kernel_inverse_gap(gram, jitter=1e-10)
        doubled = kernel_inverse_gap(gram, jitter=2e-10)
        assert abs(doubled - base) / base < 0.01


class TestGenTasks:
    def test_file_written_and_loadable(self, tmp_path):
        cfg = tiny_config()
        path = run_gen_tasks(cfg, tmp_path)
        training, tests = load_tasks(path)
        assert training.num_tasks == 3
        assert sorted(tests) == [0, 1]

    def test_deterministic_bytes(self, tmp_path):
        cfg = tiny_config()
        a = run_gen_tasks(cfg, tmp_path / "a")
        b = run_gen_tasks(cfg, tmp_path / "b")
        assert open(a, "rb").read() == open(b, "rb").read()


class TestCli:
    def test_gen_tasks_command(self, tmp_path):
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text(
            "input_dim = 4\nnum_train_tasks = 2\npoints_per_task = 2\n"
            "support_size = 2\nquery_size = 2\nnum_test_tasks = 1\nseed = 3\n"
        )
        out = tmp_path / "out"
        assert main(["gen-tasks", "--config", str(cfg_file), "--out", str(out)]) == 0
        assert (out / "tasks.csv").exists()

    def test_seed_override_changes_output(self, tmp_path):
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text("input_dim = 4\nnum_train_tasks = 2\npoints_per_task = 2\n")
        main(["gen-tasks", "--config", str(cfg_file), "--seed", "1",
              "--out", str(tmp_path / "a")])
        main(["gen-tasks", "--config", str(cfg_file), "--seed", "2",
              "--out", str(tmp_path / "b")])
        assert ((tmp_path / "a" / "tasks.csv").read_bytes()
                != (tmp_path / "b" / "tasks.csv").read_bytes())

    def test_unknown_config_key_fails_cleanly(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text("nonsense = 1\n")
        code = main(["spectra", "--config", str(cfg_file), "--out", str(tmp_path)])
        assert code == 1
        assert "unknown key" in capsys.readouterr().err
