"""End-to-end command tests on a tiny blobs experiment."""

import numpy as np
import pytest

from llpf.harness_cli.checkpoint import load_checkpoint
from llpf.harness_cli.cli import main
from llpf.harness_cli.records import read_path_record
from llpf.harness_cli.reports import read_csv
from llpf.nn_engine import mlp2

BASE = """
[model]
name = mlp2
in_dim = 10
hidden = 8
classes = 3

[dataset]
name = blobs
classes = 3
dim = 10
n = 600
seed = 11
"""

MODES = """
[modes]
seeds = 1, 2
lr = 0.1
momentum = 0.9
weight_decay = 1e-3
batch_size = 32
max_rounds = 800
acceptance_loss = 0.1
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def modes_dir(tmp_path_factory):
    """Two trained mode checkpoints shared by the command tests."""
    tmp_path = tmp_path_factory.mktemp("modes")
    cfg = write_cfg(
        tmp_path,
        BASE + MODES + f"\n[output]\ndir = out\n",
    )
    assert main(["train-modes", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "mode_1.ckpt").is_file() and (out / "mode_2.ckpt").is_file()
    return tmp_path


class TestTrainModes:
    def test_artifacts(self, modes_dir):
        out = modes_dir / "out"
        assert (out / "manifest.txt").is_file()
        header, rows = read_csv(out / "mode_1_train.csv")
        assert header == ["round", "loss"]
        assert len(rows) == 800
        manifest = (out / "manifest.txt").read_text()
        assert "config_digest" in manifest and "seeds = 1, 2" in manifest
        assert "code_version = llpf" in manifest
        assert "started = " in manifest and "finished = " in manifest

    def test_checkpoints_load(self, modes_dir):
        g = mlp2(10, 8, 3)
        params = load_checkpoint(g, modes_dir / "out" / "mode_1.ckpt")
        assert params.size == g.num_params


class TestConnectM2M:
    def test_trivial_same_endpoint_path(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2m]
start = {modes_dir}/out/mode_1.ckpt
dest = {modes_dir}/out/mode_1.ckpt
iterations = 5
step_f = 1e-3
lr = 1e-5
batch_size = 16
train_rounds = 1
mode_acceptance_loss = 0.2

[output]
dir = out_m2m
seed = 3
checkpoint_stride = 1
""",
        )
        assert main(["connect-m2m", "--config", str(cfg)]) == 0
        g = mlp2(10, 8, 3)
        record = read_path_record(tmp_path / "out_m2m", g)
        assert len(record.points) == 6
        assert max(record.points[-1].per_layer_dist.values()) < 1e-2

    def test_real_pair_runs_and_is_deterministic(self, modes_dir, tmp_path):
        def cfg_text(out_name):
            return (
                BASE
                + f"""
[m2m]
start = {modes_dir}/out/mode_1.ckpt
dest = {modes_dir}/out/mode_2.ckpt
iterations = 20
step_f = 1e-3
lr = 1e-3
batch_size = 32
train_rounds = 2
mode_acceptance_loss = 0.2
variance_ratio_bound = 4.0

[output]
dir = {out_name}
seed = 3
"""
            )

        cfg_a = write_cfg(tmp_path, cfg_text("out_a"), "a.cfg")
        cfg_b = write_cfg(tmp_path, cfg_text("out_b"), "b.cfg")
        assert main(["connect-m2m", "--config", str(cfg_a)]) == 0
        assert main(["connect-m2m", "--config", str(cfg_b)]) == 0
        a = (tmp_path / "out_a" / "metrics.csv").read_bytes()
        b = (tmp_path / "out_b" / "metrics.csv").read_bytes()
        assert a == b

    def test_missing_checkpoint_is_validation_error(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2m]
start = {modes_dir}/out/mode_1.ckpt
dest = nope.ckpt
step_f = 1e-3

[output]
dir = out
""",
        )
        assert main(["connect-m2m", "--config", str(cfg)]) == 1

    def test_distant_spheres_runtime_error(self, modes_dir, tmp_path):
        # a destination on a much larger sphere: freshly scaled checkpoint
        g = mlp2(10, 8, 3)
        params = load_checkpoint(g, modes_dir / "out" / "mode_1.ckpt")
        big = params.with_slices(
            {"fc1.weight": params.get("fc1.weight") * 4.0}
        )
        from llpf.harness_cli.checkpoint import save_checkpoint

        save_checkpoint(big, g, tmp_path / "big.ckpt")
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2m]
start = {modes_dir}/out/mode_1.ckpt
dest = big.ckpt
iterations = 2
step_f = 1e-3
mode_acceptance_loss = 0

[output]
dir = out
""",
        )
        assert main(["connect-m2m", "--config", str(cfg)]) == 2


class TestCollapseM2O:
    def test_runs_and_reports_norms(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2o]
start = {modes_dir}/out/mode_1.ckpt
iterations = 10
step_a = 2e-3
eta = 1e-3
batch_size = 32
train_rounds = 2
mode_acceptance_loss = 0.2

[output]
dir = out_m2o
seed = 5
""",
        )
        assert main(["collapse-m2o", "--config", str(cfg)]) == 0
        g = mlp2(10, 8, 3)
        record = read_path_record(tmp_path / "out_m2o", g)
        assert len(record.points) == 11
        first, last = record.points[0], record.points[-1]
        assert all(last.per_layer_dist[n] < first.per_layer_dist[n]
                   for n in first.per_layer_dist)


class TestContinuityCommand:
    def test_continuity_csv(self, modes_dir, tmp_path):
        run_cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2m]
start = {modes_dir}/out/mode_1.ckpt
dest = {modes_dir}/out/mode_1.ckpt
iterations = 4
step_f = 1e-3
lr = 1e-5
train_rounds = 1
mode_acceptance_loss = 0.2

[output]
dir = path_out
checkpoint_stride = 2
""",
            "path.cfg",
        )
        assert main(["connect-m2m", "--config", str(run_cfg)]) == 0
        cont_cfg = write_cfg(
            tmp_path,
            BASE
            + """
[continuity]
record_dir = path_out
samples = 5

[output]
dir = cont_out
""",
            "cont.cfg",
        )
        assert main(["continuity", "--config", str(cont_cfg)]) == 0
        header, rows = read_csv(tmp_path / "cont_out" / "continuity.csv")
        assert header == ["position", "segment_start", "segment_end", "alpha", "train_loss"]
        assert len(rows) == 2 * 5  # two stored segments (0-2, 2-4), five samples


class TestSeedStudyCommand:
    def test_tables_written(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE + MODES + """
[seed_study]
seeds = 1, 2, 3

[output]
dir = study
""",
        )
        assert main(["seed-study", "--config", str(cfg)]) == 0
        header, rows = read_csv(tmp_path / "study" / "seed_study.csv")
        assert header[0] == "seed" and len(rows) == 3
        s_header, s_rows = read_csv(tmp_path / "study" / "seed_study_summary.csv")
        assert s_header == ["layer", "variance_cov", "max_abs_mean_over_std"]
        assert {r["layer"] for r in s_rows} == {"fc1.weight", "fc2.weight"}


class TestPlot:
    def test_plot_from_metrics(self, modes_dir, tmp_path):
        out_svg = tmp_path / "chart.svg"
        csv_path = modes_dir / "out" / "mode_1_train.csv"
        assert main(["plot", str(csv_path), "--out", str(out_svg), "--log-y"]) == 0
        assert out_svg.read_text().startswith("<svg")

    def test_bad_column_is_validation_error(self, modes_dir, tmp_path):
        csv_path = modes_dir / "out" / "mode_1_train.csv"
        code = main(["plot", str(csv_path), "--out", str(tmp_path / "x.svg"), "--y", "nope"])
        assert code == 1


class TestExitCodes:
    def test_unknown_flag(self):
        assert main(["train-modes", "--config", "x", "--frobnicate"]) == 1

    def test_unknown_key_in_config(self, tmp_path):
        cfg = write_cfg(tmp_path, BASE + "\n[output]\ndir = out\nwat = 1\n" + MODES)
        assert main(["train-modes", "--config", str(cfg)]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["train-modes", "--config", str(tmp_path / "none.cfg")]) == 1

    def test_seed_override(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE + """
[modes]
seeds = 1, 2
lr = 0.1
max_rounds = 20

[output]
dir = out
""",
        )
        assert main(["train-modes", "--config", str(cfg), "--seed-override", "9"]) == 0
        assert (tmp_path / "out" / "mode_9.ckpt").is_file()
        assert not (tmp_path / "out" / "mode_1.ckpt").exists()

    def test_jobs_fan_out(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE + """
[modes]
seeds = 1, 2, 3
lr = 0.1
max_rounds = 20

[output]
dir = out
""",
        )
        assert main(["train-modes", "--config", str(cfg), "--jobs", "3"]) == 0
        for seed in (1, 2, 3):
            assert (tmp_path / "out" / f"mode_{seed}.ckpt").is_file()


class TestShippedConfigs:
    def test_examples_parse_and_validate(self):
        from pathlib import Path

        from llpf.harness_cli import run_config as rc
        from llpf.harness_cli.config import parse_config

        for name in (
            "blobs_m2m.cfg",
            "blobs_m2o.cfg",
            "blobs_avs.cfg",
            "blobs_continuity.cfg",
            "blobs_seed_study.cfg",
            "lenet_mnist_m2m.cfg",
        ):
            cfg = parse_config(Path(__file__).parent.parent / "configs" / name)
            graph = rc.build_graph(cfg)
            assert graph.num_params > 0
            if cfg.has("modes"):
                rc.build_modes(cfg)
            rc.build_output(cfg)

    def test_long_convnet_schedule_builds(self, tmp_path):
        """The documented 30000-iteration convnet schedule parses into the
        expected single all-layers phase without running it."""
        from llpf.harness_cli import run_config as rc
        from llpf.harness_cli.checkpoint import save_checkpoint
        from llpf.harness_cli.config import parse_config
        from llpf.nn_engine import init_params, lenet_micro

        g = lenet_micro(1, 28, 10)
        for name in ("mode_1.ckpt", "mode_2.ckpt"):
            save_checkpoint(init_params(g, 0), g, tmp_path / name)
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            """
[model]
name = lenet-micro

[dataset]
name = mnist-subset
per_class = 16
dir = .

[m2m]
start = mode_1.ckpt
dest = mode_2.ckpt
iterations = 30000
step_f = 1e-3
train_rounds = 5
lr = 1e-3
batch_size = 64

[output]
dir = out
"""
        )
        cfg = parse_config(cfg_path)
        block = rc.build_m2m(cfg, rc.build_graph(cfg))
        assert len(block.plan.phases) == 1
        phase = block.plan.phases[0]
        assert phase.iterations == 30000
        assert phase.step.step_f == 1e-3 and phase.step.step_a == 0.0
        assert phase.stop.max_rounds == 5
        assert set(phase.active_layers) == set(g.slice_names())
        assert block.trainer.lr == 1e-3 and block.trainer.batch_size == 64
        assert block.trainer.momentum == 0.0 and block.trainer.weight_decay == 0.0

    def test_fdf_and_explicit_phase_sections(self, tmp_path):
        from llpf.harness_cli import run_config as rc
        from llpf.harness_cli.checkpoint import save_checkpoint
        from llpf.harness_cli.config import parse_config
        from llpf.nn_engine import init_params, resnet_micro

        g = resnet_micro(1, 8, 3, width=2)
        for name in ("a.ckpt", "b.ckpt"):
            save_checkpoint(init_params(g, 0), g, tmp_path / name)
        base = """
[model]
name = resnet-micro
hw = 8
classes = 3
width = 2

[dataset]
name = blobs
classes = 3
dim = 10
n = 30

[output]
dir = out
"""
        fdf_cfg = tmp_path / "fdf.cfg"
        fdf_cfg.write_text(
            base
            + """
[m2m]
start = a.ckpt
dest = b.ckpt
iterations = 7
step_a = 1e-3
phases = fdf
"""
        )
        block = rc.build_m2m(parse_config(fdf_cfg), g)
        assert len(block.plan.phases) == 6  # stem, block1, two branches, head, all

        explicit_cfg = tmp_path / "explicit.cfg"
        explicit_cfg.write_text(
            base
            + """
[m2m]
start = a.ckpt
dest = b.ckpt
iterations = 7
step_a = 1e-3

[m2m.phase.1]
layers = stem.*

[m2m.phase.2]
layers = all
iterations = 3
"""
        )
        block = rc.build_m2m(parse_config(explicit_cfg), g)
        assert [p.iterations for p in block.plan.phases] == [7, 3]
        assert set(block.plan.phases[0].active_layers) == {
            "stem.conv.weight", "stem.bn.scale", "stem.bn.shift",
        }


class TestConnectAvs:
    def test_degenerate_same_endpoint(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[avs]
start = {modes_dir}/out/mode_1.ckpt
dest = {modes_dir}/out/mode_1.ckpt
mode_acceptance_loss = 0.2

[avs.m2o]
iterations = 50
step_a = 1e-3
eta = 1e-4
batch_size = 16
train_rounds = 1

[avs.m2m]
iterations = 4
step_f = 1e-3
lr = 1e-5
batch_size = 16
train_rounds = 1

[output]
dir = out_avs
checkpoint_stride = 1
""",
        )
        assert main(["connect-avs", "--config", str(cfg)]) == 0
        import json

        meta = json.loads((tmp_path / "out_avs" / "record.json").read_text())
        # identical spheres: stage one exits immediately at the hand-off
        assert meta["stage_boundary"] == 0
        g = mlp2(10, 8, 3)
        record = read_path_record(tmp_path / "out_avs", g)
        assert record.stage_boundary == 0
        assert len(record.points) == 5


class TestM2OExcludeGlobs:
    def test_extra_exclusions_stay_put(self, modes_dir, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE
            + f"""
[m2o]
start = {modes_dir}/out/mode_1.ckpt
iterations = 5
step_a = 5e-3
eta = 1e-4
batch_size = 16
train_rounds = 1
exclude = fc2.*
mode_acceptance_loss = 0.2

[output]
dir = out_m2o_excl
checkpoint_stride = 1
""",
        )
        assert main(["collapse-m2o", "--config", str(cfg)]) == 0
        g = mlp2(10, 8, 3)
        record = read_path_record(tmp_path / "out_m2o_excl", g)
        start = load_checkpoint(g, modes_dir / "out" / "mode_1.ckpt")
        for point in record.points:
            assert "fc2.weight" not in point.per_layer_dist
            if point.params is not None:
                assert np.array_equal(point.params.get("fc2.weight"), start.get("fc2.weight"))
                assert np.array_equal(point.params.get("fc2.bias"), start.get("fc2.bias"))


class TestSeedStudyInitOnly:
    def test_init_only_flag(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            BASE + MODES + """
[seed_study]
seeds = 1, 2, 3, 4
init_only = true

[output]
dir = study
""",
        )
        assert main(["seed-study", "--config", str(cfg)]) == 0
        header, rows = read_csv(tmp_path / "study" / "seed_study.csv")
        assert len(rows) == 4
        # untrained bias slices are exactly zero at init
        assert all(row["var:fc1.bias"] == 0 for row in rows)


class TestMnistEnvVar:
    def test_data_dir_from_environment(self, tmp_path, monkeypatch):
        from test_datasets import write_tiny_mnist

        data_dir = tmp_path / "mnist"
        data_dir.mkdir()
        write_tiny_mnist(data_dir)
        monkeypatch.setenv("LLPF_DATA_DIR", str(data_dir))
        cfg = write_cfg(
            tmp_path,
            """
[model]
name = lenet-micro

[dataset]
name = mnist-subset
per_class = 2

[modes]
seeds = 1
lr = 0.05
max_rounds = 5

[output]
dir = out
""",
        )
        assert main(["train-modes", "--config", str(cfg)]) == 0
        assert (tmp_path / "out" / "mode_1.ckpt").is_file()


class TestRecordRoundTrip:
    def test_write_read_preserves_metrics_and_params(self, modes_dir, tmp_path):
        import numpy as np

        from llpf.harness_cli.records import read_path_record, write_path_record
        from llpf.llpf_core import (PhasePlan, Phase, SearchSettings, StepParams,
                                    llpf_m2m)
        from llpf.nn_engine import StopRule, TrainerConfig
        from llpf.harness_cli.datasets import gen_blobs

        g = mlp2(10, 8, 3)
        a = load_checkpoint(g, modes_dir / "out" / "mode_1.ckpt")
        b = load_checkpoint(g, modes_dir / "out" / "mode_2.ckpt")
        train, test = gen_blobs(3, 10, 600, seed=11)
        plan = PhasePlan(
            (Phase(tuple(g.slice_names()), 8, StepParams(step_f=1e-3), StopRule(0.0, 1, 10)),)
        )
        record = llpf_m2m(
            a, b, plan, TrainerConfig(lr=1e-3, batch_size=16), train, test,
            settings=SearchSettings(seed=1, checkpoint_stride=4,
                                    mode_acceptance_loss=0.2,
                                    variance_ratio_bound=4.0),
            graph=g,
        )
        out = tmp_path / "rec"
        write_path_record(out, record, g)
        loaded = read_path_record(out, g)
        assert len(loaded.points) == len(record.points)
        assert loaded.endpoints == record.endpoints
        for original, restored in zip(record.points, loaded.points):
            assert restored.iteration == original.iteration
            assert restored.rolling_train_loss == original.rolling_train_loss
            assert restored.per_layer_dist == original.per_layer_dist
            if original.params is None:
                assert restored.params is None
            else:
                assert np.array_equal(
                    restored.params.data,
                    original.params.data.astype(np.float32),
                )
