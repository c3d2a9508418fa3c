import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llpf.analysis import (
    aggregate_records,
    interpolation_continuity,
    path_metrics,
    rolling_average,
    seed_variance_study,
)
from llpf.llpf_core import (
    PathPoint,
    PathRecord,
    Phase,
    PhasePlan,
    SearchSettings,
    StepParams,
    llpf_m2m,
)
from llpf.nn_engine import StopRule, TrainerConfig, evaluate, init_params, mlp2, train_until
from llpf.harness_cli.datasets import gen_blobs
from llpf.param_space import l2_distance, radial_norm_sq


class TestRollingAverage:
    def test_window_one_is_identity(self):
        series = [3.0, 1.0, 4.0, 1.5]
        assert rolling_average(series, 1) == series

    def test_constant_series(self):
        assert rolling_average([2.5] * 6, 4) == [2.5] * 6

    def test_hand_case(self):
        assert rolling_average([1, 2, 3, 4], 2) == [1.0, 1.5, 2.5, 3.5]

    def test_empty_series(self):
        assert rolling_average([], 5) == []

    def test_bad_window(self):
        with pytest.raises(ValueError):
            rolling_average([1.0], 0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=50),
        st.integers(min_value=1, max_value=60),
        st.floats(min_value=-10, max_value=10),
    )
    def test_translation_equivariance_and_bounds(self, series, window, shift):
        base = rolling_average(series, window)
        shifted = rolling_average([x + shift for x in series], window)
        assert all(abs(a + shift - b) < 1e-9 for a, b in zip(base, shifted))
        assert all(min(series) - 1e-9 <= v <= max(series) + 1e-9 for v in base)


@pytest.fixture(scope="module")
def blobs():
    return gen_blobs(3, 20, 1500, seed=9)


@pytest.fixture(scope="module")
def short_path(blobs):
    """A small same-sphere search with params stored at every point."""
    train, test = blobs
    g = mlp2(20, 16, 3)

    def make(seed):
        params = init_params(g, seed)
        rng = np.random.default_rng(seed)
        cfg = TrainerConfig(lr=0.1, momentum=0.9, weight_decay=1e-3, batch_size=32)
        return train_until(g, params, train, cfg, StopRule(0.0, 3000, 10), rng).params

    a, b = make(1), make(2)
    plan = PhasePlan(
        (Phase(tuple(g.slice_names()), 30, StepParams(step_f=1e-3), StopRule(0.0, 2, 10)),)
    )
    settings_ = SearchSettings(
        seed=0, checkpoint_stride=1, mode_acceptance_loss=0.5, variance_ratio_bound=4.0
    )
    record = llpf_m2m(
        a, b, plan, TrainerConfig(lr=1e-3, batch_size=32), train, test,
        settings=settings_, graph=g,
    )
    return g, record, a, b


class TestInterpolationContinuity:
    def test_identical_endpoints_flat_segment(self, blobs):
        train, _ = blobs
        g = mlp2(20, 8, 3)
        params = init_params(g, 0)
        points = [
            PathPoint(0, 0, 1.0, {}, params=params),
            PathPoint(1, 0, 1.0, {}, params=params),
        ]
        record = PathRecord(points=points)
        report = interpolation_continuity(record, 7, g, train)
        assert len(report.segment_losses) == 1
        assert len(set(report.segment_losses[0])) == 1

    def test_two_samples_are_endpoints(self, short_path, blobs):
        train, _ = blobs
        g, record, _, _ = short_path
        report = interpolation_continuity(record, 2, g, train)
        stored = record.stored_points()
        # alpha=1 of segment k equals alpha=0 of segment k+1: same parameters
        for k in range(len(stored) - 2):
            assert report.segment_losses[k][1] == report.segment_losses[k + 1][0]

    def test_needs_two_stored_points(self, blobs):
        train, _ = blobs
        g = mlp2(20, 8, 3)
        record = PathRecord(points=[PathPoint(0, 0, 1.0, {}, params=init_params(g, 0))])
        with pytest.raises(ValueError, match="two stored"):
            interpolation_continuity(record, 5, g, train)

    def test_sample_count_validated(self, short_path, blobs):
        train, _ = blobs
        g, record, _, _ = short_path
        with pytest.raises(ValueError, match="samples"):
            interpolation_continuity(record, 1, g, train)

    def test_deterministic(self, short_path, blobs):
        train, _ = blobs
        g, record, _, _ = short_path
        r1 = interpolation_continuity(record, 5, g, train, eval_size=256)
        r2 = interpolation_continuity(record, 5, g, train, eval_size=256)
        assert r1.segment_losses == r2.segment_losses


class TestPathMetrics:
    def test_single_point_distance_row(self, blobs):
        g = mlp2(20, 8, 3)
        a = init_params(g, 0)
        b = init_params(g, 1)
        dists = l2_distance(a, b, g.slice_names())
        record = PathRecord(points=[PathPoint(0, 0, 0.5, dists, params=a)])
        rows = path_metrics(record, b)
        assert len(rows) == 1
        for name, value in dists.items():
            assert rows[0][f"dist:{name}"] == value

    def test_origin_rows_are_norms(self, blobs):
        g = mlp2(20, 8, 3)
        a = init_params(g, 0)
        norms = {n: float(np.sqrt(radial_norm_sq(a.get(n)))) for n in g.slice_names()}
        record = PathRecord(points=[PathPoint(0, 0, 0.5, norms, params=a)])
        rows = path_metrics(record, "origin", recompute=True)
        for name, value in norms.items():
            assert rows[0][f"dist:{name}"] == pytest.approx(value, rel=1e-6)

    def test_recompute_matches_recorded(self, short_path, blobs):
        train, test = blobs
        g, record, a, b = short_path
        recorded = path_metrics(record, b)
        recomputed = path_metrics(record, b, graph=g, test_data=test, recompute=True)
        by_iter = {row["iteration"]: row for row in recomputed}
        for row in recorded:
            other = by_iter[row["iteration"]]
            for key, value in row.items():
                if key.startswith("dist:"):
                    assert value == pytest.approx(other[key], rel=1e-5, abs=1e-7)
            assert row["test_loss"] == pytest.approx(other["test_loss"], rel=1e-6)
            assert row["test_acc"] == other["test_acc"]

    def test_row_order_and_columns(self, short_path, blobs):
        g, record, _, b = short_path
        rows = path_metrics(record, b)
        assert [row["iteration"] for row in rows] == list(range(len(record.points)))
        assert all("rolling_train_loss" in row for row in rows)


class TestSeedVarianceStudy:
    def test_identical_seeds_zero_spread(self, blobs):
        train, _ = blobs
        g = mlp2(20, 8, 3)
        cfg = TrainerConfig(lr=0.05, batch_size=32)
        table = seed_variance_study(
            g, cfg, 2, train, rule=StopRule(0.0, 20, 10), seeds=[5, 5]
        )
        for name, stats in table.summary.items():
            assert stats["variance_cov"] == pytest.approx(0.0, abs=1e-12)

    def test_init_only_study(self, blobs):
        train, _ = blobs
        g = mlp2(100, 64, 10)
        table = seed_variance_study(g, TrainerConfig(lr=0.1), 12, train.__class__(
            inputs=np.zeros((10, 100), dtype=np.float32),
            labels=np.zeros(10, dtype=np.int64),
            split="train",
            num_classes=10,
        ), rule=None)
        assert table.summary["fc1.weight"]["variance_cov"] < 0.10

    def test_failed_seed_excluded_with_warning(self, blobs, caplog):
        train, _ = blobs
        g = mlp2(20, 8, 3)
        cfg = TrainerConfig(lr=1e-6, batch_size=16)
        with caplog.at_level(logging.WARNING):
            table = seed_variance_study(
                g, cfg, 2, train,
                rule=StopRule(0.0, 5, 10),
                seeds=[1, 2],
                acceptance_loss=1e-9,  # nothing passes
            )
        assert table.failed_seeds == [1, 2]
        assert all(len(rows) == 0 for rows in table.per_layer.values())
        assert "acceptance" in caplog.text

    def test_needs_two_seeds(self, blobs):
        train, _ = blobs
        with pytest.raises(ValueError):
            seed_variance_study(mlp2(20, 8, 3), TrainerConfig(lr=0.1), 1, train, seeds=[1])

    def test_summary_covers_exactly_weight_slices(self, blobs):
        train, _ = blobs
        from llpf.nn_engine import resnet_micro

        g = resnet_micro(1, 8, 3, width=2)
        data = train.__class__(
            inputs=np.zeros((12, 1, 8, 8), dtype=np.float32),
            labels=np.zeros(12, dtype=np.int64),
            split="train",
            num_classes=3,
        )
        table = seed_variance_study(g, TrainerConfig(lr=0.1), 3, data, rule=None)
        weight_names = {s.name for s in g.layout if s.kind == "weight"}
        assert set(table.summary) == weight_names


class TestAggregateRecords:
    def test_mean_and_std_by_iteration(self):
        def rec(losses):
            return PathRecord(
                points=[PathPoint(i, 0, v, {}) for i, v in enumerate(losses)]
            )

        rows = aggregate_records([rec([1.0, 2.0]), rec([3.0, 4.0])])
        assert rows[0]["mean"] == 2.0 and rows[0]["std"] == 1.0
        assert rows[1]["mean"] == 3.0 and rows[1]["count"] == 2


class TestContinuityFullSet:
    def test_full_set_flag_uses_every_sample(self, short_path, blobs):
        train, _ = blobs
        g, record, _, _ = short_path
        small = interpolation_continuity(record, 3, g, train, eval_size=64)
        full = interpolation_continuity(record, 3, g, train, use_full_set=True)
        assert small.segment_losses != full.segment_losses
        assert full.samples == 3
