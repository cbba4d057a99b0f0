import numpy as np
import pytest

from gaussfields import Rng, decode_batch, init_random
from gaussfields.flops import (
    OpCounter,
    RefMlp,
    bench_csv,
    bench_rows,
    bench_table,
    flops_mlp,
    flops_rbf,
    instrumented_count,
    measure_throughput,
    ratio_summary,
    PUBLISHED_MLP_TOTAL,
    PUBLISHED_RBF_TOTAL,
)


class TestClosedForms:
    def test_mlp_forward_reference_config(self):
        assert flops_mlp(32, 64, 10_000, "forward") == 124_160_000

    def test_mlp_total_is_three_times_forward(self):
        assert flops_mlp(32, 64, 123, "total") == 3 * flops_mlp(32, 64, 123, "forward")

    def test_rbf_forward_reference_config(self):
        assert flops_rbf(32, 64, 10_000, "forward") == 63_360_000

    def test_zero_batch(self):
        assert flops_mlp(32, 64, 0, "forward") == 0
        assert flops_rbf(32, 64, 0, "total") == 0

    def test_rbf_linear_in_each_argument(self, rng):
        for _ in range(10):
            f, n, b = (int(x) for x in rng.integers(1, 200, size=3))
            base_fwd = flops_rbf(f, n, b, "forward")
            base_tot = flops_rbf(f, n, b, "total")
            assert flops_rbf(f, 3 * n, b, "forward") == 3 * base_fwd
            assert flops_rbf(f, n, 5 * b, "forward") == 5 * base_fwd
            assert flops_rbf(f, 3 * n, b, "total") == 3 * base_tot
            assert flops_rbf(f, n, 5 * b, "total") == 5 * base_tot
            # linear in F up to the constant term
            assert (flops_rbf(2 * f, n, b, "forward") - base_fwd) == 3 * f * b * n

    def test_mlp_quadratic_in_width(self):
        ratio = flops_mlp(32, 2048, 1, "total") / flops_mlp(32, 1024, 1, "total")
        assert ratio > 3.5

    def test_total_forward_ratios(self):
        assert flops_mlp(32, 64, 7, "total") / flops_mlp(32, 64, 7, "forward") == 3.0
        got = flops_rbf(32, 64, 7, "total") / flops_rbf(32, 64, 7, "forward")
        assert got == pytest.approx((7 * 32 + 6) / (3 * 32 + 3), rel=1e-12)

    def test_invalid_args_rejected(self):
        with pytest.raises(ValueError):
            flops_mlp(0, 64, 1)
        with pytest.raises(ValueError):
            flops_rbf(32, 64, -1)
        with pytest.raises(ValueError):
            flops_mlp(32, 64, 1, "sideways")


class TestInstrumentedCounts:
    def test_rbf_count_equals_closed_form(self):
        counter = instrumented_count("rbf", 16, 4, 2)
        assert counter.total == (3 * 16 + 3) * 2 * 4 == 408

    @pytest.mark.parametrize("f,n,b", [(32, 64, 10), (8, 3, 5), (1, 1, 1)])
    def test_rbf_count_general(self, f, n, b):
        counter = instrumented_count("rbf", f, n, b)
        assert counter.total == flops_rbf(f, n, b, "forward")

    def test_rbf_spherical_count_also_exact(self):
        counter = OpCounter()
        layer = init_random(4, 16, 1, Rng(0), spherical=True)
        F = Rng(1).uniform(-1, 1, size=(2, 16)).astype(np.float32)
        decode_batch(layer, F, counter=counter)
        assert counter.total == (3 * 16 + 3) * 2 * 4

    def test_counted_path_matches_fast_path_values(self, rng):
        layer = init_random(8, 8, 1, Rng(2), spherical=False)
        layer.mu = rng.normal(size=layer.mu.shape).astype(np.float32)
        F = rng.normal(size=(16, 8)).astype(np.float32)
        fast = decode_batch(layer, F)
        counted = decode_batch(layer, F, counter=OpCounter())
        assert np.max(np.abs(fast - counted)) < 1e-6

    def test_mlp_count_matches_stated_terms(self):
        counter = instrumented_count("mlp", 16, 8, 1)
        assert counter.total == 2 * (16 * 8 + 8 * 8 + 8) == 400

    def test_counts_scale_linearly_in_batch(self):
        c1 = instrumented_count("rbf", 8, 4, 3)
        c2 = instrumented_count("rbf", 8, 4, 6)
        assert c2.total == 2 * c1.total

    def test_forward_count_within_budget_of_closed_form(self):
        # decode contract: counted FLOPs/point within 1.2x of (3m+3)N
        f, n, b = 24, 16, 32
        counter = instrumented_count("rbf", f, n, b)
        assert counter.total <= 1.2 * flops_rbf(f, n, b, "forward")


class TestThroughput:
    def test_single_repeat_degenerate_percentiles(self):
        layer = init_random(8, 8, 1, Rng(0))
        stats = measure_throughput(layer, 8, 256, repeats=1, warmup=1)
        assert stats.points_per_sec_p10 == stats.points_per_sec_median
        assert stats.points_per_sec_p90 == stats.points_per_sec_median

    def test_rates_positive_and_ordered(self):
        layer = init_random(16, 16, 1, Rng(0))
        stats = measure_throughput(layer, 16, 1024, repeats=5, warmup=2)
        assert 0 < stats.points_per_sec_p10 <= stats.points_per_sec_median
        assert stats.points_per_sec_median <= stats.points_per_sec_p90

    def test_doubling_batch_keeps_per_point_rate(self):
        layer = init_random(32, 16, 1, Rng(0))
        a = measure_throughput(layer, 16, 16384, repeats=11, warmup=5)
        b = measure_throughput(layer, 16, 32768, repeats=11, warmup=5)
        ratio = b.points_per_sec_median / a.points_per_sec_median
        assert 0.7 < ratio < 1.3

    def test_invalid_batch_rejected(self):
        layer = init_random(8, 8, 1, Rng(0))
        with pytest.raises(ValueError):
            measure_throughput(layer, 8, 0)


class TestBenchReport:
    def test_rows_and_ratios_at_reference_config(self):
        rows = bench_rows(repeats=2)
        ratios = ratio_summary(rows)
        assert ratios["published_total_ratio"] == pytest.approx(
            PUBLISHED_RBF_TOTAL / PUBLISHED_MLP_TOTAL, rel=1e-12
        )
        assert ratios["published_total_ratio"] == pytest.approx(0.505, abs=5e-4)
        assert ratios["formula_total_ratio"] == pytest.approx(
            (7 * 32 + 6) * 64 / (6 * (32 * 64 + 64 * 64 + 64)), rel=1e-12
        )

    def test_csv_and_table_render(self):
        rows = bench_rows(repeats=1)
        text = bench_csv(rows)
        assert text.splitlines()[0].startswith("model,")
        assert len(text.splitlines()) == 3
        table = bench_table(rows)
        assert "published" in table
        assert "NOTE" in table  # discrepancy flagged at the reference config

    def test_non_reference_config_omits_published(self):
        rows = bench_rows(feature_dim=8, width=8, n_kernels=8, batch=64, repeats=1)
        assert all(r["published_total"] is None for r in rows)
        assert "published_total_ratio" not in ratio_summary(rows)
