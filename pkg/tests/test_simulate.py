import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvcompact.calibration import CalibrationPoint, calibrate, pareto_frontier
from kvcompact.cli.simulate import Trajectory, baseline_trajectory, serve, simulate
from kvcompact.cli.workload import WorkloadShape, generate
from kvcompact.errors import ConfigError, InvalidInputError
from kvcompact.memstore import PageGeometry
from kvcompact.policy import PolicyParams
from kvcompact.quant import FP16, K4V2, K8V4

GEOMETRY = PageGeometry(page_bytes=256, head_dim=16)
PARAMS = PolicyParams(alpha_h=1.0, alpha_l=0.02, window=4)


def workload(seed=0, n=6, rate=0.5):
    return generate(seed, WorkloadShape(1, 2, 1, 16), n, (30, 40), (8, 12), rate=rate, zipf=(1.0, 2.0))


def flat(rid, pages, high=K8V4, steps=5):
    """A one-head request holding ``pages`` full high pages for ``steps`` ticks."""
    n = pages * GEOMETRY.tokens_per_page(high)
    return Trajectory(rid, 0, n, [pages], [(pages, 0)], [[None]] * steps, 0)


class TestServe:
    def test_conservation(self):
        res = simulate(workload(), PARAMS, GEOMETRY, 200)
        for run in (res.compressed, res.baseline):
            assert run.pages_allocated == run.pages_freed
            assert run.terminal_free == run.total_pages == 200
            assert run.completed == 6

    def test_sparse_arrivals_give_batch_of_one(self):
        res = simulate(workload(1, n=4, rate=0.001), PARAMS, GEOMETRY, 200)
        assert res.compressed.mean_active_batch == 1.0
        assert res.baseline.mean_active_batch == 1.0
        assert res.capacity_ratio == 1.0

    def test_reproducible(self):
        a = simulate(workload(2), PARAMS, GEOMETRY, 150)
        b = simulate(workload(2), PARAMS, GEOMETRY, 150, workers=3)
        assert a == b

    def test_compression_admits_more(self):
        res = simulate(workload(3, n=12, rate=4.0), PARAMS, GEOMETRY, 120)
        assert res.baseline.saturated_batch < res.compressed.saturated_batch
        assert res.reservation_fraction < 1

    def test_request_larger_than_pool(self):
        with pytest.raises(ConfigError):
            serve([flat("a", 10)], 5, GEOMETRY, K8V4, K4V2)

    def test_baseline_grows_one_page_per_page_of_tokens(self):
        r = workload(4, n=1).requests[0]
        t = baseline_trajectory(r, 2, GEOMETRY)
        per = PageGeometry(256, 16, 0, 0, 0).tokens_per_page(FP16)
        assert t.held[-1] == 2 * math.ceil(r.total_len / per)

    @settings(max_examples=40, deadline=None)
    @given(base=st.integers(2, 12), comp=st.integers(1, 12), pool=st.integers(12, 80))
    def test_capacity_arithmetic(self, base, comp, pool):
        comp = min(comp, base)
        f = comp / base
        b = serve([flat(f"r{i}", base, FP16) for i in range(40)], pool, GEOMETRY, FP16, FP16)
        c = serve([flat(f"r{i}", comp) for i in range(40)], pool, GEOMETRY, K8V4, K4V2)
        assert b.peak_batch == min(40, pool // base)
        assert c.peak_batch >= min(40, math.floor(b.peak_batch / f) - 1)


class TestCalibration:
    def _run(self, ah, al):
        return calibrate(workload(5, n=2), PARAMS, GEOMETRY, ah, al)

    def test_memory_monotone_in_alpha_h(self):
        points, _ = self._run([0.0, 1.0, 2.0, 4.0], [0.0])
        mem = [p.memory_fraction for p in points]
        assert mem == sorted(mem, reverse=True)

    def test_extremes(self):
        points, _ = self._run([0.0, 1000.0], [0.0, 1000.0])
        by = {(p.alpha_h, p.alpha_l): p for p in points}
        assert (0.0, 1000.0) not in by  # alpha_l above alpha_h is skipped
        keep_all = by[(0.0, 0.0)]
        prune_all = by[(1000.0, 1000.0)]
        low_all = by[(1000.0, 0.0)]
        assert keep_all.memory_fraction > low_all.memory_fraction > prune_all.memory_fraction
        assert keep_all.quality_error < prune_all.quality_error

    def test_frontier(self):
        pts = [CalibrationPoint(1, 0, 0.5, 0.1), CalibrationPoint(2, 0, 0.3, 0.2), CalibrationPoint(3, 0, 0.4, 0.3),
               CalibrationPoint(4, 0, 0.2, 0.05)]
        assert [p.alpha_h for p in pareto_frontier(pts)] == [4]

    def test_empty_grid(self):
        with pytest.raises(InvalidInputError):
            self._run([], [0.0])
        with pytest.raises(InvalidInputError):
            self._run([0.0], [1.0])
