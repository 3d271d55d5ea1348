import asyncio
import random

import pytest
from hypothesis import given, settings, strategies as st

from chainiot.bench.controller import FixedLoadController
from chainiot.bench.metrics import LatencySample, LatencyStats, MetricsReport, compute_metrics
from chainiot.errors import ValidationError


def tx(t0, t1, code="VALID"):
    return LatencySample("tx", t0, t1, code)


def rd(t0, t1, code="OK"):
    return LatencySample("read", t0, t1, code)


def test_throughput_arithmetic():
    samples = [tx(0.0, 0.1)] + [tx(i / 100, i / 100 + 1.0) for i in range(1, 2000)]
    # last completion lands 19.99+1.0 s after first dispatch
    r = compute_metrics(samples)
    assert r.n_tx == 2000 and r.t_tx == pytest.approx(20.99)
    assert r.w_tx == r.n_tx / r.t_tx


def test_mean_of_three():
    r = compute_metrics([rd(0, 1), rd(0, 2), rd(0, 3)])
    assert r.l_read.mean == 2 and r.l_read.median == 2


def test_valid_only():
    samples = [tx(0, 1), tx(0, 2, "MVCC_CONFLICT"), tx(0.5, 2), tx(1, 2, "TIMEOUT")]
    r = compute_metrics(samples)
    assert r.n_tx == 2 and r.t_tx == 2 and r.w_tx == 1.0
    assert r.errors == {"MVCC_CONFLICT": 1, "TIMEOUT": 1}
    assert r.l_tx.mean == 1.25
    assert (r.dispatched, r.completed, r.failed) == (4, 2, 2)


def test_rejects_bad_input():
    with pytest.raises(ValidationError):
        compute_metrics([])
    with pytest.raises(ValidationError):
        LatencySample("tx", 2.0, 1.0, "VALID")
    with pytest.raises(ValidationError):
        LatencySample("write", 0, 1, "VALID")


def test_stats_edges():
    assert LatencyStats.of([]) == LatencyStats(None, None, None)
    assert LatencyStats.of([0.05]) == LatencyStats(0.05, 0.05, 0.05)
    s = LatencyStats.of([float(i) for i in range(1, 101)])
    assert s.p95 == pytest.approx(95.05)


def test_report_round_trip():
    r = compute_metrics([rd(0, 0.05), tx(0, 1)], operation="x")
    assert MetricsReport.from_dict(r.to_dict()).to_dict() == r.to_dict()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 120), st.integers(0, 2**32))
def test_controller_never_exceeds_target(target, total, seed):
    rng = random.Random(seed)

    async def run():
        c = FixedLoadController(target)
        peak = 0

        async def op():
            nonlocal peak
            peak = max(peak, c.in_flight)
            await asyncio.sleep(rng.random() * 0.002)
            await c.release()

        tasks = []
        for _ in range(total):
            await c.acquire()
            tasks.append(asyncio.create_task(op()))
        await c.drain()
        await asyncio.gather(*tasks)
        return c, peak

    c, peak = asyncio.run(run())
    assert peak <= target and c.max_in_flight <= target
    assert c.dispatched == c.completed == total and c.in_flight == 0


def test_controller_rejects_zero():
    with pytest.raises(ValueError):
        FixedLoadController(0)
