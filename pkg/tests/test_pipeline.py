import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize_bn, tiny_config
from edgeseg.dataio import encode_pgm, quantize_u8, synth_dataset
from edgeseg.pipeline import (
    PipelineConfig,
    Stage,
    StageError,
    bench_inference,
    format_table,
    run_pipelined,
    run_single_thread,
)
from edgeseg.quantizer import calibrate, fold_batchnorm, quantize_model
from edgeseg.unet import build


def with_watchdog(fn, timeout=30.0):
    """Run ``fn`` in a thread; fail the test if it does not finish in time."""
    box = {}

    def target():
        try:
            box["value"] = fn()
        except BaseException as e:  # noqa: BLE001 - re-raised below
            box["error"] = e

    t = threading.Thread(target=target, daemon=True)
    t.start()
    t.join(timeout)
    assert not t.is_alive(), f"pipeline did not finish within {timeout}s"
    if "error" in box:
        raise box["error"]
    return box["value"]


def sleeper(name, seconds):
    return Stage(name, lambda x: x, latency=seconds)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(capacity=0)
    with pytest.raises(ValueError):
        PipelineConfig(workers={"a": 0})


def test_identity_stages_preserve_inputs():
    items = [np.random.default_rng(i).bytes(16) for i in range(40)]
    stages = [Stage("a", lambda x: x), Stage("b", lambda x: x)]
    out, rep = run_single_thread(stages, items)
    assert out == items and rep.frames == 40
    out, rep = with_watchdog(lambda: run_pipelined(stages, items))
    assert out == items and rep.frames == 40


def test_zero_frames():
    for run in (run_single_thread, run_pipelined):
        out, rep = run([Stage("a", lambda x: x)], [])
        assert out == [] and rep.frames == 0 and rep.fps == 0.0


def test_no_stages_is_an_error():
    with pytest.raises(ValueError):
        run_single_thread([], [1])
    with pytest.raises(ValueError):
        run_pipelined([], [1])


def test_single_thread_timing_model():
    _, rep = run_single_thread([sleeper(n, 0.01) for n in "abc"], range(50))
    assert rep.fps == pytest.approx(1 / 0.03, rel=0.15)


def test_pipelined_bottleneck_law():
    stages = [sleeper("a", 0.005), sleeper("b", 0.02), sleeper("c", 0.005)]
    _, rep = with_watchdog(lambda: run_pipelined(stages, range(60)))
    assert rep.fps == pytest.approx(50, rel=0.2)


def test_report_consistency():
    stages = [sleeper("a", 0.002), Stage("b", lambda x: x * 2, workers=2)]
    out, rep = with_watchdog(lambda: run_pipelined(stages, range(30)))
    assert out == [2 * i for i in range(30)]
    assert rep.fps * rep.wall_seconds == pytest.approx(rep.frames)
    for name, busy in rep.busy_seconds.items():
        assert busy <= rep.wall_seconds * rep.workers[name] + 1e-3
    assert rep.latency_p50_ms <= rep.latency_p99_ms
    assert set(rep.to_dict()) >= {"mode", "frames", "wall_seconds", "fps", "busy_seconds",
                                  "latency_p50_ms", "latency_p99_ms"}


def test_warmup_excluded_from_fps():
    stages = [Stage("a", lambda x: x, latency=0.01)]
    _, rep = run_single_thread(stages, range(10), PipelineConfig(warmup=5))
    assert rep.frames == 10
    assert rep.fps == pytest.approx(100, rel=0.2)


@pytest.mark.parametrize("capacity", [1, 2, 4, 16])
def test_no_deadlock_across_capacities(capacity):
    stages = [Stage("a", lambda x: x + 1), Stage("b", lambda x: x * 3, workers=3), Stage("c", lambda x: x - 1)]
    items = list(range(2000))
    out, _ = with_watchdog(lambda: run_pipelined(stages, items, PipelineConfig(capacity=capacity)))
    assert out == [(i + 1) * 3 - 1 for i in items]


def test_ten_thousand_frames_capacity_one():
    items = list(range(10_000))
    out, _ = with_watchdog(lambda: run_pipelined([Stage("a", lambda x: x)], items, PipelineConfig(capacity=1)), 120)
    assert out == items


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(0, 60),
    workers=st.lists(st.integers(1, 3), min_size=1, max_size=4),
    capacity=st.integers(1, 5),
    seed=st.integers(0, 1000),
)
def test_pipelined_equals_single_thread(n, workers, capacity, seed):
    rng = np.random.default_rng(seed)
    mult = rng.integers(1, 9, len(workers))
    jitter = rng.random((len(workers), max(n, 1))) * 1e-3

    def make(k):
        def fn(item):
            i, v = item
            time.sleep(jitter[k, i])  # uneven service times scramble completion order
            return i, v * int(mult[k]) + k
        return fn

    stages = [Stage(f"s{k}", make(k), workers=w) for k, w in enumerate(workers)]
    items = [(i, i) for i in range(n)]
    ref, _ = run_single_thread(stages, items)
    out, _ = with_watchdog(lambda: run_pipelined(stages, items, PipelineConfig(capacity=capacity)))
    assert out == ref


@pytest.mark.parametrize("capacity,workers", [(1, 1), (2, 3), (16, 2)])
def test_stage_failure_reports_stage_and_frame(capacity, workers):
    def boom(x):
        if x == 17:
            raise ValueError("bad frame")
        return x

    stages = [Stage("decode", lambda x: x), Stage("infer", boom, workers=workers), Stage("encode", lambda x: x)]
    with pytest.raises(StageError) as e:
        with_watchdog(lambda: run_pipelined(stages, range(200), PipelineConfig(capacity=capacity)))
    assert e.value.stage == "infer" and e.value.frame == 17
    assert isinstance(e.value.cause, ValueError)
    with pytest.raises(StageError) as e:
        run_single_thread(stages, range(200))
    assert e.value.stage == "infer" and e.value.frame == 17


def test_failure_in_last_stage_with_full_queues():
    def boom(x):
        if x == 3:
            raise RuntimeError("sink side failure")
        return x

    stages = [Stage("fast", lambda x: x), Stage("slow", boom, latency=0.001)]
    with pytest.raises(StageError, match="slow"):
        with_watchdog(lambda: run_pipelined(stages, range(500), PipelineConfig(capacity=1)))


def test_no_threads_left_behind():
    before = threading.active_count()
    run_pipelined([Stage("a", lambda x: x, workers=3)], range(50))
    with pytest.raises(StageError):
        run_pipelined([Stage("a", lambda x: 1 / 0)], range(50))
    assert threading.active_count() == before


def test_bench_inference_real_stages():
    rng = np.random.default_rng(0)
    folded = fold_batchnorm(randomize_bn(build(tiny_config(seed=1)), rng))
    samples = synth_dataset(3, 6, 32, 16)
    q = quantize_model(folded, calibrate(folded, [s.image for s in samples]))
    frames = [encode_pgm(quantize_u8(s.image)) for s in samples]
    report = with_watchdog(lambda: bench_inference(q, frames, PipelineConfig(capacity=2, frames=20)))
    assert report["masks_identical"] is True
    assert report["frames"] == 20 and report["width"] == 32 and report["height"] == 16
    for mode in ("single", "pipelined"):
        r = report[mode]
        assert r["frames"] == 20
        assert r["fps"] * r["wall_seconds"] == pytest.approx(20)
    assert report["speedup"] == pytest.approx(report["pipelined"]["fps"] / report["single"]["fps"])
    table = format_table(report).splitlines()
    assert len(table) == 3 and table[1].startswith("single") and table[2].startswith("pipelined")
