"""Single-threaded and pipelined multi-threaded frame processing.

A pipeline is a list of stages. Each stage turns one work item into one
work item. The pipelined runner gives every stage its own worker
thread(s). Stages are linked by bounded blocking queues, so a slow stage
throttles its producers. Sequence tags travel with each item, and a
reorder buffer at the sink restores input order.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

_POLL = 0.05
_STOP = object()


class StageError(RuntimeError):
    def __init__(self, stage: str, frame: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed on frame {frame}: {cause!r}")
        self.stage, self.frame, self.cause = stage, frame, cause


@dataclass
class Stage:
    name: str
    fn: Callable[[Any], Any]
    workers: int = 1
    latency: float = 0.0  # simulated extra seconds per item

    def __call__(self, item):
        if self.latency:
            time.sleep(self.latency)
        return self.fn(item)


@dataclass
class PipelineConfig:
    capacity: int = 4
    workers: dict[str, int] = field(default_factory=dict)  # per-stage override
    frames: int | None = None
    warmup: int = 0  # leading frames left out of fps

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if any(w < 1 for w in self.workers.values()):
            raise ValueError("workers per stage must be >= 1")


@dataclass
class ThroughputReport:
    mode: str
    frames: int
    wall_seconds: float
    fps: float
    busy_seconds: dict[str, float]
    latency_p50_ms: float
    latency_p99_ms: float
    workers: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _report(mode, stages, workers, busy, starts, ends, t0, t1, warmup=0) -> ThroughputReport:
    n = len(starts)
    if warmup and n > warmup:
        t0 = ends[warmup - 1]
        counted = n - warmup
    else:
        counted = n
    wall = t1 - t0
    lat = np.array(ends) - np.array(starts) if n else np.zeros(0)
    return ThroughputReport(
        mode=mode,
        frames=n,
        wall_seconds=wall,
        fps=counted / wall if counted and wall > 0 else 0.0,
        busy_seconds={s.name: busy[s.name] for s in stages},
        latency_p50_ms=float(np.percentile(lat, 50) * 1000) if n else 0.0,
        latency_p99_ms=float(np.percentile(lat, 99) * 1000) if n else 0.0,
        workers=workers,
    )


def run_single_thread(stages: Sequence[Stage], inputs, config: PipelineConfig | None = None):
    """Push each frame through every stage before starting the next one."""
    if not stages:
        raise ValueError("need at least one stage")
    busy = {s.name: 0.0 for s in stages}
    outputs, starts, ends = [], [], []
    t0 = time.perf_counter()
    for i, item in enumerate(inputs):
        starts.append(time.perf_counter())
        for s in stages:
            a = time.perf_counter()
            try:
                item = s(item)
            except Exception as e:
                raise StageError(s.name, i, e) from e
            busy[s.name] += time.perf_counter() - a
        outputs.append(item)
        ends.append(time.perf_counter())
    t1 = time.perf_counter()
    warmup = config.warmup if config else 0
    return outputs, _report("single", stages, {s.name: 1 for s in stages}, busy, starts, ends, t0, t1, warmup)


def run_pipelined(stages: Sequence[Stage], inputs, config: PipelineConfig | None = None):
    """Run stages concurrently; outputs come back in input order.

    On a stage failure the remaining workers are stopped, queues are
    drained and a :class:`StageError` naming the stage and frame is raised
    once every thread has joined.
    """
    if not stages:
        raise ValueError("need at least one stage")
    config = config or PipelineConfig()
    items = list(inputs)
    nworkers = {s.name: config.workers.get(s.name, s.workers) for s in stages}
    links = [queue.Queue(maxsize=config.capacity) for _ in range(len(stages) + 1)]
    stop = threading.Event()
    errors: list[StageError] = []
    lock = threading.Lock()
    busy = {s.name: 0.0 for s in stages}
    starts = [0.0] * len(items)
    ends = [0.0] * len(items)

    def put(q, obj) -> bool:
        while not stop.is_set():
            try:
                q.put(obj, timeout=_POLL)
                return True
            except queue.Full:
                continue
        return False

    def get(q):
        while not stop.is_set():
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                continue
        return _STOP

    def source():
        for i, item in enumerate(items):
            starts[i] = time.perf_counter()
            if not put(links[0], (i, item)):
                return
        for _ in range(nworkers[stages[0].name]):
            put(links[0], _STOP)

    # per-stage countdown so the last worker to finish forwards one stop
    # marker per downstream worker
    remaining = {s.name: nworkers[s.name] for s in stages}

    def worker(k: int, s: Stage):
        inq, outq = links[k], links[k + 1]
        while True:
            msg = get(inq)
            if msg is _STOP:
                break
            seq, item = msg
            a = time.perf_counter()
            try:
                out = s(item)
            except Exception as e:
                with lock:
                    errors.append(StageError(s.name, seq, e))
                stop.set()
                return
            with lock:
                busy[s.name] += time.perf_counter() - a
            if not put(outq, (seq, out)):
                return
        with lock:
            remaining[s.name] -= 1
            last = remaining[s.name] == 0
        if last:
            downstream = nworkers[stages[k + 1].name] if k + 1 < len(stages) else 1
            for _ in range(downstream):
                put(outq, _STOP)

    results: dict[int, Any] = {}
    ordered: list = []

    def sink():
        nxt = 0
        while True:
            msg = get(links[-1])
            if msg is _STOP:
                return
            seq, out = msg
            ends[seq] = time.perf_counter()
            results[seq] = out
            while nxt in results:
                ordered.append(results.pop(nxt))
                nxt += 1

    threads = [threading.Thread(target=source, name="source", daemon=True)]
    for k, s in enumerate(stages):
        for j in range(nworkers[s.name]):
            threads.append(threading.Thread(target=worker, args=(k, s), name=f"{s.name}-{j}", daemon=True))
    threads.append(threading.Thread(target=sink, name="sink", daemon=True))

    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    t1 = time.perf_counter()
    for q in links:
        while not q.empty():
            q.get_nowait()
    if errors:
        first = min(errors, key=lambda e: e.frame)
        raise first from first.cause
    if len(ordered) != len(items):
        raise RuntimeError(f"pipeline delivered {len(ordered)} of {len(items)} frames")
    return ordered, _report("pipelined", stages, nworkers, busy, starts, ends, t0, t1, config.warmup)


def inference_stages(qmodel, width: int, height: int, infer_workers: int = 1) -> list[Stage]:
    """decode/resize -> quantize input -> integer inference -> argmax/encode."""
    from .dataio import decode_pgm, encode_pgm, resize_bilinear
    from .quantizer import qforward, quantize

    f_in = qmodel.act_bits["input"]

    def decode(buf: bytes):
        img = decode_pgm(buf).astype(np.float32) / np.float32(255)
        if img.shape != (height, width):
            img = resize_bilinear(img, width, height)
        return img

    def quantize_input(img):
        return quantize(img[None, None], f_in)

    def infer(xq):
        return qforward(qmodel, xq)[0]

    def encode(logits):
        return encode_pgm(logits[0].argmax(axis=0).astype(np.uint8) * 255)

    return [
        Stage("decode", decode),
        Stage("quantize", quantize_input),
        Stage("infer", infer, workers=infer_workers),
        Stage("encode", encode),
    ]


def bench_inference(qmodel, frames: Sequence[bytes], config: PipelineConfig | None = None,
                    width: int | None = None, height: int | None = None,
                    mode: str = "both") -> dict:
    """Time the real inference stages single-threaded and pipelined.

    ``frames`` are PGM-encoded images; they are cycled to reach
    ``config.frames`` when that is set.
    """
    config = config or PipelineConfig()
    if not frames:
        raise ValueError("need at least one frame")
    if width is None or height is None:
        from .dataio import decode_pgm
        height, width = decode_pgm(frames[0]).shape
    total = config.frames or len(frames)
    work = [frames[i % len(frames)] for i in range(total)]
    stages = inference_stages(qmodel, width, height, config.workers.get("infer", 1))
    out: dict = {"frames": total, "width": width, "height": height, "capacity": config.capacity}
    masks = {}
    if mode in ("single", "both"):
        masks["single"], rep = run_single_thread(stages, work, config)
        out["single"] = rep.to_dict()
    if mode in ("pipelined", "both"):
        masks["pipelined"], rep = run_pipelined(stages, work, config)
        out["pipelined"] = rep.to_dict()
    if mode == "both":
        out["speedup"] = out["pipelined"]["fps"] / out["single"]["fps"] if out["single"]["fps"] else 0.0
        out["masks_identical"] = masks["single"] == masks["pipelined"]
    return out


def format_table(report: dict) -> str:
    rows = [f"{'mode':<10} {'frames':>6} {'fps':>9} {'p50 ms':>9} {'p99 ms':>9}"]
    for mode in ("single", "pipelined"):
        r = report.get(mode)
        if r:
            rows.append(f"{mode:<10} {r['frames']:>6} {r['fps']:>9.2f} "
                        f"{r['latency_p50_ms']:>9.2f} {r['latency_p99_ms']:>9.2f}")
    return "\n".join(rows)
