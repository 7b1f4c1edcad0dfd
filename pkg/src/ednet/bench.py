"""Forward-pass latency benchmark."""
from __future__ import annotations

import hashlib
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import arch
from .tensor import FLOAT

THREADS_ENV = "EDNET_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {env!r}")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on every platform
        return os.cpu_count() or 1


@contextmanager
def thread_limit(n: Optional[int]):
    """Cap BLAS/OpenMP pools to ``n`` threads for the duration of the block."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def checksum(maps) -> str:
    h = hashlib.sha256()
    for m in maps:
        h.update(np.ascontiguousarray(m).tobytes())
    return h.hexdigest()[:16]


@dataclass
class BenchReport:
    variant: str
    size: int
    iterations: int
    warmup: int
    times_ms: List[float]
    threads: int
    quantized: bool = False
    e2e: bool = False
    peak_activation_bytes: int = 0
    output_checksum: str = ""
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        t = np.asarray(self.times_ms)
        self.stats = {"mean_ms": float(t.mean()), "median_ms": float(np.median(t)),
                      "p95_ms": float(np.percentile(t, 95)), "min_ms": float(t.min())}

    @property
    def mean_ms(self) -> float:
        return self.stats["mean_ms"]

    @property
    def median_ms(self) -> float:
        return self.stats["median_ms"]

    @property
    def p95_ms(self) -> float:
        return self.stats["p95_ms"]

    def to_json(self) -> dict:
        return asdict(self)


def bench_input(size: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 1, (1, 3, size, size)).astype(FLOAT)


def run_bench(graph: arch.NetGraph, weights, size: int = 640, iters: int = 10, warmup: int = 1,
              threads: Optional[int] = None, e2e: bool = False, seed: int = 0, source=None) -> BenchReport:
    """Time repeated forwards on a fixed random input (monotonic clock).

    With ``e2e`` each iteration also letterboxes ``source`` (or the input) and
    decodes the head maps; weight loading is never timed.
    """
    from .decode import decode
    from .io import letterbox
    from .quant import is_quantized, quantized_forward

    threads = threads or default_threads()
    quantized = is_quantized(weights)
    x = bench_input(size, seed)
    src = x if source is None else source

    def once(tracker=None):
        inp = letterbox(src, size)[0] if e2e else x
        if quantized:
            maps = quantized_forward(graph, weights, inp, tracker=tracker)
        else:
            maps = arch.forward(graph, weights, inp, tracker=tracker)
        if e2e:
            decode(maps, graph.head_strides, conf_thresh=0.25)
        return maps

    times = []
    with thread_limit(threads):
        tracker = arch.ActivationTracker()
        maps = once(tracker)
        for _ in range(max(0, warmup - 1)):
            once()
        for _ in range(iters):
            t0 = time.perf_counter()
            once()
            times.append((time.perf_counter() - t0) * 1e3)
    return BenchReport(graph.config.name, size, iters, warmup, times, threads, quantized, e2e,
                       tracker.peak, checksum(maps))
