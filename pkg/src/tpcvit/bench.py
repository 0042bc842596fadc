"""Wall-clock throughput of dense and controlled inference."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractError

THREADS_ENV = "TPC_THREADS"


def thread_cap() -> int | None:
    """Worker-thread cap from ``TPC_THREADS`` (``None`` when unset)."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ContractError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ContractError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


@dataclass
class BenchResult:
    mode: str
    threads: int | None
    batch: int
    repetitions: int
    images_per_sec: float
    p50_ms: float
    p95_ms: float
    times: list

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "threads": self.threads,
            "batch": self.batch,
            "repetitions": self.repetitions,
            "images_per_sec": self.images_per_sec,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
        }


def bench_throughput(fn, images, repetitions: int = 10, warmup: int = 3, mode: str = "single") -> BenchResult:
    """Time ``fn(images)`` after ``warmup`` untimed calls.

    ``mode="single"`` pins BLAS to one thread; ``"batch"`` uses ``TPC_THREADS``
    threads (or the library default). Images/sec is derived from the median
    batch time; p50/p95 are per-image latencies in milliseconds.
    """
    if repetitions < 10 or warmup < 3:
        raise ContractError("need at least 10 timed repetitions after at least 3 warmup calls")
    if mode not in ("single", "batch"):
        raise ContractError(f"unknown bench mode {mode!r}")
    batch = len(images)
    if batch == 0:
        raise ContractError("benchmark batch is empty")
    threads = 1 if mode == "single" else thread_cap()
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn(images)
        times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            fn(images)
            times.append(time.perf_counter() - start)
    times_arr = np.asarray(times)
    median = float(np.median(times_arr))
    return BenchResult(
        mode,
        threads,
        batch,
        repetitions,
        batch / median if median > 0 else float("inf"),
        1e3 * median / batch,
        1e3 * float(np.percentile(times_arr, 95)) / batch,
        times,
    )


def forced_schedule(num_patches: int, depth: int, mean_depth: float | None = None, spread: bool = False) -> np.ndarray:
    """Per-patch halting layers whose mean is ``mean_depth`` (default ``depth / 2``).

    Without ``spread`` every token halts at the rounded mean; with it the
    layers cycle through ``1 .. 2*mean - 1`` so the mean is kept but tokens differ.
    """
    mean_depth = depth / 2 if mean_depth is None else mean_depth
    if not 1 <= mean_depth <= depth:
        raise ContractError(f"mean depth must lie in [1, {depth}]")
    if not spread:
        return np.full(num_patches, int(round(mean_depth)))
    top = int(round(2 * mean_depth - 1))
    if top > depth:
        raise ContractError("spread schedule would exceed the model depth")
    return 1 + np.arange(num_patches) % top


def compare_dense_tpc(model, images, forced_depths, repetitions: int = 10, warmup: int = 3, mode: str = "single") -> dict:
    """Dense per-image inference against controlled inference with a fixed halting schedule.

    Both paths share the model's attention settings (scale and, when the
    stabilizer is on, top-k key selection), so only halting differs.
    """
    cfg = model.tpc
    kappa = cfg.kappa if cfg.stabilizer else None
    dense = bench_throughput(lambda x: model.vanilla_infer(x, cfg.attn_scale_mode, kappa), images, repetitions, warmup, mode)
    tpc = bench_throughput(lambda x: model.infer(x, forced_depths), images, repetitions, warmup, mode)
    return {"dense": dense, "tpc": tpc, "speedup": tpc.images_per_sec / dense.images_per_sec}
