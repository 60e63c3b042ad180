"""bench.py
Wall-clock forward + backward timings of the chunkwise kernels over a grid of
chunk sizes and checkpoint strides."""

from __future__ import annotations
from dataclasses import dataclass, fields
from enum import StrEnum
import logging
import time
from typing import Any, Dict, List
import numpy as np
import pandas as pd
import psutil

from tensor import Tape, Tensor, backward
from linear_attention import CheckpointSchedule, FeatureMap, la_chunkwise
from residual_linear_attention import RlaParams, rla_chunkwise
from efficiency import parse_int_list
from save_load import ConfigError

logger = logging.getLogger(__name__)

BENCH_COLUMNS = [
    "kernel",
    "chunk_size",
    "save_stride",
    "median_ms",
    "std_ms",
    "state_bytes",
    "rss_mb",
    "best",
]


class Kernel(StrEnum):
    LA = "la"
    RLA = "rla"


@dataclass
class BenchConfig:
    kernels: str = "la,rla"
    chunk_sizes: str = "4,8,16"
    save_strides: str = "1,2,4"
    seq_len: int = 256
    batch: int = 2
    heads: int = 4
    head_dim: int = 16
    window_chunks: int = 2  # The RLA window is this many chunks.
    repeats: int = 5
    warmup: int = 1

    class Fields(StrEnum):
        KERNELS = "kernels"
        CHUNK_SIZES = "chunk_sizes"
        SAVE_STRIDES = "save_strides"
        SEQ_LEN = "seq_len"
        BATCH = "batch"
        HEADS = "heads"
        HEAD_DIM = "head_dim"
        WINDOW_CHUNKS = "window_chunks"
        REPEATS = "repeats"
        WARMUP = "warmup"

    def __post_init__(self) -> None:
        if self.warmup < 1:
            raise ConfigError(f"bench.warmup must be at least 1, got {self.warmup}.")
        if self.repeats < 1:
            raise ConfigError(f"bench.repeats must be at least 1, got {self.repeats}.")

    def kernel_list(self) -> List[Kernel]:
        return [Kernel(name.strip()) for name in self.kernels.split(",") if name.strip()]

    def to_dict(self) -> Dict[BenchConfig.Fields, Any]:
        return {self.Fields(f.name): getattr(self, f.name) for f in fields(self)}


def _run_once(kernel: Kernel, q: Tensor, k: Tensor, v: Tensor, chunk: int, stride: int, window_chunks: int) -> CheckpointSchedule:
    schedule = CheckpointSchedule(stride)
    with Tape() as tape:
        if kernel == Kernel.LA:
            out, _ = la_chunkwise(q, k, v, chunk, schedule, FeatureMap.SOFTMAX)
        else:
            params = RlaParams(window_chunks * chunk, chunk)
            out = rla_chunkwise(q, k, v, params, schedule, FeatureMap.SOFTMAX)
        backward(tape, out.sum())
    tape.reset()
    return schedule


def run_bench(cfg: BenchConfig, seed: int = 0) -> pd.DataFrame:
    """Median and spread of `repeats` timed runs per (kernel, C, m), after `warmup` untimed runs.

    The fastest row of each kernel is flagged in the `best` column."""
    rng = np.random.default_rng(seed)
    shape = (cfg.batch, cfg.heads, cfg.seq_len, cfg.head_dim)
    q, k, v = (Tensor(rng.normal(size=shape), requires_grad=True) for _ in range(3))
    process = psutil.Process()
    rows: List[Dict[str, Any]] = []
    for kernel in cfg.kernel_list():
        for chunk in parse_int_list(cfg.chunk_sizes):
            for stride in parse_int_list(cfg.save_strides):
                for _ in range(cfg.warmup):
                    _run_once(kernel, q, k, v, chunk, stride, cfg.window_chunks)
                times = []
                for _ in range(cfg.repeats):
                    start = time.perf_counter()
                    schedule = _run_once(kernel, q, k, v, chunk, stride, cfg.window_chunks)
                    times.append((time.perf_counter() - start) * 1000)
                rows.append(
                    {
                        "kernel": kernel.value,
                        "chunk_size": chunk,
                        "save_stride": stride,
                        "median_ms": float(np.median(times)),
                        "std_ms": float(np.std(times)),
                        "state_bytes": schedule.state_bytes(),
                        "rss_mb": process.memory_info().rss / 1024 / 1024,
                        "best": False,
                    }
                )
                logger.debug(f"{kernel.value} C={chunk} m={stride}: {rows[-1]['median_ms']:.2f} ms")
    table = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    if not table.empty:
        table.loc[table.groupby("kernel")["median_ms"].idxmin(), "best"] = True
    return table
