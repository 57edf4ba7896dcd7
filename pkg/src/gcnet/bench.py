"""Single-worker CPU latency measurement."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .accounting import count_params_flops
from .network import Network, check_input_dims, network_forward


@dataclass
class BenchReport:
    form: str
    height: int
    width: int
    iters: int
    warmup: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    params: int
    gmacs: float
    gflops: float

    def row(self) -> dict:
        return asdict(self)


CSV_FIELDS = tuple(BenchReport.__dataclass_fields__)


def _p95(samples: list[float]) -> float:
    if len(samples) < 2:
        return samples[0]
    return statistics.quantiles(samples, n=100, method="inclusive")[94]


def bench(net: Network, height: int, width: int, iters: int = 20, warmup: int = 5,
          seed: int = 0, clock=time.perf_counter) -> BenchReport:
    """Batch-1 eval-mode forward latency with BLAS pinned to one thread."""
    if iters < 1 or warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")
    check_input_dims(height, width)
    dtype = np.dtype(net.config.dtype)
    x = np.random.default_rng(seed).normal(size=(1, 3, height, width)).astype(dtype)
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            network_forward(net, x)
        for _ in range(iters):
            t0 = clock()
            network_forward(net, x)
            times.append((clock() - t0) * 1000.0)
    cost = count_params_flops(net, height, width)
    med = statistics.median(times)
    return BenchReport(net.form, height, width, iters, warmup, statistics.fmean(times), med,
                       _p95(times), 1000.0 / med, cost.params, cost.gmacs, cost.gflops)


def write_csv(reports, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
