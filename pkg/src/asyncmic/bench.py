"""Peak-memory and wall-time benchmark of full vs windowed cross-attention."""

from __future__ import annotations

import gc
import itertools
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .attention import full_xattn_forward, init_params, windowed_xattn_forward

BENCH_FIELDS = ("kind", "T", "M", "L", "d", "status", "peak_bytes", "wall_s")


@dataclass
class BenchConfig:
    T: list = field(default_factory=lambda: [128, 256, 512, 1024])
    M: list = field(default_factory=lambda: [2])
    L: list = field(default_factory=lambda: [4])
    d: int = 16
    batch: int = 1
    repeats: int = 1
    seed: int = 0
    # grid points whose estimated attention tensor exceeds this are skipped as OOM
    max_bytes: float = 2e9


def _estimate_bytes(kind, B, M, T, L, d):
    if kind == "FullXAttn":
        return 8 * B * M * M * T * T * 3
    return 8 * B * M * M * T * (2 * L + 1) * 3


def measure(kind, T, M, L=4, d=16, B=1, seed=0, repeats=1, max_bytes=2e9):
    """One bench row. Peak bytes are traced allocations above the inputs."""
    row = {"kind": kind, "T": T, "M": M, "L": L if kind == "WindowedXAttn" else "", "d": d}
    if _estimate_bytes(kind, B, M, T, L, d) > max_bytes:
        return {**row, "status": "OOM", "peak_bytes": "", "wall_s": ""}
    rng = np.random.default_rng(seed)
    p = init_params(kind, d, rng)
    Z = rng.standard_normal((B, M, T, d))
    fwd = (lambda z: full_xattn_forward(z, p)) if kind == "FullXAttn" else \
        (lambda z: windowed_xattn_forward(z, p, L))
    # warm-up so one-off JIT compilation is not traced
    fwd(Z[:, :, :2])
    peaks, times = [], []
    try:
        for _ in range(repeats):
            gc.collect()
            tracemalloc.start()
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            t0 = time.perf_counter()
            out = fwd(Z)
            times.append(time.perf_counter() - t0)
            peaks.append(tracemalloc.get_traced_memory()[1] - base)
            tracemalloc.stop()
            del out
    except MemoryError:
        tracemalloc.stop()
        return {**row, "status": "OOM", "peak_bytes": "", "wall_s": ""}
    return {**row, "status": "ok", "peak_bytes": int(min(peaks)), "wall_s": float(min(times))}


def run_bench(cfg=None):
    cfg = cfg or BenchConfig()
    rows = []
    for T, M in itertools.product(cfg.T, cfg.M):
        rows.append(measure("FullXAttn", T, M, 0, cfg.d, cfg.batch, cfg.seed, cfg.repeats, cfg.max_bytes))
        for L in cfg.L:
            rows.append(measure("WindowedXAttn", T, M, L, cfg.d, cfg.batch, cfg.seed, cfg.repeats,
                                cfg.max_bytes))
    return rows


def doubling_ratios(rows, T0=512, T1=1024):
    """Peak-memory and time ratios between ``T1`` and ``T0`` for matching rows."""
    out = []
    ok = [r for r in rows if r["status"] == "ok"]
    for a in ok:
        if a["T"] != T0:
            continue
        for b in ok:
            if b["T"] == T1 and (b["kind"], b["M"], b["L"], b["d"]) == (a["kind"], a["M"], a["L"], a["d"]):
                out.append({"kind": a["kind"], "M": a["M"], "L": a["L"], "d": a["d"],
                            "T0": T0, "T1": T1,
                            "memory_ratio": b["peak_bytes"] / a["peak_bytes"],
                            "time_ratio": b["wall_s"] / a["wall_s"]})
    return out
