"""Forward-pass micro-benchmarks with analytic attention multiply-add counts."""
from __future__ import annotations

import os
import platform
import time
from typing import Dict, List, Sequence

import numpy as np
import torch

from ..blocks import ACSPPCSPC, SPPCSPC, BiLevelRoutingAttention
from .reports import write_csv

BENCH_COLUMNS = ("block", "size", "channels", "repeats", "median_ms", "iqr_ms", "attention_macs")


def dense_attention_macs(n_tokens: int, channels: int) -> int:
    """Q·K^T plus attn·V over all tokens."""
    return 2 * n_tokens * n_tokens * channels


def bra_attention_macs(n_tokens: int, channels: int, S: int, topk: int) -> int:
    """Region affinity (S^2 x S^2 over C) plus token attention against topk gathered regions."""
    if n_tokens % (S * S):
        raise ValueError(f"{n_tokens} tokens do not split into {S * S} regions")
    kv_tokens = topk * n_tokens // (S * S)
    return S**4 * channels + 2 * n_tokens * kv_tokens * channels


def machine_info() -> str:
    return (f"# machine: {platform.platform()}; {platform.processor() or platform.machine()}; "
            f"cpus={os.cpu_count()}; torch {torch.__version__}; threads={torch.get_num_threads()}\n")


def time_forward(module: torch.nn.Module, x: torch.Tensor, repeats: int, warmup: int = 2) -> Dict[str, float]:
    module.eval()
    with torch.no_grad():
        for _ in range(warmup):
            module(x)
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            module(x)
            ts.append((time.perf_counter() - t0) * 1e3)
    q1, med, q3 = np.percentile(ts, [25, 50, 75])
    return {"median_ms": float(med), "iqr_ms": float(q3 - q1)}


def bench_cases(sizes: Sequence[int], channels: int, topks: Sequence[int], S: int = 2, heads: int = 4):
    """(name, size, module, input, analytic MACs or None) for every block/size pair."""
    for size in sizes:
        x = torch.randn(1, channels, size, size)
        n = size * size
        yield "sppcspc", size, SPPCSPC(channels, channels, hidden=channels // 2), x, None
        yield "ac-sppcspc", size, ACSPPCSPC(channels, channels, hidden=channels // 2), x, None
        yield "dense-attention", size, BiLevelRoutingAttention(channels, 1, 1, heads), x, dense_attention_macs(n, channels)
        for k in topks:
            yield (f"bra-topk{k}", size, BiLevelRoutingAttention(channels, S, k, heads), x,
                   bra_attention_macs(n, channels, S, k))


def run_bench(sizes=(8, 16), channels=64, topks=(1, 2, 4), repeats=20, seed=0, path=None) -> List[Dict[str, str]]:
    torch.manual_seed(seed)
    rows = []
    for name, size, module, x, macs in bench_cases(sizes, channels, topks):
        t = time_forward(module, x, repeats)
        rows.append({"block": name, "size": str(size), "channels": str(channels), "repeats": str(repeats),
                     "median_ms": f"{t['median_ms']:.4f}", "iqr_ms": f"{t['iqr_ms']:.4f}",
                     "attention_macs": "" if macs is None else str(macs)})
    if path is not None:
        write_csv(path, BENCH_COLUMNS, rows, machine_info())
    return rows
