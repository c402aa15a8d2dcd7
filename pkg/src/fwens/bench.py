"""Inference-time and parameter-count benchmarks across ensemble sizes."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .decoding import DecodeConfig, generate_batch
from .errors import ConfigError
from .layers import InitSpec, param_count
from .model import EnsembleTransformer, ModelConfig

DEFAULT_MS = (1, 2, 4, 8)


@dataclass(frozen=True)
class BenchRow:
    M: int
    batch_ensemble: float  # seconds per generated token
    sample_based: float

    @property
    def ratio(self) -> float:
        return self.sample_based / self.batch_ensemble

    def to_dict(self) -> dict:
        return {"M": self.M, "batch_ensemble_s_per_token": self.batch_ensemble,
                "sample_based_s_per_token": self.sample_based, "ratio": self.ratio}


def _time(fn, repetitions: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    best = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    # median is robust to scheduler hiccups on shared machines
    return float(np.median(best))


def bench_inference(
    base: EnsembleTransformer,
    Ms: Sequence[int] = DEFAULT_MS,
    prompts: Sequence[Sequence[int]] = (),
    repetitions: int = 5,
    warmup: int = 3,
    max_new: int = 4,
    seed: int = 0,
) -> list[BenchRow]:
    """Time per generated token for a batch ensemble vs M sampled runs.

    Each prompt is decoded as its own request, so the numbers are
    per-request latencies. The batch ensemble decodes a prompt once with all
    members in one tiled forward per step; the sample-based baseline runs
    ``M`` sampled generations of the single base model one after another.
    """
    if base.M != 1:
        raise ConfigError("bench_inference needs the single-member base model")
    if warmup < 3:
        raise ConfigError(f"need at least 3 warm-up iterations, got {warmup}")
    if not prompts:
        raise ConfigError("no prompts to benchmark")
    n_tokens = len(prompts) * max_new
    sampled = DecodeConfig.sampled()
    rows = []
    with threadpool_limits(limits=1):
        for M in Ms:
            ens = EnsembleTransformer.from_base(base, M, InitSpec(), seed=seed)

            def batch():
                return [generate_batch(ens, [p], DecodeConfig(), max_new) for p in prompts]

            def sample():
                return [generate_batch(base, [p], sampled, max_new, seeds=[seed + k])
                        for p in prompts for k in range(M)]

            tb = _time(batch, repetitions, warmup)
            ts = _time(sample, repetitions, warmup)
            rows.append(BenchRow(M, tb / n_tokens, ts / n_tokens))
    return rows


def bench_params(config: ModelConfig, Ms: Sequence[int] = tuple(range(1, 9))) -> list[dict]:
    """Trainable linear-layer parameters: vanilla ensemble vs batch ensemble."""
    dims = config.linear_dims()
    return [{"M": M,
             "vanilla": param_count(dims, M, "vanilla", include_bias=True),
             "batch_ensemble": param_count(dims, M, "batch_ensemble", include_bias=True)}
            for M in Ms]


def slope(rows: Sequence[dict], column: str) -> float:
    ms = np.array([r["M"] for r in rows], dtype=float)
    vals = np.array([r[column] for r in rows], dtype=float)
    return float(np.polyfit(ms, vals, 1)[0])


def format_inference(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'M':>3}  {'batch_ens ms/tok':>16}  {'sample ms/tok':>14}  {'ratio':>6}"]
    for r in rows:
        lines.append(f"{r.M:>3}  {1e3 * r.batch_ensemble:>16.3f}  {1e3 * r.sample_based:>14.3f}  {r.ratio:>6.2f}")
    return "\n".join(lines)


def format_params(rows: Sequence[dict]) -> str:
    lines = [f"{'M':>3}  {'vanilla':>10}  {'batch_ensemble':>14}"]
    for r in rows:
        lines.append(f"{r['M']:>3}  {r['vanilla']:>10d}  {r['batch_ensemble']:>14d}")
    return "\n".join(lines)


def inference_csv(rows: Sequence[BenchRow]) -> str:
    out = ["M,batch_ensemble_s_per_token,sample_based_s_per_token,ratio"]
    out += [f"{r.M},{r.batch_ensemble:.9g},{r.sample_based:.9g},{r.ratio:.6g}" for r in rows]
    return "\n".join(out) + "\n"


def params_csv(rows: Sequence[dict]) -> str:
    out = ["M,vanilla,batch_ensemble"] + [f"{r['M']},{r['vanilla']},{r['batch_ensemble']}" for r in rows]
    return "\n".join(out) + "\n"
