"""Cache accounting, capacity estimates and decode throughput measurement."""

from __future__ import annotations

import json
import math
import resource
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import SrmConfig
from .model import SrmModel

REPORT_SCHEMA_VERSION = 1
WARMUP_STEPS = 10


@dataclass(frozen=True)
class CacheFootprint:
    srm_bytes: int
    attention_bytes: int  # a key/value cache of the same width, for comparison
    scalars_per_sample: int


def cache_bytes(config: SrmConfig, batch: int, bytes_per_scalar: int = 4) -> CacheFootprint:
    per_sample = config.n_layers * config.cache_scalars_per_layer
    attention = batch * config.n_layers * config.d_model * config.n_ctx * 2 * bytes_per_scalar
    return CacheFootprint(batch * per_sample * bytes_per_scalar, attention, per_sample)


def compression_capacity(d_model, bytes_per_param, tokens_per_byte, compression_ratio) -> int:
    """Tokens a d-wide state could hold losslessly: the floored product of the factors.

    Factors are multiplied as exact decimals so e.g. 14.8 is not perturbed by
    binary rounding before flooring.
    """
    factors = [d_model, bytes_per_param, tokens_per_byte, compression_ratio]
    if any(f <= 0 for f in factors):
        raise ValueError("all factors must be positive")
    product = Fraction(1)
    for f in factors:
        product *= Fraction(str(f))
    return math.floor(product)


@dataclass
class BenchReport:
    config: dict
    batch_size: int
    mode: str  # "argmax" or "logits"
    workers: int
    warmup_steps: int
    steps_measured: int
    tokens_per_second: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p95_ms: float = 0.0
    prefill_seconds: float = 0.0
    cache_bytes_per_sample: int = 0
    peak_resident_bytes: int = 0
    token_checksum: int = 0
    error: str | None = None

    # fields that depend on wall time or the host, excluded from reproducibility checks
    TIMING_FIELDS = ("tokens_per_second", "latency_p50_ms", "latency_p95_ms", "prefill_seconds", "peak_resident_bytes")

    def content(self) -> dict:
        d = asdict(self)
        for k in self.TIMING_FIELDS:
            d.pop(k)
        return d


def peak_resident_bytes() -> int:
    # ru_maxrss is in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@torch.no_grad()
def _decode(model: SrmModel, batch: int, steps: int, prompt_len: int, seed: int, use_argmax: bool):
    """Greedy decode; returns (per-step seconds for the timed steps, prefill seconds, checksum, state)."""
    gen = torch.Generator().manual_seed(seed)
    prompt = torch.randint(0, model.config.vocab_size, (batch, prompt_len), generator=gen)
    state = model.init_state(batch)
    t0 = time.perf_counter()
    logits = None
    for t in range(prompt_len):
        logits, _ = model.step(prompt[:, t], state)
    prefill = time.perf_counter() - t0
    fixed = prompt[:, -1]
    token = logits.argmax(dim=-1) if use_argmax else fixed
    checksum = 0
    times = []
    for _ in range(steps):
        t0 = time.perf_counter()
        logits, _ = model.step(token, state)
        token = logits.argmax(dim=-1) if use_argmax else fixed
        times.append(time.perf_counter() - t0)
        if use_argmax:
            checksum = (checksum * 31 + int(token.sum())) % 1_000_000_007
    return times, prefill, checksum, state


def bench_decode(
    model: SrmModel,
    batch_sizes: Sequence[int],
    gen_length: int,
    seed: int = 0,
    modes: Sequence[str] = ("argmax", "logits"),
    prompt_len: int = 8,
    workers: int = 1,
    warmup: int = WARMUP_STEPS,
) -> list[BenchReport]:
    """Time greedy decoding for each batch size, largest first.

    The first ``warmup`` decode steps are discarded. Throughput counts emitted
    tokens over timed decode steps only; prefill is reported separately. An
    allocation failure records the error for that size and the run moves on
    to smaller sizes.
    """
    torch.set_num_threads(workers)
    model.eval()
    budget = model.config.n_ctx - prompt_len
    if gen_length + warmup > budget:
        raise ValueError(f"prompt_len + warmup + gen_length must fit in n_ctx={model.config.n_ctx}")
    reports = []
    elem = model.embed.weight.element_size()
    for batch in sorted(batch_sizes, reverse=True):
        for mode in modes:
            rep = BenchReport(
                config=model.config.to_dict(), batch_size=batch, mode=mode, workers=workers,
                warmup_steps=warmup, steps_measured=0,
            )
            reports.append(rep)
            if gen_length == 0 or batch == 0:
                continue
            try:
                times, prefill, checksum, state = _decode(
                    model, batch, warmup + gen_length, prompt_len, seed, use_argmax=(mode == "argmax")
                )
            except (RuntimeError, MemoryError) as exc:
                rep.error = f"allocation failed: {exc}".splitlines()[0]
                continue
            timed = np.array(times[warmup:])
            rep.steps_measured = len(timed)
            rep.tokens_per_second = batch * len(timed) / float(timed.sum())
            rep.latency_p50_ms = float(np.percentile(timed, 50) * 1e3)
            rep.latency_p95_ms = float(np.percentile(timed, 95) * 1e3)
            rep.prefill_seconds = prefill
            rep.cache_bytes_per_sample = state.cache_scalars_per_sample() * elem
            rep.peak_resident_bytes = peak_resident_bytes()
            rep.token_checksum = checksum
    return reports


def concurrency_ceiling(reports: Sequence[BenchReport]) -> int | None:
    """Largest batch size that completed, if any size failed to allocate."""
    if not any(r.error for r in reports):
        return None
    ok = [r.batch_size for r in reports if r.error is None]
    return max(ok) if ok else 0


def step_latencies(model: SrmModel, batch: int, length: int, seed: int = 0) -> tuple[list[float], list[int]]:
    """Per-step wall time and cache scalar count over a ``length``-step greedy decode."""
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    state = model.init_state(batch)
    token = torch.randint(0, model.config.vocab_size, (batch,), generator=gen)
    times, scalars = [], []
    with torch.no_grad():
        for _ in range(length):
            t0 = time.perf_counter()
            logits, _ = model.step(token, state)
            token = logits.argmax(dim=-1)
            times.append(time.perf_counter() - t0)
            scalars.append(state.cache_scalars())
    return times, scalars


def write_report(path: str | Path, reports: Sequence[BenchReport], extra: dict | None = None) -> None:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "rows": [asdict(r) for r in reports],
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
