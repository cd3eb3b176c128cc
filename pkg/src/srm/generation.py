"""Batch-parallel autoregressive generation on the recurrent representation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .config import BOS_ID
from .model import SrmModel


@dataclass(frozen=True)
class SamplerSpec:
    """Temperature 0 means greedy decoding (ties go to the lower token id)."""

    temperature: float = 0.7
    top_p: float = 0.9

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0


GREEDY = SamplerSpec(temperature=0.0, top_p=1.0)


def nucleus_probs(logits: torch.Tensor, temperature: float, top_p: float) -> torch.Tensor:
    """Tempered softmax restricted to the smallest top-probability set with mass >= top_p.

    The token that crosses the threshold is kept. Returns renormalised
    probabilities with excluded ids at exactly zero.
    """
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    if top_p >= 1.0:
        return probs
    sorted_p, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    mass_before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep_sorted = mass_before < top_p
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    probs = torch.where(keep, probs, torch.zeros_like(probs))
    return probs / probs.sum(dim=-1, keepdim=True)


def sample_next(
    logits: torch.Tensor, sampler: SamplerSpec, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick one token per row of ``logits`` (B, V); returns (ids, log-probs).

    Greedy log-probs are taken under the untempered softmax.
    """
    if sampler.greedy:
        ids = torch.argmax(logits, dim=-1)
        logp = torch.log_softmax(logits.double(), dim=-1).gather(-1, ids[:, None])[:, 0]
        return ids, logp
    probs = nucleus_probs(logits, sampler.temperature, sampler.top_p)
    ids = torch.multinomial(probs, 1, generator=generator)[:, 0]
    return ids, torch.log(probs.gather(-1, ids[:, None])[:, 0])


@dataclass
class GenerationResult:
    sequences: list[list[int]]
    logprobs: list[list[float]]
    prompts: list[list[int]] = field(default_factory=list)


@torch.no_grad()
def generate(
    model: SrmModel,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    sampler: SamplerSpec = GREEDY,
    seed: int = 0,
    stop_id: int | None = None,
    bos_id: int = BOS_ID,
) -> GenerationResult:
    """Prefill ragged prompts token by token, then sample up to ``max_new`` tokens.

    Every sample consumes one token per step, so positions stay aligned and a
    sample switches from prompt tokens to its own samples as soon as its
    prompt is exhausted. Empty prompts start from ``bos_id``. A sample stops
    after emitting ``stop_id`` (which is kept in its output).
    """
    prompts = [list(p) if len(p) else [bos_id] for p in prompts]
    batch = len(prompts)
    n_ctx = model.config.n_ctx
    for i, p in enumerate(prompts):
        if len(p) + max_new > n_ctx:
            raise ValueError(f"prompt {i}: {len(p)} tokens + max_new={max_new} exceeds n_ctx={n_ctx}")
    outputs: list[list[int]] = [[] for _ in range(batch)]
    logprobs: list[list[float]] = [[] for _ in range(batch)]
    if batch == 0 or max_new == 0:
        return GenerationResult(outputs, logprobs, prompts)

    gen = torch.Generator(device="cpu").manual_seed(seed)
    device = model.device
    lengths = torch.tensor([len(p) for p in prompts], device=device)
    longest = int(lengths.max())
    padded = torch.zeros(batch, longest, dtype=torch.long, device=device)
    for i, p in enumerate(prompts):
        padded[i, : len(p)] = torch.tensor(p)

    state = model.init_state(batch)
    done = torch.zeros(batch, dtype=torch.bool)
    last = padded[:, 0].clone()
    for t in range(longest + max_new - 1):
        inp = torch.where(t < lengths, padded[:, t], last) if t < longest else last
        logits, _ = model.step(inp, state)
        generating = (t >= lengths - 1).cpu() & ~done
        if not bool(generating.any()):
            continue
        ids, lp = sample_next(logits.cpu(), sampler, gen)
        for i in torch.nonzero(generating)[:, 0].tolist():
            tok = int(ids[i])
            outputs[i].append(tok)
            logprobs[i].append(float(lp[i]))
            if len(outputs[i]) >= max_new or tok == stop_id:
                done[i] = True
        last = torch.where(generating.to(device), ids.to(device), last)
        state.emitted += generating.long().to(device)
        if bool(done.all()):
            break
    return GenerationResult(outputs, logprobs, prompts)
