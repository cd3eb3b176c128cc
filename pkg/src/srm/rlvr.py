"""Verifiable-reward training: balanced resampling, GRPO objective, pass@k."""

from __future__ import annotations

import logging
import math
import re
import subprocess
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import torch

from .config import PAD_ID
from .generation import SamplerSpec, generate
from .model import SrmModel
from .training import backward, lr_at

log = logging.getLogger(__name__)

STD_FLOOR = 1e-4


@dataclass
class RolloutRecord:
    question_id: str
    prompt: list[int]
    tokens: list[int]
    logprobs: list[float]
    reward: float
    group_id: int = 0

    def __post_init__(self):
        if self.reward not in (0.0, 1.0):
            raise ValueError(f"reward must be 0.0 or 1.0, got {self.reward!r}")

    @property
    def good(self) -> bool:
        return self.reward == 1.0


@dataclass(frozen=True)
class ResampleSpec:
    batch_size: int
    group_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


@dataclass
class ResampleResult:
    records: list[RolloutRecord]
    n_good: int
    with_replacement: bool = False


def balanced_resample(pool: Sequence[RolloutRecord], spec: ResampleSpec) -> ResampleResult:
    """Draw ``spec.batch_size`` records holding at most half rewarded samples.

    Up to ``b // 2`` good records are drawn without replacement, then bad
    records fill the rest; if bad records run out, further good records fill
    the remainder. A pool smaller than ``b`` falls back to drawing with
    replacement, which is reported on the result.
    """
    if not pool:
        raise ValueError("cannot resample an empty pool")
    b = spec.batch_size
    rng = np.random.default_rng(spec.seed)
    good = [r for r in pool if r.good]
    bad = [r for r in pool if not r.good]

    if len(pool) < b:
        n_good = b if not bad else min(len(good), b // 2)
        picks = [good[i] for i in rng.integers(len(good), size=n_good)] if n_good else []
        picks += [bad[i] for i in rng.integers(len(bad), size=b - n_good)] if b - n_good else []
        order = rng.permutation(b)
        return ResampleResult([picks[i] for i in order], n_good, with_replacement=True)

    n_good = min(len(good), b // 2)
    n_bad = min(len(bad), b - n_good)
    n_good += b - n_good - n_bad
    picks = [good[i] for i in rng.choice(len(good), size=n_good, replace=False)]
    picks += [bad[i] for i in rng.choice(len(bad), size=n_bad, replace=False)]
    order = rng.permutation(b)
    return ResampleResult([picks[i] for i in order], n_good)


# ---------------------------------------------------------------- objective


@dataclass
class GrpoTerms:
    objective: torch.Tensor
    advantages: torch.Tensor  # (N, T), zero off-mask
    kl: torch.Tensor  # (N, T), zero off-mask


def group_advantages(rewards: torch.Tensor) -> torch.Tensor:
    """(r - mean) / std over the batch, population std floored at 1e-4."""
    rewards = rewards.double()
    std = rewards.std(unbiased=False) if rewards.numel() > 1 else rewards.new_tensor(0.0)
    return (rewards - rewards.mean()) / torch.clamp(std, min=STD_FLOOR)


def kl_estimate(current: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Per-token estimator exp(ref - cur) - (ref - cur) - 1 (non-negative)."""
    diff = reference - current
    return torch.exp(diff) - diff - 1.0


def grpo_objective(
    current_logprobs: torch.Tensor,
    reference_logprobs: torch.Tensor,
    mask: torch.Tensor,
    rewards: torch.Tensor,
    beta: float,
) -> GrpoTerms:
    """Value to maximise: mean_i 1/|o_i| sum_t (A_i - beta * KL_t).

    With one update per generation batch the policy ratio is identically 1;
    it is kept as exp(logp - logp.detach()) so the advantage term carries the
    policy gradient while contributing exactly ``A_i`` to the value.
    """
    mask = mask.to(current_logprobs.dtype)
    adv = group_advantages(rewards).to(current_logprobs.dtype)[:, None] * mask
    ratio = torch.exp(current_logprobs - current_logprobs.detach())
    kl = kl_estimate(current_logprobs, reference_logprobs) * mask
    per_token = ratio * adv - beta * kl
    lengths = mask.sum(dim=1).clamp(min=1)
    objective = ((per_token * mask).sum(dim=1) / lengths).mean()
    return GrpoTerms(objective=objective, advantages=adv.detach(), kl=kl.detach())


EXACT_PASS_AT_K_LIMIT = 1000


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased coverage estimate 1 - C(n-c, k) / C(n, k).

    Up to ``n = 1000`` the ratio is formed from exact integer binomials and
    rounded once, so the result is the correctly rounded value. Beyond that it
    is accumulated as a sum of log1p terms.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if n - c < k:
        return 1.0
    if n <= EXACT_PASS_AT_K_LIMIT:
        total = math.comb(n, k)
        return float(Fraction(total - math.comb(n - c, k), total))
    log_ratio = math.fsum(math.log1p(-k / i) for i in range(n - c + 1, n + 1))
    return -math.expm1(log_ratio)


def mean_pass_at_k(counts: Mapping[str, tuple[int, int]], k: int) -> float:
    """Average pass@k over questions given ``{qid: (n, c)}``."""
    vals = [pass_at_k(n, c, k) for n, c in counts.values() if n >= k]
    return sum(vals) / len(vals) if vals else 0.0


# ---------------------------------------------------------------- verifiers


class Verifier(Protocol):
    def __call__(self, text: str, question_id: str) -> int: ...


_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def last_number(text: str) -> float | None:
    found = _NUMBER.findall(text.replace(",", ""))
    return float(found[-1]) if found else None


@dataclass
class LastNumberVerifier:
    """1 if the final number in the output equals the question's answer."""

    answers: Mapping[str, float]

    def __call__(self, text: str, question_id: str) -> int:
        value = last_number(text)
        return int(value is not None and math.isclose(value, float(self.answers[question_id])))


@dataclass
class ExactMatchVerifier:
    answers: Mapping[str, str]
    strip: bool = True

    def __call__(self, text: str, question_id: str) -> int:
        expected = self.answers[question_id]
        if self.strip:
            return int(text.strip() == expected.strip())
        return int(text == expected)


@dataclass
class CommandVerifier:
    """External verifier: ``argv + [question_id]`` reads the output on stdin, prints 0 or 1."""

    argv: Sequence[str]
    timeout: float = 10.0

    def __call__(self, text: str, question_id: str) -> int:
        proc = subprocess.run(
            [*self.argv, question_id], input=text, capture_output=True, text=True, timeout=self.timeout
        )
        if proc.returncode != 0:
            raise RuntimeError(f"verifier exited {proc.returncode}: {proc.stderr.strip()}")
        verdict = proc.stdout.strip()
        if verdict not in ("0", "1"):
            raise RuntimeError(f"verifier printed {verdict!r}, expected 0 or 1")
        return int(verdict)


def decode_bytes(tokens: Sequence[int]) -> str:
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def safe_verify(verifier: Callable[[str, str], int], text: str, question_id: str) -> float:
    try:
        return 1.0 if verifier(text, question_id) == 1 else 0.0
    except Exception as exc:  # any verifier failure counts as an incorrect sample
        log.warning("verifier failed on %s: %s", question_id, exc)
        return 0.0


# ---------------------------------------------------------------- training step


@dataclass(frozen=True)
class Question:
    question_id: str
    prompt: tuple[int, ...]


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    batch_size: int = 32
    beta: float = 0.04
    max_new: int = 4
    temperature: float = 0.7
    top_p: float = 0.9
    stop_id: int | None = ord("\n")
    lr: float = 2e-5
    weight_decay: float = 0.1
    max_grad_norm: float | None = 0.1
    warmup_ratio: float = 0.1
    total_steps: int = 200
    seed: int = 0
    pass_k: int = 4

    @property
    def sampler(self) -> SamplerSpec:
        return SamplerSpec(self.temperature, self.top_p)


@dataclass
class GrpoStepInfo:
    step: int
    mean_reward: float
    resampled_good: int
    objective: float
    mean_kl: float
    pass_at_k: float
    with_replacement: bool
    rollouts: list[RolloutRecord] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "resampled_good": self.resampled_good,
            "objective": self.objective,
            "mean_kl": self.mean_kl,
            "pass_at_k": self.pass_at_k,
            "with_replacement": self.with_replacement,
        }


def rollout(
    model: SrmModel, questions: Sequence[Question], verifier, cfg: GrpoConfig, seed: int
) -> list[RolloutRecord]:
    """G samples per question on the recurrent path, each verified."""
    prompts = [list(q.prompt) for q in questions for _ in range(cfg.group_size)]
    result = generate(model, prompts, cfg.max_new, cfg.sampler, seed=seed, stop_id=cfg.stop_id)
    records = []
    for i, (out, lps) in enumerate(zip(result.sequences, result.logprobs)):
        q = questions[i // cfg.group_size]
        reward = safe_verify(verifier, decode_bytes(out), q.question_id)
        records.append(RolloutRecord(q.question_id, list(q.prompt), out, lps, reward, group_id=i // cfg.group_size))
    return records


def sequence_logprobs(model: SrmModel, records: Sequence[RolloutRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    """Parallel-form log-probs of each record's output tokens.

    Returns (logp, mask), both (N, L - 1), where column t scores token t + 1
    of ``prompt + tokens`` right-padded to a common length L.
    """
    seqs = [r.prompt + r.tokens for r in records]
    length = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), length), PAD_ID, dtype=torch.long, device=model.device)
    mask = torch.zeros(len(seqs), length - 1, dtype=torch.bool, device=model.device)
    for i, (r, s) in enumerate(zip(records, seqs)):
        tokens[i, : len(s)] = torch.tensor(s)
        mask[i, len(r.prompt) - 1 : len(s) - 1] = True
    logits = model(tokens)[:, :-1]
    logp = torch.log_softmax(logits.double(), dim=-1).gather(-1, tokens[:, 1:, None])[..., 0]
    return logp, mask


def grpo_train_step(
    model: SrmModel,
    optimizer: torch.optim.Optimizer,
    questions: Sequence[Question],
    verifier,
    cfg: GrpoConfig,
    step: int,
    reference: SrmModel | None = None,
) -> GrpoStepInfo:
    """Generate, verify, resample to a balanced batch, ascend the GRPO objective.

    Rollouts use the recurrent representation; the objective is evaluated on
    the same parameters through the parallel representation.
    """
    model.eval()
    records = rollout(model, questions, verifier, cfg, seed=cfg.seed * 100_003 + step)
    resampled = balanced_resample(records, ResampleSpec(cfg.batch_size, cfg.group_size, cfg.seed * 100_003 + step))
    batch = resampled.records

    model.train()
    current, mask = sequence_logprobs(model, batch)
    if reference is not None and cfg.beta > 0:
        with torch.no_grad():
            ref, _ = sequence_logprobs(reference, batch)
    else:
        ref = current.detach()
    rewards = torch.tensor([r.reward for r in batch])
    terms = grpo_objective(current, ref, mask, rewards, cfg.beta)
    backward(-terms.objective, model)

    warmup = int(round(cfg.warmup_ratio * cfg.total_steps))
    lr = lr_at(step, cfg.lr, warmup, cfg.total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    if cfg.max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    counts: dict[str, list[int]] = {}
    for r in records:
        n_c = counts.setdefault(r.question_id, [0, 0])
        n_c[0] += 1
        n_c[1] += int(r.good)
    k = min(cfg.pass_k, cfg.group_size)
    kl_mean = float(terms.kl.sum() / mask.sum().clamp(min=1))
    return GrpoStepInfo(
        step=step,
        mean_reward=sum(r.reward for r in records) / len(records),
        resampled_good=resampled.n_good,
        objective=float(terms.objective.detach()),
        mean_kl=kl_mean,
        pass_at_k=mean_pass_at_k({q: (n, c) for q, (n, c) in counts.items()}, k),
        with_replacement=resampled.with_replacement,
        rollouts=records,
    )


def make_grpo_optimizer(model: SrmModel, cfg: GrpoConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
