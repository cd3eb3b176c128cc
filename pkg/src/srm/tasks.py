"""Toy verifiable task: single-digit addition over byte tokens.

Prompts look like ``"3+4="`` and a correct completion is ``"7\\n"``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import torch

from .config import PAD_ID, SrmConfig, TrainConfig
from .model import SrmModel
from .rlvr import GrpoConfig, GrpoStepInfo, LastNumberVerifier, Question, grpo_train_step, make_grpo_optimizer, rollout
from .training import Batch, train_loop

STOP = ord("\n")


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


@dataclass(frozen=True)
class AdditionTask:
    max_operand: int = 9

    def pairs(self) -> list[tuple[int, int]]:
        r = range(self.max_operand + 1)
        return [(a, b) for a in r for b in r]

    def questions(self) -> list[Question]:
        return [Question(f"{a}+{b}", tuple(encode(f"{a}+{b}="))) for a, b in self.pairs()]

    def answers(self) -> dict[str, float]:
        return {f"{a}+{b}": float(a + b) for a, b in self.pairs()}

    def verifier(self) -> LastNumberVerifier:
        return LastNumberVerifier(self.answers())

    @property
    def max_len(self) -> int:
        m = self.max_operand
        return len(f"{m}+{m}={2 * m}\n")

    def sft_data(self, batch_size: int, seed: int):
        """Step-indexed source of teacher-forced ``a+b=c\\n`` batches.

        Only the answer and terminator are scored.
        """
        gen = torch.Generator().manual_seed(seed)
        pairs = self.pairs()
        width = self.max_len

        def source(step: int) -> Batch:
            idx = torch.randint(len(pairs), (batch_size,), generator=gen).tolist()
            tokens = torch.full((batch_size, width), PAD_ID, dtype=torch.long)
            mask = torch.zeros(batch_size, width, dtype=torch.bool)
            for row, i in enumerate(idx):
                a, b = pairs[i]
                prompt = encode(f"{a}+{b}=")
                full = prompt + encode(f"{a + b}\n")
                tokens[row, : len(full)] = torch.tensor(full)
                mask[row, len(prompt) - 1 : len(full) - 1] = True
            return tokens, mask

        return source


def toy_model_config() -> SrmConfig:
    return SrmConfig(d_model=32, n_layers=2, n_heads=2, n_ctx=16)


def warm_start(task: AdditionTask, steps: int, seed: int = 0, config: SrmConfig | None = None) -> SrmModel:
    """Supervised pre-training on ``a+b=c`` so that RL starts from a partly correct policy."""
    train_cfg = TrainConfig(steps=steps, batch_size=32, lr=1e-3, warmup_steps=20, seed=seed, record_wall_time=False)
    return train_loop(config or toy_model_config(), train_cfg, task.sft_data(32, seed), log_every=10**9).model


def mean_sampled_reward(model: SrmModel, task: AdditionTask, cfg: GrpoConfig, seed: int) -> float:
    """Fraction of correct samples, ``cfg.group_size`` per question over every question."""
    records = rollout(model, task.questions(), task.verifier(), cfg, seed=seed)
    return sum(r.reward for r in records) / len(records)


def run_grpo(
    model: SrmModel,
    task: AdditionTask,
    cfg: GrpoConfig,
    questions_per_step: int = 8,
    reference: SrmModel | None = None,
    on_step: Callable[[GrpoStepInfo], None] | None = None,
) -> list[GrpoStepInfo]:
    """``cfg.total_steps`` GRPO steps, each pooling rollouts from a seeded draw of questions."""
    reference = reference if reference is not None else copy.deepcopy(model).eval()
    optimizer = make_grpo_optimizer(model, cfg)
    questions = task.questions()
    verifier = task.verifier()
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for step in range(cfg.total_steps):
        pick = torch.randperm(len(questions), generator=gen)[:questions_per_step].tolist()
        info = grpo_train_step(model, optimizer, [questions[i] for i in pick], verifier, cfg, step, reference)
        history.append(info)
        if on_step is not None:
            on_step(info)
    return history
