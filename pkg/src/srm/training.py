"""Causal training at desk scale: loss, gradients, optimizer schedule, copy task."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .config import SrmConfig, TrainConfig
from .model import SrmModel

log = logging.getLogger(__name__)

Batch = tuple[torch.Tensor, torch.Tensor]


class EmptyMaskError(ValueError):
    """Loss requested over a batch with no contributing positions."""


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, name: str | None = None):
        super().__init__(f"non-finite {what}" + (f" in {name}" if name else ""))
        self.name = name


def shifted_ce_loss(
    logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean next-token cross-entropy over masked positions.

    ``mask[b, t]`` selects the term ``-log softmax(logits[b, t])[tokens[b, t + 1]]``.
    The last column of ``mask`` has no next token and is ignored. Returns the
    scalar loss and the (B, n - 1) per-position losses (zero where unmasked).
    """
    pred_mask = mask[:, :-1].to(logits.dtype)
    count = pred_mask.sum()
    if count == 0:
        raise EmptyMaskError("mask selects no positions")
    per_pos = F.cross_entropy(
        logits[:, :-1].transpose(1, 2), tokens[:, 1:], reduction="none"
    )
    per_pos = per_pos * pred_mask
    return per_pos.sum() / count, per_pos


def prediction_mask(target_mask: torch.Tensor) -> torch.Tensor:
    """Convert a mask over target tokens into a mask over predicting positions."""
    out = torch.zeros_like(target_mask)
    out[:, :-1] = target_mask[:, 1:]
    return out


def backward(loss: torch.Tensor, model: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every trainable tensor.

    Gradients are left in ``.grad`` and also returned by name. Parameters that
    do not influence the loss get an explicit zero gradient.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss.backward()
    grads = {}
    for name, p in named:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        if not torch.isfinite(p.grad).all():
            raise NonFiniteError("gradient", name)
        grads[name] = p.grad
    return grads


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warm-up over ``warmup`` steps, then linear decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def optimizer_step(
    model: torch.nn.Module, optimizer: torch.optim.Optimizer, step: int, cfg: TrainConfig, total_steps: int | None = None
) -> dict[str, float]:
    """Clip, schedule and apply one AdamW update from the gradients in ``.grad``."""
    lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps if total_steps is None else total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    params = [p for p in model.parameters() if p.grad is not None]
    max_norm = cfg.max_grad_norm if cfg.max_grad_norm is not None else math.inf
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm))
    if not math.isfinite(grad_norm):
        raise NonFiniteError("gradient norm")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return {"lr": lr, "grad_norm": grad_norm}


def optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    """First/second moments keyed by parameter name, for checkpointing."""
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            out[f"{name}.exp_avg"] = state["exp_avg"]
            out[f"{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return out


# ---------------------------------------------------------------- copy task


@dataclass(frozen=True)
class CopyTaskSpec:
    """Rows are ``payload | delimiter | payload``; only the second payload is scored."""

    copy_len: int
    payload_ids: tuple[int, ...] = tuple(range(ord("a"), ord("a") + 16))
    delimiter_id: int = ord("|")

    @property
    def total_len(self) -> int:
        return 2 * self.copy_len + 1

    @classmethod
    def from_train_config(cls, cfg: TrainConfig) -> "CopyTaskSpec":
        return cls(cfg.copy_len, cfg.payload_ids, cfg.delimiter_id)


def copy_task_batch(
    spec: CopyTaskSpec, batch: int, seed: int | None = None, generator: torch.Generator | None = None
) -> Batch:
    """Returns (tokens (B, 2m+1), target mask over the second payload)."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    ids = torch.tensor(spec.payload_ids, dtype=torch.long)
    m = spec.copy_len
    payload = ids[torch.randint(len(ids), (batch, m), generator=generator)]
    delim = torch.full((batch, 1), spec.delimiter_id, dtype=torch.long)
    tokens = torch.cat([payload, delim, payload], dim=1)
    mask = torch.zeros_like(tokens, dtype=torch.bool)
    mask[:, m + 1 :] = True
    return tokens, mask


def copy_accuracy(logits: torch.Tensor, tokens: torch.Tensor, target_mask: torch.Tensor) -> float:
    """Teacher-forced token accuracy on the target positions."""
    pred = logits[:, :-1].argmax(dim=-1)
    hits = (pred == tokens[:, 1:]) & target_mask[:, 1:]
    return float(hits.sum()) / float(target_mask[:, 1:].sum())


@torch.no_grad()
def evaluate_copy(model: SrmModel, spec: CopyTaskSpec, batches: int, batch_size: int, seed: int) -> dict[str, float]:
    gen = torch.Generator().manual_seed(seed)
    accs, losses = [], []
    was_training = model.training
    model.eval()
    for _ in range(batches):
        tokens, mask = copy_task_batch(spec, batch_size, generator=gen)
        logits = model(tokens)
        losses.append(float(shifted_ce_loss(logits, tokens, prediction_mask(mask))[0]))
        accs.append(copy_accuracy(logits, tokens, mask))
    model.train(was_training)
    return {"eval_loss": sum(losses) / len(losses), "accuracy": sum(accs) / len(accs)}


def copy_data(spec: CopyTaskSpec, batch_size: int, seed: int) -> Callable[[int], Batch]:
    """Step-indexed data source; one generator so the stream is seed-determined."""
    gen = torch.Generator().manual_seed(seed)

    def source(step: int) -> Batch:
        tokens, mask = copy_task_batch(spec, batch_size, generator=gen)
        return tokens, prediction_mask(mask)

    return source


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: SrmModel
    metrics: list[dict] = field(default_factory=list)
    final_loss: float = math.nan


def decay_values(model: SrmModel) -> list[list[float]]:
    """Current lambda of every mixer, one list per layer."""
    out = []
    for block in model.blocks:
        vals = []
        for bank in block.mix.banks.values():
            vals.extend(bank.params().decay.detach().flatten().tolist())
        out.append([round(v, 6) for v in vals])
    return out


def train_loop(
    config: SrmConfig,
    train_cfg: TrainConfig,
    data: Callable[[int], Batch],
    steps: int | None = None,
    eval_hook: Callable[[SrmModel, int], dict] | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    model: SrmModel | None = None,
    log_every: int = 10,
) -> TrainResult:
    """Train ``model`` (fresh from ``train_cfg.seed`` if omitted) on ``data(step)`` batches.

    Each metrics record is appended as one JSON line to ``log_path``. A
    non-finite loss saves the last good parameters to ``checkpoint_path`` and
    raises ``NonFiniteError``.
    """
    steps = train_cfg.steps if steps is None else steps
    if model is None:
        torch.manual_seed(train_cfg.seed)
        model = SrmModel(config)
    optimizer = make_optimizer(model, train_cfg)
    result = TrainResult(model=model)
    log_fh = open(log_path, "a") if log_path else None
    start = time.perf_counter()

    def emit(record: dict) -> None:
        if train_cfg.record_wall_time:
            record["wall_time"] = round(time.perf_counter() - start, 4)
        result.metrics.append(record)
        if log_fh:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    def checkpoint(step: int) -> None:
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, optimizer_tensors(model, optimizer), {"step": step})

    def snapshot() -> dict:
        return {k: v.detach().clone() for k, v in model.state_dict().items()}

    # parameters as of the last step whose loss was finite
    last_good = snapshot() if checkpoint_path else None
    try:
        model.train()
        for step in range(steps):
            tokens, mask = data(step)
            logits = model(tokens)
            loss, _ = shifted_ce_loss(logits, tokens, mask)
            if not torch.isfinite(loss):
                if last_good is not None:
                    with torch.no_grad():
                        model.load_state_dict(last_good)
                    checkpoint(step)
                raise NonFiniteError("loss", f"step {step}")
            if checkpoint_path and step:
                last_good = snapshot()
            backward(loss, model)
            info = optimizer_step(model, optimizer, step, train_cfg, steps)
            result.final_loss = loss.item()
            last = step == steps - 1
            evaluate = eval_hook is not None and train_cfg.eval_every > 0 and (
                (step + 1) % train_cfg.eval_every == 0 or last
            )
            if evaluate or (step + 1) % log_every == 0 or last:
                record = {"step": step + 1, "loss": round(loss.item(), 6), **{k: round(v, 8) for k, v in info.items()}}
                record["decay"] = decay_values(model)
                if evaluate:
                    record.update(eval_hook(model, step + 1))
                emit(record)
            if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
                checkpoint(step + 1)
        checkpoint(steps)
    finally:
        if log_fh:
            log_fh.close()
    return result


def train_copy_task(
    config: SrmConfig, train_cfg: TrainConfig, log_path=None, checkpoint_path=None
) -> TrainResult:
    spec = CopyTaskSpec.from_train_config(train_cfg)
    if spec.total_len > config.n_ctx:
        raise ValueError(f"copy task needs n_ctx >= {spec.total_len}")

    def hook(model, step):
        return evaluate_copy(model, spec, train_cfg.eval_batches, train_cfg.batch_size, seed=train_cfg.seed + 1)

    return train_loop(
        config,
        train_cfg,
        copy_data(spec, train_cfg.batch_size, train_cfg.seed),
        eval_hook=hook,
        log_path=log_path,
        checkpoint_path=checkpoint_path,
    )



@dataclass
class SweepPoint:
    copy_len: int
    steps: int
    final_accuracy: float
    first_step_at: dict[float, int | None]  # accuracy threshold -> first eval step reaching it
    seconds: float


def copy_length_sweep(
    lengths: Sequence[int],
    steps: int,
    seed: int = 0,
    model_config: SrmConfig | None = None,
    lr: float = 1e-3,
    warmup_steps: int = 100,
    batch_size: int = 32,
    eval_every: int = 100,
    thresholds: Sequence[float] = (0.9,),
) -> list[SweepPoint]:
    """Train one model per copy length at a fixed step budget.

    ``model_config`` supplies everything except ``n_ctx``, which is sized to
    each task (2 * copy_len + 1).
    """
    base = model_config or SrmConfig(d_model=64, n_layers=4, n_heads=4)
    points = []
    for m in lengths:
        config = dataclasses.replace(base, n_ctx=2 * m + 1)
        train_cfg = TrainConfig(
            steps=steps, batch_size=batch_size, lr=lr, warmup_steps=warmup_steps, seed=seed,
            copy_len=m, eval_every=eval_every, record_wall_time=False,
        )
        t0 = time.perf_counter()
        result = train_copy_task(config, train_cfg)
        evals = [r for r in result.metrics if "accuracy" in r]
        first = {th: next((r["step"] for r in evals if r["accuracy"] >= th), None) for th in thresholds}
        points.append(SweepPoint(m, steps, evals[-1]["accuracy"], first, time.perf_counter() - t0))
    return points
