"""Parallel-versus-recurrent agreement checks over a grid of architectures."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass

import torch

from .config import HeadMode, SrmConfig
from .model import SrmModel

FP32_TOL = 1e-4
HALF_TOL = 5e-2


@dataclass
class EquivalenceResult:
    seed: int
    config: SrmConfig
    n: int
    max_dev_fp32: float
    max_dev_half: float

    @property
    def passed(self) -> bool:
        return self.max_dev_fp32 <= FP32_TOL and self.max_dev_half <= HALF_TOL


def config_grid() -> list[dict]:
    """Head mode x decay x projections, plus kernel k=4 on column-only heads."""
    grid = []
    for mode, decay, proj in itertools.product(HeadMode, (True, False), (True, False)):
        grid.append(dict(head_mode=mode, decay_enabled=decay, use_projections=proj, kernel_size=1))
    for decay, proj in itertools.product((True, False), (True, False)):
        grid.append(dict(head_mode=HeadMode.COLUMN_ONLY, decay_enabled=decay, use_projections=proj, kernel_size=4))
    return grid


def random_config(seed: int, vocab_size: int = 64) -> tuple[SrmConfig, int]:
    rng = random.Random(seed)
    axes = config_grid()[seed % len(config_grid())]
    d = rng.choice([8, 16, 32, 64])
    n_heads = rng.choice([h for h in (2, 4) if d // h >= axes["kernel_size"]])
    n_ctx = rng.choice([16, 32, 64])
    cfg = SrmConfig(
        d_model=d,
        n_layers=rng.choice([1, 2, 3]),
        n_heads=n_heads,
        n_ctx=n_ctx,
        vocab_size=vocab_size,
        head_parallel=rng.random() < 0.5,
        diag_const_enabled=rng.random() < 0.3,
        **axes,
    )
    return cfg, rng.randint(1, n_ctx)


def perturbed_model(config: SrmConfig, seed: int) -> SrmModel:
    """A model whose structured parameters are moved away from their init values."""
    torch.manual_seed(seed)
    model = SrmModel(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("decay_raw"):
                p.uniform_(-3.0, 3.0)
            elif name.endswith("diag_const") or name.endswith("combine"):
                p.uniform_(-1.0, 1.0)
            elif name.endswith(".bias") and "banks" in name:
                p.normal_(0.0, 0.1)
            else:
                p.add_(0.05 * torch.randn_like(p))
    return model


@torch.no_grad()
def max_deviation(model: SrmModel, tokens: torch.Tensor, half_cache: bool = False) -> float:
    parallel = model(tokens)
    state = model.init_state(tokens.shape[0])
    steps = [model.step(tokens[:, t], state, half_cache=half_cache)[0] for t in range(tokens.shape[1])]
    recurrent = torch.stack(steps, dim=1)
    return float((parallel - recurrent).abs().max())


def check_config(seed: int, batch: int = 2) -> EquivalenceResult:
    config, n = random_config(seed)
    model = perturbed_model(config, seed)
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, config.vocab_size, (batch, n), generator=gen)
    return EquivalenceResult(
        seed=seed,
        config=config,
        n=n,
        max_dev_fp32=max_deviation(model, tokens),
        max_dev_half=max_deviation(model, tokens, half_cache=True),
    )


def run_suite(seed: int = 0, count: int = 100) -> list[EquivalenceResult]:
    return [check_config(seed * 100_000 + i) for i in range(count)]
