"""Constant-memory recurrent evaluation of the structured mixers.

Each step reads the running sum ``S`` (which excludes the current token),
produces the output, then folds the current token into ``S``:

    row-repeat:     y = alpha_t * x + beta_t + S          S <- lam * (S + alpha_t * x)
    column-repeat:  y = alpha_t * (x + S) + beta_t        S <- lam * (S + x)

Positions ``t`` may be a Python int (all samples at the same position) or a
``(batch,)`` integer tensor, which lets samples of a ragged batch sit at
different offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import torch

from .config import HeadMode, SrmConfig
from .mixing import (
    HeadKind,
    KernelMixerParams,
    MixerHeadParams,
    derive_decay,
    kernel_windows,
)

Position = Union[int, torch.Tensor]


class ContextOverflowError(IndexError):
    """A recurrent step was requested at or beyond ``n_ctx``."""


@dataclass
class HeadCache:
    """Running-sum state for one head, or a stack of same-kind heads.

    ``state`` is (..., d_h) for plain heads and (..., k, d_h) for kernels.
    """

    state: torch.Tensor

    @classmethod
    def zeros(cls, *shape: int, dtype=torch.float32, device=None) -> "HeadCache":
        return cls(torch.zeros(*shape, dtype=dtype, device=device))

    @property
    def scalars(self) -> int:
        return self.state.numel()


@dataclass
class LayerCache:
    """Per-layer recurrent state for a batch of samples.

    ``heads`` maps a bank name (``row``, ``column`` or ``kernel``) to a cache
    whose state has shape (batch, heads_in_bank, [k,] d_h).
    """

    heads: dict[str, HeadCache]
    position: torch.Tensor = field(default_factory=lambda: torch.zeros(1, dtype=torch.long))

    @property
    def batch(self) -> int:
        return self.position.shape[0]

    def scalars_per_sample(self) -> int:
        return sum(h.scalars for h in self.heads.values()) // max(self.batch, 1)

    def select(self, index: torch.Tensor) -> "LayerCache":
        return LayerCache(
            heads={k: HeadCache(v.state[index]) for k, v in self.heads.items()},
            position=self.position[index],
        )


def bank_layout(config: SrmConfig) -> dict[str, int]:
    """Number of heads in each mixing bank of one layer."""
    h = config.effective_heads
    mode = config.head_mode
    if mode is HeadMode.MIXED:
        return {"row": h // 2, "column": h // 2}
    if mode is HeadMode.COMBINED:
        return {"row": h, "column": h}
    if mode is HeadMode.ROW_ONLY:
        return {"row": h}
    if config.kernel_size > 1:
        return {"kernel": h}
    return {"column": h}


def init_cache(config: SrmConfig, batch: int, dtype=torch.float32, device=None) -> LayerCache:
    """Zero state for one layer, ``batch`` samples at position 0."""
    d_h = config.head_dim
    heads = {}
    for name, count in bank_layout(config).items():
        if name == "kernel":
            heads[name] = HeadCache.zeros(batch, count, config.kernel_size, d_h, dtype=dtype, device=device)
        else:
            heads[name] = HeadCache.zeros(batch, count, d_h, dtype=dtype, device=device)
    return LayerCache(heads=heads, position=torch.zeros(batch, dtype=torch.long, device=device))


def _check_position(t: Position, n_ctx: int) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.max()) >= n_ctx or int(t.min()) < 0):
            raise ContextOverflowError(f"position {int(t.max())} outside context of {n_ctx}")
    elif not 0 <= t < n_ctx:
        raise ContextOverflowError(f"position {t} outside context of {n_ctx}")


def _at(param: torch.Tensor, t: Position, axis: int) -> torch.Tensor:
    """Select position ``t`` along ``axis``; a tensor ``t`` becomes the leading axis."""
    if isinstance(t, torch.Tensor):
        return param.index_select(axis, t).movedim(axis, 0)
    return param.select(axis, t)


def _round_half(x: torch.Tensor) -> torch.Tensor:
    return x.to(torch.float16).to(x.dtype)


def _decay(decay_raw, enabled: bool, half: bool) -> torch.Tensor:
    lam = derive_decay(decay_raw, enabled)
    return _round_half(lam) if half else lam


def _step(x, state, alpha_t, lam, bias_t, diag_t, row: bool, half: bool):
    a = alpha_t.unsqueeze(-1)
    lam = lam.unsqueeze(-1)
    c = 1.0 if diag_t is None else diag_t.unsqueeze(-1)
    if row:
        ax = a * x
        y = c * ax + bias_t + state
        new_state = lam * (state + ax)
    else:
        y = a * (c * x + state) + bias_t
        new_state = lam * (state + x)
    if half:
        new_state = _round_half(new_state)
    return y, new_state


def step_head(
    x: torch.Tensor, cache: HeadCache, params: MixerHeadParams, t: Position, half: bool = False
) -> torch.Tensor:
    """Advance ``cache`` by one token for a row- or column-repeat head.

    ``x`` is (..., d_h). The output is computed from the state before the
    update. ``half=True`` rounds the decay and new state to float16 values.
    """
    _check_position(t, params.n_ctx)
    diag_t = None if params.diag_const is None else params.diag_const
    y, cache.state = _step(
        x,
        cache.state,
        _at(params.alpha, t, -1),
        _decay(params.decay_raw, params.decay_enabled, half),
        _at(params.bias, t, -2),
        diag_t,
        row=params.kind is HeadKind.ROW,
        half=half,
    )
    return y


def step_row(x, cache: HeadCache, params: MixerHeadParams, t: Position, half: bool = False):
    if params.kind is not HeadKind.ROW:
        raise ValueError("step_row needs row-repeat parameters")
    return step_head(x, cache, params, t, half)


def step_col(x, cache: HeadCache, params: MixerHeadParams, t: Position, half: bool = False):
    if params.kind is not HeadKind.COLUMN:
        raise ValueError("step_col needs column-repeat parameters")
    return step_head(x, cache, params, t, half)


def step_kernel(
    x: torch.Tensor, cache: HeadCache, kparams: KernelMixerParams, t: Position, half: bool = False
) -> torch.Tensor:
    """Column-repeat step per filter on its slice of the padded input, summed.

    ``cache.state`` is (..., k, d_h).
    """
    _check_position(t, kparams.n_ctx)
    windows = kernel_windows(x, kparams.kernel_size)  # (..., k, d_h)
    y, cache.state = _step(
        windows,
        cache.state,
        _at(kparams.alpha, t, -1),
        _decay(kparams.decay_raw, kparams.decay_enabled, half),
        0.0,
        kparams.diag_const,
        row=False,
        half=half,
    )
    return y.sum(dim=-2) + _at(kparams.bias, t, -2)


def reconstruct_state(
    x: torch.Tensor, params: MixerHeadParams | KernelMixerParams, n: int
) -> torch.Tensor:
    """Running sum after consuming tokens ``0..n-1`` of ``x`` (..., n, d_h).

    Gives the cache a recurrent prefill would have built, from a parallel
    pass over the same inputs.
    """
    if isinstance(params, KernelMixerParams):
        lam = derive_decay(params.decay_raw, params.decay_enabled)  # (..., k)
        src = kernel_windows(x[..., :n, :], params.kernel_size)  # (..., n, k, d_h)
        offsets = torch.arange(n, 0, -1, dtype=lam.dtype, device=x.device)
        weights = lam[..., None] ** offsets  # (..., k, n)
        return torch.einsum("...kn,...nkd->...kd", weights, src)
    lam = derive_decay(params.decay_raw, params.decay_enabled)
    offsets = torch.arange(n, 0, -1, dtype=lam.dtype, device=x.device)
    weights = lam[..., None] ** offsets  # (..., n)
    if params.kind is HeadKind.ROW:
        weights = weights * params.alpha[..., :n]
    return (weights.unsqueeze(-1) * x[..., :n, :]).sum(dim=-2)
