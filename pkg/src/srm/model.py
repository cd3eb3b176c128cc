"""SRM language model: one parameter set, two forward representations.

``SrmModel.forward`` runs the sequence-parallel form used for training.
``SrmModel.step`` advances a ``GenerationState`` by one token using the
recurrent form, with per-sample caches whose size does not depend on how
many tokens have been consumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import HeadMode, SrmConfig
from .mixing import (
    ContextLengthError,
    HeadKind,
    KernelMixerParams,
    MixerHeadParams,
    parallel_mix,
    parallel_mix_kernel,
)
from .recurrent import (
    HeadCache,
    LayerCache,
    bank_layout,
    init_cache,
    reconstruct_state,
    step_head,
    step_kernel,
)

DECAY_RAW_INIT = 2.0


class TokenRangeError(ValueError):
    pass


class MixerBank(nn.Module):
    """A stack of same-kind structured mixers, one per head."""

    def __init__(self, kind: HeadKind, n_heads: int, config: SrmConfig, kernel_size: int = 1):
        super().__init__()
        self.kind = kind
        self.kernel_size = kernel_size
        self.decay_enabled = config.decay_enabled
        lead = (n_heads,) if kernel_size == 1 else (n_heads, kernel_size)
        bound = 1.0 / math.sqrt(config.n_ctx)
        self.alpha = nn.Parameter(torch.empty(*lead, config.n_ctx).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_heads, config.n_ctx, config.head_dim))
        if config.decay_enabled:
            self.decay_raw = nn.Parameter(torch.full(lead, DECAY_RAW_INIT))
        else:
            # lambda is pinned to 1; keep a buffer so params() has a tensor to hand out
            self.register_buffer("decay_raw", torch.zeros(lead))
        if config.diag_const_enabled:
            self.diag_const = nn.Parameter(torch.ones(lead))
        else:
            self.diag_const = None

    def params(self) -> MixerHeadParams | KernelMixerParams:
        if self.kernel_size > 1:
            return KernelMixerParams(
                alpha=self.alpha,
                decay_raw=self.decay_raw,
                bias=self.bias,
                diag_const=self.diag_const,
                decay_enabled=self.decay_enabled,
            )
        return MixerHeadParams(
            kind=self.kind,
            alpha=self.alpha,
            decay_raw=self.decay_raw,
            bias=self.bias,
            diag_const=self.diag_const,
            decay_enabled=self.decay_enabled,
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        """u: (B, heads, n, d_h)"""
        p = self.params()
        if isinstance(p, KernelMixerParams):
            return parallel_mix_kernel(u, p)
        return parallel_mix(u, p)

    def step(self, u: torch.Tensor, cache: HeadCache, t, half: bool = False) -> torch.Tensor:
        """u: (B, heads, d_h)"""
        p = self.params()
        if isinstance(p, KernelMixerParams):
            return step_kernel(u, cache, p, t, half)
        return step_head(u, cache, p, t, half)

    def reconstruct(self, u: torch.Tensor, n: int) -> torch.Tensor:
        return reconstruct_state(u, self.params(), n)


class MixingLayer(nn.Module):
    """Headed token mixing: input projections, structured mixers, output projection."""

    def __init__(self, config: SrmConfig):
        super().__init__()
        self.config = config
        d, h, d_h = config.d_model, config.effective_heads, config.head_dim
        self.n_heads, self.head_dim = h, d_h
        self.in_proj = None
        self.head_proj = None
        self.out_proj = None
        if config.use_projections:
            if config.head_parallel:
                self.in_proj = nn.Linear(d, d, bias=False)
            else:
                bound = 1.0 / math.sqrt(d)
                self.head_proj = nn.Parameter(torch.empty(h, d_h, d).uniform_(-bound, bound))
            self.out_proj = nn.Linear(d, d, bias=False)

        layout = bank_layout(config)
        self.banks = nn.ModuleDict()
        for name, count in layout.items():
            if name == "kernel":
                self.banks[name] = MixerBank(HeadKind.COLUMN, count, config, config.kernel_size)
            else:
                self.banks[name] = MixerBank(HeadKind(name), count, config)
        self.combine = None
        if config.head_mode is HeadMode.COMBINED:
            self.combine = nn.Parameter(torch.full((h, 2), 0.5))

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        """(..., d) -> (..., heads, d_h)"""
        if self.head_proj is not None:
            return torch.einsum("hed,...d->...he", self.head_proj, x)
        if self.in_proj is not None:
            x = self.in_proj(x)
        return x.unflatten(-1, (self.n_heads, self.head_dim))

    def merge_heads(self, y: torch.Tensor) -> torch.Tensor:
        y = y.flatten(-2)
        if self.out_proj is not None:
            y = self.out_proj(y)
        return y

    def _route(self, u: torch.Tensor, run, head_axis: int) -> torch.Tensor:
        """Send head slices to their banks and gather outputs in head order."""
        mode = self.config.head_mode
        if mode is HeadMode.MIXED:
            half = self.n_heads // 2
            rows = run("row", u.narrow(head_axis, 0, half))
            cols = run("column", u.narrow(head_axis, half, half))
            return torch.cat([rows, cols], dim=head_axis)
        if mode is HeadMode.COMBINED:
            shape = [1] * u.dim()
            shape[head_axis] = self.n_heads
            a = self.combine[:, 0].reshape(shape)
            b = self.combine[:, 1].reshape(shape)
            return a * run("row", u) + b * run("column", u)
        (name,) = self.banks.keys()
        return run(name, u)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, n, d) -> (B, n, d)"""
        u = self.split_heads(x).transpose(-2, -3)  # (B, heads, n, d_h)
        y = self._route(u, lambda name, v: self.banks[name](v), head_axis=-3)
        return self.merge_heads(y.transpose(-2, -3))

    def step(self, x: torch.Tensor, cache: LayerCache, half: bool = False) -> torch.Tensor:
        """x: (B, d) -> (B, d); advances every bank cache in ``cache``."""
        u = self.split_heads(x)  # (B, heads, d_h)
        t = cache.position
        y = self._route(u, lambda name, v: self.banks[name].step(v, cache.heads[name], t, half), head_axis=-2)
        return self.merge_heads(y)

    def reconstruct(self, x: torch.Tensor, n: int, batch: int) -> LayerCache:
        u = self.split_heads(x).transpose(-2, -3)
        heads: dict[str, HeadCache] = {}

        def run(name, v):
            heads[name] = HeadCache(self.banks[name].reconstruct(v, n))
            return v

        self._route(u, run, head_axis=-3)
        return LayerCache(heads=heads, position=torch.full((batch,), n, dtype=torch.long, device=x.device))


class Block(nn.Module):
    def __init__(self, config: SrmConfig):
        super().__init__()
        d = config.d_model
        self.mix_norm = nn.RMSNorm(d, eps=1e-6)
        self.mix = MixingLayer(config)
        self.ff_norm = nn.RMSNorm(d, eps=1e-6)
        self.ff = nn.Sequential(
            nn.Linear(d, config.ff_expansion * d),
            nn.GELU(),
            nn.Linear(config.ff_expansion * d, d),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.mix(self.mix_norm(x))
        return x + self.ff(self.ff_norm(x))

    def step(self, x: torch.Tensor, cache: LayerCache, half: bool = False) -> torch.Tensor:
        x = x + self.mix.step(self.mix_norm(x), cache, half)
        return x + self.ff(self.ff_norm(x))


@dataclass
class GenerationState:
    """Recurrent state of a batch being decoded.

    ``position`` counts tokens consumed per sample; ``emitted`` counts
    sampled tokens. Samples flagged ``finished`` are no longer advanced.
    """

    layers: list[LayerCache]
    last_token: torch.Tensor
    emitted: torch.Tensor
    finished: torch.Tensor

    @property
    def batch(self) -> int:
        return self.last_token.shape[0]

    @property
    def position(self) -> torch.Tensor:
        return self.layers[0].position

    def cache_scalars_per_sample(self) -> int:
        return sum(layer.scalars_per_sample() for layer in self.layers)

    def cache_scalars(self) -> int:
        return sum(h.scalars for layer in self.layers for h in layer.heads.values())


class SrmModel(nn.Module):
    def __init__(self, config: SrmConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embed = nn.Embedding(config.vocab_size, d)
        nn.init.uniform_(self.embed.weight, -1.0 / math.sqrt(d), 1.0 / math.sqrt(d))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.norm = nn.RMSNorm(d, eps=1e-6)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.embed.weight.device

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise TokenRangeError(f"token ids must lie in [0, {self.config.vocab_size})")

    def hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] > self.config.n_ctx:
            raise ContextLengthError(f"sequence length {tokens.shape[-1]} exceeds n_ctx={self.config.n_ctx}")
        self._check_tokens(tokens)
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, n) token ids -> (B, n, vocab) logits."""
        return self.lm_head(self.hidden(tokens))

    forward_parallel = forward

    def init_state(self, batch: int) -> GenerationState:
        layers = [init_cache(self.config, batch, dtype=self.dtype, device=self.device) for _ in self.blocks]
        dev = self.device
        return GenerationState(
            layers=layers,
            last_token=torch.full((batch,), -1, dtype=torch.long, device=dev),
            emitted=torch.zeros(batch, dtype=torch.long, device=dev),
            finished=torch.zeros(batch, dtype=torch.bool, device=dev),
        )

    @torch.no_grad()
    def step(
        self, tokens: torch.Tensor, state: GenerationState, half_cache: bool = False, logits: bool = True
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Consume one token per sample; returns (logits, stale).

        Samples already finished, or whose context is full, keep their caches
        untouched; their logits slot is filled but marked stale and they are
        flagged finished. ``logits=False`` returns the final hidden state
        instead of projecting onto the vocabulary.
        """
        self._check_tokens(tokens)
        pos = state.position
        overflow = pos >= self.config.n_ctx
        state.finished |= overflow
        stale = state.finished.clone()
        if bool(stale.any()):
            active = ~stale
            # park overflowing samples at a valid index; their results are discarded
            safe_pos = torch.where(overflow, torch.zeros_like(pos), pos)
            old = [{k: h.state for k, h in layer.heads.items()} for layer in state.layers]
            for layer in state.layers:
                layer.position = safe_pos
        x = self.embed(tokens)
        for block, cache in zip(self.blocks, state.layers):
            x = block.step(x, cache, half_cache)
        x = self.norm(x)
        out = self.lm_head(x) if logits else x
        if bool(stale.any()):
            for layer, saved in zip(state.layers, old):
                for name, head in layer.heads.items():
                    mask = active.view(-1, *([1] * (head.state.dim() - 1)))
                    head.state = torch.where(mask, head.state, saved[name])
                layer.position = pos + active.long()
        else:
            for layer in state.layers:
                layer.position = pos + 1
        state.last_token = torch.where(stale, state.last_token, tokens)
        return out, stale

    forward_recurrent_step = step

    @torch.no_grad()
    def prefill(self, tokens: torch.Tensor, mode: str = "recurrent") -> tuple[torch.Tensor, GenerationState]:
        """Consume a rectangular (B, n) prompt; returns (last logits, state).

        ``mode="parallel"`` runs one parallel pass and rebuilds the caches from
        the mixer inputs instead of stepping token by token.
        """
        batch, n = tokens.shape
        if n > self.config.n_ctx:
            raise ContextLengthError(f"prompt length {n} exceeds n_ctx={self.config.n_ctx}")
        if mode == "recurrent":
            state = self.init_state(batch)
            out = None
            for t in range(n):
                out, _ = self.step(tokens[:, t], state)
            return out, state
        if mode != "parallel":
            raise ValueError(f"unknown prefill mode {mode!r}")
        self._check_tokens(tokens)
        state = self.init_state(batch)
        x = self.embed(tokens)
        layers = []
        for block in self.blocks:
            layers.append(block.mix.reconstruct(block.mix_norm(x), n, batch))
            x = block(x)
        state.layers = layers
        state.last_token = tokens[:, -1].clone()
        return self.lm_head(self.norm(x))[:, -1], state


def cache_scalars_per_sample(config: SrmConfig) -> int:
    return config.n_layers * config.cache_scalars_per_layer
