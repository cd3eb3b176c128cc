"""Structured causal token mixing in its dense, sequence-parallel form.

Layout convention: activations are ``(..., n, d_h)`` with tokens along the
second-to-last axis. A mixing matrix ``M`` of shape ``(n, n)`` is upper
triangular, entry ``(i, j)`` being the weight with which input token ``i``
contributes to output token ``j``, so ``Y = M^T X + B``.

Parameter tensors may carry leading "slot" axes (several heads stacked
together); every function here broadcasts over them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import torch

DECAY_FLOOR = 0.9
DECAY_SPAN = 0.1


class HeadKind(str, enum.Enum):
    ROW = "row"
    COLUMN = "column"


class ContextLengthError(ValueError):
    """Sequence longer than the configured maximum context."""


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MixerHeadParams:
    """One structured mixing matrix (or a stack of same-kind matrices).

    alpha:     (..., n_ctx) per-position mixing weights
    decay_raw: (...)        unconstrained decay parameter
    bias:      (..., n_ctx, d_h) per-position bias vectors
    diag_const: (...) or None, independent main-diagonal multiplier
    """

    kind: HeadKind
    alpha: torch.Tensor
    decay_raw: torch.Tensor
    bias: torch.Tensor
    diag_const: torch.Tensor | None = None
    decay_enabled: bool = True

    def __post_init__(self):
        if self.bias.shape[-2] != self.alpha.shape[-1]:
            raise ShapeMismatchError(
                f"bias has {self.bias.shape[-2]} positions but alpha has {self.alpha.shape[-1]}"
            )

    @property
    def n_ctx(self) -> int:
        return self.alpha.shape[-1]

    @property
    def head_dim(self) -> int:
        return self.bias.shape[-1]

    @property
    def decay(self) -> torch.Tensor:
        return derive_decay(self.decay_raw, self.decay_enabled)


@dataclass(frozen=True)
class KernelMixerParams:
    """k column-repeat filters, each mixing a shifted slice of the hidden axis.

    alpha (..., k, n_ctx), decay_raw (..., k), diag_const (..., k) or None.
    Only filter 0 carries a bias: ``bias`` is (..., n_ctx, d_h).
    """

    alpha: torch.Tensor
    decay_raw: torch.Tensor
    bias: torch.Tensor
    diag_const: torch.Tensor | None = None
    decay_enabled: bool = True

    @property
    def kernel_size(self) -> int:
        return self.alpha.shape[-2]

    @property
    def n_ctx(self) -> int:
        return self.alpha.shape[-1]

    @property
    def head_dim(self) -> int:
        return self.bias.shape[-1]

    @property
    def decay(self) -> torch.Tensor:
        return derive_decay(self.decay_raw, self.decay_enabled)

    def filter(self, i: int) -> MixerHeadParams:
        bias = self.bias if i == 0 else torch.zeros_like(self.bias)
        return MixerHeadParams(
            kind=HeadKind.COLUMN,
            alpha=self.alpha[..., i, :],
            decay_raw=self.decay_raw[..., i],
            bias=bias,
            diag_const=None if self.diag_const is None else self.diag_const[..., i],
            decay_enabled=self.decay_enabled,
        )

    @classmethod
    def from_filters(cls, filters: Sequence[MixerHeadParams]) -> "KernelMixerParams":
        if not filters:
            raise ValueError("need at least one filter")
        first = filters[0]
        for f in filters:
            if f.kind is not HeadKind.COLUMN:
                raise ValueError("kernel filters must be column-repeat")
            if f.head_dim != first.head_dim or f.n_ctx != first.n_ctx:
                raise ShapeMismatchError("kernel filters must share head_dim and n_ctx")
        diag = None
        if first.diag_const is not None:
            diag = torch.stack([f.diag_const for f in filters], dim=-1)
        return cls(
            alpha=torch.stack([f.alpha for f in filters], dim=-2),
            decay_raw=torch.stack([torch.as_tensor(f.decay_raw) for f in filters], dim=-1),
            bias=first.bias,
            diag_const=diag,
            decay_enabled=first.decay_enabled,
        )


def derive_decay(decay_raw, decay_enabled: bool = True) -> torch.Tensor:
    """Map the unconstrained parameter to a decay in (0.9, 1]."""
    decay_raw = torch.as_tensor(decay_raw)
    if not decay_enabled:
        return torch.ones_like(decay_raw)
    return DECAY_FLOOR + DECAY_SPAN * torch.sigmoid(decay_raw)


def _check_length(n: int, n_ctx: int) -> None:
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if n > n_ctx:
        raise ContextLengthError(f"sequence length {n} exceeds n_ctx={n_ctx}")


def _structured(alpha, lam, diag_const, n: int, row: bool) -> torch.Tensor:
    idx = torch.arange(n, device=alpha.device)
    offset = idx[None, :] - idx[:, None]  # j - i
    upper = offset >= 0
    powers = lam[..., None, None] ** offset.clamp(min=0).to(lam.dtype)
    a = alpha[..., :n]
    weight = a[..., :, None] if row else a[..., None, :]
    m = powers * weight
    if diag_const is not None:
        eye = torch.eye(n, dtype=torch.bool, device=alpha.device)
        diag = diag_const[..., None, None] * a[..., :, None]
        m = torch.where(eye, diag, m)
    return m * upper.to(m.dtype)


def _mix(m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``m^T @ x`` where ``x`` may carry extra leading batch axes.

    The batch axes are folded into the feature axis so the (n, n) matrices
    are not materialized once per sample.
    """
    extra = x.dim() - m.dim()
    if extra <= 0 or tuple(x.shape[extra:-2]) != tuple(m.shape[:-2]):
        return m.transpose(-1, -2) @ x
    lead = x.shape[:extra]
    folded = x.reshape(-1, *x.shape[extra:]).movedim(0, -2)  # (*S, n, L, d)
    out = m.transpose(-1, -2) @ folded.flatten(-2)
    return out.unflatten(-1, folded.shape[-2:]).movedim(-2, 0).reshape(*lead, *out.shape[:-1], x.shape[-1])


def build_structured_matrix(params: MixerHeadParams, n: int) -> torch.Tensor:
    """Dense ``(..., n, n)`` mixing matrix.

    Row-repeat entries are ``lam**(j-i) * alpha[i]``, column-repeat entries
    ``lam**(j-i) * alpha[j]``, both for ``i <= j`` and zero below the diagonal.
    """
    _check_length(n, params.n_ctx)
    return _structured(
        params.alpha, params.decay, params.diag_const, n, row=params.kind is HeadKind.ROW
    )


def parallel_mix(x: torch.Tensor, params: MixerHeadParams) -> torch.Tensor:
    n, d_h = x.shape[-2], x.shape[-1]
    if d_h != params.head_dim:
        raise ShapeMismatchError(f"input width {d_h} != head_dim {params.head_dim}")
    m = build_structured_matrix(params, n)
    return _mix(m, x) + params.bias[..., :n, :]


def kernel_windows(x: torch.Tensor, k: int) -> torch.Tensor:
    """Stack the k hidden-axis slices of ``x`` zero-padded at the end.

    ``x`` is (..., d_h); the result is (..., k, d_h) with slice ``i`` holding
    ``x_pad[i : i + d_h]``.
    """
    d_h = x.shape[-1]
    padded = torch.nn.functional.pad(x, (0, k))
    return padded.unfold(-1, d_h, 1)[..., :k, :]


def parallel_mix_kernel(x: torch.Tensor, kparams: KernelMixerParams) -> torch.Tensor:
    n, d_h = x.shape[-2], x.shape[-1]
    if d_h != kparams.head_dim:
        raise ShapeMismatchError(f"input width {d_h} != head_dim {kparams.head_dim}")
    _check_length(n, kparams.n_ctx)
    k = kparams.kernel_size
    m = _structured(kparams.alpha, kparams.decay, kparams.diag_const, n, row=False)  # (..., k, n, n)
    windows = kernel_windows(x, k).movedim(-2, -3)  # (..., k, n, d_h)
    mixed = _mix(m, windows)
    return mixed.sum(dim=-3) + kparams.bias[..., :n, :]
