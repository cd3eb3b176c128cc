import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import decay_of, kernel_mix_loop, matrix_entry_exact, mix_loop
from srm.mixing import (
    ContextLengthError,
    HeadKind,
    KernelMixerParams,
    MixerHeadParams,
    ShapeMismatchError,
    build_structured_matrix,
    derive_decay,
    kernel_windows,
    parallel_mix,
    parallel_mix_kernel,
)

F64 = torch.float64


def head(kind, n_ctx=6, d_h=3, raw=0.7, seed=0, diag=None, decay=True):
    g = torch.Generator().manual_seed(seed)
    return MixerHeadParams(
        kind=kind,
        alpha=torch.randn(n_ctx, generator=g, dtype=torch.float64),
        decay_raw=torch.tensor(raw, dtype=torch.float64),
        bias=torch.randn(n_ctx, d_h, generator=g, dtype=torch.float64),
        diag_const=None if diag is None else torch.tensor(diag, dtype=torch.float64),
        decay_enabled=decay,
    )


def test_row_repeat_hand_values():
    p = MixerHeadParams(
        HeadKind.ROW,
        alpha=torch.tensor([2.0, 3.0, 5.0]),
        decay_raw=torch.tensor(0.0),
        bias=torch.zeros(3, 1),
    )
    lam = 0.95  # 0.9 + 0.1 * sigmoid(0)
    expected = torch.tensor(
        [
            [2.0, 2.0 * lam, 2.0 * lam**2],
            [0.0, 3.0, 3.0 * lam],
            [0.0, 0.0, 5.0],
        ]
    )
    torch.testing.assert_close(build_structured_matrix(p, 3), expected)


def test_column_repeat_hand_values():
    p = MixerHeadParams(
        HeadKind.COLUMN,
        alpha=torch.tensor([2.0, 3.0, 5.0]),
        decay_raw=torch.tensor(0.0),
        bias=torch.zeros(3, 1),
    )
    lam = 0.95
    expected = torch.tensor(
        [
            [2.0, 3.0 * lam, 5.0 * lam**2],
            [0.0, 3.0, 5.0 * lam],
            [0.0, 0.0, 5.0],
        ]
    )
    torch.testing.assert_close(build_structured_matrix(p, 3), expected)


@pytest.mark.parametrize("kind", ["row", "column"])
def test_diag_const_replaces_diagonal_only(kind):
    p = head(HeadKind(kind), diag=-1.5)
    m = build_structured_matrix(p, 6)
    plain = build_structured_matrix(head(HeadKind(kind)), 6)
    torch.testing.assert_close(torch.diagonal(m), -1.5 * p.alpha)
    off = ~torch.eye(6, dtype=torch.bool)
    torch.testing.assert_close(m[off], plain[off])


def test_decay_range_and_disabled():
    raw = torch.linspace(-50, 50, 101)
    lam = derive_decay(raw)
    assert bool(((lam >= 0.9) & (lam <= 1.0)).all())
    assert float(derive_decay(torch.tensor(2.0))) == pytest.approx(decay_of(2.0))
    assert bool((derive_decay(raw, decay_enabled=False) == 1.0).all())


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["row", "column"]),
    n=st.integers(1, 12),
    raw=st.floats(-6, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_matrix_is_upper_triangular_and_matches_oracle(kind, n, raw, seed):
    p = head(HeadKind(kind), n_ctx=12, raw=raw, seed=seed)
    m = build_structured_matrix(p, n)
    assert bool((torch.tril(m, -1) == 0).all())
    lam = float(p.decay)
    alpha = p.alpha.tolist()
    for i in range(n):
        for j in range(n):
            ref = float(matrix_entry_exact(kind, alpha, lam, i, j))
            assert math.isclose(float(m[i, j]), ref, rel_tol=1e-14, abs_tol=1e-300)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["row", "column"]), n=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_parallel_mix_matches_loop(kind, n, seed):
    p = head(HeadKind(kind), seed=seed)
    x = torch.randn(n, 3, generator=torch.Generator().manual_seed(seed + 1), dtype=F64)
    y = parallel_mix(x, p)
    ref = mix_loop(kind, x.tolist(), p.alpha.tolist(), float(p.decay), p.bias.tolist())
    torch.testing.assert_close(y, torch.tensor(ref, dtype=F64))


def test_causality_future_tokens_do_not_leak():
    p = head(HeadKind.ROW)
    x = torch.randn(6, 3, dtype=F64)
    y = parallel_mix(x, p)
    x2 = x.clone()
    x2[4:] = torch.randn(2, 3, dtype=F64) * 100
    y2 = parallel_mix(x2, p)
    torch.testing.assert_close(y[:4], y2[:4])


def test_slot_axes_broadcast():
    g = torch.Generator().manual_seed(3)
    p = MixerHeadParams(
        HeadKind.COLUMN,
        alpha=torch.randn(2, 5, generator=g),
        decay_raw=torch.randn(2, generator=g),
        bias=torch.randn(2, 5, 4, generator=g),
    )
    x = torch.randn(7, 2, 5, 4, generator=g)
    y = parallel_mix(x, p)
    for h in range(2):
        single = MixerHeadParams(HeadKind.COLUMN, p.alpha[h], p.decay_raw[h], p.bias[h])
        torch.testing.assert_close(y[:, h], parallel_mix(x[:, h], single))


def test_length_and_shape_errors():
    p = head(HeadKind.ROW, n_ctx=4)
    with pytest.raises(ContextLengthError):
        build_structured_matrix(p, 5)
    with pytest.raises(ValueError):
        build_structured_matrix(p, 0)
    with pytest.raises(ShapeMismatchError):
        parallel_mix(torch.zeros(3, 5, dtype=F64), p)
    with pytest.raises(ShapeMismatchError):
        MixerHeadParams(HeadKind.ROW, torch.zeros(4), torch.tensor(0.0), torch.zeros(3, 2))


def test_kernel_windows_pad_at_end():
    x = torch.tensor([1.0, 2.0, 3.0])
    w = kernel_windows(x, 3)
    assert w.tolist() == [[1.0, 2.0, 3.0], [2.0, 3.0, 0.0], [3.0, 0.0, 0.0]]


def test_kernel_size_one_is_column_repeat():
    p = head(HeadKind.COLUMN)
    kp = KernelMixerParams.from_filters([p])
    x = torch.randn(5, 3, dtype=F64)
    torch.testing.assert_close(parallel_mix_kernel(x, kp), parallel_mix(x, p))


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 4), n=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_kernel_mix_matches_loop(k, n, seed):
    filters = [head(HeadKind.COLUMN, d_h=4, raw=0.3 * f - 0.5, seed=seed + f) for f in range(k)]
    kp = KernelMixerParams.from_filters(filters)
    x = torch.randn(n, 4, generator=torch.Generator().manual_seed(seed), dtype=F64)
    ref = kernel_mix_loop(
        x.tolist(), [f.alpha.tolist() for f in filters], [float(f.decay) for f in filters], kp.bias.tolist()
    )
    torch.testing.assert_close(parallel_mix_kernel(x, kp), torch.tensor(ref, dtype=F64))


def test_kernel_filters_only_first_has_bias():
    filters = [head(HeadKind.COLUMN, seed=s) for s in range(3)]
    kp = KernelMixerParams.from_filters(filters)
    assert torch.equal(kp.filter(0).bias, filters[0].bias)
    assert bool((kp.filter(2).bias == 0).all())
    with pytest.raises(ValueError):
        KernelMixerParams.from_filters([head(HeadKind.ROW)])
