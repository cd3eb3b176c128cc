import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_differences, tensor_relative_error
from srm.checkpoint import load_checkpoint
from srm.config import SrmConfig, TrainConfig
from srm.equivalence import perturbed_model
from srm.mixing import HeadKind, MixerHeadParams, parallel_mix
from srm.model import SrmModel
from srm.training import (
    CopyTaskSpec,
    EmptyMaskError,
    NonFiniteError,
    backward,
    copy_data,
    copy_task_batch,
    lr_at,
    make_optimizer,
    optimizer_step,
    prediction_mask,
    shifted_ce_loss,
    train_copy_task,
    train_loop,
)

# upper 1% point of the chi-square distribution with 15 degrees of freedom
CHI2_15_Q99 = 30.578


def test_shifted_loss_hand_case():
    logits = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.0]]], dtype=torch.float64)
    tokens = torch.tensor([[2, 0, 1]])
    mask = torch.tensor([[True, True, False]])
    sm0 = math.e / (math.e + 2)
    sm1 = math.e**2 / (math.e**2 + 2)
    loss, per_pos = shifted_ce_loss(logits, tokens, mask)
    assert loss.item() == pytest.approx(0.5 * (-math.log(sm0) - math.log(sm1)), rel=1e-12)
    assert per_pos.shape == (1, 2)


def test_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        shifted_ce_loss(torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 3, dtype=torch.bool))


def test_prediction_mask_shifts_left():
    target = torch.tensor([[False, False, True, True]])
    assert prediction_mask(target).tolist() == [[False, True, True, False]]


def test_unused_bias_positions_get_zero_gradient():
    model = SrmModel(SrmConfig(d_model=8, n_layers=1, n_heads=2, n_ctx=10, vocab_size=11))
    tokens = torch.randint(0, 11, (2, 6))
    loss, _ = shifted_ce_loss(model(tokens), tokens, torch.ones(2, 6, dtype=torch.bool))
    grads = backward(loss, model)
    for name, g in grads.items():
        if name.endswith("banks.row.bias") or name.endswith("banks.column.bias"):
            assert bool((g[:, 6:] == 0).all())
            assert bool((g[:, :6] != 0).any())


def test_decay_chain_rule_on_two_tokens():
    theta = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    alpha = torch.tensor([0.7, -1.3], dtype=torch.float64)
    p = MixerHeadParams(HeadKind.COLUMN, alpha, theta, torch.zeros(2, 1, dtype=torch.float64))
    x = torch.tensor([[2.0], [5.0]], dtype=torch.float64)
    y = parallel_mix(x, p)
    # y[1] = alpha[1] * (x[1] + lam * x[0]) and d lam / d theta at 0 is 0.1 * 0.25
    y[1].sum().backward()
    assert theta.grad.item() == pytest.approx(alpha[1].item() * 2.0 * 0.025, rel=1e-12)


def test_nonfinite_gradient_names_parameter():
    model = SrmModel(SrmConfig(d_model=8, n_layers=1, n_heads=2, n_ctx=4, vocab_size=5))
    loss = (model.lm_head.weight * float("inf")).sum()
    with pytest.raises(NonFiniteError) as info:
        backward(loss, model)
    assert info.value.name == "lm_head.weight"


def test_backward_does_not_touch_parameters():
    model = SrmModel(SrmConfig(d_model=8, n_layers=1, n_heads=2, n_ctx=6, vocab_size=7))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    tokens = torch.randint(0, 7, (2, 6))
    backward(shifted_ce_loss(model(tokens), tokens, torch.ones(2, 6, dtype=torch.bool))[0], model)
    for k, v in model.state_dict().items():
        assert torch.equal(before[k], v)


@pytest.mark.parametrize(
    "mode,k", [("mixed", 1), ("combined", 1), ("row_only", 1), ("column_only", 1), ("column_only", 3)]
)
def test_gradients_match_finite_differences(mode, k):
    cfg = SrmConfig(d_model=8, n_layers=1, n_heads=2, n_ctx=6, vocab_size=7, head_mode=mode, kernel_size=k,
                    diag_const_enabled=True)
    model = perturbed_model(cfg, seed=1).double()
    tokens = torch.randint(0, 7, (2, 6), generator=torch.Generator().manual_seed(1))
    mask = torch.ones(2, 6, dtype=torch.bool)

    def loss():
        return shifted_ce_loss(model(tokens), tokens, mask)[0]

    grads = backward(loss(), model)
    assert {n for n, _ in model.named_parameters()} == set(grads)
    for name, p in model.named_parameters():
        err = tensor_relative_error(grads[name], central_differences(loss, p, step=1e-3))
        assert err <= 1e-3, (name, err)


# ---------------------------------------------------------------- optimizer


def test_warmup_first_step():
    assert lr_at(0, 5e-4, 4000, 100_000) == pytest.approx(5e-4 / 4000)


@settings(max_examples=100, deadline=None)
@given(warmup=st.integers(0, 50), total=st.integers(1, 200), base=st.floats(1e-6, 1.0))
def test_schedule_shape(warmup, total, base):
    lrs = [lr_at(s, base, warmup, total) for s in range(total)]
    assert all(0 <= v <= base * (1 + 1e-12) for v in lrs)
    peak = min(warmup, total)
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1 :]))


def test_zero_gradient_step_is_pure_weight_decay():
    model = torch.nn.Linear(3, 2)
    cfg = TrainConfig(lr=0.01, warmup_steps=0, weight_decay=0.1, steps=10)
    before = [p.detach().clone() for p in model.parameters()]
    opt = make_optimizer(model, cfg)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    optimizer_step(model, opt, 0, cfg)
    for b, p in zip(before, model.parameters()):
        torch.testing.assert_close(p.detach(), b * (1 - 0.01 * 0.1))


def test_two_adam_steps_by_hand():
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    holder = torch.nn.Module()
    holder.w = w
    cfg = TrainConfig(lr=0.1, warmup_steps=0, steps=4, beta1=0.9, beta2=0.999, eps=1e-8)
    opt = make_optimizer(holder, cfg)
    value, m, v = 1.0, 0.0, 0.0
    for step in range(2):
        w.grad = torch.ones_like(w)
        optimizer_step(holder, opt, step, cfg)
        lr = 0.1 * (4 - step) / 4
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        m_hat = m / (1 - 0.9 ** (step + 1))
        v_hat = v / (1 - 0.999 ** (step + 1))
        value -= lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert w.item() == pytest.approx(value, rel=1e-12)


# ---------------------------------------------------------------- copy task


def test_copy_batch_layout():
    spec = CopyTaskSpec(3, payload_ids=(5, 9, 2), delimiter_id=99)
    tokens, mask = copy_task_batch(spec, 16, seed=0)
    assert tokens.shape == (16, 7)
    assert bool((tokens[:, :3] == tokens[:, 4:]).all())
    assert bool((tokens[:, 3] == 99).all())
    assert mask[0].tolist() == [False] * 4 + [True] * 3


def test_copy_batch_seeded():
    spec = CopyTaskSpec(5)
    a, _ = copy_task_batch(spec, 8, seed=3)
    b, _ = copy_task_batch(spec, 8, seed=3)
    c, _ = copy_task_batch(spec, 8, seed=4)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_copy_payload_uniform_chi_square():
    spec = CopyTaskSpec(1)
    tokens, _ = copy_task_batch(spec, 10_000, seed=0)
    counts = torch.bincount(tokens[:, 0] - spec.payload_ids[0], minlength=16).double()
    expected = 10_000 / 16
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert stat < CHI2_15_Q99


# ---------------------------------------------------------------- loop


def tiny_run(tmp_path, **kw):
    cfg = SrmConfig(d_model=16, n_layers=1, n_heads=2, n_ctx=9)
    tc = TrainConfig(steps=kw.pop("steps", 6), batch_size=4, lr=1e-3, warmup_steps=2, copy_len=4,
                     eval_every=3, eval_batches=1, record_wall_time=False, **kw)
    log = tmp_path / "log.jsonl"
    ckpt = tmp_path / "ckpt.srm"
    return cfg, tc, train_copy_task(cfg, tc, log_path=log, checkpoint_path=ckpt), log, ckpt


def test_zero_steps_checkpoint_is_initialization(tmp_path):
    cfg, tc, result, _, ckpt = tiny_run(tmp_path, steps=0)
    torch.manual_seed(tc.seed)
    fresh = SrmModel(cfg)
    loaded, _, extra = load_checkpoint(ckpt)
    assert extra == {"step": 0}
    for (k, a), b in zip(fresh.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), k


def test_metrics_logged_and_deterministic(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    *_, log_a, ckpt = tiny_run(tmp_path / "a")
    *_, log_b, _ = tiny_run(tmp_path / "b")
    assert log_a.read_bytes() == log_b.read_bytes()
    records = [json.loads(line) for line in log_a.read_text().splitlines()]
    last = records[-1]
    for key in ("step", "loss", "lr", "grad_norm", "decay", "accuracy"):
        assert key in last
    assert len(last["decay"]) == 1 and all(0.9 < v <= 1.0 for v in last["decay"][0])
    _, optim, _ = load_checkpoint(ckpt)
    assert any(k.endswith("exp_avg_sq") for k in optim)


def test_nonfinite_loss_keeps_last_good_parameters(tmp_path):
    cfg = SrmConfig(d_model=8, n_layers=1, n_heads=2, n_ctx=9)
    tc = TrainConfig(steps=10, batch_size=2, warmup_steps=1, copy_len=4, record_wall_time=False)
    base = copy_data(CopyTaskSpec(4), 2, 0)
    torch.manual_seed(0)
    model = SrmModel(cfg)
    good = {}

    def data(step):
        if step == 2:  # the last parameters whose loss will be finite
            good.update({k: v.clone() for k, v in model.state_dict().items()})
        if step == 3:
            with torch.no_grad():
                model.lm_head.weight.fill_(float("nan"))
        return base(step)

    ckpt = tmp_path / "last.srm"
    with pytest.raises(NonFiniteError):
        train_loop(cfg, tc, data, model=model, checkpoint_path=ckpt)
    loaded, _, extra = load_checkpoint(ckpt)
    assert extra == {"step": 3}
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, good[k]), k


def test_copy_training_improves_loss():
    cfg = SrmConfig(d_model=64, n_layers=2, n_heads=4, n_ctx=17)
    tc = TrainConfig(steps=500, batch_size=16, lr=1e-3, warmup_steps=50, copy_len=8, record_wall_time=False)
    result = train_loop(cfg, tc, copy_data(CopyTaskSpec(8), 16, 0), log_every=50)
    losses = {r["step"]: r["loss"] for r in result.metrics}
    assert losses[500] < losses[50]
