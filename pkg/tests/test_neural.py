import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from accent_units import neural
from accent_units.exceptions import ContractError
from accent_units.neural import (
    AdapterConfig,
    EncoderConfig,
    LRSchedule,
    adapter_forward,
    adapter_param_count,
    add_adapters,
    encoder_forward,
    finite_difference_check,
    init_params,
    layer_norm,
    loss_and_grads,
    optimizer_step,
)


def _randomize(params, seed=0, scale=0.3):
    """Give every tensor (including zero-initialised ones) generic values."""
    g = torch.Generator().manual_seed(seed)
    for name, t in params.tensors.items():
        params.tensors[name] = t + scale * torch.randn(t.shape, generator=g, dtype=t.dtype)
    return params


def _np_ln(x, w, b, eps=neural.LN_EPS):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def test_zero_layers_is_embedding_plus_position():
    cfg = EncoderConfig(layers=0, model_dim=8, heads=2, ffn_dim=16, max_len=10, vocab_out=5)
    p = _randomize(init_params(cfg, seed=1).to(torch.float64))
    x = torch.tensor([0, 3, 5, 1])
    _, logits = encoder_forward(p, x)
    t = {k: v.numpy() for k, v in p.tensors.items()}
    h = t["embed.weight"][x.numpy()] + t["pos.weight"][:4]
    expect = _np_ln(h, t["final_ln.weight"], t["final_ln.bias"]) @ t["out.weight"] + t["out.bias"]
    assert np.allclose(logits.numpy(), expect, atol=1e-12)


def test_one_layer_matches_hand_computation():
    cfg = EncoderConfig(layers=1, model_dim=4, heads=2, ffn_dim=6, max_len=3, vocab_out=3)
    p = _randomize(init_params(cfg, seed=2).to(torch.float64), seed=5)
    x = np.array([2, 0, 1])
    _, logits = encoder_forward(p, torch.from_numpy(x))
    t = {k: v.numpy() for k, v in p.tensors.items()}
    h = t["embed.weight"][x] + t["pos.weight"][:3]
    a = _np_ln(h, t["L0.ln1.weight"], t["L0.ln1.bias"])
    qkv = a @ t["L0.attn.qkv.weight"] + t["L0.attn.qkv.bias"]
    heads = []
    for hd in range(2):
        q = qkv[:, 0 + 2 * hd:2 + 2 * hd]
        k = qkv[:, 4 + 2 * hd:6 + 2 * hd]
        v = qkv[:, 8 + 2 * hd:10 + 2 * hd]
        s = q @ k.T / math.sqrt(2)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        heads.append(w @ v)
    h = h + np.concatenate(heads, 1) @ t["L0.attn.out.weight"] + t["L0.attn.out.bias"]
    f = _np_ln(h, t["L0.ln2.weight"], t["L0.ln2.bias"])
    f = np.maximum(f @ t["L0.ffn.in.weight"] + t["L0.ffn.in.bias"], 0) @ t["L0.ffn.out.weight"] + t["L0.ffn.out.bias"]
    h = h + f
    expect = _np_ln(h, t["final_ln.weight"], t["final_ln.bias"]) @ t["out.weight"] + t["out.bias"]
    assert np.allclose(logits.numpy(), expect, atol=1e-10)


def test_batch_permutation_equivariance():
    cfg = EncoderConfig(layers=2, model_dim=8, heads=2, ffn_dim=16, max_len=12, vocab_out=6)
    p = init_params(cfg, seed=3).to(torch.float64)
    x = torch.tensor([[1, 2, 3, 4, 6], [5, 5, 0, 6, 6], [0, 1, 0, 1, 0]])
    pad = torch.tensor([[0, 0, 0, 0, 1], [0, 0, 0, 1, 1], [0, 0, 0, 0, 0]], dtype=torch.bool)
    perm = torch.tensor([2, 0, 1])
    _, a = encoder_forward(p, x, pad)
    _, b = encoder_forward(p, x[perm], pad[perm])
    assert torch.allclose(a[perm], b, atol=1e-12)


def test_adapter_with_zero_up_is_layer_norm():
    g = torch.Generator().manual_seed(0)
    h = torch.randn(5, 8, generator=g, dtype=torch.float64)
    out = adapter_forward(h, torch.randn(8, 3, generator=g, dtype=torch.float64), torch.ones(3, dtype=torch.float64),
                          torch.zeros(3, 8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64),
                          torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert torch.equal(out, layer_norm(h, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)))


def test_adapter_scalar_hand_computation():
    one = torch.ones(1, 1, dtype=torch.float64)
    zero = torch.zeros(1, dtype=torch.float64)
    ln_w, ln_b = torch.tensor([1.5], dtype=torch.float64), torch.tensor([0.25], dtype=torch.float64)
    out = adapter_forward(torch.tensor([[2.0]], dtype=torch.float64), one, zero, one, zero, ln_w, ln_b)
    # 2 + relu(2) = 4; a single feature normalises to 0, leaving the bias
    assert out.item() == pytest.approx(0.25)


def test_adapter_shape_mismatch():
    with pytest.raises(ContractError):
        adapter_forward(torch.zeros(2, 4), torch.zeros(3, 2), torch.zeros(2), torch.zeros(2, 4),
                        torch.zeros(4), torch.ones(4), torch.zeros(4))


def test_identity_adapters_reduce_to_layer_norms():
    cfg = EncoderConfig(layers=2, model_dim=8, heads=2, ffn_dim=16, max_len=12, vocab_out=6)
    base = _randomize(init_params(cfg, seed=4).to(torch.float64))
    with_ad = add_adapters(base, AdapterConfig(3), seed=1)
    x = torch.tensor([1, 4, 2, 2, 0])
    _, got = encoder_forward(with_ad, x)

    # reference pass with a bare layer norm at every adapter placement
    t = base.tensors
    ones, zeros = torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
    h = t["embed.weight"][x] + t["pos.weight"][:5]
    for i in range(2):
        pre = f"L{i}."
        a = layer_norm(h, t[pre + "ln1.weight"], t[pre + "ln1.bias"])
        h = h + neural._attention(t, pre + "attn.", a[None], None, 2, 0.0, False, None)[0]
        h = layer_norm(h, ones, zeros)
        f = layer_norm(h, t[pre + "ln2.weight"], t[pre + "ln2.bias"])
        h = h + torch.relu(f @ t[pre + "ffn.in.weight"] + t[pre + "ffn.in.bias"]) @ t[pre + "ffn.out.weight"] + t[pre + "ffn.out.bias"]
        h = layer_norm(h, ones, zeros)
    want = layer_norm(h, t["final_ln.weight"], t["final_ln.bias"]) @ t["out.weight"] + t["out.bias"]
    assert float((got - want).abs().max()) < 1e-6


def test_uniform_logits_loss_is_log_v():
    cfg = EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=7)
    p = init_params(cfg, seed=0)
    p.tensors["out.weight"].zero_()
    p.tensors["out.bias"].zero_()
    loss, _ = loss_and_grads(p, torch.tensor([[1, 2, 3]]), torch.tensor([[0, 5, 6]]),
                             torch.tensor([[True, True, False]]))
    assert loss == pytest.approx(math.log(7), rel=1e-6)


def test_duplicated_batch_keeps_mean_loss():
    cfg = EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=7)
    p = init_params(cfg, seed=0).to(torch.float64)
    x = torch.tensor([[1, 7, 3, 2], [4, 4, 7, 0]])
    y = torch.tensor([[1, 2, 3, 2], [4, 4, 5, 0]])
    m = torch.tensor([[False, True, False, True], [False, False, True, False]])
    a, _ = loss_and_grads(p, x, y, m)
    b, _ = loss_and_grads(p, torch.cat([x, x]), torch.cat([y, y]), torch.cat([m, m]))
    assert a == pytest.approx(b, rel=1e-12)


def test_empty_loss_mask_rejected():
    cfg = EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=7)
    p = init_params(cfg)
    with pytest.raises(ContractError):
        loss_and_grads(p, torch.tensor([[1, 2]]), torch.tensor([[1, 2]]), torch.tensor([[False, False]]))


def test_gradients_match_finite_differences_token_model():
    cfg = EncoderConfig(layers=2, model_dim=16, heads=2, ffn_dim=24, max_len=6, vocab_out=5)
    p = add_adapters(init_params(cfg, seed=7), AdapterConfig(4), seed=2, up_std=0.1)
    p = _randomize(p.to(torch.float64), seed=3, scale=0.1)
    x = torch.tensor([[0, 5, 2, 3, 1], [4, 4, 5, 1, 0]])
    y = torch.tensor([[0, 1, 2, 3, 1], [4, 4, 2, 1, 0]])
    m = torch.tensor([[True, True, False, True, False], [False, True, True, False, True]])
    pad = torch.tensor([[False] * 5, [False, False, False, False, True]])
    report = finite_difference_check(p, x, y, m, eps=1e-5, pad_mask=pad)
    assert set(report) == set(p.tensors)
    assert max(report.values()) < 1e-3, report


def test_gradients_match_finite_differences_feature_model():
    cfg = EncoderConfig(layers=2, model_dim=16, heads=2, ffn_dim=16, max_len=6, vocab_out=4,
                        input_kind="feature", input_dim=3)
    p = add_adapters(init_params(cfg, seed=8), AdapterConfig(2), seed=2, up_std=0.1)
    p = _randomize(p.to(torch.float64), seed=4, scale=0.1)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 3, generator=g, dtype=torch.float64)
    y = torch.tensor([[0, 1, 2, 3, 1], [3, 3, 2, 1, 0]])
    fm = torch.tensor([[False, True, True, False, False], [True, False, False, False, True]])
    report = finite_difference_check(p, x, y, fm, eps=1e-5, feature_mask=fm)
    assert {"mask_embed", "input_proj.weight", "input_ln.weight"} <= set(report)
    assert max(report.values()) < 1e-3, report


def test_frozen_parameters_unchanged_bit_exact():
    cfg = EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=5)
    p = init_params(cfg, seed=0)
    p.freeze(["embed.weight"])
    before = p.tensors["embed.weight"].clone()
    loss, grads = loss_and_grads(p, torch.tensor([[1, 2, 3]]), torch.tensor([[1, 2, 3]]),
                                 torch.tensor([[True, True, True]]))
    grads["embed.weight"] = torch.ones_like(before)
    optimizer_step(p, grads, 1, LRSchedule(1e-2, 0, 10))
    assert torch.equal(p.tensors["embed.weight"], before)
    assert "embed.weight" not in p.trainable()


def test_schedule_knots():
    s = LRSchedule(peak_lr=3e-3, warmup_steps=5, total_steps=15)
    assert s.lr(5) == pytest.approx(3e-3)
    assert s.lr(1) == pytest.approx(6e-4)
    assert s.lr(10) == pytest.approx(1.5e-3)
    assert s.lr(15) == 0.0
    with pytest.raises(ContractError):
        s.lr(0)


def test_scalar_adam_trace():
    cfg = EncoderConfig(layers=0, model_dim=1, heads=1, ffn_dim=1, max_len=1, vocab_out=1)
    p = init_params(cfg, dtype=torch.float64)
    p.freeze([n for n in p.tensors if n != "out.bias"])
    p.tensors["out.bias"] = torch.tensor([0.5], dtype=torch.float64)
    sched = LRSchedule(0.1, 0, 3)
    w, m, v = 0.5, 0.0, 0.0
    for step, g in enumerate([0.2, -0.4, 1.0], start=1):
        optimizer_step(p, {"out.bias": torch.tensor([g], dtype=torch.float64)}, step, sched)
        lr = 0.1 * (3 - step) / 3
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** step)) / (math.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        assert p.tensors["out.bias"].item() == pytest.approx(w, rel=1e-12, abs=1e-15)


@given(st.integers(1, 64), st.integers(1, 64))
def test_adapter_count_formula(D, B):
    cfg = EncoderConfig(layers=1, model_dim=D, heads=1, ffn_dim=4, max_len=2, vocab_out=3)
    p = add_adapters(init_params(cfg), AdapterConfig(B))
    names = [n for n in p.tensors if n.startswith("adapter.L0.attn.")]
    assert sum(p.tensors[n].numel() for n in names) == adapter_param_count(D, B) == 2 * D * B + B + 3 * D


def test_checkpoint_roundtrip(tmp_path):
    cfg = EncoderConfig(layers=1, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=5,
                        input_kind="feature", input_dim=3)
    p = add_adapters(init_params(cfg, seed=1), AdapterConfig(2))
    p.freeze(p.backbone_names())
    neural.save_params(p, tmp_path / "m.encp")
    back = neural.load_params(tmp_path / "m.encp")
    assert back.config == cfg and back.adapter == AdapterConfig(2)
    assert back.frozen == p.frozen
    assert neural.params_to_bytes(back) == neural.params_to_bytes(p)
    with pytest.raises(ContractError):
        neural.params_from_bytes(b"NOPE" + neural.params_to_bytes(p)[4:])


def test_strip_restores_backbone_table():
    cfg = EncoderConfig(layers=2, model_dim=8, heads=2, ffn_dim=8, max_len=8, vocab_out=5)
    p = init_params(cfg, seed=1)
    assert neural.params_to_bytes(neural.strip_adapters(add_adapters(p, AdapterConfig(4)))) == neural.params_to_bytes(p)
