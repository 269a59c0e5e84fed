from dataclasses import replace

import numpy as np
import pytest
import torch

from mohawk.core import ContractError, TrainingError, finite_diff_grad, max_rel_error
from mohawk.mixers import SsdParams, materialize_ssd_raw, causal_softmax_attention, AttentionMixerInputs
from mohawk.model import (
    ATTENTION,
    ModelConfig,
    StudentModel,
    as_torch,
    block_norm,
    capture_attention,
    frozen_names,
    init_teacher,
    mixer_block,
    mlp_block,
    model_backward,
    parameter_groups,
    student_forward,
    teacher_forward,
    transfer_weights,
)

from conftest import jitter


def ssd_cfg(teacher):
    return replace(teacher.cfg, layer_kinds=("ssd",) * teacher.cfg.n_layers)



def tokens(cfg, T, seed=0, batch=2):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch, T))


def test_single_token(small_teacher):
    tr = teacher_forward(small_teacher, np.array([4]))
    assert tr.logits.shape == (1, small_teacher.cfg.vocab_size)
    assert all(np.array_equal(M, np.ones((2, 1, 1))) for M in tr.mixer_matrices)


def test_trace_shapes_and_row_stochastic(small_teacher):
    tr = teacher_forward(small_teacher, tokens(small_teacher.cfg, 9))
    assert len(tr.block_inputs) == len(tr.mixer_outputs) == len(tr.mixer_matrices) == 2
    for M in tr.mixer_matrices:
        assert M.shape == (2, 2, 9, 9)
        assert np.max(np.abs(M.sum(-1) - 1)) <= 1e-12
        assert np.all(np.triu(M, 1) == 0)


def test_attention_heads_match_mixers_module(small_teacher):
    cfg = small_teacher.cfg
    tok = tokens(cfg, 7)[0]
    tr = teacher_forward(small_teacher, tok)
    h = block_norm(as_torch(small_teacher.params), 0, torch.from_numpy(tr.block_inputs[0])).numpy()
    q = h @ small_teacher.params["block0.attn.wq"]
    k = h @ small_teacher.params["block0.attn.wk"]
    hd = cfg.head_dim
    for head in range(cfg.n_heads):
        sl = slice(head * hd, (head + 1) * hd)
        ref = causal_softmax_attention(AttentionMixerInputs(q[:, sl], k[:, sl]))
        assert np.allclose(tr.mixer_matrices[0][head], ref, atol=1e-13)


def test_vocab_permutation_symmetry(small_teacher):
    V = small_teacher.cfg.vocab_size
    perm = np.random.default_rng(1).permutation(V)
    other = small_teacher.copy()
    other.params["embed.weight"] = small_teacher.params["embed.weight"][perm]
    other.params["lm_head.weight"] = small_teacher.params["lm_head.weight"][:, perm]
    tok = tokens(small_teacher.cfg, 6)
    inv = np.argsort(perm)
    a = teacher_forward(small_teacher, tok).logits
    b = teacher_forward(other, inv[tok]).logits
    assert np.allclose(a[..., perm], b, atol=1e-12)


def test_token_range_and_length_contracts(small_teacher):
    with pytest.raises(ContractError):
        teacher_forward(small_teacher, np.array([[0, 99]]))
    with pytest.raises(ContractError):
        teacher_forward(small_teacher, np.zeros((1, 13), dtype=int))


@pytest.mark.parametrize("kinds", [("ssd", "ssd"), ("attention", "ssd"), ("ssd", "attention")])
def test_causality(small_teacher, kinds):
    cfg = replace(small_teacher.cfg, layer_kinds=kinds)
    student = transfer_weights(small_teacher, cfg)
    student.params = jitter(student.params, 5, 0.1)
    tok = tokens(cfg, 10, batch=1)
    for model, fwd in ((student, student_forward), (small_teacher, teacher_forward)):
        base = fwd(model, tok).logits
        for t in (0, 4, 9):
            alt = tok.copy()
            alt[0, t] = (alt[0, t] + 1) % cfg.vocab_size
            out = fwd(model, alt).logits
            assert np.array_equal(out[0, :t], base[0, :t])
            assert not np.allclose(out[0, t], base[0, t])


def test_transfer_copies_non_mixer_weights(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    for name, v in small_teacher.params.items():
        if ".attn." not in name:
            assert np.array_equal(student.params[name], v)
    for i in range(2):
        assert np.array_equal(student.params[f"block{i}.ssd.wc"], small_teacher.params[f"block{i}.attn.wq"])
        assert np.array_equal(student.params[f"block{i}.ssd.wb"], small_teacher.params[f"block{i}.attn.wk"])
        assert np.array_equal(student.params[f"block{i}.ssd.wx"], small_teacher.params[f"block{i}.attn.wv"])
        assert np.array_equal(student.params[f"block{i}.ssd.wo"], small_teacher.params[f"block{i}.attn.wo"])
        assert np.array_equal(student.params[f"block{i}.ssd.gate"], np.ones(16))
        conv = student.params[f"block{i}.ssd.conv"]
        assert np.array_equal(conv[:, 0], np.ones(16)) and np.all(conv[:, 1:] == 0)
        a = 1 / (1 + np.exp(-student.params[f"block{i}.ssd.ba"]))
        assert np.allclose(a, 0.999, atol=1e-12)


def test_transfer_mlp_outputs_bitwise_equal(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    h = torch.from_numpy(np.random.default_rng(2).normal(size=(3, 5, 16)))
    for i in range(2):
        a = mlp_block(as_torch(small_teacher.params), i, h)
        b = mlp_block(as_torch(student.params), i, h)
        assert torch.equal(a, b)


def test_transfer_shape_contract(small_teacher):
    with pytest.raises(ContractError):
        transfer_weights(small_teacher, ModelConfig(vocab_size=13, d_model=16, n_layers=2, n_heads=4, d_mlp=32))


def test_injection_oracle_every_layer(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    tr = teacher_forward(small_teacher, tokens(small_teacher.cfg, 8))
    P = as_torch(student.params)
    for i in range(2):
        h = block_norm(P, i, torch.from_numpy(tr.block_inputs[i]))
        y, _ = mixer_block(P, i, h, student.cfg, "ssd", torch.from_numpy(tr.mixer_matrices[i]))
        assert np.max(np.abs(y.numpy() - tr.mixer_outputs[i])) <= 1e-10


def test_full_injection_reproduces_teacher_logits(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    tok = tokens(small_teacher.cfg, 8)
    tr = teacher_forward(small_teacher, tok)
    out = student_forward(student, tok, inject=dict(enumerate(tr.mixer_matrices)))
    assert np.max(np.abs(out.logits - tr.logits)) <= 1e-10


def test_all_attention_student_is_teacher(small_teacher):
    student = transfer_weights(small_teacher, small_teacher.cfg.all_attention())
    tok = tokens(small_teacher.cfg, 11)
    assert np.max(np.abs(student_forward(student, tok).logits - teacher_forward(small_teacher, tok).logits)) <= 1e-12


def test_student_linear_attention_limit(small_teacher):
    cfg = ssd_cfg(small_teacher)
    student = transfer_weights(small_teacher, cfg)
    tok = tokens(cfg, 9)[0]
    tr_t = teacher_forward(small_teacher, tok)
    # a -> 1: the student mixer is causal C B^T per head
    for i in range(2):
        student.params[f"block{i}.ssd.ba"] = np.full(cfg.n_heads, 60.0)
    tr = student_forward(student, tok)
    h = block_norm(as_torch(student.params), 0, torch.from_numpy(tr.block_inputs[0])).numpy()
    C = h @ student.params["block0.ssd.wc"]
    B = h @ student.params["block0.ssd.wb"]
    for head in range(cfg.n_heads):
        sl = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
        ref = materialize_ssd_raw(np.zeros(9), B[:, sl], C[:, sl])
        assert np.allclose(tr.mixer_matrices[0][head], ref, atol=1e-10)
    assert np.array_equal(tr.block_inputs[0], tr_t.block_inputs[0])


def test_student_matrices_match_mixers_ssd(small_teacher):
    cfg = ssd_cfg(small_teacher)
    student = transfer_weights(small_teacher, cfg)
    student.params = jitter(student.params, 7, 0.2)
    tok = tokens(cfg, 8)[1]
    tr = student_forward(student, tok)
    h = block_norm(as_torch(student.params), 1, torch.from_numpy(tr.block_inputs[1])).numpy()
    C = h @ student.params["block1.ssd.wc"]
    B = h @ student.params["block1.ssd.wb"]
    logits = h @ student.params["block1.ssd.wa"] + student.params["block1.ssd.ba"]
    for head in range(cfg.n_heads):
        sl = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
        ref = SsdParams(logits[:, head], B[:, sl], C[:, sl])
        from mohawk.mixers import materialize_ssd

        assert np.allclose(tr.mixer_matrices[1][head], materialize_ssd(ref), atol=1e-12)
        assert np.all(np.triu(tr.mixer_matrices[1][head], 1) == 0)


def test_zero_embedding_row_kills_x_path(small_teacher):
    cfg = ssd_cfg(small_teacher)
    student = transfer_weights(small_teacher, cfg)
    student.params["embed.weight"][5] = 0.0
    student.params["pos.weight"][:] = 0.0
    student.params["block0.ln.bias"][:] = 0.0
    tok = np.array([5, 1, 2])
    P = as_torch(student.params)
    tr = student_forward(student, tok)
    # position 0 sees only itself, and LN of a zero row is the (zero) bias, so X_0 = 0
    h = block_norm(P, 0, torch.from_numpy(tr.block_inputs[0][None]))
    y, _ = mixer_block(P, 0, h, cfg, "ssd")
    assert np.all(y.numpy()[0, 0] == 0)


@pytest.mark.parametrize("spec", ["teacher_ce", "stage1", "stage2", "stage3"])
def test_model_backward_matches_finite_differences(small_teacher, spec):
    cfg = ssd_cfg(small_teacher)
    student = transfer_weights(small_teacher, cfg)
    student.params = jitter(student.params, 11, 0.1)
    T = 8
    tok = tokens(cfg, T + 1 if spec == "teacher_ce" else T, seed=4)
    model = small_teacher if spec == "teacher_ce" else student
    _, grads = model_backward(model, tok, spec, teacher=small_teacher)
    rng = np.random.default_rng(0)
    for name, g in grads.items():
        x = model.params[name]
        idx = rng.choice(x.size, size=min(5, x.size), replace=False)

        def f(v, name=name):
            m = model.copy()
            m.params[name] = v
            return model_backward(m, tok, spec, teacher=small_teacher, trainable=[])[0]

        assert max_rel_error(g.reshape(-1)[idx], finite_diff_grad(f, x, indices=idx)) <= 1e-4, name


def test_stage_trainable_sets(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    tok = tokens(small_teacher.cfg, 6)
    _, g1 = model_backward(student, tok, "stage1", teacher=small_teacher)
    assert set(g1) == {f"block{i}.ssd.{p}" for i in range(2) for p in ("wc", "wb", "wa", "ba")}
    _, g2 = model_backward(student, tok, "stage2", teacher=small_teacher)
    assert all(".ssd." in n for n in g2) and len(g2) == 16


def test_frozen_parameters_get_no_gradient(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    frozen = frozen_names(student, ["mlp", "embedding", "lm_head"])
    _, g = model_backward(student, tokens(student.cfg, 6), "stage3", teacher=small_teacher, frozen=frozen)
    assert not frozen & set(g)
    assert "pos.weight" in frozen and "block0.mlp.w1" in frozen
    with pytest.raises(ContractError):
        frozen_names(student, ["nope"])
    assert parameter_groups(student)["attention_layers"] == []


def test_backward_linearity(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    tok = tokens(student.cfg, 6)
    l1, g1 = model_backward(student, tok, "stage3", teacher=small_teacher)
    l2, g2 = model_backward(student, tok, "stage3", teacher=small_teacher, scale=2.0)
    assert l2 == 2 * l1
    assert all(np.array_equal(g2[k], 2 * g1[k]) for k in g1)


def test_non_finite_reports_layer(small_teacher):
    student = transfer_weights(small_teacher, ssd_cfg(small_teacher))
    student.params["block1.ssd.wc"] = student.params["block1.ssd.wc"] * np.inf
    with pytest.raises(TrainingError):
        model_backward(student, tokens(student.cfg, 6), "stage1", teacher=small_teacher)


def test_stage1_loss_zero_when_matrices_match(small_teacher):
    # an all-attention student reproduces every teacher matrix exactly
    student = transfer_weights(small_teacher, small_teacher.cfg.all_attention())
    loss, grads = model_backward(student, tokens(student.cfg, 6), "stage1", teacher=small_teacher)
    assert loss <= 1e-140 and grads == {}


def test_capture_attention_order(small_teacher):
    W = tokens(small_teacher.cfg, 7, batch=3)
    mats = capture_attention(small_teacher, W)
    assert mats.shape == (3 * 2 * 2, 7, 7)
    tr = teacher_forward(small_teacher, W)
    assert np.array_equal(mats[5], tr.mixer_matrices[0][1, 1])
    assert capture_attention(small_teacher, W, 5).shape[0] == 5


def test_teacher_init_is_deterministic(small_cfg):
    a, b = init_teacher(small_cfg, 4), init_teacher(small_cfg, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert ModelConfig().layer_kinds == ("ssd", "ssd")
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ContractError):
        ModelConfig(layer_kinds=("ssd",))
