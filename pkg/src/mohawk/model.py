"""Toy Phi-style teacher Transformer and its Phi-Mamba student.

Parameters live in flat ``{name: float64 ndarray}`` dicts so they can be
checkpointed, frozen by name, and updated by ``core.adamw_step``. Forward and
backward passes run through torch (float64) on zero-copy views of those arrays.

Block layout (shared input norm, parallel mixer and MLP)::

    h = LN(x);  x = x + Mixer(h) + MLP(h)

Mixer is multi-head causal softmax attention in the teacher. In the student it
is a discrete-time, Delta-free SSD layer per head::

    C = h Wc, B = h Wb, X = conv(h Wx), a = sigmoid(h Wa + ba)
    y = gate * (L(a) o C B^T) X;  out = y Wo
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .core import ContractError, TrainingError, substream
from .mixers import logit

ATTENTION = "attention"
SSD = "ssd"

INIT_DECAY = 0.999
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 256
    max_seq_len: int = 256
    layer_kinds: tuple = ()
    conv_width: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        kinds = tuple(self.layer_kinds) or (SSD,) * self.n_layers
        if len(kinds) != self.n_layers or any(k not in (ATTENTION, SSD) for k in kinds):
            raise ContractError(f"layer_kinds must list {self.n_layers} entries from {{attention, ssd}}")
        object.__setattr__(self, "layer_kinds", kinds)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def all_attention(self) -> "ModelConfig":
        return replace(self, layer_kinds=(ATTENTION,) * self.n_layers)


@dataclass
class LanguageModel:
    cfg: ModelConfig
    params: dict

    def copy(self):
        return type(self)(self.cfg, {k: v.copy() for k, v in self.params.items()})

    @property
    def kinds(self) -> tuple:
        return self.cfg.layer_kinds


class TeacherModel(LanguageModel):
    def __init__(self, cfg: ModelConfig, params: dict):
        super().__init__(cfg.all_attention(), params)


class StudentModel(LanguageModel):
    pass


@dataclass
class ForwardTrace:
    logits: np.ndarray
    block_inputs: list = field(default_factory=list)
    mixer_outputs: list = field(default_factory=list)
    mixer_matrices: list = field(default_factory=list)


# --- parameters ------------------------------------------------------------


def _attn_names(i):
    return [f"block{i}.attn.{p}" for p in ("wq", "wk", "wv", "wo")]


def _ssd_names(i):
    return [f"block{i}.ssd.{p}" for p in ("wc", "wb", "wx", "wa", "ba", "conv", "gate", "wo")]


def init_teacher(cfg: ModelConfig, seed: int = 0) -> TeacherModel:
    rng = substream(seed, "teacher-init")
    d, V = cfg.d_model, cfg.vocab_size

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    # residual-branch outputs get the usual depth-scaled init
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    p = {"embed.weight": normal(V, d), "pos.weight": normal(cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p[f"block{i}.ln.scale"] = np.ones(d)
        p[f"block{i}.ln.bias"] = np.zeros(d)
        p[f"block{i}.attn.wq"] = normal(d, d)
        p[f"block{i}.attn.wk"] = normal(d, d)
        p[f"block{i}.attn.wv"] = normal(d, d)
        p[f"block{i}.attn.wo"] = normal(d, d, std=out_std)
        p[f"block{i}.mlp.w1"] = normal(d, cfg.d_mlp)
        p[f"block{i}.mlp.b1"] = np.zeros(cfg.d_mlp)
        p[f"block{i}.mlp.w2"] = normal(cfg.d_mlp, d, std=out_std)
        p[f"block{i}.mlp.b2"] = np.zeros(d)
    p["final_ln.scale"] = np.ones(d)
    p["final_ln.bias"] = np.zeros(d)
    p["lm_head.weight"] = normal(d, V)
    return TeacherModel(cfg, p)


def transfer_weights(teacher: TeacherModel, cfg: ModelConfig) -> StudentModel:
    """Build a student from a teacher.

    Everything outside the mixers is copied. Attention layers that the layout
    keeps are copied verbatim; every other layer becomes an SSD mixer seeded
    from the attention projections (query -> C, key -> B, value -> X), with an
    identity convolution, an open gate and decays near 1.
    """
    tc = teacher.cfg
    if (tc.d_model, tc.n_heads, tc.n_layers, tc.vocab_size, tc.d_mlp) != (
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.vocab_size,
        cfg.d_mlp,
    ) or cfg.max_seq_len > tc.max_seq_len:
        raise ContractError("student config is not shape-compatible with the teacher")
    src = teacher.params
    p = {k: v.copy() for k, v in src.items() if ".attn." not in k}
    if cfg.max_seq_len < tc.max_seq_len:
        p["pos.weight"] = p["pos.weight"][: cfg.max_seq_len].copy()
    d, H = cfg.d_model, cfg.n_heads
    for i, kind in enumerate(cfg.layer_kinds):
        if kind == ATTENTION:
            for name in _attn_names(i):
                p[name] = src[name].copy()
            continue
        p[f"block{i}.ssd.wc"] = src[f"block{i}.attn.wq"].copy()
        p[f"block{i}.ssd.wb"] = src[f"block{i}.attn.wk"].copy()
        p[f"block{i}.ssd.wx"] = src[f"block{i}.attn.wv"].copy()
        p[f"block{i}.ssd.wo"] = src[f"block{i}.attn.wo"].copy()
        p[f"block{i}.ssd.wa"] = np.zeros((d, H))
        p[f"block{i}.ssd.ba"] = np.full(H, logit(INIT_DECAY))
        conv = np.zeros((d, cfg.conv_width))
        conv[:, 0] = 1.0
        p[f"block{i}.ssd.conv"] = conv
        p[f"block{i}.ssd.gate"] = np.ones(d)
    return StudentModel(cfg, p)


def parameter_groups(model: LanguageModel) -> dict:
    """Names of parameters belonging to each freezable group."""
    names = list(model.params)
    return {
        "embedding": [n for n in names if n.startswith(("embed.", "pos."))],
        "lm_head": [n for n in names if n.startswith("lm_head.")],
        "mlp": [n for n in names if ".mlp." in n],
        "layernorm": [n for n in names if ".ln." in n or n.startswith("final_ln.")],
        "attention_layers": [n for n in names if ".attn." in n],
    }


def frozen_names(model: LanguageModel, freeze_set: Iterable[str]) -> set:
    groups = parameter_groups(model)
    out = set()
    for g in freeze_set:
        if g not in groups:
            raise ContractError(f"unknown freeze group {g!r}; choose from {sorted(groups)}")
        out.update(groups[g])
    return out


def mixer_param_names(model: LanguageModel, layer: int) -> list:
    if model.kinds[layer] == ATTENTION:
        return [n for n in _attn_names(layer)]
    return _ssd_names(layer)


# --- torch forward ---------------------------------------------------------


def as_torch(params: dict, requires_grad: Iterable[str] = ()) -> dict:
    req = set(requires_grad)
    out = {}
    for k, v in params.items():
        t = torch.from_numpy(np.ascontiguousarray(v, dtype=np.float64))
        if k in req:
            t.requires_grad_(True)
        out[k] = t
    return out


def layer_norm(x, scale, bias):
    return F.layer_norm(x, (x.shape[-1],), scale, bias, LN_EPS)


def segsum_t(x):
    """Torch twin of ``mixers.segsum`` over the last axis."""
    T = x.shape[-1]
    strict = torch.ones(T, T, dtype=torch.bool).tril(-1)
    rep = x.unsqueeze(-1).expand(*x.shape, T).masked_fill(~strict, 0.0)
    out = torch.cumsum(rep, dim=-2)
    return out.masked_fill(~torch.ones(T, T, dtype=torch.bool).tril(), -math.inf)


def _split_heads(x, H):
    B, T, d = x.shape
    return x.view(B, T, H, d // H).transpose(1, 2)


def _merge_heads(x):
    B, H, T, hd = x.shape
    return x.transpose(1, 2).reshape(B, T, H * hd)


def attention_matrix(P, i, h, cfg):
    q = _split_heads(h @ P[f"block{i}.attn.wq"], cfg.n_heads)
    k = _split_heads(h @ P[f"block{i}.attn.wk"], cfg.n_heads)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(cfg.head_dim)
    T = h.shape[1]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    return torch.softmax(scores.masked_fill(~causal, -math.inf), dim=-1)


def ssd_matrix(P, i, h, cfg):
    c = _split_heads(h @ P[f"block{i}.ssd.wc"], cfg.n_heads)
    b = _split_heads(h @ P[f"block{i}.ssd.wb"], cfg.n_heads)
    a_logit = (h @ P[f"block{i}.ssd.wa"] + P[f"block{i}.ssd.ba"]).transpose(1, 2)  # B, H, T
    L = torch.exp(segsum_t(F.logsigmoid(a_logit)))
    return L * (c @ b.transpose(-1, -2))


def causal_conv(x, kernel):
    """Depthwise causal convolution: ``y[t] = sum_j kernel[:, j] * x[t - j]``."""
    w = kernel.shape[1]
    T = x.shape[1]
    xp = F.pad(x, (0, 0, w - 1, 0))
    y = 0
    for j in range(w):
        y = y + kernel[:, j] * xp[:, w - 1 - j : w - 1 - j + T, :]
    return y


def mixer_block(P, i, h, cfg, kind, inject=None):
    """Mixer output before the residual add, and the per-head mixer matrices."""
    if kind == ATTENTION:
        M = attention_matrix(P, i, h, cfg) if inject is None else inject
        v = _split_heads(h @ P[f"block{i}.attn.wv"], cfg.n_heads)
        return _merge_heads(M @ v) @ P[f"block{i}.attn.wo"], M
    M = ssd_matrix(P, i, h, cfg) if inject is None else inject
    x = causal_conv(h @ P[f"block{i}.ssd.wx"], P[f"block{i}.ssd.conv"])
    y = _merge_heads(M @ _split_heads(x, cfg.n_heads))
    return (y * P[f"block{i}.ssd.gate"]) @ P[f"block{i}.ssd.wo"], M


def mlp_block(P, i, h):
    z = F.gelu(h @ P[f"block{i}.mlp.w1"] + P[f"block{i}.mlp.b1"])
    return z @ P[f"block{i}.mlp.w2"] + P[f"block{i}.mlp.b2"]


def block_norm(P, i, u):
    return layer_norm(u, P[f"block{i}.ln.scale"], P[f"block{i}.ln.bias"])


def forward_t(P, tokens, cfg: ModelConfig, inject=None, keep_trace=False):
    """Full forward pass. ``inject`` maps layer index -> mixer matrices (B, H, T, T)."""
    T = tokens.shape[1]
    x = P["embed.weight"][tokens] + P["pos.weight"][:T]
    trace = ([], [], [])
    for i, kind in enumerate(cfg.layer_kinds):
        h = block_norm(P, i, x)
        y, M = mixer_block(P, i, h, cfg, kind, None if inject is None else inject.get(i))
        if keep_trace:
            trace[0].append(x)
            trace[1].append(y)
            trace[2].append(M)
        x = x + y + mlp_block(P, i, h)
    x = layer_norm(x, P["final_ln.scale"], P["final_ln.bias"])
    return x @ P["lm_head.weight"], trace


def _tokens(model: LanguageModel, tokens) -> torch.Tensor:
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] < 1:
        raise ContractError("tokens must be a (T,) or (B, T) integer array")
    if tok.shape[1] > model.cfg.max_seq_len:
        raise ContractError(f"sequence length {tok.shape[1]} exceeds max_seq_len {model.cfg.max_seq_len}")
    if tok.min() < 0 or tok.max() >= model.cfg.vocab_size:
        raise ContractError("token id out of range")
    return torch.from_numpy(tok.astype(np.int64))


def run_forward(model: LanguageModel, tokens, inject=None) -> ForwardTrace:
    """Forward pass with every per-layer internal captured as numpy arrays."""
    tok = _tokens(model, tokens)
    P = as_torch(model.params)
    inj = None if inject is None else {k: torch.as_tensor(np.asarray(v, dtype=np.float64)) for k, v in inject.items()}
    with torch.no_grad():
        logits, (inputs, outs, mats) = forward_t(P, tok, model.cfg, inj, keep_trace=True)
    squeeze = np.asarray(tokens).ndim == 1

    def conv(t):
        a = t.numpy()
        return a[0] if squeeze else a

    return ForwardTrace(conv(logits), [conv(t) for t in inputs], [conv(t) for t in outs], [conv(t) for t in mats])


def teacher_forward(model: TeacherModel, tokens) -> ForwardTrace:
    return run_forward(model, tokens)


def student_forward(model: StudentModel, tokens, inject=None) -> ForwardTrace:
    return run_forward(model, tokens, inject)


# --- losses ----------------------------------------------------------------


def safe_norm(x, dims):
    # zero distance gets a zero subgradient instead of NaN
    return torch.sqrt(torch.clamp_min((x * x).sum(dim=dims), 1e-300))


@dataclass
class TeacherBatch:
    """Teacher internals for one batch; the student's per-layer inputs come from here."""

    inputs: torch.Tensor
    targets: torch.Tensor | None
    logits: torch.Tensor
    block_inputs: list
    mixer_outputs: list
    mixer_matrices: list


def teacher_batch(teacher: LanguageModel, inputs, targets=None, P=None) -> TeacherBatch:
    P = as_torch(teacher.params) if P is None else P
    tok = torch.as_tensor(np.asarray(inputs, dtype=np.int64))
    tgt = None if targets is None else torch.as_tensor(np.asarray(targets, dtype=np.int64))
    with torch.no_grad():
        logits, (u, y, M) = forward_t(P, tok, teacher.cfg, keep_trace=True)
    return TeacherBatch(tok, tgt, logits, u, y, M)


def stage1_layer_losses(P, cfg: ModelConfig, tb: TeacherBatch):
    """Per-layer sum over heads of ||attention - student mixer||_F, averaged over the batch."""
    out = []
    for i, kind in enumerate(cfg.layer_kinds):
        h = block_norm(P, i, tb.block_inputs[i])
        M = attention_matrix(P, i, h, cfg) if kind == ATTENTION else ssd_matrix(P, i, h, cfg)
        out.append(safe_norm(tb.mixer_matrices[i] - M, (-2, -1)).sum(dim=1).mean())
    return out


def stage2_layer_losses(P, cfg: ModelConfig, tb: TeacherBatch):
    """Per-layer ||AttnBlock(u) - StudentMixerBlock(u)|| over (T, d_model), batch-averaged."""
    out = []
    for i, kind in enumerate(cfg.layer_kinds):
        h = block_norm(P, i, tb.block_inputs[i])
        y, _ = mixer_block(P, i, h, cfg, kind)
        out.append(safe_norm(tb.mixer_outputs[i] - y, (-2, -1)).mean())
    return out


def kd_loss_t(P, cfg: ModelConfig, tb: TeacherBatch):
    """Soft-target cross-entropy of the student against the teacher, mean over positions."""
    logits, _ = forward_t(P, tb.inputs, cfg)
    target = torch.softmax(tb.logits, dim=-1)
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def lm_loss_t(P, cfg: ModelConfig, inputs, targets):
    logits, _ = forward_t(P, inputs, cfg)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


LOSS_SPECS = ("teacher_ce", "stage1", "stage2", "stage3")


def loss_t(spec: str, P, cfg: ModelConfig, tb: TeacherBatch | None, inputs=None, targets=None):
    if spec == "stage1":
        return sum(stage1_layer_losses(P, cfg, tb))
    if spec == "stage2":
        return sum(stage2_layer_losses(P, cfg, tb))
    if spec == "stage3":
        return kd_loss_t(P, cfg, tb)
    if spec == "teacher_ce":
        return lm_loss_t(P, cfg, inputs, targets)
    raise ContractError(f"unknown loss spec {spec!r}; choose from {LOSS_SPECS}")


def default_trainable(model: LanguageModel, spec: str) -> list:
    if spec == "stage1":
        names = []
        for i, kind in enumerate(model.kinds):
            if kind == SSD:
                names += [f"block{i}.ssd.{p}" for p in ("wc", "wb", "wa", "ba")]
        return names
    if spec == "stage2":
        return [n for i, k in enumerate(model.kinds) if k == SSD for n in _ssd_names(i)]
    return list(model.params)


def model_backward(
    model: LanguageModel,
    tokens,
    loss_spec: str,
    teacher: LanguageModel | None = None,
    frozen: Iterable[str] = (),
    trainable: Iterable[str] | None = None,
    scale: float = 1.0,
    tb: TeacherBatch | None = None,
):
    """Loss value and exact gradients for every trainable, unfrozen parameter.

    ``tokens`` is a (B, T+1) window for ``teacher_ce`` and a (B, T) batch for
    the distillation losses. Frozen parameters are absent from the result.
    """
    names = default_trainable(model, loss_spec) if trainable is None else list(trainable)
    names = [n for n in names if n not in set(frozen)]
    P = as_torch(model.params, names)
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if loss_spec == "teacher_ce":
        inputs = torch.from_numpy(tok[:, :-1].astype(np.int64))
        targets = torch.from_numpy(tok[:, 1:].astype(np.int64))
        loss = loss_t(loss_spec, P, model.cfg, None, inputs, targets)
    else:
        if tb is None:
            if teacher is None:
                raise ContractError(f"{loss_spec} needs a teacher")
            tb = teacher_batch(teacher, tok)
        loss = loss_t(loss_spec, P, model.cfg, tb)
    loss = loss * scale
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {loss_spec} loss")
    if names:
        loss.backward()
    grads = {}
    for n in names:
        g = P[n].grad
        grads[n] = np.zeros_like(model.params[n]) if g is None else g.numpy().copy()
        if not np.all(np.isfinite(grads[n])):
            raise TrainingError(f"non-finite gradient for {n} (layer {_layer_of(n)})")
    return float(loss.detach()), grads


def _layer_of(name: str):
    if name.startswith("block"):
        return int(name.split(".")[0][5:])
    return None


def capture_attention(teacher: TeacherModel, windows, limit: int | None = None) -> np.ndarray:
    """Per-head attention matrices of every layer, stacked as (num, T, T).

    Order is window-major, then layer, then head.
    """
    tr = teacher_forward(teacher, np.atleast_2d(windows))
    mats = np.stack(tr.mixer_matrices, axis=1)  # B, L, H, T, T
    T = mats.shape[-1]
    mats = mats.reshape(-1, T, T)
    return mats if limit is None else mats[:limit]
