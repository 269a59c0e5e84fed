"""Finite-difference checks of every trainable loss against its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import GD_FAMILIES, family_loss, family_loss_and_grad, init_params
from .core import finite_diff_grad, max_rel_error, substream
from .model import ModelConfig, init_teacher, model_backward, transfer_weights, frozen_names

TOLERANCE = 1e-4
MODEL_CHECKS = ("teacher_ce", "stage1", "stage2", "stage3", "stage3_frozen")
FROZEN_GROUPS = ("mlp", "embedding", "lm_head")


@dataclass
class GradCheck:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def tiny_config(rng) -> ModelConfig:
    kinds = tuple(rng.choice(["ssd", "attention"], size=2, p=[0.75, 0.25]))
    if "ssd" not in kinds:
        kinds = ("ssd", kinds[1])
    return ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, d_mlp=16, max_seq_len=8, layer_kinds=kinds)


def _jitter(params, rng, scale):
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in params.items()}


def check_gd_family(family: str, rng) -> float:
    T = int(rng.integers(4, 9))
    n = int(rng.integers(1, 5))
    M = np.tril(rng.random((T, T)))
    params = init_params(family, T, n, rng)
    # move off the init so decays and D are generic
    params = {k: v + rng.normal(0.0, 0.3, np.shape(v)) for k, v in params.items()}
    _, grads = family_loss_and_grad(family, params, M)
    worst = 0.0
    for name, g in grads.items():

        def f(x, name=name):
            return family_loss(family, {**params, name: x}, M)

        worst = max(worst, max_rel_error(g, finite_diff_grad(f, np.asarray(params[name], dtype=np.float64))))
    return worst


def check_model_loss(spec: str, rng, coords_per_param: int = 6) -> float:
    cfg = tiny_config(rng)
    teacher = init_teacher(cfg, int(rng.integers(2**31)))
    teacher.params = _jitter(teacher.params, rng, 0.3)
    student = transfer_weights(teacher, cfg)
    student.params = _jitter(student.params, rng, 0.1)
    T = int(rng.integers(2, cfg.max_seq_len))
    tokens = rng.integers(0, cfg.vocab_size, size=(2, T + 1 if spec == "teacher_ce" else T))
    loss_spec = "stage3" if spec == "stage3_frozen" else spec
    frozen = frozen_names(student, FROZEN_GROUPS) if spec == "stage3_frozen" else set()
    model = teacher if spec == "teacher_ce" else student
    _, grads = model_backward(model, tokens, loss_spec, teacher=teacher, frozen=frozen)
    if frozen & set(grads):
        return np.inf
    worst = 0.0
    for name, g in grads.items():
        x = model.params[name]
        k = min(coords_per_param, x.size)
        idx = rng.choice(x.size, size=k, replace=False)

        def f(v, name=name):
            m = model.copy()
            m.params[name] = v
            return model_backward(m, tokens, loss_spec, teacher=teacher, trainable=[])[0]

        worst = max(worst, max_rel_error(g.reshape(-1)[idx], finite_diff_grad(f, x, indices=idx)))
    return worst


def gradcheck_suite(seed: int = 0, instances: int = 20) -> list:
    rows = []
    for fam in GD_FAMILIES:
        errs = [check_gd_family(fam, substream(seed, "gradcheck", fam, i)) for i in range(instances)]
        rows.append(GradCheck(f"approx.{fam}", instances, max(errs)))
    for spec in MODEL_CHECKS:
        errs = [check_model_loss(spec, substream(seed, "gradcheck", spec, i)) for i in range(instances)]
        rows.append(GradCheck(f"model.{spec}", instances, max(errs)))
    return rows


def gradcheck_table(rows) -> str:
    lines = ["check,instances,max_rel_error,status"]
    for r in rows:
        lines.append(f"{r.name},{r.instances},{r.max_rel_error:.17g},{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
