"""Three-stage Transformer -> SSM distillation and teacher pretraining.

Stage 1 matches each student mixer matrix to the teacher's attention matrix,
stage 2 matches each mixer block's output, both on the teacher's own per-layer
inputs so every layer trains independently. Stage 3 is end-to-end soft-target
distillation on logits with optional freezing.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from . import corpus as corpus_mod
from .checkpoint import Checkpoint
from .core import (
    AdamWState,
    ContractError,
    TrainingError,
    WsdSchedule,
    adamw_step,
    clip_grad_norm,
    substream,
    wsd_lr,
)
from .model import (
    ATTENTION,
    LanguageModel,
    ModelConfig,
    StudentModel,
    TeacherModel,
    as_torch,
    frozen_names,
    init_teacher,
    kd_loss_t,
    lm_loss_t,
    model_backward,
    stage1_layer_losses,
    stage2_layer_losses,
    teacher_batch,
    transfer_weights,
)

log = logging.getLogger(__name__)

METRIC_NAMES = ("stage1_dist", "stage2_dist", "kd_loss", "heldout_ppl")
SWEEP_HEADER = ("stageA_tokens", "stageB_tokens", "seed", "stage1_dist", "stage2_dist", "kd_loss", "heldout_ppl")
METRICS_HEADER = ("stage", "tokens", "metric", "value")


@dataclass
class OptimSettings:
    lr: float
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    clip: float = 1.0
    eps: float = 1e-8
    warmup_frac: float = 0.10
    decay_frac: float = 0.10


@dataclass
class DistillConfig:
    stage1_tokens: int = 100_000
    stage2_tokens: int = 200_000
    stage3_tokens: int = 2_000_000
    batch_size: int = 4
    seq_len: int = 64
    stage1_lr: float = 5e-3
    stage2_lr: float = 5e-3
    stage3_lr: float = 1e-3
    stage3_lr_after_stage12: float = 2e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    clip: float = 1.0
    warmup_frac: float = 0.10
    decay_frac: float = 0.10
    freeze_set: tuple = ()
    layer_kinds: tuple = ()
    seed: int = 0
    eval_interval: int = 0
    eval_windows: int = 32

    def __post_init__(self):
        if min(self.stage1_tokens, self.stage2_tokens, self.stage3_tokens) < 0:
            raise ContractError("stage budgets must be >= 0")
        if self.batch_size <= 0 or self.seq_len <= 0:
            raise ContractError("batch size and sequence length must be positive")

    @property
    def batch_tokens(self) -> int:
        return self.batch_size * self.seq_len

    def optim(self, stage: int, after_stage12: bool = False) -> OptimSettings:
        lr = {1: self.stage1_lr, 2: self.stage2_lr, 3: self.stage3_lr}[stage]
        if stage == 3 and after_stage12:
            lr = self.stage3_lr_after_stage12
        return OptimSettings(
            lr, self.betas, self.weight_decay, self.clip, 1e-8, self.warmup_frac, self.decay_frac
        )


@dataclass
class StageMetrics:
    stage1_dist: float
    stage2_dist: float
    kd_loss: float
    heldout_ppl: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


# --- data ------------------------------------------------------------------


class DataStream:
    """Training windows keyed by (seed, label, step), plus fixed held-out windows.

    Windows are ``seq_len + 1`` tokens long: inputs are the first ``seq_len``,
    next-token targets the last ``seq_len``.
    """

    def __init__(self, tokens, seq_len: int, batch_size: int, seed: int = 0, heldout_frac: float = 0.1,
                 eval_windows: int = 32):
        self.train, self.heldout = corpus_mod.split(tokens, heldout_frac)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.eval = corpus_mod.heldout_windows(self.heldout, seq_len + 1, eval_windows)

    @property
    def batch_tokens(self) -> int:
        return self.seq_len * self.batch_size

    def steps_for(self, tokens: int) -> int:
        return int(tokens) // self.batch_tokens

    def batch(self, label: str, step: int) -> np.ndarray:
        rng = substream(self.seed, "data", label, step)
        return corpus_mod.sample_windows(self.train, self.batch_size, self.seq_len + 1, rng)


# --- generic loop ----------------------------------------------------------


@dataclass
class TrainState:
    params: dict
    opt: AdamWState = field(default_factory=AdamWState)
    step: int = 0
    lr_mult: float = 1.0
    rollbacks: int = 0
    loss_ema: float = math.nan

    def copy(self) -> "TrainState":
        return TrainState(
            {k: v.copy() for k, v in self.params.items()},
            AdamWState(self.opt.step, dict(self.opt.m), dict(self.opt.v)),
            self.step,
            self.lr_mult,
            self.rollbacks,
            self.loss_ema,
        )


def no_decay_names(params: dict) -> frozenset:
    return frozenset(k for k, v in params.items() if np.ndim(v) < 2)


def _layer_key(name: str):
    return name.split(".")[0] if name.startswith("block") else "_global"


def clip_per_layer(grads: dict, max_norm: float) -> dict:
    groups: dict = {}
    for k, g in grads.items():
        groups.setdefault(_layer_key(k), {})[k] = g
    out = {}
    for sub in groups.values():
        out.update(clip_grad_norm(sub, max_norm))
    return out


MAX_ROLLBACKS = 3
SPIKE_FACTOR = 2.0
EMA_DECAY = 0.9
EMA_WARMUP = 10


def train_loop(
    state: TrainState,
    step_fn: Callable,
    lr_fn: Callable[[int], float],
    total_steps: int,
    optim: OptimSettings,
    per_layer_clip: bool = False,
    stop_at: int | None = None,
    guard_spikes: bool = False,
    checkpoint_every: int = 0,
    on_checkpoint: Callable | None = None,
) -> TrainState:
    """Run updates ``state.step .. total_steps-1`` (or until ``stop_at``).

    ``step_fn(params, step) -> (loss, grads)``. With ``guard_spikes`` a
    non-finite loss or one above twice the running average rolls back to the
    last in-memory checkpoint and halves the learning rate.
    """
    nd = no_decay_names(state.params)
    end = total_steps if stop_at is None else min(stop_at, total_steps)
    last_good = state.copy() if guard_spikes else None
    while state.step < end:
        step = state.step
        try:
            loss, grads = step_fn(state.params, step)
        except TrainingError:
            if not guard_spikes:
                raise
            loss, grads = math.nan, None
        if guard_spikes:
            spike = not math.isfinite(loss) or (
                step >= EMA_WARMUP and math.isfinite(state.loss_ema) and loss > SPIKE_FACTOR * state.loss_ema
            )
            if spike:
                if state.rollbacks >= MAX_ROLLBACKS:
                    raise TrainingError(
                        f"loss spike at step {step} after {MAX_ROLLBACKS} rollbacks; "
                        f"last good checkpoint at step {last_good.step}"
                    )
                log.warning("loss spike at step %d (%.4g); rolling back to step %d", step, loss, last_good.step)
                rollbacks = state.rollbacks + 1
                lr_mult = state.lr_mult * 0.5
                state = last_good.copy()
                state.rollbacks, state.lr_mult = rollbacks, lr_mult
                last_good = state.copy()
                continue
            state.loss_ema = loss if not math.isfinite(state.loss_ema) else EMA_DECAY * state.loss_ema + (1 - EMA_DECAY) * loss
        grads = clip_per_layer(grads, optim.clip) if per_layer_clip else clip_grad_norm(grads, optim.clip)
        lr = lr_fn(step) * state.lr_mult
        state.params, state.opt = adamw_step(
            state.params, grads, state.opt, lr, optim.betas, optim.weight_decay, optim.eps, no_decay=nd
        )
        state.step += 1
        if checkpoint_every and state.step % checkpoint_every == 0:
            if guard_spikes:
                last_good = state.copy()
            if on_checkpoint is not None:
                on_checkpoint(state)
    return state


def wsd_fn(total_steps: int, optim: OptimSettings):
    sched = WsdSchedule(total_steps, optim.lr, optim.warmup_frac, optim.decay_frac)
    return lambda step: wsd_lr(sched, step)


# --- evaluation ------------------------------------------------------------


def evaluate(student: LanguageModel, teacher: LanguageModel, windows: np.ndarray, chunk: int = 16) -> StageMetrics:
    """Held-out stage metrics: mixer distance, block distance, KD loss, perplexity."""
    Ps, Pt = as_torch(student.params), as_torch(teacher.params)
    sums = np.zeros(4)
    count = 0
    with torch.no_grad():
        for lo in range(0, len(windows), chunk):
            w = windows[lo : lo + chunk]
            tb = teacher_batch(teacher, w[:, :-1], w[:, 1:], P=Pt)
            n = len(w)
            s1 = torch.stack(stage1_layer_losses(Ps, student.cfg, tb)).mean()
            s2 = torch.stack(stage2_layer_losses(Ps, student.cfg, tb)).mean()
            kd = kd_loss_t(Ps, student.cfg, tb)
            ce = lm_loss_t(Ps, student.cfg, tb.inputs, tb.targets)
            sums += n * np.array([float(s1), float(s2), float(kd), float(ce)])
            count += n
    s1, s2, kd, ce = sums / count
    return StageMetrics(s1, s2, kd, float(np.exp(ce)))


def perplexity(model: LanguageModel, windows: np.ndarray, chunk: int = 16) -> float:
    P = as_torch(model.params)
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(windows), chunk):
            w = torch.from_numpy(np.asarray(windows[lo : lo + chunk], dtype=np.int64))
            total += float(lm_loss_t(P, model.cfg, w[:, :-1], w[:, 1:])) * len(w)
            count += len(w)
    return float(np.exp(total / count))


# --- teacher pretraining ---------------------------------------------------


@dataclass
class TeacherTraining:
    tokens: int = 2_000_000
    batch_size: int = 4
    seq_len: int = 256
    lr: float = 3e-3
    eval_every: int = 100
    seed: int = 0


def train_teacher(tokens, cfg: ModelConfig, tt: TeacherTraining | None = None, optim: OptimSettings | None = None,
                  model: TeacherModel | None = None) -> TeacherModel:
    """Next-token training of the toy teacher with AdamW + WSD."""
    tt = tt or TeacherTraining()
    optim = optim or OptimSettings(tt.lr)
    data = DataStream(tokens, tt.seq_len, tt.batch_size, tt.seed)
    if len(data.train) <= tt.seq_len:
        raise ContractError("corpus too small for the teacher's sequence length")
    teacher = model or init_teacher(cfg, tt.seed)
    total = data.steps_for(tt.tokens)
    if total == 0:
        return teacher
    evals = data.eval[:8]
    initial = perplexity(teacher, evals)
    worse = 0

    def step_fn(params, step):
        w = data.batch("teacher", step)
        return model_backward(TeacherModel(cfg, params), w, "teacher_ce")

    state = TrainState(teacher.params)
    lr_fn = wsd_fn(total, optim)
    every = max(1, tt.eval_every)
    while state.step < total:
        state = train_loop(state, step_fn, lr_fn, total, optim, stop_at=state.step + every)
        ppl = perplexity(TeacherModel(cfg, state.params), evals)
        log.info("teacher step %d/%d held-out ppl %.3f", state.step, total, ppl)
        worse = worse + 1 if not ppl < initial else 0
        if worse >= 3:
            raise TrainingError(f"teacher training diverged: held-out ppl {ppl:.4g} above initial {initial:.4g}")
    return TeacherModel(cfg, state.params)


# --- stages ----------------------------------------------------------------


def _stage_step_fn(stage: str, student: LanguageModel, teacher: LanguageModel, data: DataStream, label: str,
                   frozen=()):
    Pt = as_torch(teacher.params)
    cfg = student.cfg

    def step_fn(params, step):
        w = data.batch(label, step)[:, :-1]
        tb = teacher_batch(teacher, w, P=Pt)
        return model_backward(StudentModel(cfg, params), w, stage, frozen=frozen, tb=tb)

    return step_fn


def run_stage(
    stage: int,
    teacher: TeacherModel,
    student: StudentModel,
    data: DataStream,
    budget_tokens: int,
    optim: OptimSettings,
    freeze_set=(),
    state: TrainState | None = None,
    stop_at: int | None = None,
    checkpoint_every: int = 0,
    on_checkpoint=None,
    label: str | None = None,
) -> TrainState:
    """One MOHAWK stage under a WSD schedule sized to ``budget_tokens``."""
    spec = f"stage{stage}"
    label = label or spec
    frozen = frozen_names(student, freeze_set) if stage == 3 else set()
    total = data.steps_for(budget_tokens)
    state = state or TrainState({k: v.copy() for k, v in student.params.items()})
    if total == 0:
        return state
    step_fn = _stage_step_fn(spec, student, teacher, data, label, frozen)
    return train_loop(
        state,
        step_fn,
        wsd_fn(total, optim),
        total,
        optim,
        per_layer_clip=stage in (1, 2),
        stop_at=stop_at,
        guard_spikes=stage == 3,
        checkpoint_every=checkpoint_every or (max(1, total // 10) if stage == 3 else 0),
        on_checkpoint=on_checkpoint,
    )


def stage1_matrix_orientation(teacher, student, data: DataStream, budget_tokens: int, optim: OptimSettings):
    state = run_stage(1, teacher, student, data, budget_tokens, optim)
    out = StudentModel(student.cfg, state.params)
    return out, evaluate(out, teacher, data.eval)


def stage2_hidden_alignment(teacher, student, data: DataStream, budget_tokens: int, optim: OptimSettings):
    state = run_stage(2, teacher, student, data, budget_tokens, optim)
    out = StudentModel(student.cfg, state.params)
    return out, evaluate(out, teacher, data.eval)


def stage3_kd(teacher, student, data: DataStream, budget_tokens: int, optim: OptimSettings, freeze_set=()):
    state = run_stage(3, teacher, student, data, budget_tokens, optim, freeze_set)
    out = StudentModel(student.cfg, state.params)
    return out, evaluate(out, teacher, data.eval)


def student_config(teacher: TeacherModel, cfg: DistillConfig) -> ModelConfig:
    kinds = tuple(cfg.layer_kinds) or ("ssd",) * teacher.cfg.n_layers
    return replace(teacher.cfg, layer_kinds=kinds)


def run_mohawk(cfg: DistillConfig, teacher: TeacherModel, tokens, on_metrics=None):
    """transfer -> stage 1 -> stage 2 -> stage 3, returning the student and a metrics log.

    The log holds one row per (stage, tokens, metric), evaluated after weight
    transfer, after each stage, and every ``cfg.eval_interval`` tokens within a stage.
    """
    data = DataStream(tokens, cfg.seq_len, cfg.batch_size, cfg.seed, eval_windows=cfg.eval_windows)
    student = transfer_weights(teacher, student_config(teacher, cfg))
    history = []

    def record(stage_name, tokens_seen, model):
        m = evaluate(model, teacher, data.eval)
        for name, value in m.as_dict().items():
            history.append({"stage": stage_name, "tokens": tokens_seen, "metric": name, "value": value})
        if on_metrics is not None:
            on_metrics(stage_name, tokens_seen, m)
        return m

    record("init", 0, student)
    seen = 0
    budgets = (cfg.stage1_tokens, cfg.stage2_tokens, cfg.stage3_tokens)
    for stage, budget in zip((1, 2, 3), budgets):
        total = data.steps_for(budget)
        if total == 0:
            continue
        optim = cfg.optim(stage, after_stage12=stage == 3 and (budgets[0] > 0 or budgets[1] > 0))
        interval = data.steps_for(cfg.eval_interval) if cfg.eval_interval else 0
        base = seen

        def on_ck(state, stage=stage, base=base):
            record(f"stage{stage}", base + state.step * data.batch_tokens, StudentModel(student.cfg, state.params))

        state = run_stage(stage, teacher, student, data, budget, optim, cfg.freeze_set if stage == 3 else (),
                          checkpoint_every=interval, on_checkpoint=on_ck if interval else None)
        student = StudentModel(student.cfg, state.params)
        seen += total * data.batch_tokens
        if not interval or total % interval:
            record(f"stage{stage}", seen, student)
    return student, history


def metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in history:
        w.writerow([r["stage"], r["tokens"], r["metric"], f"{float(r['value']):.17g}"])
    return buf.getvalue()


# --- continuous runs with branch cooldowns ---------------------------------


def continuous_run(
    stage: int,
    teacher: TeacherModel,
    student: StudentModel,
    data: DataStream,
    grid_tokens,
    optim: OptimSettings,
    freeze_set=(),
    label: str | None = None,
) -> dict:
    """One run to ``max(grid_tokens)`` with a model snapshot at every grid point.

    Warmup is 10% of the run. Snapshots inside the warmup are taken as-is.
    Later snapshots branch off the constant-rate run at ``c - 0.1 c`` and decay
    the rate linearly to zero, ending at exactly ``c`` tokens.
    """
    spec = f"stage{stage}"
    label = label or f"{spec}-continuous"
    frozen = frozen_names(student, freeze_set) if stage == 3 else set()
    grid = sorted(set(int(g) for g in grid_tokens))
    steps = {g: data.steps_for(g) for g in grid}
    total = max(steps.values()) if steps else 0
    warm = int(round(optim.warmup_frac * total))
    results = {}
    state = TrainState({k: v.copy() for k, v in student.params.items()})
    if total == 0:
        return {g: StudentModel(student.cfg, state.params) for g in grid}
    step_fn = _stage_step_fn(spec, student, teacher, data, label, frozen)

    def main_lr(step):
        return optim.lr * step / warm if warm and step < warm else optim.lr

    branch_at = {}
    for g, c in steps.items():
        if c <= warm:
            branch_at.setdefault(c, []).append((g, None))
        else:
            cool = max(1, int(round(0.1 * c)))
            branch_at.setdefault(c - cool, []).append((g, cool))
    clip_layers = stage in (1, 2)
    for s in sorted(branch_at):
        state = train_loop(state, step_fn, main_lr, total, optim, clip_layers, stop_at=s)
        for g, cool in branch_at[s]:
            if cool is None:
                results[g] = StudentModel(student.cfg, {k: v.copy() for k, v in state.params.items()})
                continue
            start = s

            def branch_lr(step, start=start, cool=cool):
                return optim.lr * (start + cool - step) / cool

            b = train_loop(state.copy(), step_fn, branch_lr, start + cool, optim, clip_layers)
            results[g] = StudentModel(student.cfg, b.params)
    return results


def training_law_sweep(teacher: TeacherModel, tokens, base: DistillConfig, stage_a_grid, stage_b_grid, seeds,
                       stage_a: int = 2):
    """Rows of (stage-A budget, stage-B budget, seed) -> final metrics.

    ``stage_a`` is 2 (stage 2 then stage 3) or 1 (stage 1 then stage 2). Per
    seed, one continuous stage-A run yields a checkpoint per stage-A budget,
    and each checkpoint seeds one continuous stage-B run.
    """
    if stage_a not in (1, 2):
        raise ContractError("stage_a must be 1 or 2")
    rows = []
    for seed in seeds:
        cfg = replace(base, seed=int(seed))
        data = DataStream(tokens, cfg.seq_len, cfg.batch_size, cfg.seed, eval_windows=cfg.eval_windows)
        student = transfer_weights(teacher, student_config(teacher, cfg))
        if stage_a == 2 and cfg.stage1_tokens > 0:
            state = run_stage(1, teacher, student, data, cfg.stage1_tokens, cfg.optim(1))
            student = StudentModel(student.cfg, state.params)
        a_models = continuous_run(stage_a, teacher, student, data, stage_a_grid, cfg.optim(stage_a))
        for a in sorted(a_models):
            stage_b = stage_a + 1
            optim_b = cfg.optim(stage_b, after_stage12=stage_b == 3 and a > 0)
            b_models = continuous_run(stage_b, teacher, a_models[a], data, stage_b_grid, optim_b,
                                      cfg.freeze_set if stage_b == 3 else (), label=f"stage{stage_b}-from-{a}")
            for b in sorted(b_models):
                m = evaluate(b_models[b], teacher, data.eval)
                rows.append({"stageA_tokens": a, "stageB_tokens": b, "seed": int(seed), **m.as_dict()})
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r["stageA_tokens"], r["stageB_tokens"], r["seed"]] + [f"{float(r[k]):.17g}" for k in METRIC_NAMES])
    return buf.getvalue()


# --- checkpoints of models -------------------------------------------------


def model_checkpoint(model: LanguageModel, stage: str = "teacher", state: TrainState | None = None,
                     seed: int = 0) -> Checkpoint:
    c = model.cfg
    config = {
        "vocab_size": c.vocab_size,
        "d_model": c.d_model,
        "n_layers": c.n_layers,
        "n_heads": c.n_heads,
        "d_mlp": c.d_mlp,
        "max_seq_len": c.max_seq_len,
        "conv_width": c.conv_width,
        "layer_kinds": [1.0 if k == ATTENTION else 0.0 for k in c.layer_kinds],
    }
    if state is not None:
        config.update(lr_mult=state.lr_mult, rollbacks=state.rollbacks, loss_ema=state.loss_ema)
        return Checkpoint(state.params, state.opt, state.step, stage, seed, state.step, config)
    return Checkpoint(model.params, AdamWState(), 0, stage, seed, 0, config)


def model_from_checkpoint(ck: Checkpoint) -> LanguageModel:
    c = ck.config
    kinds = tuple(ATTENTION if k else "ssd" for k in np.atleast_1d(c["layer_kinds"]))
    cfg = ModelConfig(
        vocab_size=int(c["vocab_size"]),
        d_model=int(c["d_model"]),
        n_layers=int(c["n_layers"]),
        n_heads=int(c["n_heads"]),
        d_mlp=int(c["d_mlp"]),
        max_seq_len=int(c["max_seq_len"]),
        conv_width=int(c["conv_width"]),
        layer_kinds=kinds,
    )
    if ck.stage == "teacher":
        return TeacherModel(cfg, ck.params)
    return StudentModel(cfg, ck.params)


def state_from_checkpoint(ck: Checkpoint) -> TrainState:
    c = ck.config
    return TrainState(
        dict(ck.params),
        ck.opt,
        ck.step,
        float(c.get("lr_mult", 1.0)),
        int(c.get("rollbacks", 0)),
        float(c.get("loss_ema", math.nan)),
    )
