"""Command-line entry point: ``mohawk <command> [--config PATH] [--seed N] [--jobs N] [--out DIR]``.

Failures print one JSON line on stderr (``{"error": ..., "message": ...}``)
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .approx import GdConfig, approx_benchmark, benchmark_csv
from .checkpoint import load_checkpoint, load_matrices, save_checkpoint
from .config import ConfigError, load_config
from .core import ContractError, substream
from .distill import (
    DataStream,
    DistillConfig,
    TeacherTraining,
    evaluate,
    metrics_csv,
    model_checkpoint,
    model_from_checkpoint,
    perplexity,
    run_mohawk,
    sweep_csv,
    train_teacher,
    training_law_sweep,
)
from .gradcheck import gradcheck_suite, gradcheck_table
from .mixers import AttentionMixerInputs, causal_softmax_attention
from .model import ModelConfig, StudentModel, TeacherModel, capture_attention

log = logging.getLogger("mohawk")


class CliError(RuntimeError):
    pass


def _seeded(cfg: dict, seed):
    if seed is None:
        return cfg
    for sec in ("teacher_training", "distill", "approx"):
        cfg[sec]["seed"] = seed
    cfg["sweep"]["seeds"] = tuple(seed + s for s in cfg["sweep"]["seeds"])
    return cfg


def _corpus(sec: dict) -> np.ndarray:
    if sec.get("corpus"):
        return corpus_mod.read_tokens(sec["corpus"])
    return corpus_mod.generate(sec["corpus_seed"], sec["corpus_size"]).astype(np.int64)


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _teacher(path) -> TeacherModel:
    if path is None:
        raise CliError("no teacher checkpoint configured")
    model = model_from_checkpoint(load_checkpoint(path))
    if not isinstance(model, TeacherModel):
        raise CliError(f"{path} is not a teacher checkpoint")
    return model


def distill_config(sec: dict) -> DistillConfig:
    return DistillConfig(
        stage1_tokens=sec["stage1_tokens"],
        stage2_tokens=sec["stage2_tokens"],
        stage3_tokens=sec["stage3_tokens"],
        batch_size=sec["batch_size"],
        seq_len=sec["seq_len"],
        stage1_lr=sec["stage1_lr"],
        stage2_lr=sec["stage2_lr"],
        stage3_lr=sec["stage3_lr"],
        stage3_lr_after_stage12=sec["stage3_lr_after_stage12"],
        betas=(sec["beta1"], sec["beta2"]),
        weight_decay=sec["weight_decay"],
        clip=sec["clip"],
        warmup_frac=sec["warmup_frac"],
        decay_frac=sec["decay_frac"],
        freeze_set=tuple(sec["freeze_set"]),
        layer_kinds=tuple(sec["layer_kinds"]),
        seed=sec["seed"],
        eval_interval=sec["eval_interval"],
        eval_windows=sec["eval_windows"],
    )


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    return path


# --- commands --------------------------------------------------------------


def cmd_gen_corpus(args, cfg):
    seed = 0 if args.seed is None else args.seed
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "corpus.u16"
    corpus_mod.write_tokens(path, corpus_mod.generate(seed, args.size))
    print(f"wrote {path} ({args.size} tokens, unigram perplexity {corpus_mod.unigram_perplexity():.6f})")


def cmd_train_teacher(args, cfg):
    sec = cfg["teacher_training"]
    tokens = _corpus(sec)
    tt = TeacherTraining(sec["tokens"], sec["batch_size"], sec["seq_len"], sec["lr"], sec["eval_every"], sec["seed"])
    teacher = train_teacher(tokens, _model_config(cfg), tt)
    data = DataStream(tokens, tt.seq_len, tt.batch_size, tt.seed)
    ppl = perplexity(teacher, corpus_mod.heldout_windows(data.heldout, tt.seq_len + 1, 64))
    base = corpus_mod.heldout_unigram_perplexity(data.train, data.heldout)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "teacher.ckpt"
    save_checkpoint(path, model_checkpoint(teacher, seed=tt.seed))
    print(f"wrote {path}; held-out perplexity {ppl:.6f} (unigram baseline {base:.6f})")


def cmd_distill(args, cfg):
    sec = cfg["distill"]
    teacher = _teacher(sec["teacher"])
    dc = distill_config(sec)
    student, history = run_mohawk(dc, teacher, _corpus(sec))
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "student.ckpt", model_checkpoint(student, stage="stage3", seed=dc.seed))
    path = _write(args.out, "metrics.csv", metrics_csv(history))
    print(f"wrote {args.out / 'student.ckpt'} and {path}")


def synthetic_matrices(num: int, T: int, seed: int, d: int = 16) -> np.ndarray:
    out = []
    for i in range(num):
        rng = substream(seed, "synthetic-attention", i)
        out.append(causal_softmax_attention(AttentionMixerInputs(rng.normal(size=(T, d)), rng.normal(size=(T, d)))))
    return np.stack(out)


def bench_matrices(sec: dict) -> np.ndarray:
    src = sec["source"]
    if src == "file":
        if sec["matrices"] is None:
            raise CliError("[approx] source = file needs a matrices path")
        return load_matrices(sec["matrices"])[: sec["num_samples"]]
    if src == "synthetic":
        return synthetic_matrices(sec["num_samples"], sec["seq_len"], sec["seed"])
    if src == "teacher":
        teacher = _teacher(sec["teacher"])
        per_window = teacher.cfg.n_layers * teacher.cfg.n_heads
        n_windows = -(-sec["num_samples"] // per_window)
        _, heldout = corpus_mod.split(_corpus(sec))
        windows = corpus_mod.heldout_windows(heldout, sec["seq_len"], n_windows)
        if len(windows) < n_windows:
            raise CliError("held-out corpus too small for the requested number of matrices")
        return capture_attention(teacher, windows, sec["num_samples"])
    raise CliError(f"unknown [approx] source {src!r}; choose teacher, file or synthetic")


def cmd_approx_bench(args, cfg):
    sec = cfg["approx"]
    mats = bench_matrices(sec)
    gd = GdConfig(
        steps=sec["steps"],
        lrs=tuple(sec["lrs"]),
        weight_decay=sec["weight_decay"],
        seed=sec["seed"],
        warmup_frac=sec["warmup_frac"],
        decay_frac=sec["decay_frac"],
    )
    rows = approx_benchmark(mats, tuple(sec["families"]), tuple(sec["state_sizes"]), gd, jobs=args.jobs)
    path = _write(args.out, "approx.csv", benchmark_csv(rows))
    print(f"wrote {path}")


def cmd_sweep(args, cfg):
    sec = cfg["distill"]
    sw = cfg["sweep"]
    teacher = _teacher(sec["teacher"])
    rows = training_law_sweep(
        teacher, _corpus(sec), distill_config(sec), sw["stage_a_grid"], sw["stage_b_grid"], sw["seeds"], sw["stage_a"]
    )
    path = _write(args.out, "sweep.csv", sweep_csv(rows))
    print(f"wrote {path}")


def cmd_eval(args, cfg):
    sec = cfg["distill"]
    if args.checkpoint is None:
        raise CliError("eval needs --checkpoint")
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    tokens = corpus_mod.read_tokens(args.corpus) if args.corpus else _corpus(sec)
    data = DataStream(tokens, sec["seq_len"], sec["batch_size"], sec["seed"], eval_windows=sec["eval_windows"])
    lines = ["metric,value", f"heldout_ppl,{perplexity(model, data.eval):.17g}"]
    teacher_path = args.teacher or sec["teacher"]
    if isinstance(model, StudentModel) and teacher_path is not None:
        m = evaluate(model, _teacher(teacher_path), data.eval)
        lines += [f"{k},{v:.17g}" for k, v in m.as_dict().items() if k != "heldout_ppl"]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out_given:
        _write(args.out, "eval.csv", text)


def cmd_gradcheck(args, cfg):
    rows = gradcheck_suite(0 if args.seed is None else args.seed, args.instances)
    text = gradcheck_table(rows)
    sys.stdout.write(text)
    if args.out_given:
        _write(args.out, "gradcheck.csv", text)
    if not all(r.passed for r in rows):
        raise CliError("gradient check failed: " + ", ".join(r.name for r in rows if not r.passed))


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "approx-bench": cmd_approx_bench,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (outputs do not depend on it)")
    common.add_argument("--out", type=Path, help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mohawk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic u16 token corpus")
    g.add_argument("--size", type=int, default=1_000_000)
    sub.add_parser("train-teacher", parents=[common], help="train the toy teacher")
    sub.add_parser("distill", parents=[common], help="run the three distillation stages")
    sub.add_parser("approx-bench", parents=[common], help="structured-mixer projection benchmark")
    sub.add_parser("sweep", parents=[common], help="stage-budget training-law sweep")
    e = sub.add_parser("eval", parents=[common], help="held-out perplexity and stage distances")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--corpus", type=Path)
    e.add_argument("--teacher", type=Path)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.out_given = args.out is not None
    args.out = args.out or Path(".")
    try:
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        if args.command == "gen-corpus" and args.size < 1:
            raise ContractError("corpus size must be >= 1")
        cfg = _seeded(load_config(args.config), args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc), "line": exc.line}), file=sys.stderr)
        return 2
    except (CliError, ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0
