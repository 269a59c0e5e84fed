"""Run configuration: an INI file with sections [model], [teacher_training],
[distill], [approx] and [sweep].

Every key has a default, unknown sections or keys are rejected with their line
number, and relative paths resolve against the config file's directory.
Lists are comma-separated.
"""

from __future__ import annotations

import configparser
import re
from pathlib import Path

from .approx import ALL_FAMILIES


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def _int(s):
    return int(s.replace("_", ""))


def _float(s):
    return float(s.replace("_", ""))


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        return tuple(conv(p.strip()) for p in s.split(",") if p.strip())

    return parse


def _str(s):
    return s.strip()


PATH = "path"

SCHEMA = {
    "model": {
        "vocab_size": (_int, 256),
        "d_model": (_int, 64),
        "n_layers": (_int, 2),
        "n_heads": (_int, 4),
        "d_mlp": (_int, 256),
        "max_seq_len": (_int, 256),
        "conv_width": (_int, 4),
    },
    "teacher_training": {
        "corpus": (PATH, None),
        "corpus_size": (_int, 2_000_000),
        "corpus_seed": (_int, 0),
        "tokens": (_int, 2_000_000),
        "batch_size": (_int, 4),
        "seq_len": (_int, 256),
        "lr": (_float, 3e-3),
        "eval_every": (_int, 100),
        "seed": (_int, 0),
    },
    "distill": {
        "teacher": (PATH, None),
        "corpus": (PATH, None),
        "corpus_size": (_int, 2_000_000),
        "corpus_seed": (_int, 0),
        "stage1_tokens": (_int, 100_000),
        "stage2_tokens": (_int, 200_000),
        "stage3_tokens": (_int, 2_000_000),
        "batch_size": (_int, 4),
        "seq_len": (_int, 64),
        "stage1_lr": (_float, 5e-3),
        "stage2_lr": (_float, 5e-3),
        "stage3_lr": (_float, 1e-3),
        "stage3_lr_after_stage12": (_float, 2e-3),
        "beta1": (_float, 0.9),
        "beta2": (_float, 0.95),
        "weight_decay": (_float, 0.1),
        "clip": (_float, 1.0),
        "warmup_frac": (_float, 0.1),
        "decay_frac": (_float, 0.1),
        "freeze_set": (_list(str), ()),
        "layer_kinds": (_list(str), ()),
        "eval_interval": (_int, 0),
        "eval_windows": (_int, 32),
        "seed": (_int, 0),
    },
    "approx": {
        "source": (_str, "teacher"),
        "matrices": (PATH, None),
        "teacher": (PATH, None),
        "corpus": (PATH, None),
        "corpus_size": (_int, 200_000),
        "corpus_seed": (_int, 0),
        "num_samples": (_int, 64),
        "seq_len": (_int, 256),
        "families": (_list(str), ALL_FAMILIES),
        "state_sizes": (_list(_int), (4, 8, 16)),
        "steps": (_int, 10_000),
        "lrs": (_list(_float), (0.1, 0.01, 0.001)),
        "weight_decay": (_float, 0.0),
        "warmup_frac": (_float, 0.1),
        "decay_frac": (_float, 0.1),
        "seed": (_int, 0),
    },
    "sweep": {
        "stage_a": (_int, 2),
        "stage_a_grid": (_list(_int), (0, 100_000, 200_000)),
        "stage_b_grid": (_list(_int), (500_000, 1_000_000)),
        "seeds": (_list(_int), (0, 1, 2)),
    },
}


def defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    where = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def parse_config(text: str, base_dir: Path | str = ".") -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    where = _line_index(text)
    out = defaults()
    base = Path(base_dir)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", where.get((section, None)))
        for key, raw in parser.items(section):
            line = where.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            conv, _ = SCHEMA[section][key]
            if conv == PATH:
                out[section][key] = None if not raw.strip() else (base / raw.strip()).resolve()
                continue
            try:
                out[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {exc}", line) from None
    return out


def load_config(path) -> dict:
    if path is None:
        return defaults()
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), p.parent)
