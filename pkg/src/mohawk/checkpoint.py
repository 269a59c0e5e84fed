"""Binary array container used for checkpoints and imported attention matrices.

Layout (all integers little-endian)::

    b"MHWK" | version u32 | count u32
    count x ( name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f64 payload )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AdamWState, ContractError

MAGIC = b"MHWK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_arrays(path, arrays: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if off + 8 * n > len(buf):
                raise CheckpointFormatError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated file") from exc
    if off != len(buf):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return out


STAGE_CODES = {"teacher": 0, "stage1": 1, "stage2": 2, "stage3": 3}


@dataclass
class Checkpoint:
    params: dict
    opt: AdamWState = field(default_factory=AdamWState)
    step: int = 0
    stage: str = "teacher"
    seed: int = 0
    rng_counter: int = 0
    config: dict = field(default_factory=dict)


def _split_u64(x: int):
    return [float(x >> 32), float(x & 0xFFFFFFFF)]


def save_checkpoint(path, ck: Checkpoint) -> None:
    arrays = {f"param.{k}": v for k, v in ck.params.items()}
    for k, v in ck.opt.m.items():
        arrays[f"opt.m.{k}"] = v
    for k, v in ck.opt.v.items():
        arrays[f"opt.v.{k}"] = v
    arrays["meta.step"] = np.array(float(ck.step))
    arrays["meta.opt_step"] = np.array(float(ck.opt.step))
    arrays["meta.stage"] = np.array(float(STAGE_CODES[ck.stage]))
    arrays["meta.rng"] = np.array(_split_u64(ck.seed) + _split_u64(ck.rng_counter))
    for k, v in ck.config.items():
        arrays[f"config.{k}"] = np.array(v, dtype=np.float64)
    save_arrays(path, arrays)


def load_checkpoint(path) -> Checkpoint:
    arrays = load_arrays(path)
    if "meta.step" not in arrays:
        raise CheckpointFormatError(f"{path}: not a model checkpoint")
    params, m, v, config = {}, {}, {}, {}
    for k, a in arrays.items():
        if k.startswith("param."):
            params[k[6:]] = a
        elif k.startswith("opt.m."):
            m[k[6:]] = a
        elif k.startswith("opt.v."):
            v[k[6:]] = a
        elif k.startswith("config."):
            config[k[7:]] = a
    rng = arrays["meta.rng"].astype(np.int64)
    stage = {c: s for s, c in STAGE_CODES.items()}[int(arrays["meta.stage"])]
    return Checkpoint(
        params=params,
        opt=AdamWState(int(arrays["meta.opt_step"]), m, v),
        step=int(arrays["meta.step"]),
        stage=stage,
        seed=(int(rng[0]) << 32) | int(rng[1]),
        rng_counter=(int(rng[2]) << 32) | int(rng[3]),
        config=config,
    )


def load_matrices(path, name: str = "attn") -> np.ndarray:
    """Externally captured attention matrices, shape (num_samples, T, T)."""
    arrays = load_arrays(path)
    if name not in arrays:
        raise ContractError(f"{path}: no array named {name!r}")
    a = arrays[name]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ContractError(f"{path}: {name!r} must have shape (num_samples, T, T), got {a.shape}")
    return a


def save_matrices(path, mats, name: str = "attn") -> None:
    save_arrays(path, {name: np.asarray(mats, dtype=np.float64)})
