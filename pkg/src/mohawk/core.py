"""Numerical substrate shared by every other module.

Tensors are plain float64 numpy arrays. Everything here is a pure function
except the optimizer, whose state is threaded through explicitly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray


class ContractError(ValueError):
    """A precondition on shapes or argument ranges was violated."""


class InvalidInputError(ValueError):
    """Input data is non-finite or otherwise unusable."""


class OptimizationError(RuntimeError):
    """Every optimization attempt failed."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""


# --- RNG -------------------------------------------------------------------


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & (2**63 - 1)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def substream(seed: int, *labels) -> np.random.Generator:
    """Counter-based generator for ``(seed, *labels)``.

    Two calls with the same arguments give the same stream no matter what else
    was drawn in between, so per-layer or per-sample jobs can run in any order.
    """
    key = [int(seed) & (2**64 - 1)] + [_label_key(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def next(self, *labels) -> np.random.Generator:
        gen = substream(self.seed, self.counter, *labels)
        self.counter += 1
        return gen


# --- SVD -------------------------------------------------------------------


def _check_finite(M: Tensor) -> Tensor:
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise InvalidInputError("matrix contains non-finite entries")
    return M


def _complete_columns(U: Tensor, keep: np.ndarray) -> Tensor:
    # replace columns outside `keep` with an orthonormal completion
    if keep.all():
        return U
    m = U.shape[0]
    basis = np.concatenate([U[:, keep], np.eye(m)], axis=1)
    Q, _ = np.linalg.qr(basis)
    out = U.copy()
    good = int(keep.sum())
    out[:, ~keep] = Q[:, good : good + int((~keep).sum())]
    out[:, keep] = U[:, keep]
    return out


def _jacobi_svd(A: Tensor, tol: float = 1e-15, max_sweeps: int = 60):
    m, n = A.shape
    U = A.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = U[:, p] @ U[:, p]
                beta = U[:, q] @ U[:, q]
                gamma = U[:, p] @ U[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = U[:, p].copy(), U[:, q]
                U[:, p] = c * up - s * uq
                U[:, q] = s * up + c * uq
                vp, vq = V[:, p].copy(), V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break
    S = np.linalg.norm(U, axis=0)
    order = np.argsort(-S, kind="stable")
    S, U, V = S[order], U[:, order], V[:, order]
    scale = S[0] if S.size else 0.0
    keep = S > max(scale, 1e-300) * 1e-14 if scale > 0 else np.zeros(n, dtype=bool)
    U = np.where(keep, U / np.where(keep, S, 1.0), 0.0)
    S = np.where(keep, S, 0.0)
    return _complete_columns(U, keep), S, V


def svd(M: Tensor, method: str = "lapack"):
    """Thin SVD ``M = U @ diag(S) @ V.T`` with ``S`` descending.

    ``method="jacobi"`` runs a one-sided Jacobi sweep in pure numpy; it is slow
    but independent of LAPACK and is what the tests cross-check against.
    """
    M = _check_finite(M)
    if M.ndim != 2:
        raise ContractError(f"svd expects a matrix, got shape {M.shape}")
    if 0 in M.shape:
        k = min(M.shape)
        return np.zeros((M.shape[0], k)), np.zeros(k), np.zeros((M.shape[1], k))
    if method == "lapack":
        U, S, Vt = np.linalg.svd(M, full_matrices=False)
        return U, S, Vt.T
    if method != "jacobi":
        raise ContractError(f"unknown svd method {method!r}")
    if M.shape[0] >= M.shape[1]:
        return _jacobi_svd(M)
    U, S, V = _jacobi_svd(M.T)
    return V, S, U


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
    eps: float = 1e-8,
    no_decay: frozenset | set = frozenset(),
):
    """One decoupled-weight-decay Adam update.

    Only names present in ``grads`` are updated; the rest of ``params`` is
    passed through untouched. Names in ``no_decay`` skip the decay term.
    Returns ``(new_params, new_state)``; inputs are not mutated.
    """
    if lr < 0 or eps <= 0:
        raise ContractError("lr must be >= 0 and eps > 0")
    b1, b2 = betas
    step = state.step + 1
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ContractError(f"grad shape {np.shape(g)} != param shape {np.shape(p)} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        if weight_decay and name not in no_decay:
            p = p - lr * weight_decay * p
        new_params[name] = p - lr * (m / bc1) / ((v / bc2) ** 0.5 + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamWState(step=step, m=new_m, v=new_v)


# --- schedule --------------------------------------------------------------


@dataclass(frozen=True)
class WsdSchedule:
    total_steps: int
    base_lr: float
    warmup_frac: float = 0.10
    decay_frac: float = 0.10

    def __post_init__(self):
        if self.total_steps < 0:
            raise ContractError("total_steps must be >= 0")
        if self.warmup_frac < 0 or self.decay_frac < 0 or self.warmup_frac + self.decay_frac > 1:
            raise ContractError("need warmup_frac, decay_frac >= 0 and warmup_frac + decay_frac <= 1")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.total_steps))

    @property
    def decay_steps(self) -> int:
        return int(round(self.decay_frac * self.total_steps))


def wsd_lr(schedule: WsdSchedule, step: int) -> float:
    """Warmup-stable-decay learning rate with linear ramps at both ends."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm, decay = schedule.warmup_steps, schedule.decay_steps
    base = schedule.base_lr
    if decay > 0 and step >= total - decay:
        return base * (total - step) / decay
    if warm > 0 and step < warm:
        return base * step / warm
    return base


# --- gradient utilities ----------------------------------------------------


def global_norm(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> dict:
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5, indices=None) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    With ``indices`` (flat positions) only those coordinates are probed and a
    vector of their partial derivatives is returned.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"f is not finite near coordinate {i}")
        out[j] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape) if indices is None else out


def max_rel_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
