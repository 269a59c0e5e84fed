"""Projection of a causal target matrix onto each structured mixer family.

Closed-form families: causal Toeplitz (band means) and general semi-separable
matrices (sequential Hankel-block SVD truncation). Gradient families (causal
low-rank, RetNet, SSD with and without D) are fit by full-batch AdamW on the
plain Frobenius distance, with hand-derived gradients.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import mixers
from .core import (
    AdamWState,
    ContractError,
    OptimizationError,
    Tensor,
    adamw_step,
    substream,
    svd,
    WsdSchedule,
    wsd_lr,
)

GD_FAMILIES = ("lowrank", "retnet", "ssd_no_d", "ssd")
ALL_FAMILIES = ("toeplitz", "lowrank", "retnet", "ssd_no_d", "ssd", "semisep")
CSV_HEADER = ("family", "state_size", "mean_distance", "num_samples", "seq_len")

# Decay logits start at -l with l ~ U[-8, -7): a = sigmoid(-l) is about 0.9995,
# so long products of decays stay away from 0.
DECAY_INIT_RANGE = (7.0, 8.0)
FACTOR_INIT_GAIN = 2.0**4


@dataclass
class GdConfig:
    steps: int = 10_000
    lrs: tuple = (0.1, 0.01, 0.001)
    betas: tuple = (0.9, 0.95)
    # decay on the factors would pull the fit away from an exact match
    weight_decay: float = 0.0
    eps: float = 1e-8
    seed: int = 0
    warmup_frac: float = 0.1
    decay_frac: float = 0.1

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if len(self.lrs) == 0:
            raise ContractError("lrs must be nonempty")


@dataclass
class ProjectionReport:
    family: str
    state_size: int | None
    distance: float
    best_lr: float | None = None
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def frobenius_dist(M: Tensor, M_tilde: Tensor) -> float:
    M = np.asarray(M, dtype=np.float64)
    M_tilde = np.asarray(M_tilde, dtype=np.float64)
    if M.shape != M_tilde.shape:
        raise ContractError(f"shape mismatch {M.shape} vs {M_tilde.shape}")
    return float(np.linalg.norm((M - M_tilde).ravel()))


def _as_causal(M: Tensor) -> Tensor:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"expected a square matrix, got {M.shape}")
    return np.tril(M)


# --- closed-form families --------------------------------------------------


def project_toeplitz(M: Tensor):
    """Frobenius-optimal causal Toeplitz matrix: the mean of each sub-diagonal."""
    M = _as_causal(M)
    T = M.shape[0]
    bands = np.array([np.diagonal(M, offset=-k).mean() for k in range(T)])
    params = mixers.ToeplitzParams(bands)
    dist = frobenius_dist(M, mixers.materialize_toeplitz(params))
    return params, ProjectionReport("toeplitz", None, dist, None, np.array([dist]))


def hankel_blocks(T: int):
    """Index pairs ``(rows, cols)`` of the strictly-lower Hankel blocks ``M[k:, :k]``."""
    return [(slice(k, T), slice(0, k)) for k in range(1, T)]


def project_semiseparable(M: Tensor, n: int):
    """Reduce a causal matrix to a semi-separable matrix of order ``n``.

    For k = 1 .. T-1 in order, the block below and left of the diagonal entry,
    ``M[k:, :k]``, is replaced by its best rank-``n`` approximation in the
    working copy. The diagonal is never touched. Each truncation left-projects
    the block, so rows of earlier blocks stay inside their row space and the
    rank bound holds for every block of the result.
    """
    M = _as_causal(M)
    T = M.shape[0]
    if not 1 <= n < T:
        raise ContractError(f"state size must satisfy 1 <= n < T, got n={n}, T={T}")
    W = M.copy()
    for rows, cols in hankel_blocks(T):
        H = W[rows, cols]
        if min(H.shape) <= n:
            continue
        U, S, V = svd(H)
        W[rows, cols] = (U[:, :n] * S[:n]) @ V[:, :n].T
    dist = frobenius_dist(M, W)
    return W, ProjectionReport("semisep", n, dist, None, np.array([dist]))


# --- gradient families -----------------------------------------------------


def init_params(family: str, T: int, n: int, rng: np.random.Generator) -> dict:
    """Initial parameters; factor draws are shared across families for one rng."""
    if family not in GD_FAMILIES:
        raise ContractError(f"unknown gradient family {family!r}")
    hi = FACTOR_INIT_GAIN / np.sqrt(T * n)
    row = rng.uniform(0.0, hi, size=(T, n))
    col = rng.uniform(0.0, hi, size=(T, n))
    lo_l, hi_l = DECAY_INIT_RANGE
    decay = rng.uniform(lo_l, hi_l, size=T + 1)
    if family == "lowrank":
        return {"A": row, "B": col}
    if family == "retnet":
        return {"A": row, "B": col, "gamma_logit": np.array(decay[-1])}
    params = {"C": row, "B": col, "a_logits": decay[:T].copy()}
    if family == "ssd":
        params["D"] = np.zeros(T)
    return params


def _factors(family: str, params: dict):
    """Row factor, column factor, log-decays (or None) and diagonal (or None)."""
    if family == "lowrank":
        return params["A"], params["B"], None, None
    if family == "retnet":
        T = params["A"].shape[0]
        log_a = np.full(T, float(mixers.log_sigmoid(params["gamma_logit"])))
        return params["A"], params["B"], log_a, None
    return params["C"], params["B"], mixers.log_sigmoid(params["a_logits"]), params.get("D")


def materialize_family(family: str, params: dict) -> Tensor:
    if family == "lowrank":
        return mixers.materialize_lowrank(mixers.CausalLowRankParams(params["A"], params["B"]))
    if family == "retnet":
        p = mixers.RetNetParams(params["A"], params["B"], float(params["gamma_logit"]))
        return mixers.materialize_retnet(p)
    if family in ("ssd", "ssd_no_d"):
        return mixers.materialize_ssd(
            mixers.SsdParams(params["a_logits"], params["B"], params["C"], params.get("D"))
        )
    raise ContractError(f"unknown gradient family {family!r}")


# exp(c_t) and exp(-c_s) are formed separately only while both stay far from
# overflow; beyond that the mask is built entry-wise.
_MAX_FACTOR_SPAN = 600.0


@lru_cache(maxsize=8)
def _tril_float(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T)))


def family_loss_and_grad(family: str, params: dict, M: Tensor):
    """``||M - M_tilde(params)||_F`` and its gradient with respect to ``params``.

    ``M`` must already be lower triangular. With decays present the masked
    product ``L o (R K^T)`` is evaluated as ``tril((R e^c)(K e^-c)^T)`` where
    ``c`` is the running sum of log-decays, which avoids a T x T exponential.
    """
    R, K, log_a, D = _factors(family, params)
    T = R.shape[0]
    mask = _tril_float(T)
    factor_path = True
    if log_a is None:
        Rs, Ks = R, K
    else:
        cs = np.cumsum(log_a)
        hi, lo = cs.max(), cs.min()
        factor_path = hi - lo <= _MAX_FACTOR_SPAN
        if factor_path:
            e = np.exp(cs - 0.5 * (hi + lo))[:, None]
            Rs, Ks = R * e, K / e
    if factor_path:
        core = Rs @ Ks.T
        core *= mask
    else:
        L = np.exp(mixers.segsum(log_a))
        core = L * (R @ K.T)
    res = core - M
    if D is not None:
        res[np.diag_indices(T)] += D
    flat = res.ravel()
    loss = float(np.sqrt(flat @ flat))
    grads = {k: np.zeros(np.shape(v)) for k, v in params.items()}
    if loss == 0.0:
        return loss, grads
    inv = 1.0 / loss
    if factor_path:
        dRs = (res @ Ks) * inv
        dKs = (res.T @ Rs) * inv
        if log_a is None:
            dR, dK, dcs = dRs, dKs, None
        else:
            dR, dK = dRs * e, dKs / e
            dcs = np.einsum("tn,tn->t", dRs, Rs) - np.einsum("tn,tn->t", dKs, Ks)
    else:
        G = res * inv
        dP = G * L
        dR, dK = dP @ K, dP.T @ R
        W = G * core
        dcs = W.sum(axis=1) - W.sum(axis=0)
    if family in ("lowrank", "retnet"):
        grads["A"], grads["B"] = dR, dK
    else:
        grads["C"], grads["B"] = dR, dK
    if dcs is not None:
        dlog_a = np.cumsum(dcs[::-1])[::-1]
        if family == "retnet":
            g = float(params["gamma_logit"])
            grads["gamma_logit"] = np.array(dlog_a.sum() * mixers.sigmoid(-g))
        else:
            grads["a_logits"] = dlog_a * mixers.sigmoid(-params["a_logits"])
    if D is not None:
        grads["D"] = np.diagonal(res) * inv
    return loss, grads


def family_loss(family: str, params: dict, M: Tensor) -> float:
    """Loss through the dense reference materialization (independent of the gradient path)."""
    return frobenius_dist(M, materialize_family(family, params))


def _run_gd(family, params, M, lr, cfg: GdConfig):
    state = AdamWState()
    no_decay = frozenset({"a_logits", "gamma_logit", "D"})
    trace = np.empty(cfg.steps + 1)
    sched = WsdSchedule(cfg.steps, lr, cfg.warmup_frac, cfg.decay_frac)
    for step in range(cfg.steps):
        loss, grads = family_loss_and_grad(family, params, M)
        if not np.isfinite(loss):
            return None, None
        trace[step] = loss
        params, state = adamw_step(
            params, grads, state, wsd_lr(sched, step), cfg.betas, cfg.weight_decay, cfg.eps, no_decay=no_decay
        )
    final, _ = family_loss_and_grad(family, params, M)
    if not np.isfinite(final):
        return None, None
    trace[cfg.steps] = final
    return params, trace


def project_gd(M: Tensor, family: str, n: int, cfg: GdConfig | None = None, sample: int = 0):
    """Fit a gradient family to ``M``; the best of ``cfg.lrs`` by final loss wins.

    ``sample`` keys the initialization substream so that a batch of targets can
    be projected in any order, or in parallel, with identical results.
    """
    cfg = cfg or GdConfig()
    M = _as_causal(M)
    if n < 1:
        raise ContractError("state size must be >= 1")
    T = M.shape[0]
    init = init_params(family, T, n, substream(cfg.seed, "gd-init", sample, n))
    best = None
    for lr in cfg.lrs:
        params, trace = _run_gd(family, dict(init), M, lr, cfg)
        if params is None:
            continue
        if best is None or trace[-1] < best[2][-1]:
            best = (params, lr, trace)
    if best is None:
        raise OptimizationError(f"all learning rates diverged for family {family}")
    params, lr, trace = best
    return params, ProjectionReport(family, n, float(trace[-1]), lr, trace)


# --- benchmark -------------------------------------------------------------


def _project_one(args):
    idx, M, families, state_sizes, cfg = args
    out = {}
    for fam in families:
        if fam == "toeplitz":
            out[(fam, None)] = project_toeplitz(M)[1].distance
            continue
        for n in state_sizes:
            if fam == "semisep":
                out[(fam, n)] = project_semiseparable(M, n)[1].distance
            else:
                out[(fam, n)] = project_gd(M, fam, n, cfg, sample=idx)[1].distance
    return out


def approx_benchmark(matrices, families=ALL_FAMILIES, state_sizes=(4, 8, 16), cfg=None, jobs=1):
    """Mean projection distance per (family, state size) over all targets.

    Returns a list of row dicts in a fixed order: families in the order given,
    state sizes ascending, Toeplitz with ``state_size=None``.
    """
    cfg = cfg or GdConfig()
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats or not families:
        raise ContractError("need at least one matrix and one family")
    for fam in families:
        if fam not in ALL_FAMILIES:
            raise ContractError(f"unknown family {fam!r}")
    sizes = sorted(set(int(s) for s in state_sizes))
    if any(f != "toeplitz" for f in families) and not sizes:
        raise ContractError("need at least one state size")
    tasks = [(i, m, tuple(families), tuple(sizes), cfg) for i, m in enumerate(mats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_project_one, tasks))
    else:
        results = [_project_one(t) for t in tasks]
    T = mats[0].shape[0]
    rows = []
    for fam in families:
        keys = [None] if fam == "toeplitz" else sizes
        for n in keys:
            vals = [r[(fam, n)] for r in results]
            rows.append(
                {
                    "family": fam,
                    "state_size": n,
                    "mean_distance": float(np.mean(vals)),
                    "num_samples": len(vals),
                    "seq_len": T,
                }
            )
    return rows


def format_float(x: float) -> str:
    return repr(float(x)) if not np.isfinite(x) else f"{float(x):.17g}"


def benchmark_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(
            [
                r["family"],
                "" if r["state_size"] is None else r["state_size"],
                format_float(r["mean_distance"]),
                r["num_samples"],
                r["seq_len"],
            ]
        )
    return buf.getvalue()
