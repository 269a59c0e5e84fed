"""Structured matrix mixers for a single head.

Each family is described by a small parameter dataclass and can be turned
into its dense ``T x T`` matrix. The SSD family additionally has an O(T N P)
recurrent form, ``scan_ssd``, which is the ground truth the dense form is
checked against.

Recurrence convention: ``h_t = a_t h_{t-1} + B_t x_t^T``, ``y_t = C_t h_t``,
so ``M[t, s] = (a_{s+1} ... a_t) <C_t, B_s>`` and the diagonal is ``<C_t, B_t>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import ContractError, Tensor


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


@dataclass
class AttentionMixerInputs:
    Q: Tensor
    K: Tensor
    scale: float | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.Q.ndim != 2 or self.Q.shape != self.K.shape or self.Q.shape[0] < 1:
            raise ContractError("Q and K must both be T x d with T >= 1")
        if self.scale is None:
            self.scale = 1.0 / np.sqrt(self.Q.shape[1])


@dataclass
class SsdParams:
    """``a_t = sigmoid(a_logits[t])`` unless ``log_a`` is given directly."""

    a_logits: Tensor
    B: Tensor
    C: Tensor
    D: Tensor | None = None

    def __post_init__(self):
        self.a_logits = np.asarray(self.a_logits, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        T = self.a_logits.shape[0]
        if self.B.shape != self.C.shape or self.B.ndim != 2 or self.B.shape[0] != T:
            raise ContractError("B and C must be T x N matching a_logits")
        if self.D is not None:
            self.D = np.asarray(self.D, dtype=np.float64)
            if self.D.shape != (T,):
                raise ContractError("D must have length T")

    @property
    def a(self) -> Tensor:
        return sigmoid(self.a_logits)

    @property
    def log_a(self) -> Tensor:
        return log_sigmoid(self.a_logits)

    @classmethod
    def from_decays(cls, a, B, C, D=None) -> "SsdParams":
        a = np.asarray(a, dtype=np.float64)
        if np.any(a <= 0) or np.any(a >= 1):
            raise ContractError("decays must lie in (0, 1); use materialize_ssd_raw for a = 1")
        return cls(np.log(a) - np.log1p(-a), B, C, D)


@dataclass
class CausalLowRankParams:
    A: Tensor
    B: Tensor


@dataclass
class RetNetParams:
    A: Tensor
    B: Tensor
    gamma_logit: float

    @property
    def gamma(self) -> float:
        return float(sigmoid(self.gamma_logit))


@dataclass
class ToeplitzParams:
    bands: Tensor


@dataclass
class SemiSepSystem:
    """Per-step matrices: A (T, N, N), B (T, m, N), C (T, p, N), D (T, p, m)."""

    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor

    def __post_init__(self):
        self.A, self.B, self.C, self.D = (np.asarray(x, dtype=np.float64) for x in (self.A, self.B, self.C, self.D))
        T, N, N2 = self.A.shape
        if N != N2:
            raise ContractError("A_k must be square")
        ok = (
            self.B.ndim == 3
            and self.C.ndim == 3
            and self.D.ndim == 3
            and self.B.shape[0] == self.C.shape[0] == self.D.shape[0] == T
            and self.B.shape[2] == N
            and self.C.shape[2] == N
            and self.D.shape[1:] == (self.C.shape[1], self.B.shape[1])
        )
        if not ok:
            raise ContractError("inconsistent SemiSepSystem dimensions")


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def segsum(x: Tensor) -> Tensor:
    """``out[i, j] = x[j+1] + ... + x[i]`` for ``i >= j``, ``-inf`` above the diagonal.

    Built by masked cumulative sums rather than differences of a prefix sum, so
    entries near the diagonal do not suffer cancellation.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    strict = np.tril(np.ones((T, T), dtype=bool), k=-1)
    rep = np.where(strict, x[..., :, None], 0.0)  # rep[k, j] = x_k for k > j
    out = np.cumsum(rep, axis=-2)
    return np.where(causal_mask(T), out, -np.inf)


def decay_mask(log_a: Tensor) -> Tensor:
    """``exp(segsum(log a))`` with the upper triangle mapped to exactly 0."""
    return np.exp(segsum(log_a))


def materialize_ssd_raw(log_a: Tensor, B: Tensor, C: Tensor, D: Tensor | None = None) -> Tensor:
    """Dense SSD matrix from log-decays (``log_a <= 0``; 0 means no decay)."""
    log_a = np.asarray(log_a, dtype=np.float64)
    if np.any(log_a > 0):
        raise ContractError("decays must satisfy 0 < a_t <= 1")
    M = decay_mask(log_a) * (np.asarray(C) @ np.asarray(B).T)
    if D is not None:
        M = M + np.diag(D)
    return M


def materialize_ssd(p: SsdParams) -> Tensor:
    return materialize_ssd_raw(p.log_a, p.B, p.C, p.D)


def scan_ssd_raw(log_a: Tensor, B: Tensor, C: Tensor, X: Tensor, D: Tensor | None = None) -> Tensor:
    a = np.exp(np.asarray(log_a, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return scan_ssd_raw(log_a, B, C, X[:, None], D)[:, 0]
    T, P = X.shape
    h = np.zeros((B.shape[1], P))
    Y = np.empty((T, P))
    for t in range(T):
        h = a[t] * h + np.outer(B[t], X[t])
        Y[t] = C[t] @ h
    if D is not None:
        Y = Y + np.asarray(D)[:, None] * X
    return Y


def scan_ssd(p: SsdParams, X: Tensor) -> Tensor:
    """Sequential recurrence; memory is O(N P) beyond the output."""
    return scan_ssd_raw(p.log_a, p.B, p.C, X, p.D)


def materialize_semisep(sys: SemiSepSystem) -> Tensor:
    """Block lower-triangular transfer matrix of a time-varying system.

    Block (i, j), i > j, is ``C_i A_{i-1} ... A_{j+1} B_j^T``; block (i, i) is ``D_i``.
    """
    T, N, _ = sys.A.shape
    p, m = sys.D.shape[1:]
    out = np.zeros((T * p, T * m))
    for j in range(T):
        out[j * p : (j + 1) * p, j * m : (j + 1) * m] = sys.D[j]
        carry = sys.B[j].T  # N x m, state contribution of input j
        for i in range(j + 1, T):
            out[i * p : (i + 1) * p, j * m : (j + 1) * m] = sys.C[i] @ carry
            carry = sys.A[i] @ carry
    return out


def materialize_lowrank(p: CausalLowRankParams) -> Tensor:
    A = np.asarray(p.A, dtype=np.float64)
    return np.tril(A @ np.asarray(p.B, dtype=np.float64).T)


def retnet_mask(T: int, gamma: float) -> Tensor:
    n = np.arange(T)
    diff = n[:, None] - n[None, :]
    return np.where(diff >= 0, float(gamma) ** np.maximum(diff, 0), 0.0)


def materialize_retnet(p: RetNetParams) -> Tensor:
    A = np.asarray(p.A, dtype=np.float64)
    return (A @ np.asarray(p.B, dtype=np.float64).T) * retnet_mask(A.shape[0], p.gamma)


def materialize_toeplitz(p: ToeplitzParams) -> Tensor:
    bands = np.asarray(p.bands, dtype=np.float64)
    T = bands.shape[0]
    idx = np.arange(T)
    diff = idx[:, None] - idx[None, :]
    return np.where(diff >= 0, bands[np.clip(diff, 0, T - 1)], 0.0)


def causal_softmax_attention(q: AttentionMixerInputs) -> Tensor:
    scores = (q.Q @ q.K.T) * q.scale
    T = scores.shape[0]
    scores = np.where(causal_mask(T), scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=1, keepdims=True)
