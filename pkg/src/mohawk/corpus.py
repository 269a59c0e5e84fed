"""Synthetic token corpus with local Markov structure and long-range bracket matching.

Vocabulary (256 symbols):
  0..15    open bracket of type k
  16..31   close bracket of type k
  32..255  background words

At each position, with the current nesting depth ``d``: with probability
``P_OPEN`` (if ``d < MAX_DEPTH``) an opening bracket of uniformly random type is
emitted and pushed; otherwise with probability ``P_CLOSE`` (if ``d > 0``) the
bracket on top of the stack is closed; otherwise a background word is emitted.
Background words follow a first-order Markov chain whose successor is one of
four fixed permutations of the previous word, so its transition matrix is
doubly stochastic and its stationary law is uniform.

The generator starts in its stationary distribution (depth drawn from the
stationary depth law, stack types uniform, first word uniform), so the unigram
law is exact at every position and ``unigram_probs()`` gives it in closed form.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import ContractError, substream

VOCAB_SIZE = 256
N_BRACKET_TYPES = 16
N_BACKGROUND = VOCAB_SIZE - 2 * N_BRACKET_TYPES
BACKGROUND_OFFSET = 2 * N_BRACKET_TYPES
P_OPEN = 0.06
P_CLOSE = 0.06
MAX_DEPTH = 6
SUCCESSOR_PROBS = (0.5, 0.25, 0.15, 0.1)
_GRAMMAR_SEED = 20240917


def successor_tables() -> np.ndarray:
    """Fixed permutations of the background words, shape (4, N_BACKGROUND)."""
    rng = substream(_GRAMMAR_SEED, "grammar")
    return np.stack([rng.permutation(N_BACKGROUND) for _ in SUCCESSOR_PROBS])


def background_transition() -> np.ndarray:
    P = np.zeros((N_BACKGROUND, N_BACKGROUND))
    rows = np.arange(N_BACKGROUND)
    for prob, perm in zip(SUCCESSOR_PROBS, successor_tables()):
        P[rows, perm] += prob
    return P


def depth_stationary() -> np.ndarray:
    """Stationary law of the nesting depth (a birth-death chain)."""
    pi = np.ones(MAX_DEPTH + 1)
    for d in range(MAX_DEPTH):
        pi[d + 1] = pi[d] * P_OPEN / P_CLOSE
    return pi / pi.sum()


def unigram_probs() -> np.ndarray:
    pi = depth_stationary()
    depths = np.arange(MAX_DEPTH + 1)
    p_open = float(np.sum(pi * np.where(depths < MAX_DEPTH, P_OPEN, 0.0)))
    p_close = float(np.sum(pi * np.where(depths > 0, P_CLOSE, 0.0)))
    p = np.empty(VOCAB_SIZE)
    p[:N_BRACKET_TYPES] = p_open / N_BRACKET_TYPES
    p[N_BRACKET_TYPES : 2 * N_BRACKET_TYPES] = p_close / N_BRACKET_TYPES
    p[BACKGROUND_OFFSET:] = (1.0 - p_open - p_close) / N_BACKGROUND
    return p


def unigram_entropy() -> float:
    """Entropy of the unigram law in nats."""
    p = unigram_probs()
    return float(-np.sum(p * np.log(p)))


def unigram_perplexity() -> float:
    return float(np.exp(unigram_entropy()))


def generate(seed: int, size: int) -> np.ndarray:
    if size < 1:
        raise ContractError("corpus size must be >= 1")
    rng = substream(seed, "corpus")
    succ = successor_tables()
    out = np.empty(size, dtype=np.uint16)
    depth = int(rng.choice(MAX_DEPTH + 1, p=depth_stationary()))
    stack = list(rng.integers(0, N_BRACKET_TYPES, size=depth))
    word = int(rng.integers(0, N_BACKGROUND))
    first_word = True
    u = rng.random(size)
    which = rng.choice(len(SUCCESSOR_PROBS), size=size, p=SUCCESSOR_PROBS)
    types = rng.integers(0, N_BRACKET_TYPES, size=size)
    for t in range(size):
        if u[t] < P_OPEN and len(stack) < MAX_DEPTH:
            stack.append(int(types[t]))
            out[t] = stack[-1]
        elif P_OPEN <= u[t] < P_OPEN + P_CLOSE and stack:
            out[t] = N_BRACKET_TYPES + stack.pop()
        else:
            if not first_word:
                word = int(succ[which[t], word])
            first_word = False
            out[t] = BACKGROUND_OFFSET + word
    return out


def write_tokens(path, tokens) -> None:
    np.asarray(tokens, dtype="<u2").tofile(Path(path))


def read_tokens(path) -> np.ndarray:
    data = np.fromfile(Path(path), dtype="<u2")
    if data.size == 0:
        raise ContractError(f"token file {path} is empty")
    return data.astype(np.int64)


def empirical_unigram_perplexity(tokens, vocab_size: int = VOCAB_SIZE) -> float:
    counts = np.bincount(np.asarray(tokens), minlength=vocab_size).astype(np.float64)
    p = counts / counts.sum()
    nz = p > 0
    return float(np.exp(-np.sum(p[nz] * np.log(p[nz]))))


def heldout_unigram_perplexity(train, heldout, vocab_size: int = VOCAB_SIZE) -> float:
    """Cross-entropy perplexity of an add-one unigram model fit on ``train``."""
    counts = np.bincount(np.asarray(train), minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(np.exp(-logp[np.asarray(heldout)].mean()))


def split(tokens, heldout_frac: float = 0.1):
    tokens = np.asarray(tokens)
    cut = int(round(len(tokens) * (1.0 - heldout_frac)))
    return tokens[:cut], tokens[cut:]


def sample_windows(tokens, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` random contiguous windows of ``length`` tokens."""
    tokens = np.asarray(tokens)
    if len(tokens) < length:
        raise ContractError(f"corpus of {len(tokens)} tokens is shorter than a window of {length}")
    starts = rng.integers(0, len(tokens) - length + 1, size=batch)
    return np.stack([tokens[s : s + length] for s in starts])


def heldout_windows(tokens, length: int, max_windows: int | None = None) -> np.ndarray:
    """Non-overlapping windows covering the held-out split from the start."""
    tokens = np.asarray(tokens)
    n = len(tokens) // length
    if max_windows is not None:
        n = min(n, max_windows)
    if n == 0:
        raise ContractError("held-out split is shorter than one window")
    return tokens[: n * length].reshape(n, length)
