"""CTC, attention cross-entropy and their multitask interpolation.

Blank is index 0 everywhere.  Labels passed to the CTC functions are
model-space indices (1..V).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

BLANK = 0
NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """Raised when no alignment of the labels fits in the available frames."""


@dataclass(frozen=True)
class MultitaskConfig:
    lam: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"multitask weight must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class LossBreakdown:
    att: float
    ctc: float
    total: float


def multitask(att: float, ctc: float, cfg: MultitaskConfig = MultitaskConfig()):
    return (1.0 - cfg.lam) * att + cfg.lam * ctc


def breakdown(att: float, ctc: float, cfg: MultitaskConfig = MultitaskConfig()) -> LossBreakdown:
    return LossBreakdown(att, ctc, multitask(att, ctc, cfg))


def min_ctc_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_batch(log_probs: np.ndarray, labels: Sequence[Sequence[int]], lengths: Sequence[int],
              need_grad: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Negative log CTC likelihoods for a padded batch, with gradients wrt log_probs.

    log_probs: (B, T, K); frames at or beyond ``lengths[b]`` are ignored.
    """
    B, T, K = log_probs.shape
    lengths = [int(n) for n in lengths]
    for b, (lab, n) in enumerate(zip(labels, lengths)):
        if n > T:
            raise ValueError(f"ctc: length {n} exceeds padded frames {T}")
        if min_ctc_frames(lab) > n:
            raise CTCInfeasibleError(
                f"ctc: {len(lab)} labels need {min_ctc_frames(lab)} frames, utterance {b} has {n}"
            )
    S = 2 * max((len(lab) for lab in labels), default=0) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)
    for b, lab in enumerate(labels):
        e = _extend(lab)
        ext[b, : e.size] = e
        valid[b, : e.size] = True
        for s in range(2, e.size):
            skip[b, s] = e[s] != BLANK and e[s] != e[s - 2]
    S_b = np.array([2 * len(lab) + 1 for lab in labels])
    rows = np.arange(B)
    lp = np.take_along_axis(log_probs, ext[:, None, :].repeat(T, axis=1), axis=2)  # (B, T, S)
    lp = np.where(valid[:, None, :], lp, NEG_INF)

    with np.errstate(invalid="ignore"):
        alpha = np.full((B, T, S), NEG_INF)
        alpha[:, 0, 0] = lp[:, 0, 0]
        if S > 1:
            alpha[:, 0, 1] = lp[:, 0, 1]
        for t in range(1, T):
            prev = alpha[:, t - 1]
            a = prev.copy()
            a[:, 1:] = np.logaddexp(a[:, 1:], prev[:, :-1])
            if S > 2:
                a[:, 2:] = np.where(skip[:, 2:], np.logaddexp(a[:, 2:], prev[:, :-2]), a[:, 2:])
            alpha[:, t] = a + lp[:, t]
        last = np.array(lengths) - 1
        end_a = alpha[rows, last, S_b - 1]
        end_b = np.where(S_b > 1, alpha[rows, last, np.maximum(S_b - 2, 0)], NEG_INF)
        logp = np.logaddexp(end_a, end_b)
    if not np.all(np.isfinite(logp)):
        raise CTCInfeasibleError("ctc: zero-probability labelling under the given outputs")
    losses = -logp
    if not need_grad:
        return losses, None

    with np.errstate(invalid="ignore"):
        beta = np.full((B, T, S), NEG_INF)
        for t in range(T - 1, -1, -1):
            ends = last == t
            if np.any(ends):
                bb = np.full((B, S), NEG_INF)
                bb[rows, S_b - 1] = 0.0
                bb[rows, np.maximum(S_b - 2, 0)] = np.where(S_b > 1, 0.0, bb[rows, np.maximum(S_b - 2, 0)])
                beta[ends, t] = bb[ends]
            inner = t < last
            if t + 1 < T and np.any(inner):
                nxt = beta[:, t + 1] + lp[:, t + 1]
                c = nxt.copy()
                c[:, :-1] = np.logaddexp(c[:, :-1], nxt[:, 1:])
                if S > 2:
                    c[:, :-2] = np.where(skip[:, 2:], np.logaddexp(c[:, :-2], nxt[:, 2:]), c[:, :-2])
                beta[inner, t] = c[inner]
        post = np.exp(alpha + beta - logp[:, None, None])
        post = np.where(np.isfinite(post), post, 0.0)
    grad = np.zeros_like(log_probs)
    bi = np.repeat(rows, T * S)
    ti = np.tile(np.repeat(np.arange(T), S), B)
    np.add.at(grad, (bi, ti, np.broadcast_to(ext[:, None, :], (B, T, S)).reshape(-1)), -post.reshape(-1))
    tmask = np.arange(T)[None, :] < np.array(lengths)[:, None]
    grad *= tmask[:, :, None]
    return losses, grad


def ctc_loss(log_probs: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """-log P_ctc(labels) for one (T, K) log-probability matrix, and its gradient."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    losses, grad = ctc_batch(log_probs[None], [list(labels)], [log_probs.shape[0]])
    return float(losses[0]), grad[0]


def ctc_score(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    losses, _ = ctc_batch(np.asarray(log_probs)[None], [list(labels)], [len(log_probs)], need_grad=False)
    return float(losses[0])


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_oracle(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """Exact -log P_ctc by enumerating all K**T frame paths (T <= 8, K <= 6)."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, K = log_probs.shape
    if T > 8 or K > 6:
        raise ValueError(f"ctc_oracle: instance T={T}, K={K} too large to enumerate")
    target = tuple(labels)
    terms = [
        sum(log_probs[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(K), repeat=T)
        if collapse(path) == target
    ]
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(sum(math.exp(x - m) for x in terms)))


def attention_ce(log_probs: np.ndarray, targets: Sequence[int], smoothing: float = 0.0
                 ) -> tuple[float, np.ndarray]:
    """Teacher-forced cross-entropy: row i is scored against targets[i] (eos included)."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.shape[0] != len(targets):
        raise ValueError(f"attention_ce: {log_probs.shape[0]} rows for {len(targets)} targets")
    L, W = log_probs.shape
    idx = np.arange(L)
    grad = np.zeros_like(log_probs)
    grad[idx, targets] -= 1.0 - smoothing
    if smoothing:
        grad -= smoothing / W
    return float((grad * log_probs).sum()), grad


# ------------------------------------------------------------ autograd ops


def ctc_loss_op(log_probs: Tensor, labels: Sequence[Sequence[int]], lengths: Sequence[int]) -> Tensor:
    """Per-utterance CTC losses (B,) as a differentiable op on (B, T, K) log-probs."""
    losses, grad = ctc_batch(log_probs.data, labels, lengths, need_grad=log_probs.requires_grad)
    return ag.make_op(losses, (log_probs,), lambda g: (grad * g[:, None, None],))


def nll_op(log_probs: Tensor, targets: np.ndarray, mask: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Per-sequence summed negative log-likelihood (B,) of (B, L, W) log-probs."""
    B, L, W = log_probs.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    onehot = np.zeros((B, L, W))
    np.put_along_axis(onehot, targets[:, :, None], 1.0, axis=2)
    weights = (1.0 - smoothing) * onehot + smoothing / W
    weights *= mask[:, :, None]
    out = -(weights * log_probs.data).sum(axis=(1, 2))
    return ag.make_op(out, (log_probs,), lambda g: (-weights * g[:, None, None],))
