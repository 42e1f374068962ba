"""N-best generation for both model families and cross-system scoring.

All scores are negative log-probabilities (lower is better).  Token ids here
are external ids 0..V-1; the models' label spaces are shifted by one.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .conformer import ConformerModel
from .corpus import FeatureSequence
from .losses import BLANK, ctc_batch, min_ctc_frames
from .tdnn import TdnnModel

log = logging.getLogger(__name__)

NEG_INF = -math.inf


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score_tdnn: float | None = None
    score_cfm: float | None = None
    rank_origin: int = 0
    forced_close: bool = False  # closed at the length cap rather than by eos

    def to_json(self) -> dict:
        d = {"tokens": [int(t) for t in self.tokens], "score_tdnn": self.score_tdnn, "score_cfm": self.score_cfm}
        if self.forced_close:
            d["forced_close"] = True
        return d

    @classmethod
    def from_json(cls, d: dict, rank: int) -> "Hypothesis":
        return cls(tuple(d["tokens"]), d["score_tdnn"], d["score_cfm"], rank, d.get("forced_close", False))


@dataclass
class NBestList:
    utterance_id: str
    hypotheses: list[Hypothesis] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def truncated(self, n: int) -> "NBestList":
        return NBestList(self.utterance_id, self.hypotheses[:n])

    def to_json(self) -> dict:
        return {"utt": self.utterance_id, "nbest": [h.to_json() for h in self.hypotheses]}

    @classmethod
    def from_json(cls, d: dict) -> "NBestList":
        return cls(d["utt"], [Hypothesis.from_json(h, i) for i, h in enumerate(d["nbest"])])


@dataclass(frozen=True)
class DecodeConfig:
    nbest: int = 100
    beam: int | None = None  # defaults to 2 * nbest
    length_norm: bool = True
    max_len: int | None = None  # label-synchronous cap; defaults to the encoder length
    max_len_penalty: float = 0.0

    @property
    def beam_size(self) -> int:
        return self.beam if self.beam is not None else 2 * self.nbest

    def validate(self) -> None:
        if self.nbest < 1:
            raise ValueError("decode: nbest must be >= 1")
        if self.beam_size < self.nbest:
            raise ValueError(f"decode: beam {self.beam_size} smaller than nbest {self.nbest}")


def _logsumexp(a: np.ndarray, axis) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _ranked(scored: Iterable[tuple[float, tuple[int, ...]]]) -> list[tuple[float, tuple[int, ...]]]:
    return sorted((s, t) for s, t in scored if math.isfinite(s))


def ctc_sequence_scores(log_probs: np.ndarray, token_seqs: Sequence[Sequence[int]]) -> list[float]:
    """-log P_ctc of each external token sequence; infinite when the frames cannot host it."""
    T = log_probs.shape[0]
    labels = [[t + 1 for t in s] for s in token_seqs]
    feasible = [i for i, lab in enumerate(labels) if min_ctc_frames(lab) <= T]
    out = [math.inf] * len(labels)
    if feasible:
        batch = np.broadcast_to(log_probs, (len(feasible),) + log_probs.shape)
        losses, _ = ctc_batch(batch, [labels[i] for i in feasible], [T] * len(feasible), need_grad=False)
        for i, v in zip(feasible, losses):
            out[i] = float(v)
    return out


def ctc_sequence_score(log_probs: np.ndarray, tokens: Sequence[int]) -> float:
    return ctc_sequence_scores(log_probs, [tokens])[0]


# ----------------------------------------------------- frame-synchronous


def ctc_prefix_beam(log_probs: np.ndarray, beam: int) -> list[tuple[int, ...]]:
    """Prefix beam search over (T, K) CTC log-probabilities.

    Prefixes are merged by collapsed label string with blank/non-blank ending
    probabilities summed in log space.  Returns the surviving prefixes (model
    labels), pruned to ``beam`` per frame with ties broken by label order.
    """
    T, K = log_probs.shape
    prefixes: list[tuple[int, ...]] = [()]
    pb = np.array([0.0])
    pnb = np.array([NEG_INF])
    with np.errstate(invalid="ignore"):
        for t in range(T):
            x = log_probs[t]
            H = len(prefixes)
            last = np.array([p[-1] if p else -1 for p in prefixes])
            total = np.logaddexp(pb, pnb)
            stay_b = total + x[BLANK]
            stay_nb = np.where(last > 0, pnb + x[np.maximum(last, 0)], NEG_INF)
            # extension by label k; a repeated label must cross a blank
            ext = total[:, None] + x[None, 1:]
            rep = last > 0
            ext[rep, last[rep] - 1] = pb[rep] + x[last[rep]]
            # an extension that lands on a prefix already in the beam merges into it
            index = {p: i for i, p in enumerate(prefixes)}
            for i, p in enumerate(prefixes):
                parent = index.get(p[:-1]) if p else None
                if parent is not None:
                    stay_nb[i] = np.logaddexp(stay_nb[i], ext[parent, p[-1] - 1])
                    ext[parent, p[-1] - 1] = NEG_INF
            cand_b = np.concatenate([stay_b, np.full(H * (K - 1), NEG_INF)])
            cand_nb = np.concatenate([stay_nb, ext.reshape(-1)])
            score = np.logaddexp(cand_b, cand_nb)
            order = np.argsort(-score, kind="stable")
            alive = order[np.isfinite(score[order])]
            if len(alive) > beam:
                cutoff = score[alive[beam - 1]]
                alive = alive[score[alive] >= cutoff]

            def key(j):
                return prefixes[j] if j < H else prefixes[(j - H) // (K - 1)] + ((j - H) % (K - 1) + 1,)

            chosen = sorted((int(j) for j in alive), key=lambda j: (-score[j], key(j)))[:beam]
            prefixes = [key(j) for j in chosen]
            pb = cand_b[chosen]
            pnb = cand_nb[chosen]
    return prefixes


def nbest_frame_sync(model: TdnnModel, lhuc, features: FeatureSequence, N: int = 100,
                     beam: int | None = None) -> NBestList:
    """CTC prefix beam search; survivors are rescored exactly and the best N kept."""
    cfg = DecodeConfig(N, beam)
    cfg.validate()
    lp = model.log_probs(features, lhuc)
    return nbest_from_ctc(lp, features.utterance_id, cfg)


def nbest_from_ctc(log_probs: np.ndarray, utterance_id: str, cfg: DecodeConfig) -> NBestList:
    prefixes = ctc_prefix_beam(log_probs, cfg.beam_size)
    tokens = [tuple(k - 1 for k in p) for p in prefixes]
    ranked = _ranked(zip(ctc_sequence_scores(log_probs, tokens), tokens))[: cfg.nbest]
    return NBestList(utterance_id, [Hypothesis(t, score_tdnn=s, rank_origin=i) for i, (s, t) in enumerate(ranked)])


# ----------------------------------------------------- label-synchronous


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities for a set of hypotheses.

    For a prefix g, ``rn[t]`` / ``rb[t]`` are log-probabilities of emitting g
    within the first t frames with the last frame non-blank / blank.
    """

    def __init__(self, log_probs: np.ndarray):
        self.x = log_probs
        T = log_probs.shape[0]
        rb = np.full(T + 1, NEG_INF)
        rb[0] = 0.0
        rb[1:] = np.cumsum(log_probs[:, BLANK])
        self.init = (np.full(T + 1, NEG_INF), rb)

    def full(self, state) -> float:
        rn, rb = state
        return float(np.logaddexp(rn[-1], rb[-1]))

    def extend(self, states: list, lasts: list[int | None]):
        """Prefix scores and successor states for every (hypothesis, label) pair.

        Returns ``psi`` (H, K) with psi[:, BLANK] = -inf, plus rn, rb arrays (H, K, T + 1).
        """
        x = self.x
        T, K = x.shape
        H = len(states)
        rn = np.stack([s[0] for s in states])  # (H, T+1)
        rb = np.stack([s[1] for s in states])
        tot = np.logaddexp(rn, rb)
        phi = np.broadcast_to(tot[:, None, :], (H, K, T + 1)).copy()
        for h, last in enumerate(lasts):
            if last is not None:
                phi[h, last] = rb[h]
        new_n = np.full((H, K, T + 1), NEG_INF)
        new_b = np.full((H, K, T + 1), NEG_INF)
        for t in range(1, T + 1):
            new_n[:, :, t] = np.logaddexp(new_n[:, :, t - 1], phi[:, :, t - 1]) + x[t - 1][None, :]
            new_b[:, :, t] = np.logaddexp(new_b[:, :, t - 1], new_n[:, :, t - 1]) + x[t - 1, BLANK]
        psi = _logsumexp(phi[:, :, :T] + x.T[None, :, :], axis=2)
        psi[:, BLANK] = NEG_INF
        return psi, new_n, new_b


def cfm_sequence_scores(model: ConformerModel, states: np.ndarray, ctc_lp: np.ndarray,
                        token_seqs: Sequence[Sequence[int]]) -> list[float]:
    """Joint scores -((1 - lam) log P_att + lam log P_ctc) by teacher forcing."""
    lam = model.cfg.ctc_weight
    labelled = [[t + 1 for t in s] for s in token_seqs]
    rows = model.teacher_forced(states, labelled)
    eos = model.cfg.eos
    out = []
    ctcs = ctc_sequence_scores(ctc_lp, token_seqs)
    for lab, lp, ctc in zip(labelled, rows, ctcs):
        att = float(lp[np.arange(len(lab) + 1), lab + [eos]].sum())
        out.append(math.inf if not math.isfinite(ctc) else -((1 - lam) * att) + lam * ctc)
    return out


@dataclass
class _Partial:
    labels: tuple[int, ...]
    att: float  # summed attention log-probability
    ctc: float  # CTC prefix log-probability
    state: tuple


def label_sync_search(model: ConformerModel, states: np.ndarray, ctc_lp: np.ndarray, cfg: DecodeConfig
                      ) -> list[tuple[tuple[int, ...], bool]]:
    """Joint attention/CTC beam search.  Returns finished label sequences and forced-close flags."""
    lam = model.cfg.ctc_weight
    eos = model.cfg.eos
    K = ctc_lp.shape[1]
    beam = cfg.beam_size
    cap = cfg.max_len if cfg.max_len is not None else states.shape[0]
    cap = min(cap, model.cfg.max_positions - 1)
    scorer = CtcPrefixScorer(ctc_lp)
    active = [_Partial((), 0.0, 0.0, scorer.init)]
    finished: dict[tuple[int, ...], bool] = {}

    def norm(raw: float, n: int) -> float:
        return raw / n if cfg.length_norm else raw

    for step in range(cap + 1):
        if not active:
            break
        if step == cap:
            # the length cap closes every open hypothesis, flagged
            for hyp in active:
                if math.isfinite(scorer.full(hyp.state)):
                    finished.setdefault(hyp.labels, True)
            break
        prefixes = [[model.cfg.sos] + list(h.labels) for h in active]
        att_lp = model.decoder_step(states, prefixes)  # (H, W)
        psi, new_n, new_b = scorer.extend([h.state for h in active],
                                          [h.labels[-1] if h.labels else None for h in active])
        candidates = []
        for h, hyp in enumerate(active):
            full_ctc = scorer.full(hyp.state)
            if math.isfinite(full_ctc):
                raw = -((1 - lam) * (hyp.att + att_lp[h, eos]) + lam * full_ctc)
                candidates.append((norm(raw, len(hyp.labels) + 1), hyp.labels, h, eos))
            for k in range(1, K):
                if math.isfinite(psi[h, k]):
                    raw = -((1 - lam) * (hyp.att + att_lp[h, k]) + lam * psi[h, k])
                    candidates.append((norm(raw, len(hyp.labels) + 1), hyp.labels + (k,), h, k))
        candidates.sort(key=lambda c: (c[0], c[1], c[3] == eos))
        nxt = []
        for score, labels, h, k in candidates[:beam]:
            hyp = active[h]
            if k == eos:
                finished.setdefault(labels, False)
            else:
                nxt.append(_Partial(labels, hyp.att + att_lp[h, k], float(psi[h, k]), (new_n[h, k], new_b[h, k])))
        active = nxt
    return list(finished.items())


def nbest_label_sync(model: ConformerModel, lhuc, features: FeatureSequence, N: int = 100,
                     beam: int | None = None, cfg: DecodeConfig | None = None) -> NBestList:
    """Label-synchronous N-best; scores are recomputed exactly and stored un-normalized."""
    cfg = cfg or DecodeConfig(N, beam)
    cfg.validate()
    states, ctc_lp = model.encode(features, lhuc)
    found = label_sync_search(model, states, ctc_lp, cfg)
    seqs = [tuple(k - 1 for k in labels) for labels, _ in found]
    forced = {s: f for s, (_, f) in zip(seqs, found)}
    scores = cfm_sequence_scores(model, states, ctc_lp, seqs)
    penalized = [(s + (cfg.max_len_penalty if forced[t] else 0.0), t) for s, t in zip(scores, seqs)]
    ranked = _ranked(penalized)[: cfg.nbest]
    if any(forced[t] for _, t in ranked):
        log.debug("%s: hypotheses closed at the length cap", features.utterance_id)
    return NBestList(features.utterance_id,
                     [Hypothesis(t, score_cfm=s, rank_origin=i, forced_close=forced[t]) for i, (s, t) in enumerate(ranked)])


# --------------------------------------------------------- cross scoring


def cross_score_many(system, features: FeatureSequence, token_seqs: Sequence[Sequence[int]], lhuc=None) -> list[float]:
    if isinstance(system, TdnnModel):
        return ctc_sequence_scores(system.log_probs(features, lhuc), token_seqs)
    if isinstance(system, ConformerModel):
        states, ctc_lp = system.encode(features, lhuc)
        return cfm_sequence_scores(system, states, ctc_lp, token_seqs)
    raise TypeError(f"cannot score with a {type(system).__name__}")


def cross_score(system, features: FeatureSequence, tokens: Sequence[int], lhuc=None) -> float:
    """Negative log score of ``tokens`` under ``system``; infinite when CTC-infeasible."""
    return cross_score_many(system, features, [tokens], lhuc)[0]


def fill_scores(nbest: NBestList, system, features: FeatureSequence, lhuc=None) -> NBestList:
    """Fill the missing score field of every hypothesis using ``system``."""
    attr = "score_tdnn" if isinstance(system, TdnnModel) else "score_cfm"
    scores = cross_score_many(system, features, [h.tokens for h in nbest.hypotheses], lhuc)
    hyps = []
    for h, s in zip(nbest.hypotheses, scores):
        h = Hypothesis(h.tokens, h.score_tdnn, h.score_cfm, h.rank_origin, h.forced_close)
        setattr(h, attr, s if math.isfinite(s) else None)
        hyps.append(h)
    return NBestList(nbest.utterance_id, hyps)


# ---------------------------------------------------------------- oracle


def exhaustive_oracle(model, features: FeatureSequence, max_len: int, lhuc=None) -> list[tuple[float, tuple[int, ...]]]:
    """Every token sequence up to ``max_len`` with its exact score, best first.

    Infeasible sequences are omitted.  Refuses vocabularies above 3 or lengths above 5.
    """
    V = model.cfg.vocab_size if isinstance(model, ConformerModel) else model.cfg.output_dim - 1
    if V > 3 or max_len > 5:
        raise ValueError(f"exhaustive_oracle: V={V}, max_len={max_len} too large to enumerate")
    seqs = [s for n in range(max_len + 1) for s in itertools.product(range(V), repeat=n)]
    return _ranked(zip(cross_score_many(model, features, seqs, lhuc), seqs))


# -------------------------------------------------------------------- io


def write_nbest(path, lists: Iterable[NBestList]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for nb in sorted(lists, key=lambda n: n.utterance_id):
            f.write(json.dumps(nb.to_json(), separators=(",", ":")) + "\n")


def read_nbest(path) -> list[NBestList]:
    with Path(path).open() as f:
        return [NBestList.from_json(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------- systems


@dataclass
class System:
    """A trained model plus optional per-speaker LHUC parameters."""

    name: str
    model: object
    lhuc: dict[str, dict[str, np.ndarray]] | None = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    @property
    def kind(self) -> str:
        return "tdnn" if isinstance(self.model, TdnnModel) else "cfm"

    def lhuc_for(self, speaker_id: str):
        if self.lhuc is None:
            return None
        if speaker_id not in self.lhuc:
            raise KeyError(f"{self.name}: no LHUC parameters for speaker {speaker_id}")
        return self.lhuc[speaker_id]

    def nbest(self, utt: FeatureSequence, cfg: DecodeConfig | None = None) -> NBestList:
        cfg = cfg or self.decode
        lhuc = self.lhuc_for(utt.speaker_id)
        if self.kind == "tdnn":
            return nbest_frame_sync(self.model, lhuc, utt, cfg.nbest, cfg.beam_size)
        return nbest_label_sync(self.model, lhuc, utt, cfg=cfg)

    def decode_all(self, utts: Sequence[FeatureSequence], cfg: DecodeConfig | None = None) -> list[NBestList]:
        return [self.nbest(u, cfg) for u in sorted(utts, key=lambda u: u.utterance_id)]

    def score(self, utt: FeatureSequence, token_seqs) -> list[float]:
        return cross_score_many(self.model, utt, token_seqs, self.lhuc_for(utt.speaker_id))

    def fill(self, nbest: NBestList, utt: FeatureSequence) -> NBestList:
        return fill_scores(nbest, self.model, utt, self.lhuc_for(utt.speaker_id))


def one_best(lists: Iterable[NBestList]) -> dict[str, tuple[int, ...]]:
    """utterance -> top hypothesis tokens (empty when a list is empty)."""
    return {nb.utterance_id: nb.best().tokens if nb.hypotheses else () for nb in lists}
