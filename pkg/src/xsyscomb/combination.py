"""System combination: two-pass N-best rescoring and cross adaptation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .adaptation import AdaptationSet, AdaptHyper, estimate_blhuc, estimate_lhuc
from .corpus import FeatureSequence
from .decoding import DecodeConfig, NBestList, System, one_best
from .evaluation import corpus_wer, wer_align

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_DEPTHS = (10, 25, 50, 100)


class CombinationError(ValueError):
    pass


@dataclass(frozen=True)
class CombinationConfig:
    beta: float = 0.3
    grid: tuple[float, ...] = DEFAULT_GRID
    depths: tuple[int, ...] = DEFAULT_DEPTHS

    def validate(self) -> None:
        for b in (self.beta,) + tuple(self.grid):
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"combination weight {b} outside [0, 1]")
        if any(d < 1 for d in self.depths):
            raise ValueError("N-best depths must be positive")


def parse_grid(text: str) -> tuple[float, ...]:
    """'0:1:0.1' -> (0.0, 0.1, ..., 1.0); a comma list is also accepted."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step))
        return tuple(round(lo + i * step, 10) for i in range(n + 1))
    return tuple(float(x) for x in text.split(","))


# ------------------------------------------------------------ rescoring


@dataclass
class CombinedOutput:
    utterance_id: str
    tokens: tuple[int, ...]
    index: int  # position of the winner within the retained hypotheses
    rank_origin: int
    s_cfm: np.ndarray
    s_tdnn: np.ndarray
    beta: float
    dropped: int = 0

    @property
    def combined(self) -> np.ndarray:
        return self.beta * self.s_cfm + (1.0 - self.beta) * self.s_tdnn


def retained(nbest: NBestList):
    keep = [h for h in nbest.hypotheses
            if h.score_cfm is not None and h.score_tdnn is not None
            and math.isfinite(h.score_cfm) and math.isfinite(h.score_tdnn)]
    return keep, len(nbest.hypotheses) - len(keep)


def rescore_ranking(s_cfm: np.ndarray, s_tdnn: np.ndarray, beta: float, rank_origin=None) -> list[int]:
    """Indices ordered by beta * s_cfm + (1 - beta) * s_tdnn, ties by first-pass rank."""
    combined = beta * np.asarray(s_cfm) + (1.0 - beta) * np.asarray(s_tdnn)
    ranks = np.arange(len(combined)) if rank_origin is None else np.asarray(rank_origin)
    return [int(i) for i in np.lexsort((ranks, combined))]


def two_pass_rescore(nbest: NBestList, beta: float) -> CombinedOutput:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta {beta} outside [0, 1]")
    hyps, dropped = retained(nbest)
    if not hyps:
        raise CombinationError(f"{nbest.utterance_id}: no hypothesis carries both scores")
    if dropped:
        log.debug("%s: %d hypotheses without a finite cross-score dropped", nbest.utterance_id, dropped)
    s_cfm = np.array([h.score_cfm for h in hyps])
    s_tdnn = np.array([h.score_tdnn for h in hyps])
    best = rescore_ranking(s_cfm, s_tdnn, beta, [h.rank_origin for h in hyps])[0]
    return CombinedOutput(nbest.utterance_id, hyps[best].tokens, best, hyps[best].rank_origin,
                          s_cfm, s_tdnn, beta, dropped)


def rescore_corpus(lists: Sequence[NBestList], beta: float) -> dict[str, CombinedOutput]:
    out = {nb.utterance_id: two_pass_rescore(nb, beta) for nb in lists}
    dropped = sum(o.dropped for o in out.values())
    if dropped:
        log.info("beta=%g: %d hypotheses without a finite cross-score dropped", beta, dropped)
    return out


def combined_csv(outputs: Mapping[str, CombinedOutput]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "tokens", "beta", "score_cfm", "score_tdnn", "combined", "index"])
    for utt in sorted(outputs):
        o = outputs[utt]
        w.writerow([utt, " ".join(map(str, o.tokens)), f"{o.beta:g}", repr(float(o.s_cfm[o.index])),
                    repr(float(o.s_tdnn[o.index])), repr(float(o.combined[o.index])), o.index])
    return buf.getvalue()


# -------------------------------------------------------------- studies


@dataclass
class SweepRow:
    beta: float
    wer: float
    errors: int
    words: int
    best: bool = False


def weight_sweep(lists: Sequence[NBestList], grid: Sequence[float], references: Mapping[str, Sequence[int]]
                 ) -> list[SweepRow]:
    """Corpus WER of two-pass rescoring at every weight; the lowest (first on ties) is flagged."""
    rows = []
    for beta in grid:
        hyps = {u: o.tokens for u, o in rescore_corpus(lists, beta).items()}
        s = corpus_wer(references, hyps)
        rows.append(SweepRow(float(beta), s.wer, s.errors, s.ref_words))
    if rows:
        min(rows, key=lambda r: r.wer).best = True
    return rows


@dataclass
class DepthRow:
    depth: int
    wer: float
    oracle_wer: float


def oracle_errors(nbest: NBestList, reference: Sequence[int]) -> int:
    return min((wer_align(reference, h.tokens).errors for h in nbest.hypotheses), default=len(reference))


def nbest_depth_study(lists: Sequence[NBestList], depths: Sequence[int], beta: float,
                      references: Mapping[str, Sequence[int]]) -> list[DepthRow]:
    """Rescored WER and oracle WER after truncating every list to each depth."""
    rows = []
    words = sum(len(references[nb.utterance_id]) for nb in lists)
    for n in sorted(depths):
        cut = [nb.truncated(n) for nb in lists]
        hyps = {u: o.tokens for u, o in rescore_corpus(cut, beta).items()}
        wer = corpus_wer(references, hyps).wer
        oracle = sum(oracle_errors(nb, references[nb.utterance_id]) for nb in cut)
        rows.append(DepthRow(n, wer, 100.0 * oracle / words))
    return rows


def rows_csv(rows, header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{getattr(r, h):.4f}" if isinstance(getattr(r, h), float) else getattr(r, h) for h in header])
    return buf.getvalue()


# ------------------------------------------------------- cross adaptation


@dataclass
class CrossAdaptResult:
    transforms: dict[str, object]
    lhuc: dict[str, dict[str, np.ndarray]]
    decodes: list[NBestList]
    supervision_wer: float | None = None
    changed: int = 0  # utterances whose 1-best differs from the standalone target


def speaker_sets(utterances: Sequence[FeatureSequence], supervision: Mapping[str, Sequence[int]],
                 source: str) -> dict[str, AdaptationSet]:
    """Pool utterances and their supervision per speaker."""
    by_spk: dict[str, list[FeatureSequence]] = {}
    for u in sorted(utterances, key=lambda u: u.utterance_id):
        by_spk.setdefault(u.speaker_id, []).append(u)
    return {s: AdaptationSet(s, us, [tuple(supervision[u.utterance_id]) for u in us], source)
            for s, us in sorted(by_spk.items())}


def adapt_system(target: System, sets: Mapping[str, AdaptationSet], method: str, hyper: AdaptHyper,
                 seed: int, name: str) -> tuple[System, dict[str, object]]:
    """Adapt ``target`` per speaker; returns the adapted system and the raw transforms."""
    if method not in ("lhuc", "blhuc"):
        raise ValueError(f"unknown adaptation method {method!r}")
    transforms, lhuc = {}, {}
    for spk, aset in sets.items():
        if method == "lhuc":
            t = estimate_lhuc(target.model, aset, hyper, seed)
            lhuc[spk] = t.params
        else:
            t = estimate_blhuc(target.model, aset, hyper, seed)
            lhuc[spk] = t.mu
        transforms[spk] = t
    return System(name, target.model, lhuc, target.decode), transforms


def cross_adapt(source: System, target: System, adapt_utts: Sequence[FeatureSequence],
                test_utts: Sequence[FeatureSequence], hyper: AdaptHyper, seed: int, method: str | None = None,
                source_decodes: Mapping[str, Sequence[int]] | None = None,
                standalone: Mapping[str, Sequence[int]] | None = None) -> CrossAdaptResult:
    """Adapt ``target`` to the 1-best output of ``source`` and decode the test utterances.

    The TDNN target defaults to Bayesian LHUC, the Conformer target to LHUC.
    """
    method = method or ("blhuc" if target.kind == "tdnn" else "lhuc")
    if source_decodes is None:
        source_decodes = one_best(source.decode_all(adapt_utts, _one_best_cfg(source)))
    sets = speaker_sets(adapt_utts, source_decodes, "cross-system")
    adapted, transforms = adapt_system(target, sets, method, hyper, seed, f"{source.name}=>{target.name}")
    decodes = adapted.decode_all(test_utts)
    result = CrossAdaptResult(transforms, adapted.lhuc, decodes)
    refs = {u.utterance_id: u.reference for u in adapt_utts}
    result.supervision_wer = corpus_wer(refs, {u: source_decodes[u] for u in refs}).wer
    if standalone is not None:
        hyps = one_best(decodes)
        result.changed = sum(1 for u, t in hyps.items() if tuple(standalone[u]) != tuple(t))
    return result


def _one_best_cfg(system: System) -> DecodeConfig:
    return DecodeConfig(1, system.decode.beam_size, system.decode.length_norm)
