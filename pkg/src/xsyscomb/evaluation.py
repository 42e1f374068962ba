"""WER alignment, MAPSSWE significance testing and Table-1 style reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

SUB, DEL, INS, COR = "S", "D", "I", "C"


@dataclass(frozen=True)
class AlignmentResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    pairs: tuple[tuple[int | None, int | None], ...]

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len


def wer_align(reference: Sequence[int], hypothesis: Sequence[int]) -> AlignmentResult:
    """Unit-cost Levenshtein alignment.

    Backtrace prefers substitution (or match), then deletion, then insertion.
    """
    if len(reference) == 0:
        raise ValueError("wer_align: empty reference")
    R, H = len(reference), len(hypothesis)
    d = np.zeros((R + 1, H + 1), dtype=np.int64)
    d[:, 0] = np.arange(R + 1)
    d[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = R, H
    s = ins = dele = 0
    pairs = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            if reference[i - 1] != hypothesis[j - 1]:
                s += 1
            pairs.append((reference[i - 1], hypothesis[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            pairs.append((reference[i - 1], None))
            i -= 1
        else:
            ins += 1
            pairs.append((None, hypothesis[j - 1]))
            j -= 1
    return AlignmentResult(s, ins, dele, R, tuple(reversed(pairs)))


@dataclass
class WerSummary:
    errors: int
    ref_words: int
    per_utt: dict[str, int] = field(default_factory=dict)

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words


def corpus_wer(references: Mapping[str, Sequence[int]], hypotheses: Mapping[str, Sequence[int]]) -> WerSummary:
    """Aggregate WER (percent) over utterances, iterating in sorted utterance order."""
    errors = words = 0
    per_utt = {}
    for utt in sorted(references):
        if utt not in hypotheses:
            raise KeyError(f"no hypothesis for utterance {utt}")
        a = wer_align(references[utt], hypotheses[utt])
        per_utt[utt] = a.errors
        errors += a.errors
        words += a.ref_len
    return WerSummary(errors, words, per_utt)


# -------------------------------------------------------------- MAPSSWE


@dataclass(frozen=True)
class SignificanceResult:
    z_statistic: float
    p_value: float
    significant: bool
    alpha: float = 0.05
    degenerate: bool = False


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mapsswe_test(errors_a: Sequence[float], errors_b: Sequence[float], alpha: float = 0.05) -> SignificanceResult:
    """Matched-pairs test on per-segment error counts (segments are utterances).

    Z = mean(d) / (sd(d) / sqrt(n)) with the sample standard deviation and a
    two-tailed normal p-value.
    """
    if len(errors_a) != len(errors_b):
        raise ValueError(f"mapsswe: {len(errors_a)} vs {len(errors_b)} segments")
    d = np.asarray(errors_a, dtype=np.float64) - np.asarray(errors_b, dtype=np.float64)
    n = d.size
    if n < 2 or not np.any(d):
        return SignificanceResult(0.0, 1.0, False, alpha, degenerate=True)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return SignificanceResult(math.copysign(math.inf, d.mean()), 0.0, False, alpha, degenerate=True)
    z = float(d.mean() / (sd / math.sqrt(n)))
    p = 2.0 * normal_sf(abs(z))
    return SignificanceResult(z, p, p < alpha, alpha)


def paired_test(per_utt_a: Mapping[str, int], per_utt_b: Mapping[str, int], alpha: float = 0.05) -> SignificanceResult:
    keys = sorted(per_utt_a)
    if sorted(per_utt_b) != keys:
        raise ValueError("mapsswe: systems were scored on different utterances")
    return mapsswe_test([per_utt_a[k] for k in keys], [per_utt_b[k] for k in keys], alpha)


# --------------------------------------------------------------- reports


@dataclass
class ReportRow:
    system_id: str
    system: str
    combination: str = "-"
    weights: str = "-"
    wers: dict[str, float] = field(default_factory=dict)
    significant: dict[str, bool] = field(default_factory=dict)


def report_table(rows: Sequence[ReportRow], splits: Sequence[str]) -> tuple[str, str]:
    """CSV text and an aligned text table; a dagger marks significant cells."""
    for row in rows:
        missing = set(splits) - set(row.wers)
        if missing:
            raise ValueError(f"row {row.system_id} lacks splits {sorted(missing)}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "system", "combination", "weights"] + [f"wer_{s}" for s in splits] + [f"sig_{s}" for s in splits])
    for row in rows:
        writer.writerow(
            [row.system_id, row.system, row.combination, row.weights]
            + [f"{row.wers[s]:.2f}" for s in splits]
            + [int(row.significant.get(s, False)) for s in splits]
        )
    header = ["ID", "System", "Combination", "CFM/TDNN"] + list(splits)
    body = [
        [row.system_id, row.system, row.combination, row.weights]
        + [f"{row.wers[s]:.2f}" + ("†" if row.significant.get(s, False) else "") for s in splits]
        for row in rows
    ]
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return buf.getvalue(), "\n".join(lines) + "\n"
