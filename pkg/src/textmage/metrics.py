"""Corpus BLEU-1..4, single-reference-set METEOR, and token accuracy.

BLEU is unsmoothed corpus-level with clipped n-gram counts: a zero modified
precision zeroes the cumulative score at that order and above, and the report
flags which orders hit zero. METEOR uses exact surface matches only, with the
10-weighted harmonic F-mean and the cubic fragmentation penalty.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

Tokens = Sequence


@dataclass
class BleuReport:
    bleu: dict[int, float]          # cumulative BLEU-n, scaled x100
    precisions: dict[int, float]    # modified n-gram precisions, in [0, 1]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    zero_orders: list[int] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = {str(n): self.bleu[n] for n in sorted(self.bleu)}
        out["bp"] = self.brevity_penalty
        return out


@dataclass
class MeteorReport:
    precision: float
    recall: float
    f_mean: float
    penalty: float
    score: float
    matches: int
    chunks: int


def _ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
         max_n: int = 4) -> BleuReport:
    """Corpus BLEU: clipped counts summed per order, multiplied by the BP.

    ``references[i]`` is the list of reference token sequences for
    ``candidates[i]``. The effective reference length per candidate is the
    closest reference length, shorter on ties.
    """
    if not candidates:
        raise DataError("BLEU needs a non-empty candidate corpus")
    if len(candidates) != len(references):
        raise DataError(
            f"candidates ({len(candidates)}) and references ({len(references)}) are misaligned"
        )
    clipped = {n: 0 for n in range(1, max_n + 1)}
    total = {n: 0 for n in range(1, max_n + 1)}
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise DataError("every candidate needs at least one reference")
        cand = list(cand)
        refs = [list(r) for r in refs]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for r in refs:
                rc = _ngram_counts(r, n)
                for gram, cnt in rc.items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            clipped[n] += sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
            total[n] += sum(counts.values())

    if cand_len == 0:
        return BleuReport(
            bleu={n: 0.0 for n in range(1, max_n + 1)},
            precisions={n: 0.0 for n in range(1, max_n + 1)},
            brevity_penalty=1.0,
            candidate_length=0,
            reference_length=ref_len,
            zero_orders=list(range(1, max_n + 1)),
        )

    precisions = {n: (clipped[n] / total[n] if total[n] else 0.0) for n in range(1, max_n + 1)}
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    zero_orders = [n for n in range(1, max_n + 1) if precisions[n] == 0.0]
    scores = {}
    for n in range(1, max_n + 1):
        if any(precisions[k] == 0.0 for k in range(1, n + 1)):
            scores[n] = 0.0
        else:
            log_mean = sum(math.log(precisions[k]) for k in range(1, n + 1)) / n
            scores[n] = 100.0 * bp * math.exp(log_mean)
    return BleuReport(
        bleu=scores,
        precisions=precisions,
        brevity_penalty=bp,
        candidate_length=cand_len,
        reference_length=ref_len,
        zero_orders=zero_orders,
    )


def _align(cand: list, ref: list) -> tuple[int, int]:
    """(matches, chunks) of the alignment maximizing matches, then minimizing chunks.

    Exact memoized search over candidate positions; the used-reference set is
    compressed to positions whose token occurs in the candidate, which keeps
    the state space tiny for caption-sized inputs.
    """
    cand_set = set(cand)
    matchable = [j for j, tok in enumerate(ref) if tok in cand_set]
    pos_index = {j: k for k, j in enumerate(matchable)}
    by_token: dict = {}
    for j in matchable:
        by_token.setdefault(ref[j], []).append(j)

    memo: dict = {}

    def go(i: int, used: int, prev: int) -> tuple[int, int]:
        # returns best (matches, -chunks) from candidate position i onward
        if i == len(cand):
            return (0, 0)
        key = (i, used, prev)
        hit = memo.get(key)
        if hit is not None:
            return hit
        best = go(i + 1, used, -2)  # skip candidate token i
        for j in by_token.get(cand[i], ()):
            bit = 1 << pos_index[j]
            if used & bit:
                continue
            m, negc = go(i + 1, used | bit, j)
            cont = j == prev + 1 and prev >= 0
            cand_val = (m + 1, negc - (0 if cont else 1))
            if cand_val > best:
                best = cand_val
        memo[key] = best
        return best

    matches, neg_chunks = go(0, 0, -2)
    return matches, -neg_chunks


def meteor(candidate: Tokens, references: Sequence[Tokens]) -> MeteorReport:
    """Best single-reference METEOR score with exact unigram matching.

    F = 10PR/(R+9P); penalty = 0.5*(chunks/matches)^3; score = F*(1-penalty).
    An empty candidate or zero matches scores 0.
    """
    if not references:
        raise DataError("METEOR needs at least one reference")
    cand = list(candidate)
    best: MeteorReport | None = None
    for ref in references:
        ref = list(ref)
        if not cand or not ref:
            report = MeteorReport(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0)
        else:
            matches, chunks = _align(cand, ref)
            if matches == 0:
                report = MeteorReport(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0)
            else:
                precision = matches / len(cand)
                recall = matches / len(ref)
                f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
                penalty = 0.5 * (chunks / matches) ** 3
                report = MeteorReport(
                    precision=precision,
                    recall=recall,
                    f_mean=f_mean,
                    penalty=penalty,
                    score=f_mean * (1.0 - penalty),
                    matches=matches,
                    chunks=chunks,
                )
        if best is None or report.score > best.score:
            best = report
    return best


class TokenAccuracy(NamedTuple):
    value: float
    positions: int  # 0 flags an all-ignored input


def token_accuracy(logits, targets, ignore_id: int = 0) -> TokenAccuracy:
    """Fraction of non-ignored positions where argmax(logits) hits the target."""
    arr = logits.data if hasattr(logits, "data") else np.asarray(logits, dtype=np.float64)
    t = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets,
                   dtype=np.int64)
    if arr.ndim != 2 or t.ndim != 1 or arr.shape[0] != len(t):
        raise DataError(f"token_accuracy shapes disagree: logits {arr.shape}, targets {t.shape}")
    keep = t != ignore_id
    n = int(keep.sum())
    if n == 0:
        return TokenAccuracy(0.0, 0)
    pred = arr[keep].argmax(axis=1)
    return TokenAccuracy(float((pred == t[keep]).mean()), n)
