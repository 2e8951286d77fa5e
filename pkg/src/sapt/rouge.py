"""ROUGE-1 / ROUGE-2 / ROUGE-L F1, used both for probe similarity and evaluation.

No stemming and no stopword removal: scores are fully deterministic and need
no lexical resources.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "RougeScore":
        denom = precision + recall
        f1 = 2 * precision * recall / denom if denom > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1)

    @classmethod
    def zero(cls) -> "RougeScore":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class EvalReport:
    """Arithmetic means of per-sample ROUGE scores over ``n`` samples."""

    n: int
    r1: RougeScore
    r2: RougeScore
    rl: RougeScore

    def to_dict(self) -> dict:
        out: dict = {"n": self.n}
        for name, score in (("r1", self.r1), ("r2", self.r2), ("rl", self.rl)):
            out[f"{name}_precision"] = score.precision
            out[f"{name}_recall"] = score.recall
            out[f"{name}_f1"] = score.f1
        return out


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(ref: str, hyp: str, n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    ref_grams = _ngrams(tokenize(ref), n)
    hyp_grams = _ngrams(tokenize(hyp), n)
    ref_total = sum(ref_grams.values())
    hyp_total = sum(hyp_grams.values())
    if ref_total == 0 or hyp_total == 0:
        return RougeScore.zero()
    overlap = sum((ref_grams & hyp_grams).values())
    return RougeScore.from_pr(overlap / hyp_total, overlap / ref_total)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Longest common subsequence length, O(len(a)*len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(ref: str, hyp: str) -> RougeScore:
    """LCS-based precision/recall/F1."""
    ref_tokens = tokenize(ref)
    hyp_tokens = tokenize(hyp)
    if not ref_tokens or not hyp_tokens:
        return RougeScore.zero()
    lcs = lcs_length(ref_tokens, hyp_tokens)
    return RougeScore.from_pr(lcs / len(hyp_tokens), lcs / len(ref_tokens))


SIM_METRICS = ("rouge-1", "rouge-2", "rouge-l")


def score(ref: str, hyp: str, metric: str = "rouge-l") -> RougeScore:
    if metric == "rouge-1":
        return rouge_n(ref, hyp, 1)
    if metric == "rouge-2":
        return rouge_n(ref, hyp, 2)
    if metric == "rouge-l":
        return rouge_l(ref, hyp)
    raise ValueError(f"unknown metric {metric!r}; expected one of {SIM_METRICS}")


def evaluate_corpus(pairs: list[tuple[str, str]]) -> EvalReport:
    """Average per-sample ROUGE-1/2/L over (reference, hypothesis) pairs."""
    if not pairs:
        raise ValueError("evaluate_corpus requires at least one (ref, hyp) pair")
    n = len(pairs)

    def mean(scores: list[RougeScore]) -> RougeScore:
        return RougeScore(
            precision=sum(s.precision for s in scores) / n,
            recall=sum(s.recall for s in scores) / n,
            f1=sum(s.f1 for s in scores) / n,
        )

    r1 = [rouge_n(r, h, 1) for r, h in pairs]
    r2 = [rouge_n(r, h, 2) for r, h in pairs]
    rl = [rouge_l(r, h) for r, h in pairs]
    return EvalReport(n=n, r1=mean(r1), r2=mean(r2), rl=mean(rl))
