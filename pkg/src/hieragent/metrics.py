"""Answer normalization, EM / CEM / F1, and the trajectory reward."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .protocol import Terminal, Trajectory

MALFORMED_REWARD = -2.0

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str) -> str:
    """Lowercase, drop ASCII punctuation and English articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


@dataclass(frozen=True)
class GoldAnswerSet:
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("gold answer set is empty")
        for a in self.answers:
            if not normalize_answer(a):
                raise ValueError(f"gold answer {a!r} is empty after normalization")

    @classmethod
    def of(cls, golds: str | Iterable[str] | GoldAnswerSet) -> GoldAnswerSet:
        if isinstance(golds, GoldAnswerSet):
            return golds
        if isinstance(golds, str):
            return cls((golds,))
        return cls(tuple(golds))

    def __iter__(self):
        return iter(self.answers)

    def __len__(self):
        return len(self.answers)


Golds = GoldAnswerSet | Sequence[str] | str


def _normalized_golds(golds: Golds) -> list[str]:
    if isinstance(golds, str):
        golds = [golds]
    # Golds that normalize to nothing can never be matched.
    return [g for g in (normalize_answer(x) for x in golds) if g]


def _f1_tokens(pred: list[str], gold: list[str]) -> float:
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds: Golds) -> float:
    pred = normalize_answer(prediction).split()
    return max((_f1_tokens(pred, g.split()) for g in _normalized_golds(golds)), default=0.0)


def exact_match(prediction: str, golds: Golds) -> bool:
    pred = normalize_answer(prediction)
    return any(pred == g for g in _normalized_golds(golds))


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def cover_exact_match(prediction: str, golds: Golds, mode: str = "token") -> bool:
    """True if some gold appears inside the prediction.

    ``mode="token"`` requires the gold to be a contiguous run of whole tokens;
    ``mode="substring"`` accepts any raw substring of the normalized text.
    """
    pred = normalize_answer(prediction)
    if mode == "token":
        toks = pred.split()
        return any(_contains_run(toks, g.split()) for g in _normalized_golds(golds))
    if mode == "substring":
        return any(g in pred for g in _normalized_golds(golds))
    raise ValueError(f"unknown CEM mode {mode!r}")


@dataclass(frozen=True)
class RewardRecord:
    format_valid: bool
    em: bool
    cem: bool
    f1: float
    reward: float


def reward_from(format_valid: bool, f1: float) -> float:
    return f1 if format_valid else MALFORMED_REWARD


def score_answer(answer: str | None, golds: Golds, cem_mode: str = "token") -> RewardRecord:
    """Score a final answer; ``None`` means no well-formed answer was produced."""
    if answer is None:
        return RewardRecord(False, False, False, 0.0, MALFORMED_REWARD)
    f1 = f1_score(answer, golds)
    return RewardRecord(
        format_valid=True,
        em=exact_match(answer, golds),
        cem=cover_exact_match(answer, golds, cem_mode),
        f1=f1,
        reward=reward_from(True, f1),
    )


def score_trajectory(t: Trajectory, golds: Golds, cem_mode: str = "token") -> RewardRecord:
    # Malformed and round-limited trajectories both land in the penalty branch.
    answer = t.answer if t.terminal is Terminal.ANSWERED else None
    return score_answer(answer, golds, cem_mode)
