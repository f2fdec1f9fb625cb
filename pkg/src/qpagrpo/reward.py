"""Answer reward: weighted token-level F1 plus normalized Levenshtein similarity."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field


class EmptyGold(ValueError):
    """Raised when a gold answer is empty (a corrupted dataset record)."""


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.3
    beta: float = 0.7
    scaling: float = 2.0
    answer_markers: tuple[str, ...] = field(default=("Answer:", "Final answer:"))

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta!r}")
        if not self.scaling > 0:
            raise ValueError("scaling must be positive")
        object.__setattr__(self, "answer_markers", tuple(self.answer_markers))


@dataclass(frozen=True)
class RewardBreakdown:
    f1: float
    lev_distance: int
    lev_sim: float
    reward: float

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "lev_distance": self.lev_distance,
            "lev_sim": self.lev_sim,
            "reward": self.reward,
        }


def _is_punct(ch: str) -> bool:
    # Unicode P* categories cover inverted marks (¡ ¿) and guillemets.
    return unicodedata.category(ch).startswith("P")


def tokenize_answer(text: str) -> list[str]:
    """Lowercase, drop punctuation characters, split on whitespace."""
    stripped = "".join(ch for ch in text.lower() if not _is_punct(ch))
    return stripped.split()


def token_f1(pred: list[str], gold: list[str]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def levenshtein(a: str, b: str) -> int:
    """Character-level edit distance (insert/delete/substitute, unit costs).

    Runs the classic two-row dynamic program after trimming any shared
    prefix and suffix, which never changes the distance.
    """
    if a == b:
        return 0
    # trim common prefix / suffix
    start = 0
    limit = min(len(a), len(b))
    while start < limit and a[start] == b[start]:
        start += 1
    end_a, end_b = len(a), len(b)
    while end_a > start and end_b > start and a[end_a - 1] == b[end_b - 1]:
        end_a -= 1
        end_b -= 1
    a = a[start:end_a]
    b = b[start:end_b]
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)

    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        append = current.append
        for j, cb in enumerate(b, 1):
            cost = previous[j - 1] + (ca != cb)
            ins = current[j - 1] + 1
            dele = previous[j] + 1
            if ins < cost:
                cost = ins
            if dele < cost:
                cost = dele
            append(cost)
        previous = current
    return previous[-1]


def combined_reward(pred_text: str, gold_text: str, cfg: RewardConfig | None = None) -> RewardBreakdown:
    """Score a predicted answer against the gold answer.

    ``reward = alpha * F1 + beta * (1 - lev / max(len(pred), len(gold)))``,
    with F1 over :func:`tokenize_answer` tokens and the edit distance over
    raw characters. The result is in [0, 1]; trainer-side scaling is not
    applied here.
    """
    cfg = cfg or RewardConfig()
    if not gold_text:
        raise EmptyGold("gold answer is empty")
    f1 = token_f1(tokenize_answer(pred_text), tokenize_answer(gold_text))
    dist = levenshtein(pred_text, gold_text)
    longest = max(len(pred_text), len(gold_text))
    lev_sim = 1.0 - dist / longest if longest else 1.0
    reward = cfg.alpha * f1 + cfg.beta * lev_sim
    reward = min(1.0, max(0.0, reward))
    return RewardBreakdown(f1=f1, lev_distance=dist, lev_sim=lev_sim, reward=reward)


def extract_final_answer(generation: str, cfg: RewardConfig | None = None) -> str:
    """Pull the final answer out of a free-form generation.

    Text after the last answer marker wins; without a marker, the last
    non-empty line is used.
    """
    cfg = cfg or RewardConfig()
    best_pos = -1
    best_end = -1
    for marker in cfg.answer_markers:
        pos = generation.rfind(marker)
        if pos > best_pos or (pos == best_pos and pos >= 0 and pos + len(marker) > best_end):
            best_pos = pos
            best_end = pos + len(marker)
    if best_pos >= 0:
        return generation[best_end:].strip()
    for line in reversed(generation.splitlines()):
        if line.strip():
            return line.strip()
    return generation.strip()
