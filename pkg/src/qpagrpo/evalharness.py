"""Open-ended (reward-thresholded) and multiple-choice (top-1) evaluation."""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field
from typing import Sequence

from .policy import PolicyParams, encode_prompt, greedy_decode, sequence_logprob
from .qpa_extract import CATEGORIES, Dataset, QAExample
from .reward import RewardConfig, combined_reward, extract_final_answer, tokenize_answer

OPTION_LETTERS = "ABCDEF"


class EmptyDataset(ValueError):
    pass


class InsufficientAnswers(ValueError):
    pass


def _norm(text: str) -> str:
    return " ".join(tokenize_answer(text))


@dataclass(frozen=True)
class McqItem:
    base: QAExample
    options: tuple[str, ...]
    gold_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if not 2 <= len(self.options) <= 6:
            raise ValueError("McqItem needs 2-6 options")
        if len({_norm(o) for o in self.options}) != len(self.options):
            raise ValueError("options must be unique")
        if not 0 <= self.gold_index < len(self.options):
            raise ValueError("gold_index out of range")
        if _norm(self.options[self.gold_index]) != _norm(self.base.answer):
            raise ValueError("gold option does not match the answer")

    def prompt_example(self) -> QAExample:
        """The base example with lettered options appended to the question."""
        listing = " ".join(f"{OPTION_LETTERS[i]}) {opt}" for i, opt in enumerate(self.options))
        return dataclasses.replace(self.base, question=f"{self.base.question} Options: {listing}")

    def to_record(self) -> dict:
        return {
            "question_id": self.base.question_id,
            "context_text": self.base.context_text,
            "question": self.base.question,
            "frame_refs": list(self.base.frame_refs),
            "category": self.base.category,
            "options": list(self.options),
            "gold_index": self.gold_index,
        }


@dataclass
class EvalReport:
    split_name: str
    n: int
    mean_reward: float | None
    top1_accuracy: float
    per_category: dict[str, dict] = field(default_factory=dict)
    selections: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "split_name": self.split_name,
            "n": self.n,
            "mean_reward": self.mean_reward,
            "top1_accuracy": self.top1_accuracy,
            "per_category": self.per_category,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    def format_table(self) -> str:
        head = f"{self.split_name}: n={self.n} top1={self.top1_accuracy:.2f}"
        if self.mean_reward is not None:
            head += f" mean_reward={self.mean_reward:.4f}"
        lines = [head, f"{'category':<18}{'n':>6}{'top1':>9}"]
        for cat, row in self.per_category.items():
            lines.append(f"{cat:<18}{row['n']:>6}{row['top1_accuracy']:>9.2f}")
        return "\n".join(lines)


def _per_category(categories: Sequence[str], correct: Sequence[bool]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for cat in CATEGORIES:
        hits = [c for k, c in zip(categories, correct) if k == cat]
        if hits:
            out[cat] = {"n": len(hits), "top1_accuracy": 100.0 * sum(hits) / len(hits)}
    return out


def eval_open_ended(
    params: PolicyParams,
    data: Dataset | Sequence[QAExample],
    reward_cfg: RewardConfig | None = None,
    threshold: float = 0.65,
    seed: int = 0,
    max_tokens: int = 16,
    split_name: str = "open_ended",
) -> EvalReport:
    """Greedy-decode every example and score it with the combined reward.

    ``top1`` counts examples whose reward reaches ``threshold``. Decoding is
    greedy, so ``seed`` is accepted for interface symmetry only.
    """
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must be in [0, 1]")
    reward_cfg = reward_cfg or RewardConfig()
    examples = list(data)
    if not examples:
        raise EmptyDataset("nothing to evaluate")
    rewards = []
    for ex in examples:
        gen = greedy_decode(params, ex, max_tokens)
        rewards.append(combined_reward(extract_final_answer(gen.text, reward_cfg), ex.answer, reward_cfg).reward)
    correct = [r >= threshold for r in rewards]
    return EvalReport(
        split_name=split_name,
        n=len(examples),
        mean_reward=sum(rewards) / len(rewards),
        top1_accuracy=100.0 * sum(correct) / len(correct),
        per_category=_per_category([ex.category for ex in examples], correct),
    )


def make_mcq(data: Dataset | Sequence[QAExample], n_options: int = 4, seed: int = 0) -> list[McqItem]:
    """Build multiple-choice items from gold answers.

    Distractors are other examples' answers from the same category when
    there are enough of them, topped up from the whole dataset otherwise.
    """
    if not 2 <= n_options <= 6:
        raise ValueError("n_options must be in [2, 6]")
    examples = list(data)
    distinct: dict[str, str] = {}
    by_category: dict[str, dict[str, str]] = {}
    for ex in examples:
        key = _norm(ex.answer)
        distinct.setdefault(key, ex.answer)
        by_category.setdefault(ex.category, {}).setdefault(key, ex.answer)
    if len(distinct) < n_options:
        raise InsufficientAnswers(f"{len(distinct)} distinct answers, need {n_options}")

    rng = random.Random(seed)
    items = []
    for ex in examples:
        gold_key = _norm(ex.answer)
        same = [k for k in by_category[ex.category] if k != gold_key]
        picked = rng.sample(same, min(len(same), n_options - 1))
        if len(picked) < n_options - 1:
            rest = [k for k in distinct if k != gold_key and k not in picked]
            picked += rng.sample(rest, n_options - 1 - len(picked))
        options = [ex.answer] + [distinct[k] for k in picked]
        rng.shuffle(options)
        gold_index = next(i for i, o in enumerate(options) if _norm(o) == gold_key)
        items.append(McqItem(ex, tuple(options), gold_index))
    return items


def _argmax_first(scores: Sequence[float]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def eval_mcq(
    params: PolicyParams,
    items: Sequence[McqItem],
    mode: str = "score_options",
    seed: int = 0,
    max_tokens: int = 16,
    split_name: str = "mcq",
) -> EvalReport:
    """Top-1 accuracy over multiple-choice items.

    ``score_options`` picks the option with the highest sequence log-probability
    given the prompt with options appended; ``generate_then_match`` decodes
    once and picks the option with the highest reward against the decode.
    Ties go to the lowest option index.
    """
    if mode not in ("score_options", "generate_then_match"):
        raise ValueError(f"unknown mcq mode {mode!r}")
    if not items:
        raise EmptyDataset("no MCQ items")
    selections = []
    for item in items:
        if mode == "score_options":
            prompt = item.prompt_example()
            features = encode_prompt(prompt, params)
            scores = []
            for opt in item.options:
                ids = params.vocab.encode_text(opt)
                scores.append(float("-inf") if ids is None else sequence_logprob(params, prompt, ids, features))
        else:
            decoded = greedy_decode(params, item.base, max_tokens).text
            scores = [combined_reward(decoded, opt).reward for opt in item.options]
        selections.append(_argmax_first(scores))
    correct = [s == item.gold_index for s, item in zip(selections, items)]
    return EvalReport(
        split_name=split_name,
        n=len(items),
        mean_reward=None,
        top1_accuracy=100.0 * sum(correct) / len(correct),
        per_category=_per_category([it.base.category for it in items], correct),
        selections=selections,
    )
