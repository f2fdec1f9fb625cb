"""Mine context-question-pause-answer examples from cue lists and build JSONL datasets."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .transcript import CueList

logger = logging.getLogger(__name__)

CATEGORIES = (
    "spatial_location",
    "object_selection",
    "navigation",
    "knowledge_recall",
    "problem_solving",
    "counting",
    "other",
)
MODALITIES = ("text_only", "visual_only", "multimodal")
REASONING = ("immediate", "sequential")

SENTENCE_RE = re.compile(r"[^.!?…]+[.!?…]+|[^.!?…]+$")
TRAILING_PUNCT = ".!?… "

# Sentence-final punctuation only; a trailing "?!" does not count as a question.


def load_lexicons() -> dict:
    with resources.files("qpagrpo").joinpath("data/lexicons.json").open(encoding="utf-8") as fh:
        return json.load(fh)


_LEXICONS = load_lexicons()


class InsufficientEpisodes(ValueError):
    pass


@dataclass(frozen=True)
class QpaConfig:
    pause_min_ms: int = 2000
    pause_max_ms: int = 15000
    context_window_ms: int = 60000
    answer_window_ms: int = 8000
    frame_sample_count: int = 8
    rhetorical_patterns: tuple[str, ...] = tuple(_LEXICONS["rhetorical_patterns"])
    affirmations: tuple[str, ...] = tuple(_LEXICONS["affirmations"])

    def __post_init__(self) -> None:
        if not 0 < self.pause_min_ms < self.pause_max_ms:
            raise ValueError("require 0 < pause_min_ms < pause_max_ms")
        if self.context_window_ms <= 0 or self.answer_window_ms <= 0:
            raise ValueError("context_window_ms and answer_window_ms must be positive")
        if self.frame_sample_count < 1:
            raise ValueError("frame_sample_count must be >= 1")
        object.__setattr__(self, "rhetorical_patterns", tuple(self.rhetorical_patterns))
        object.__setattr__(self, "affirmations", tuple(self.affirmations))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PauseSpan:
    start_ms: int
    end_ms: int

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class QuestionHit:
    cue_index: int
    sentence: str
    ts_ms: int
    prefix: str = ""  # earlier sentences in the same cue


@dataclass(frozen=True)
class QAExample:
    episode_id: str
    question_id: str
    question_ts_ms: int
    frame_refs: tuple[int, ...]
    context_text: str
    question: str
    pause: PauseSpan
    answer: str
    category: str = "other"
    modality: str = "multimodal"
    reasoning: str = "immediate"

    def to_record(self) -> dict:
        # field order is part of the on-disk format
        return {
            "episode_id": self.episode_id,
            "question_id": self.question_id,
            "question_ts_ms": self.question_ts_ms,
            "frame_refs": list(self.frame_refs),
            "context_text": self.context_text,
            "question": self.question,
            "pause": {"start_ms": self.pause.start_ms, "end_ms": self.pause.end_ms},
            "answer": self.answer,
            "category": self.category,
            "modality": self.modality,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_record(cls, rec: dict) -> QAExample:
        return cls(
            episode_id=rec["episode_id"],
            question_id=rec["question_id"],
            question_ts_ms=int(rec["question_ts_ms"]),
            frame_refs=tuple(int(t) for t in rec["frame_refs"]),
            context_text=rec["context_text"],
            question=rec["question"],
            pause=PauseSpan(int(rec["pause"]["start_ms"]), int(rec["pause"]["end_ms"])),
            answer=rec["answer"],
            category=rec.get("category", "other"),
            modality=rec.get("modality", "multimodal"),
            reasoning=rec.get("reasoning", "immediate"),
        )


@dataclass
class Dataset:
    examples: list[QAExample]
    config_fingerprint: str = ""
    skips: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [ex.question_id for ex in self.examples]
        if len(ids) != len(set(ids)):
            raise ValueError("question_id values must be unique")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def episodes(self) -> list[str]:
        return list(dict.fromkeys(ex.episode_id for ex in self.examples))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(ex.to_record(), ensure_ascii=False) + "\n" for ex in self.examples)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> Dataset:
        examples = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    examples.append(QAExample.from_record(json.loads(line)))
        return cls(examples)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def concat(cls, parts: Iterable[Dataset]) -> Dataset:
        parts = list(parts)
        fps = {p.config_fingerprint for p in parts}
        return cls(
            [ex for p in parts for ex in p.examples],
            config_fingerprint=fps.pop() if len(fps) == 1 else "",
            skips=[s for p in parts for s in p.skips],
        )


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in SENTENCE_RE.findall(text) if s.strip()]


def _is_rhetorical(sentence: str, cfg: QpaConfig) -> bool:
    return any(re.match(p, sentence, flags=re.IGNORECASE) for p in cfg.rhetorical_patterns)


def detect_questions(cues: CueList, cfg: QpaConfig | None = None) -> list[QuestionHit]:
    cfg = cfg or QpaConfig()
    hits = []
    for cue in cues:
        sentences = split_sentences(cue.text)
        for n, sentence in enumerate(sentences):
            if sentence.endswith("?") and not _is_rhetorical(sentence, cfg):
                hits.append(QuestionHit(cue.index, sentence, cue.end_ms, " ".join(sentences[:n])))
    return hits


def detect_pause(cues: CueList, hit_index: int, cfg: QpaConfig | None = None) -> PauseSpan | None:
    """First qualifying silence after the question cue, looking at most two cues ahead."""
    cfg = cfg or QpaConfig()
    seq = cues.cues
    for j in range(hit_index, min(hit_index + 3, len(seq) - 1)):
        gap = seq[j + 1].start_ms - seq[j].end_ms
        if cfg.pause_min_ms <= gap <= cfg.pause_max_ms:
            return PauseSpan(seq[j].end_ms, seq[j + 1].start_ms)
    return None


def _strip_affirmations(sentences: list[str], cfg: QpaConfig) -> list[str]:
    affirm = {a.casefold() for a in cfg.affirmations}
    i = 0
    while i < len(sentences) and sentences[i].casefold() in affirm:
        i += 1
    return sentences[i:]


def extract_answer(cues: CueList, pause: PauseSpan, cfg: QpaConfig | None = None) -> str | None:
    cfg = cfg or QpaConfig()
    window_end = pause.end_ms + cfg.answer_window_ms
    collected: list[str] = []
    stop = False
    for cue in cues:
        if cue.start_ms < pause.end_ms:
            continue
        if cue.start_ms >= window_end:
            break
        for sentence in split_sentences(cue.text):
            if sentence.endswith("?"):
                stop = True
                break
            collected.append(sentence)
        if stop:
            break
    answer = " ".join(_strip_affirmations(collected, cfg)).strip()
    return answer or None


def _has_phrase(text: str, phrase: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", text) is not None


def assign_category(question: str) -> str:
    """Keyword rules, first match wins: counting, navigation, problem solving,
    object selection ("which" plus an object noun), spatial location, then
    knowledge recall as the default."""
    q = question.casefold()
    cats = _LEXICONS["categories"]
    if any(_has_phrase(q, p) for p in cats["counting"]):
        return "counting"
    if any(_has_phrase(q, p) for p in cats["navigation"]):
        return "navigation"
    if any(_has_phrase(q, p) for p in cats["problem_solving"]):
        return "problem_solving"
    if any(_has_phrase(q, t) for t in cats["object_selection_trigger"]) and any(
        _has_phrase(q, n) for n in cats["object_nouns"]
    ):
        return "object_selection"
    if any(_has_phrase(q, p) for p in cats["spatial_location"]):
        return "spatial_location"
    return "knowledge_recall"


def assign_modality(answer: str, context_text: str) -> str:
    if not context_text:
        return "visual_only"
    core = answer.rstrip(TRAILING_PUNCT).casefold()
    if core and core in context_text.casefold():
        return "text_only"
    return "multimodal"


def assign_reasoning(question: str) -> str:
    q = question.casefold()
    return "sequential" if any(_has_phrase(q, w) for w in _LEXICONS["sequential"]) else "immediate"


def sample_frames(question_ts_ms: int, cfg: QpaConfig) -> tuple[int, ...]:
    """Evenly spaced timestamps over the context window, ending at the question."""
    n = cfg.frame_sample_count
    start = max(0, question_ts_ms - cfg.context_window_ms)
    if n == 1:
        return (question_ts_ms,)
    span = question_ts_ms - start
    return tuple(start + span * i // (n - 1) for i in range(n))


def build_examples(cues: CueList, cfg: QpaConfig | None = None) -> Dataset:
    cfg = cfg or QpaConfig()
    hits = detect_questions(cues, cfg)
    examples: list[QAExample] = []
    skips: list[dict] = []
    seen_pauses: set[tuple[int, int]] = set()

    def skip(hit: QuestionHit, reason: str) -> None:
        skips.append({"episode_id": cues.episode_id, "cue_index": hit.cue_index, "reason": reason})
        logger.info("skip %s cue %d: %s", cues.episode_id, hit.cue_index, reason)

    for n, hit in enumerate(hits):
        if n + 1 < len(hits) and hits[n + 1].cue_index == hit.cue_index:
            skip(hit, "superseded_in_cue")
            continue
        pause = detect_pause(cues, hit.cue_index, cfg)
        if pause is None:
            skip(hit, "no_pause")
            continue
        if (pause.start_ms, pause.end_ms) in seen_pauses:
            skip(hit, "duplicate_pause")
            continue
        answer = extract_answer(cues, pause, cfg)
        if answer is None:
            skip(hit, "no_answer")
            continue
        seen_pauses.add((pause.start_ms, pause.end_ms))

        window_start = hit.ts_ms - cfg.context_window_ms
        parts = [c.text for c in cues.cues[: hit.cue_index] if c.start_ms >= window_start]
        if hit.prefix:
            parts.append(hit.prefix)
        context_text = " ".join(parts)
        examples.append(
            QAExample(
                episode_id=cues.episode_id,
                question_id=f"{cues.episode_id}-q{len(examples):04d}",
                question_ts_ms=hit.ts_ms,
                frame_refs=sample_frames(hit.ts_ms, cfg),
                context_text=context_text,
                question=hit.sentence,
                pause=pause,
                answer=answer,
                category=assign_category(hit.sentence),
                modality=assign_modality(answer, context_text),
                reasoning=assign_reasoning(hit.sentence),
            )
        )
    return Dataset(examples, config_fingerprint=cfg.fingerprint(), skips=skips)


def split_dataset(
    d: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Episode-level train/val/test split.

    Every episode lands in exactly one split. Episode counts follow the
    largest-remainder rule, with each non-zero ratio getting at least one
    episode.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative fractions summing to 1")
    episodes = sorted(d.episodes)
    nonzero = [i for i, r in enumerate(ratios) if r > 0]
    if len(episodes) < len(nonzero):
        raise InsufficientEpisodes(f"{len(episodes)} episodes cannot fill {len(nonzero)} non-empty splits")
    random.Random(seed).shuffle(episodes)

    n = len(episodes)
    exact = [r * n for r in ratios]
    counts = [int(x) for x in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in nonzero:
        if counts[i] == 0:
            donor = max(range(3), key=lambda k: (counts[k], -k))
            counts[donor] -= 1
            counts[i] = 1

    assignment: dict[str, int] = {}
    pos = 0
    for split_idx, c in enumerate(counts):
        for ep in episodes[pos:pos + c]:
            assignment[ep] = split_idx
        pos += c
    parts: list[list[QAExample]] = [[], [], []]
    for ex in d.examples:
        parts[assignment[ex.episode_id]].append(ex)
    return tuple(Dataset(p, config_fingerprint=d.config_fingerprint) for p in parts)  # type: ignore[return-value]


def _percentages(counts: dict[str, int], total: int) -> dict[str, float]:
    return {k: (100.0 * v / total if total else 0.0) for k, v in counts.items()}


def dataset_stats(d: Dataset) -> dict:
    total = len(d)
    cat = {c: 0 for c in CATEGORIES}
    mod = {m: 0 for m in MODALITIES}
    rea = {r: 0 for r in REASONING}
    for ex in d:
        cat[ex.category] += 1
        mod[ex.modality] += 1
        rea[ex.reasoning] += 1
    n_episodes = len(d.episodes)
    return {
        "n_examples": total,
        "n_episodes": n_episodes,
        "category_counts": cat,
        "category_pct": _percentages(cat, total),
        "modality_counts": mod,
        "modality_pct": _percentages(mod, total),
        "reasoning_counts": rea,
        "reasoning_pct": _percentages(rea, total),
        "questions_per_episode": total / n_episodes if n_episodes else 0.0,
    }
