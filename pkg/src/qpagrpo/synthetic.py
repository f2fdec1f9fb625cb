"""Synthetic data: a small answer-copying curriculum and planted Q-P-A episode transcripts."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .policy import Vocab
from .qpa_extract import Dataset, PauseSpan, QAExample
from .transcript import Cue, format_srt, format_vtt

NUMBERS = ("two", "three", "four")
COLORS = ("red", "blue", "green", "yellow")
NOUNS = ("tree", "boat", "star", "bridge", "ball", "key")
# never gold answers; present so the policy has to learn to avoid them
OTHER_WORDS = (
    "five", "pink", "purple", "orange", "map", "basket", "shell", "flower", "hat", "door",
    "the", "a", "is", "yes", "no", "left", "right", "up", "down", "big", "small", "here", "there",
    "go", "look", "and", "it", "we", "you", "on", "in", "at", "to", "over", "under",
)
FILLERS = (
    "wow", "friends", "jungle", "swiper", "boots", "monkey", "sunny", "hill", "river", "grass",
    "cloud", "song", "dance", "happy", "sky", "sand", "forest", "sleepy", "quick", "giant",
)

CONTEXT_TEMPLATE = "look, the {answer}! yes, the {answer} is by the {filler}."

CURRICULUM_SHAPES = {
    "spatial_location": ("Where is it hiding?", 2),
    "counting": ("How many can you count?", 3),
    "object_selection": ("Which one do we need?", 1),
}


def curriculum_vocab() -> Vocab:
    """50 tokens: BOS, EOS and 48 words."""
    return Vocab.from_words(NUMBERS + COLORS + NOUNS + OTHER_WORDS)


def _answers(rng: random.Random, length: int) -> list[str]:
    """Every answer of the given length, shuffled."""
    if length == 1:
        combos = [(n,) for n in NOUNS]
    elif length == 2:
        combos = [(c, n) for c in COLORS for n in NOUNS]
    else:
        combos = [(k, c, n) for k in NUMBERS for c in COLORS for n in NOUNS]
    out = [" ".join(c) for c in combos]
    rng.shuffle(out)
    return out


def _curriculum_example(rng: random.Random, episode_id: str, n: int, category: str, answer: str) -> QAExample:
    question, _ = CURRICULUM_SHAPES[category]
    context = CONTEXT_TEMPLATE.format(answer=answer, filler=rng.choice(FILLERS))
    ts = 30_000
    return QAExample(
        episode_id=episode_id,
        question_id=f"{episode_id}-q{n:04d}",
        question_ts_ms=ts,
        frame_refs=(0, ts),
        context_text=context,
        question=question,
        pause=PauseSpan(ts, ts + 3000),
        answer=answer,
        category=category,
        modality="text_only",
        reasoning="immediate",
    )


def _covering_pick(pool: list[str], count: int, taken: set[str]) -> list[str]:
    """Greedy pick of ``count`` answers from ``pool`` maximizing unseen words."""
    picked: list[str] = []
    seen: dict[str, int] = {}
    for _ in range(count):
        candidates = [a for a in pool if a not in taken and a not in picked]
        if not candidates:  # lexicon exhausted: reuse an answer under a new context
            candidates = [a for a in pool if picked.count(a) == min(picked.count(b) for b in pool)]
        best = min(candidates, key=lambda a: sum(seen.get(w, 0) for w in a.split()))
        picked.append(best)
        for w in best.split():
            seen[w] = seen.get(w, 0) + 1
    return picked


def make_curriculum(n_train: int = 20, n_heldout: int = 40, seed: int = 0) -> tuple[Dataset, Dataset, Vocab]:
    """Questions whose 1-3 word answer is stated in the context.

    Question wording depends only on the category (which fixes answer
    length), so the context is the only thing that identifies the answer.
    Training answers are chosen to cover the answer lexicon; held-out
    questions use answers that never occur in training.
    """
    rng = random.Random(seed)
    cats = list(CURRICULUM_SHAPES)
    pools = {cat: _answers(rng, CURRICULUM_SHAPES[cat][1]) for cat in cats}

    def build(episode_id: str, count: int, taken: set[str]) -> Dataset:
        per_cat = {cat: count // 3 + (1 if k < count % 3 else 0) for k, cat in enumerate(cats)}
        chosen = {cat: _covering_pick(pools[cat], per_cat[cat], taken) for cat in cats}
        examples = []
        for i in range(count):
            cat = cats[i % 3]
            examples.append(_curriculum_example(rng, episode_id, i, cat, chosen[cat].pop(0)))
        return Dataset(examples)

    train = build("curriculum-train", n_train, set())
    heldout = build("curriculum-heldout", n_heldout, {ex.answer for ex in train})
    return train, heldout, curriculum_vocab()


# ---------------------------------------------------------------------------
# Planted episodes

EP_COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
EP_NOUNS = ("boat", "tree", "ball", "key", "star", "bridge", "basket", "shell", "flower", "hat")
EP_PLACES = ("the mountain", "the castle", "the beach", "the old tower")
EP_NUMBERS = ("Two", "Three", "Four", "Five", "Six", "Seven")
SPEAKERS = (None, None, "DORA", "BOOTS")
NARRATION = (
    "We are almost there.",
    "Let's keep going.",
    "This is so much fun.",
    "Come on, follow me.",
    "Look at the sky.",
    "The wind is blowing.",
    "We have to hurry.",
    "Map knows the way.",
)
RHETORICAL = ("Are you ready?", "We can do it, right?", "Will you help?")
DISTRACTORS = ("What was that sound?", "Who is that over there?", "What time is it?")
AFFIRMATION_PREFIXES = ("Yeah!", "Yes!", "That's right!", "¡Sí!")


def _triple(rng: random.Random) -> tuple[str, str, list[str], str]:
    """One (category, question, answer sentences, context sentence) template draw."""
    color, other_color = rng.sample(EP_COLORS, 2)
    noun, other = rng.sample(EP_NOUNS, 2)
    kind = rng.choice(
        ("counting", "spatial_location", "object_selection", "navigation", "knowledge_recall", "problem_solving")
    )
    if kind == "counting":
        return kind, f"How many {noun}s can you count?", [f"{rng.choice(EP_NUMBERS)} {noun}s!"], f"Look at all the {noun}s."
    if kind == "spatial_location":
        spot = rng.choice(("behind", "under", "next to"))
        return (
            kind,
            f"Where is the {color} {noun}?",
            [f"The {color} {noun} is", f"{spot} the {other}."],
            f"We need the {color} {noun}.",
        )
    if kind == "object_selection":
        return (
            kind,
            f"Which {noun} is the biggest?",
            [f"The {color} {noun}!"],
            f"There is a {color} {noun} and a {other_color} {noun}.",
        )
    if kind == "navigation":
        place = rng.choice(EP_PLACES)
        return kind, f"Which way do we go to {place}?", [f"Over the {other}!"], f"We have to get to {place}."
    if kind == "knowledge_recall":
        return kind, f"What color is the {noun}?", [f"{color.capitalize()}!"], f"Here comes the {noun}."
    return kind, "What should we use to cross the river?", [f"The {noun}!"], "Oh no, the river is too wide."


@dataclass
class Plant:
    cue_index: int
    question: str
    answer: str
    question_ts_ms: int
    pause_start_ms: int
    pause_end_ms: int
    category: str

    def to_record(self) -> dict:
        return {
            "cue_index": self.cue_index,
            "question": self.question,
            "answer": self.answer,
            "question_ts_ms": self.question_ts_ms,
            "pause": [self.pause_start_ms, self.pause_end_ms],
            "category": self.category,
        }


@dataclass
class SyntheticEpisode:
    episode_id: str
    cues: list[Cue]
    plants: list[Plant]
    expected_skips: list[dict] = field(default_factory=list)

    def to_srt(self) -> str:
        return format_srt(self.cues)

    def to_vtt(self) -> str:
        return format_vtt(self.cues)

    def sidecar(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "plants": [p.to_record() for p in self.plants],
            "expected_skips": self.expected_skips,
        }


class _Timeline:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.cues: list[Cue] = []
        self.t = 0

    def emit(self, text: str, gap: int, speaker: str | None = None, duration: int | None = None) -> int:
        start = self.t + gap
        end = start + (duration if duration is not None else self.rng.randint(1500, 3000))
        self.cues.append(Cue(len(self.cues), start, end, text, speaker))
        self.t = end
        return len(self.cues) - 1

    def short_gap(self) -> int:
        return self.rng.randint(200, 1500)


def make_episode(episode_id: str, n_triples: int, seed: int = 0, pause_ms: int | None = None) -> SyntheticEpisode:
    """An episode transcript with ``n_triples`` planted question-pause-answer triples.

    Each triple is a short context block, a question cue (optionally with a
    leading sentence and a "Do you see it?" follow-up), a silent pause, and
    an answer of one or two cues (optionally opening with an affirmation),
    then at least 16 s of silence. Other gaps stay under 2 s except a
    pause after some rhetorical questions, which never sits within three
    cues of a planted question. Pauses last 2.5-9 s unless
    ``pause_ms`` overrides them; an override below the extraction minimum
    turns every planted question into a ``no_pause`` skip.
    """
    rng = random.Random(f"{episode_id}:{seed}")
    tl = _Timeline(rng)
    plants: list[Plant] = []
    skips: list[dict] = []
    for _ in range(n_triples):
        category, question, answer_parts, context = _triple(rng)
        speaker = rng.choice(SPEAKERS)
        # the opening narration keeps a rhetorical pause out of the previous question's lookahead
        tl.emit(rng.choice(NARRATION), 16_000 + rng.randint(0, 4000) if tl.cues else 1000, speaker)
        gap = tl.short_gap()
        if rng.random() < 0.3:
            tl.emit(rng.choice(RHETORICAL), gap, speaker)
            gap = rng.randint(2500, 5000)
        if rng.random() < 0.3:
            idx = tl.emit(rng.choice(DISTRACTORS), gap, speaker)
            skips.append({"episode_id": episode_id, "cue_index": idx, "reason": "no_pause"})
            tl.emit(rng.choice(NARRATION), tl.short_gap(), speaker)
            gap = tl.short_gap()
        tl.emit(rng.choice(NARRATION), gap, speaker)
        tl.emit(context, tl.short_gap(), speaker)

        lead = rng.random() < 0.3
        q_idx = tl.emit(f"Look! {question}" if lead else question, tl.short_gap(), speaker)
        q_end = tl.t
        if rng.random() < 0.3:
            tl.emit("Do you see it?", rng.randint(200, 800), speaker, duration=1200)
        pause = pause_ms if pause_ms is not None else rng.randint(2500, 9000)
        pause_start = tl.t

        parts = list(answer_parts)
        if rng.random() < 0.4:
            parts[0] = f"{rng.choice(AFFIRMATION_PREFIXES)} {parts[0]}"
        tl.emit(parts[0], pause, speaker, duration=rng.randint(1500, 2500))
        pause_end = tl.cues[-1].start_ms
        for extra in parts[1:]:
            tl.emit(extra, rng.randint(200, 800), speaker, duration=rng.randint(1500, 2500))

        if pause_ms is not None and pause_ms < 2000:
            skips.append({"episode_id": episode_id, "cue_index": q_idx, "reason": "no_pause"})
        else:
            plants.append(
                Plant(q_idx, question, " ".join(answer_parts), q_end, pause_start, pause_end, category)
            )
    skips.sort(key=lambda s: s["cue_index"])
    return SyntheticEpisode(episode_id, tl.cues, plants, skips)


EPISODE_FIXTURES = (
    ("episode-01", 15, "srt", None),
    ("episode-02", 17, "vtt", None),
    ("episode-03", 19, "srt", None),
)
PERTURBED_FIXTURE = ("episode-perturbed", 15, "srt", 1000)


def write_episode_fixtures(out_dir: str | Path, seed: int = 0, perturbed: bool = False) -> list[Path]:
    """Write fixture transcripts, each with a ``.plants.json`` sidecar; returns the transcript paths.

    ``perturbed`` writes the single sub-threshold-pause episode instead of
    the three regular ones.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for episode_id, n, fmt, pause in (PERTURBED_FIXTURE,) if perturbed else EPISODE_FIXTURES:
        ep = make_episode(episode_id, n, seed=seed, pause_ms=pause)
        path = out / f"{episode_id}.{fmt}"
        path.write_text(ep.to_srt() if fmt == "srt" else ep.to_vtt(), encoding="utf-8")
        (out / f"{episode_id}.plants.json").write_text(
            json.dumps(ep.sidecar(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        written.append(path)
    return written
