"""SRT / WebVTT parsing into ordered, normalized cues with integer-millisecond timing."""

from __future__ import annotations

import html
import logging
import re
import unicodedata
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

TIMESTAMP_RE = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{2})[,.](\d{3})$")
ARROW = "-->"
TAG_RE = re.compile(r"<[^>]*>")
ASS_OVERRIDE_RE = re.compile(r"\{\\[^}]*\}")
VOICE_RE = re.compile(r"<v(?:\.[\w.-]+)?\s+([^>]+)>")
SPEAKER_RE = re.compile(r"^([^\W\d_][\w'\-]*):(?=\s|$)")
WS_RE = re.compile(r"\s+")


class TranscriptError(ValueError):
    pass


class DecodeError(TranscriptError):
    """Input bytes are not valid UTF-8."""


class FormatError(TranscriptError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class EmptyTranscript(TranscriptError):
    """The transcript parsed cleanly but holds no cues."""


@dataclass(frozen=True)
class Cue:
    index: int
    start_ms: int
    end_ms: int
    text: str
    speaker: str | None = None

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class ParseWarning:
    file: str
    line: int
    category: str
    message: str

    def to_dict(self) -> dict:
        return {"file": self.file, "line": self.line, "category": self.category, "message": self.message}


@dataclass
class CueList:
    episode_id: str
    cues: list[Cue]
    warnings: list[ParseWarning] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.episode_id:
            raise ValueError("episode_id must be non-empty")

    def __len__(self) -> int:
        return len(self.cues)

    def __iter__(self):
        return iter(self.cues)

    def __getitem__(self, i: int) -> Cue:
        return self.cues[i]


def normalize_cue_text(raw: str) -> str:
    """Strip markup, unescape entities, NFC-normalize and collapse whitespace."""
    text = ASS_OVERRIDE_RE.sub("", raw)
    text = TAG_RE.sub("", text)
    text = html.unescape(text)
    text = unicodedata.normalize("NFC", text)
    return WS_RE.sub(" ", text).strip()


def split_speaker(text: str) -> tuple[str | None, str]:
    """Split a leading ``NAME:`` label off normalized cue text.

    Only a single ALLCAPS or TitleCase token directly followed by a colon
    counts; anything else is left in the text.
    """
    m = SPEAKER_RE.match(text)
    if not m:
        return None, text
    name = m.group(1)
    if not (name.isupper() or name.istitle()):
        return None, text
    return name, text[m.end():].strip()


def parse_timestamp(value: str, line: int = 0) -> int:
    m = TIMESTAMP_RE.match(value.strip())
    if not m:
        raise FormatError(f"unparseable timestamp {value.strip()!r}", line)
    hours, minutes, seconds, millis = m.groups()
    minutes_i, seconds_i = int(minutes), int(seconds)
    if minutes_i > 59 or seconds_i > 59:
        raise FormatError(f"timestamp field out of range {value.strip()!r}", line)
    return ((int(hours or 0) * 60 + minutes_i) * 60 + seconds_i) * 1000 + int(millis)


def format_timestamp(ms: int, sep: str = ",") -> str:
    """Render integer milliseconds as ``HH:MM:SS,mmm`` (or with ``sep``)."""
    if ms < 0:
        raise ValueError("negative timestamp")
    seconds, millis = divmod(ms, 1000)
    minutes, seconds = divmod(seconds, 60)
    hours, minutes = divmod(minutes, 60)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d}{sep}{millis:03d}"


def _parse_timing(line_text: str, line: int) -> tuple[int, int]:
    if ARROW not in line_text:
        raise FormatError("missing '-->' separator", line)
    left, right = line_text.split(ARROW, 1)
    # VTT cue settings and SRT coordinates follow the end time
    right_parts = right.strip().split()
    if not right_parts:
        raise FormatError("missing end timestamp", line)
    return parse_timestamp(left, line), parse_timestamp(right_parts[0], line)


def _blocks(lines: list[str], first_line: int = 1):
    """Yield (line_number, [lines]) for blank-line separated blocks."""
    block: list[str] = []
    start = first_line
    for offset, text in enumerate(lines):
        lineno = first_line + offset
        if text.strip():
            if not block:
                start = lineno
            block.append(text)
        elif block:
            yield start, block
            block = []
    if block:
        yield start, block


def _detect_format(lines: list[str]) -> str:
    for text in lines:
        if not text.strip():
            continue
        if text.startswith("WEBVTT"):
            return "vtt"
        if text.strip().isdigit():
            return "srt"
        break
    raise FormatError("cannot detect format (expected WEBVTT header or SRT cue index)", 1)


def _raw_srt(lines: list[str]):
    seen_indices: dict[int, int] = {}
    for lineno, block in _blocks(lines):
        body_at = 0
        first = block[0].strip()
        if first.isdigit():
            idx = int(first)
            if idx in seen_indices:
                raise FormatError(
                    f"duplicate cue index {idx} (first at line {seen_indices[idx]}); cannot order cues", lineno
                )
            seen_indices[idx] = lineno
            body_at = 1
        if body_at >= len(block):
            raise FormatError("cue block has no timing line", lineno)
        timing_line = lineno + body_at
        start, end = _parse_timing(block[body_at], timing_line)
        yield timing_line, start, end, block[body_at + 1:]


def _raw_vtt(lines: list[str]):
    if not lines or not lines[0].startswith("WEBVTT"):
        raise FormatError("missing WEBVTT header", 1)
    if len(lines[0]) > 6 and lines[0][6] not in " \t":
        raise FormatError("malformed WEBVTT header", 1)
    header_done = False
    for lineno, block in _blocks(lines):
        if not header_done:
            header_done = True
            if lineno == 1:
                continue
        head = block[0].strip()
        if head.startswith(("NOTE", "STYLE", "REGION")) and ARROW not in head:
            continue
        body_at = 0 if ARROW in block[0] else 1
        if body_at >= len(block):
            raise FormatError("cue block has no timing line", lineno)
        timing_line = lineno + body_at
        start, end = _parse_timing(block[body_at], timing_line)
        yield timing_line, start, end, block[body_at + 1:]


def parse_transcript(
    raw_bytes: bytes,
    format_hint: str = "auto",
    episode_id: str = "episode",
    source: str | None = None,
) -> CueList:
    """Parse SRT or WebVTT bytes into a :class:`CueList`.

    Cues are sorted by start time (out-of-order blocks produce a
    ``reordered`` warning). Zero-length or textless cues are dropped with a
    warning; overlaps beyond half the shorter cue are reported but kept.
    """
    if format_hint not in ("auto", "srt", "vtt"):
        raise ValueError(f"unknown format hint {format_hint!r}")
    source = source or episode_id
    try:
        text = raw_bytes.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"{source}: invalid UTF-8 at byte {exc.start}") from exc
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    if not text.strip():
        raise EmptyTranscript(f"{source}: transcript is empty")

    fmt = _detect_format(lines) if format_hint == "auto" else format_hint
    raw = _raw_vtt(lines) if fmt == "vtt" else _raw_srt(lines)

    warnings: list[ParseWarning] = []

    def warn(line: int, category: str, message: str) -> None:
        w = ParseWarning(source, line, category, message)
        warnings.append(w)
        logger.warning("%s:%d [%s] %s", source, line, category, message)

    pending = []
    for lineno, start, end, payload in raw:
        if end <= start:
            warn(lineno, "empty_duration", f"cue ends at or before its start ({start}..{end} ms); dropped")
            continue
        speaker = None
        joined = " ".join(payload)
        voice = VOICE_RE.search(joined)
        if voice:
            speaker = voice.group(1).strip()
        cleaned = normalize_cue_text(joined)
        if speaker is None:
            speaker, cleaned = split_speaker(cleaned)
        if not cleaned:
            warn(lineno, "empty_text", "cue has no text after normalization; dropped")
            continue
        pending.append((start, end, lineno, cleaned, speaker))

    if any(pending[i][0] > pending[i + 1][0] for i in range(len(pending) - 1)):
        warn(pending[0][2], "reordered", "cue blocks were out of time order and have been sorted")
        pending.sort(key=lambda c: (c[0], c[1]))

    cues = [
        Cue(index=i, start_ms=start, end_ms=end, text=cleaned, speaker=speaker)
        for i, (start, end, _, cleaned, speaker) in enumerate(pending)
    ]
    for (prev, cur), (_, _, lineno, _, _) in zip(zip(cues, cues[1:]), pending[1:]):
        overlap = min(prev.end_ms, cur.end_ms) - cur.start_ms
        if overlap > 0.5 * min(prev.duration_ms, cur.duration_ms):
            warn(lineno, "overlap", f"cue {cur.index} overlaps cue {prev.index} by {overlap} ms")

    if not cues:
        raise EmptyTranscript(f"{source}: transcript contains no cues")
    return CueList(episode_id=episode_id, cues=cues, warnings=warnings)


def format_srt(cues: CueList | list[Cue]) -> str:
    out = []
    for n, cue in enumerate(cues, 1):
        text = f"{cue.speaker}: {cue.text}" if cue.speaker else cue.text
        out.append(f"{n}\n{format_timestamp(cue.start_ms)} --> {format_timestamp(cue.end_ms)}\n{text}\n")
    return "\n".join(out)


def format_vtt(cues: CueList | list[Cue]) -> str:
    out = ["WEBVTT\n"]
    for cue in cues:
        text = f"<v {cue.speaker}>{cue.text}" if cue.speaker else cue.text
        out.append(f"{format_timestamp(cue.start_ms, '.')} --> {format_timestamp(cue.end_ms, '.')}\n{text}\n")
    return "\n".join(out)
