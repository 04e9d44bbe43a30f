"""Timed subtitle documents: ASS/SRT parsing, bitext alignment and prompt grouping."""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

DEFAULT_MAX_START_DELTA = 0.7
DEFAULT_N_MAX = 35

# Lines that are pure annotations, e.g. "[music]" or "（片头曲）".
DEFAULT_NOISE_PATTERNS = (
    r"^\s*[\[(（【♪].*[\])）】♪]\s*$",
)


class SubtitleParseError(ValueError):
    pass


class EmptyDocumentError(SubtitleParseError):
    pass


@dataclass(frozen=True, order=True)
class Timecode:
    """Offset from media start in centiseconds."""

    cs: int

    def __post_init__(self):
        if self.cs < 0:
            raise ValueError(f"negative timecode: {self.cs}")

    _ASS_RE = re.compile(r"^\s*(\d+):(\d{1,2}):(\d{1,2})\.(\d{1,3})\s*$")

    @classmethod
    def parse(cls, text: str) -> "Timecode":
        m = cls._ASS_RE.match(text)
        if not m:
            raise ValueError(f"malformed timecode {text!r}")
        h, mi, s, frac = m.groups()
        if int(mi) >= 60 or int(s) >= 60:
            raise ValueError(f"malformed timecode {text!r}")
        cs = int(frac.ljust(2, "0")[:2])
        return cls(((int(h) * 60 + int(mi)) * 60 + int(s)) * 100 + cs)

    @classmethod
    def from_seconds(cls, seconds: float) -> "Timecode":
        return cls(int(Fraction(str(seconds)) * 100))

    @property
    def seconds(self) -> float:
        return self.cs / 100

    def __str__(self) -> str:
        s, cc = divmod(self.cs, 100)
        m, s = divmod(s, 60)
        h, m = divmod(m, 60)
        return f"{h}:{m:02}:{s:02}.{cc:02}"


@dataclass(frozen=True)
class Line:
    line_id: int
    start: Timecode
    end: Timecode
    text: str

    @property
    def duration_cs(self) -> int:
        return self.end.cs - self.start.cs


@dataclass(frozen=True)
class Subtitle:
    language: str
    lines: tuple[Line, ...]

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    def by_id(self) -> dict[int, Line]:
        return {ln.line_id: ln for ln in self.lines}

    @property
    def line_ids(self) -> list[int]:
        return [ln.line_id for ln in self.lines]


def _build(language: str, entries: list[tuple[Timecode, Timecode, str]]) -> Subtitle:
    # Stable sort keeps file order among equal starts.
    ordered = sorted(enumerate(entries), key=lambda e: (e[1][0], e[0]))
    lines = tuple(
        Line(line_id=i, start=start, end=end, text=text)
        for i, (_, (start, end, text)) in enumerate(ordered, 1)
    )
    return Subtitle(language=language, lines=lines)


# ---------------------------------------------------------------- ASS

_ASS_DEFAULT_FORMAT = ["Layer", "Start", "End", "Style", "Name",
                       "MarginL", "MarginR", "MarginV", "Effect", "Text"]
_OVERRIDE_RE = re.compile(r"\{[^}]*\}")
_WS_RE = re.compile(r"\s+")


def clean_ass_text(text: str) -> str:
    text = _OVERRIDE_RE.sub("", text)
    text = text.replace("\\N", " ").replace("\\n", " ").replace("\\h", " ")
    return _WS_RE.sub(" ", text).strip()


def parse_ass(text: str, language: str = "und") -> Subtitle:
    """Parse the ``[Events]`` section of an ASS/SSA script.

    Only ``Dialogue`` events become lines; styling override blocks are
    removed from the text. Events whose text is empty after cleaning are
    skipped with a warning.
    """
    section = None
    fmt = _ASS_DEFAULT_FORMAT
    entries: list[tuple[Timecode, Timecode, str]] = []
    for lineno, raw in enumerate(text.lstrip("﻿").splitlines(), 1):
        row = raw.strip()
        if not row or row.startswith(";"):
            continue
        if row.startswith("[") and row.endswith("]"):
            section = row[1:-1].strip().lower()
            continue
        if section != "events" or ":" not in row:
            continue
        kind, _, body = row.partition(":")
        kind = kind.strip().lower()
        if kind == "format":
            fmt = [f.strip() for f in body.split(",")]
            continue
        if kind != "dialogue":
            continue
        values = body.lstrip().split(",", len(fmt) - 1)
        if len(values) != len(fmt):
            raise SubtitleParseError(f"line {lineno}: expected {len(fmt)} fields, got {len(values)}")
        event = dict(zip((f.lower() for f in fmt), values))
        try:
            start = Timecode.parse(event["start"])
            end = Timecode.parse(event["end"])
        except (KeyError, ValueError) as exc:
            raise SubtitleParseError(f"line {lineno}: {exc}") from None
        if start > end:
            raise SubtitleParseError(f"line {lineno}: start {start} after end {end}")
        cleaned = clean_ass_text(event.get("text", ""))
        if not cleaned:
            log.warning("line %d: empty dialogue text skipped", lineno)
            continue
        entries.append((start, end, cleaned))
    if not entries:
        raise EmptyDocumentError("no Dialogue events found")
    return _build(language, entries)


def render_ass(sub: Subtitle, style: str = "Default") -> str:
    out = [
        "[Script Info]",
        "ScriptType: v4.00+",
        "",
        "[Events]",
        "Format: " + ", ".join(_ASS_DEFAULT_FORMAT),
    ]
    for ln in sub.lines:
        out.append(f"Dialogue: 0,{ln.start},{ln.end},{style},,0,0,0,,{ln.text}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- SRT

_SRT_TIME_RE = re.compile(
    r"^\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})\s*-->\s*(\d+):(\d{1,2}):(\d{1,2})[,.](\d{1,3})"
)
_TAG_RE = re.compile(r"<[^>]*>")


def _srt_cs(h: str, m: str, s: str, ms: str) -> int:
    # Sub-centisecond digits are truncated, never rounded.
    millis = int(ms.ljust(3, "0"))
    return ((int(h) * 60 + int(m)) * 60 + int(s)) * 100 + millis // 10


def parse_srt(text: str, language: str = "und") -> Subtitle:
    blocks = re.split(r"\n[ \t]*\n", text.lstrip("﻿").replace("\r\n", "\n").strip())
    entries: list[tuple[Timecode, Timecode, str]] = []
    prev_index = None
    for bi, block in enumerate(blocks, 1):
        rows = [r for r in block.split("\n")]
        if not any(r.strip() for r in rows):
            continue
        pos = 0
        if rows[0].strip().isdigit():
            index = int(rows[0].strip())
            if prev_index is not None and index <= prev_index:
                warnings.warn(f"block {bi}: cue index {index} not increasing", stacklevel=2)
            prev_index = index
            pos = 1
        m = _SRT_TIME_RE.match(rows[pos]) if pos < len(rows) else None
        if not m:
            raise SubtitleParseError(f"block {bi}: no timing line")
        start = Timecode(_srt_cs(*m.groups()[:4]))
        end = Timecode(_srt_cs(*m.groups()[4:]))
        if start > end:
            raise SubtitleParseError(f"block {bi}: start {start} after end {end}")
        body = " ".join(_TAG_RE.sub("", r).strip() for r in rows[pos + 1:] if r.strip())
        body = _WS_RE.sub(" ", body).strip()
        if not body:
            log.warning("block %d: empty cue skipped", bi)
            continue
        entries.append((start, end, body))
    if not entries:
        raise EmptyDocumentError("no cues found")
    return _build(language, entries)


def load_subtitle(path: str | Path, language: str = "und") -> Subtitle:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    suffix = path.suffix.lower()
    if suffix in (".ass", ".ssa"):
        return parse_ass(text, language)
    if suffix == ".srt":
        return parse_srt(text, language)
    raise SubtitleParseError(f"{path}: unsupported subtitle format {suffix!r}")


def drop_noise(sub: Subtitle, patterns: Iterable[str] = DEFAULT_NOISE_PATTERNS) -> Subtitle:
    """Remove lines matching any denylist regex. Line ids are kept."""
    regexes = [re.compile(p) for p in patterns]
    if not regexes:
        return sub
    kept = tuple(ln for ln in sub.lines if not any(r.search(ln.text) for r in regexes))
    return Subtitle(language=sub.language, lines=kept)


# ---------------------------------------------------------------- alignment

@dataclass
class AlignedCorpus:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_source: list[int] = field(default_factory=list)
    unmatched_target: list[int] = field(default_factory=list)

    def records(self, src: Subtitle, tgt: Subtitle) -> list[dict]:
        s_by, t_by = src.by_id(), tgt.by_id()
        return [
            {
                "src_id": s,
                "tgt_id": t,
                "src_text": s_by[s].text,
                "tgt_text": t_by[t].text,
                "src_start_cs": s_by[s].start.cs,
                "tgt_start_cs": t_by[t].start.cs,
            }
            for s, t in self.pairs
        ]

    def unmatched_records(self) -> list[dict]:
        return ([{"side": "src", "line_id": i} for i in self.unmatched_source]
                + [{"side": "tgt", "line_id": i} for i in self.unmatched_target])


def delta_to_cs(seconds: float) -> int:
    return int(Fraction(str(seconds)) * 100)


def align_bitext(src: Subtitle, tgt: Subtitle,
                 max_start_delta: float = DEFAULT_MAX_START_DELTA) -> AlignedCorpus:
    """Pair source and target lines by start time within an index window.

    Source line ``i`` looks at target indices ``[i - M, i + M]`` where ``M``
    is the line-count difference. Among unclaimed targets in the window whose
    start lies within ``max_start_delta`` seconds, the nearest start wins
    (ties go to the lower index). Sources claim targets in document order.
    """
    if not src.lines or not tgt.lines:
        raise ValueError("both documents must be non-empty")
    if max_start_delta <= 0:
        raise ValueError("max_start_delta must be positive")
    limit = delta_to_cs(max_start_delta)
    n_tgt = len(tgt.lines)
    margin = abs(len(src.lines) - n_tgt)
    t_starts = [ln.start.cs for ln in tgt.lines]
    claimed = [False] * n_tgt

    result = AlignedCorpus()
    for i, s in enumerate(src.lines):
        lo = max(0, i - margin)
        hi = min(n_tgt - 1, i + margin)
        best, best_d = -1, limit + 1
        for j in range(lo, hi + 1):
            if claimed[j]:
                continue
            d = abs(t_starts[j] - s.start.cs)
            if d < best_d:
                best, best_d = j, d
        if best < 0:
            result.unmatched_source.append(s.line_id)
            continue
        claimed[best] = True
        result.pairs.append((s.line_id, tgt.lines[best].line_id))
    result.unmatched_target = [ln.line_id for j, ln in enumerate(tgt.lines) if not claimed[j]]
    return result


# ---------------------------------------------------------------- prompt groups

class BoundaryReason(str, Enum):
    SPEAKER_TURN = "speaker_turn"
    MAX_LINES = "max_lines"
    DOCUMENT_END = "document_end"


@dataclass(frozen=True)
class PromptGroup:
    group_id: int
    line_ids: tuple[int, ...]
    boundary_reason: BoundaryReason


def segment_prompts(src: Subtitle, speaker_labels: Sequence,
                    n_max: int = DEFAULT_N_MAX) -> list[PromptGroup]:
    """Split a document into prompt groups at speaker turns.

    ``boundary_reason`` records why a group *ends*: a speaker change, the
    ``n_max`` line cap, or the end of the document.
    """
    if len(speaker_labels) != len(src.lines):
        raise ValueError(f"{len(speaker_labels)} speaker labels for {len(src.lines)} lines")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    groups: list[PromptGroup] = []
    current: list[int] = []
    n = len(src.lines)
    for idx, ln in enumerate(src.lines):
        current.append(ln.line_id)
        last = idx == n - 1
        if last:
            reason = BoundaryReason.DOCUMENT_END
        elif speaker_labels[idx + 1] != speaker_labels[idx]:
            reason = BoundaryReason.SPEAKER_TURN
        elif len(current) == n_max:
            reason = BoundaryReason.MAX_LINES
        else:
            continue
        groups.append(PromptGroup(len(groups) + 1, tuple(current), reason))
        current = []
    return groups
