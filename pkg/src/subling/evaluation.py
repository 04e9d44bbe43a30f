"""Pronoun accuracy, terminology consistency, judge-score aggregation and
win-rate tables."""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from subling.jsonl import iter_jsonl, write_json
from subling.subtitles import Subtitle
from subling.terminology import TermTrie, retrieve

DIMENSIONS = ("accuracy", "naturalness", "vividness")
NOT_AVAILABLE = "n/a"
OUTCOMES = ("win", "tie", "loss")

Ratio = Union[float, str]


def nfkc(s: str) -> str:
    return unicodedata.normalize("NFKC", s)


def percent(num: int, den: int) -> float:
    """``100 * num / den`` to one decimal, half up."""
    value = Decimal(num * 100) / Decimal(den)
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def round1(x: float) -> float:
    return float(Decimal(repr(x)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PronounAnnotation:
    line_id: int
    pronoun: str
    acceptable: tuple[str, ...]


def load_annotations(path, src: Subtitle) -> list[PronounAnnotation]:
    """Read ``{"line_id", "pronoun", "acceptable"}`` records and check each
    pronoun against its source line."""
    by_id = src.by_id()
    out = []
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            ann = PronounAnnotation(int(rec["line_id"]), rec["pronoun"], tuple(rec["acceptable"]))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{where}: annotation needs line_id, pronoun, acceptable") from None
        if not ann.acceptable or not all(isinstance(a, str) and a for a in ann.acceptable):
            raise ValueError(f"{where}: acceptable renderings must be a non-empty list of strings")
        line = by_id.get(ann.line_id)
        if line is None:
            raise ValueError(f"{where}: line {ann.line_id} not in the source document")
        if nfkc(ann.pronoun) not in nfkc(line.text):
            raise ValueError(f"{where}: pronoun {ann.pronoun!r} does not occur in line {ann.line_id}")
        out.append(ann)
    return out


def pronoun_accuracy(annotations: Sequence[PronounAnnotation], outputs: Mapping[int, str]) -> float:
    """Percent of annotations whose output line contains an acceptable rendering."""
    if not annotations:
        raise ValueError("no pronoun annotations")
    missing = sorted({a.line_id for a in annotations if a.line_id not in outputs})
    if missing:
        raise ValueError(f"no output for annotated lines {missing}")
    hits = sum(1 for a in annotations
               if any(nfkc(r) in nfkc(outputs[a.line_id]) for r in a.acceptable))
    return percent(hits, len(annotations))


def terminology_consistency(trie: TermTrie, src: Subtitle, outputs: Mapping[int, str]) -> Ratio:
    """Percent of source term hits whose output line carries the prescribed
    translation. Every occurrence counts; no hits gives ``"n/a"``."""
    total = matched = 0
    for ln in src.lines:
        hits = retrieve(ln.text, trie, ln.line_id)
        if not hits:
            continue
        if ln.line_id not in outputs:
            raise ValueError(f"no output for line {ln.line_id}")
        out = nfkc(outputs[ln.line_id])
        total += len(hits)
        matched += sum(1 for h in hits if nfkc(h.translation) in out)
    return NOT_AVAILABLE if total == 0 else percent(matched, total)


# ---------------------------------------------------------------- judge scores

@dataclass(frozen=True)
class SegmentScores:
    segment_id: str
    scores: dict[str, float]

    def __post_init__(self):
        unknown = set(self.scores) - set(DIMENSIONS)
        if unknown:
            raise ValueError(f"segment {self.segment_id}: unknown dimensions {sorted(unknown)}")
        for d, v in self.scores.items():
            if not 0 <= v <= 100:
                raise ValueError(f"segment {self.segment_id}: {d} score {v} outside 0..100")


def load_segment_scores(path) -> list[SegmentScores]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(SegmentScores(str(rec["segment_id"]), {k: float(v) for k, v in rec["scores"].items()}))
        except (KeyError, TypeError, AttributeError):
            raise ValueError(f"{path}:{lineno}: record needs segment_id and a scores object") from None
    return out


def aggregate_scores(streams: Sequence[Sequence[SegmentScores]]) -> dict[str, float]:
    """Mean over evaluators per segment, then mean over segments, per dimension."""
    if not streams:
        raise ValueError("no evaluator streams")
    keyed = []
    for n, stream in enumerate(streams):
        by_id = {s.segment_id: s for s in stream}
        if len(by_id) != len(stream):
            raise ValueError(f"evaluator {n}: duplicate segment ids")
        keyed.append(by_id)
    ids = set(keyed[0])
    for n, by_id in enumerate(keyed[1:], 1):
        if set(by_id) != ids:
            diff = sorted(ids ^ set(by_id))
            raise ValueError(f"evaluator {n} covers different segments: {diff[:10]}")

    per_dim: dict[str, list[float]] = {}
    for seg in sorted(ids):
        dims = set().union(*(by_id[seg].scores for by_id in keyed))
        for d in dims:
            vals = [by_id[seg].scores[d] for by_id in keyed if d in by_id[seg].scores]
            per_dim.setdefault(d, []).append(math.fsum(vals) / len(vals))
    return {d: math.fsum(v) / len(v) for d, v in sorted(per_dim.items(), key=lambda kv: DIMENSIONS.index(kv[0]))}


# ---------------------------------------------------------------- win rate

@dataclass(frozen=True)
class PairwiseOutcome:
    item_id: str
    dimension: str
    result: str

    def __post_init__(self):
        if self.result not in OUTCOMES:
            raise ValueError(f"item {self.item_id}: result must be one of {OUTCOMES}")


def load_outcomes(path) -> list[PairwiseOutcome]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(PairwiseOutcome(str(rec["item_id"]), str(rec["dimension"]), rec["result"]))
        except KeyError:
            raise ValueError(f"{path}:{lineno}: record needs item_id, dimension, result") from None
    return out


def win_tie_loss(wins: int, ties: int, losses: int) -> tuple[int, int, int]:
    """Integer percentages rounded half up; the tie bucket absorbs the
    rounding residual so the triple sums to 100."""
    n = wins + ties + losses
    if n == 0:
        raise ValueError("no outcomes")
    half = Fraction(1, 2)
    w = math.floor(Fraction(100 * wins, n) + half)
    loss = math.floor(Fraction(100 * losses, n) + half)
    t = 100 - w - loss
    if t < 0:
        # both win and loss rounded up from exactly .5 with no ties left
        loss += t
        t = 0
    return w, t, loss


def win_rate(outcomes: Iterable[PairwiseOutcome]) -> dict[str, str]:
    """``"win:tie:loss"`` per dimension."""
    counts: dict[str, dict[str, int]] = {}
    seen = set()
    for o in outcomes:
        key = (o.item_id, o.dimension)
        if key in seen:
            raise ValueError(f"duplicate outcome for item {o.item_id} on {o.dimension}")
        seen.add(key)
        counts.setdefault(o.dimension, dict.fromkeys(OUTCOMES, 0))[o.result] += 1
    if not counts:
        raise ValueError("no outcomes")
    return {d: ":".join(str(v) for v in win_tie_loss(c["win"], c["tie"], c["loss"]))
            for d, c in sorted(counts.items())}


# ---------------------------------------------------------------- report

def build_report(pa=None, tc=None, dims=None, wins=None) -> dict:
    return {
        "pa": pa,
        "tc": tc,
        "dims": {d: round1(v) for d, v in (dims or {}).items()},
        "win_rate": dict(wins or {}),
    }


def render_text(report: dict) -> str:
    rows = []
    if report.get("pa") is not None:
        rows.append(("PA", f"{report['pa']:.1f}"))
    if report.get("tc") is not None:
        tc = report["tc"]
        rows.append(("TC", tc if isinstance(tc, str) else f"{tc:.1f}"))
    for d, v in report.get("dims", {}).items():
        rows.append((d, f"{v:.1f}"))
    for d, v in report.get("win_rate", {}).items():
        rows.append((f"win:tie:loss {d}", v))
    if not rows:
        return ""
    width = max(len(k) for k, _ in rows)
    vwidth = max(len(v) for _, v in rows)
    return "\n".join(f"{k:<{width}}  {v:>{vwidth}}" for k, v in rows) + "\n"


def write_report(out_dir, report: dict) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", report)
    (out_dir / "report.txt").write_text(render_text(report), encoding="utf-8")
