"""Segment-wise preference sampling, adaptive line weights, dataset emission
and a reference DPO loss calculator."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from subling.clients import ClientError, Judge, ProtocolError, SamplingParams, Translator
from subling.jsonl import iter_jsonl, write_json, write_jsonl
from subling.subtitles import PromptGroup, Subtitle
from subling.terminology import TermHit, TermTrie, retrieve

log = logging.getLogger(__name__)

DEFAULT_K = 15
DEFAULT_HOLDOUT = 0.2
MIN_CANDIDATES = 3  # gate closes at or below this many distinct candidates
MIN_SCORE_RANGE = 5  # gate closes at or below this score spread
TEMPLATE_VERSION = 1
DEFAULT_PREAMBLE = ("Translate the following subtitle lines. Keep each speaker's voice "
                    "and use the prescribed term translations.")
UNKNOWN = "unknown"


class SamplingError(RuntimeError):
    """A prompt's sampling stopped part way; ``partial`` holds what finished."""

    def __init__(self, message, partial: "SegmentSample"):
        super().__init__(message)
        self.partial = partial


class IntegrityError(ValueError):
    pass


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_holdout(prompt_ids: Sequence[Hashable], fraction: float = DEFAULT_HOLDOUT,
                  seed: int = 0) -> tuple[list, list]:
    """Seeded split into (SFT ids, SAPO ids). Each side keeps input order.

    The SAPO share is ``fraction * count`` rounded half up, at least one.
    """
    if not prompt_ids:
        raise ValueError("no prompts to split")
    if not 0 < fraction < 1:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n = len(prompt_ids)
    size = max(1, round_half_up(Fraction(str(fraction)) * n))
    order = np.random.default_rng(seed).permutation(n)
    held = set(order[:size].tolist())
    sft = [p for i, p in enumerate(prompt_ids) if i not in held]
    sapo = [p for i, p in enumerate(prompt_ids) if i in held]
    return sft, sapo


# ---------------------------------------------------------------- prompt context

@dataclass(frozen=True)
class Descriptor:
    age: str = UNKNOWN
    gender: str = UNKNOWN


@dataclass(frozen=True)
class ContextLine:
    line_id: int
    text: str
    speaker: Hashable


@dataclass
class PromptContext:
    prompt_id: int
    lines: list[ContextLine]
    term_hits: dict[int, list[TermHit]] = field(default_factory=dict)
    descriptors: dict[str, Descriptor] = field(default_factory=dict)
    preamble: str = DEFAULT_PREAMBLE

    def __post_init__(self):
        if not self.lines:
            raise ValueError(f"prompt {self.prompt_id} has no lines")

    def speaker_tags(self) -> dict[Hashable, str]:
        """``[A]``, ``[B]``, ... in order of first appearance."""
        tags: dict[Hashable, str] = {}
        for ln in self.lines:
            if ln.speaker not in tags:
                tags[ln.speaker] = _letters(len(tags))
        return tags

    def render(self) -> str:
        tags = self.speaker_tags()
        out = [self.preamble, "", "Speakers:"]
        for spk, tag in tags.items():
            d = self.descriptors.get(str(spk), Descriptor())
            out.append(f"[{tag}] age: {d.age}; gender: {d.gender}")
        seen = {}
        for ln in self.lines:
            for h in self.term_hits.get(ln.line_id, []):
                seen.setdefault(h.table_surface, h)
        if seen:
            out += ["", "Terms:"]
            out += [f"{h.table_surface} -> {h.translation} ({h.term_type})" for h in seen.values()]
        out += ["", "Lines:"]
        out += [f"{n}. [{tags[ln.speaker]}] {ln.text}" for n, ln in enumerate(self.lines, 1)]
        return "\n".join(out)


def _letters(n: int) -> str:
    s = ""
    n += 1
    while n:
        n, r = divmod(n - 1, 26)
        s = chr(ord("A") + r) + s
    return s


def build_contexts(src: Subtitle, groups: Sequence[PromptGroup], speakers: Mapping[int, Hashable],
                   trie: Optional[TermTrie] = None, descriptors: Optional[Mapping[str, Descriptor]] = None,
                   preamble: str = DEFAULT_PREAMBLE) -> list[PromptContext]:
    by_id = src.by_id()
    contexts = []
    for g in groups:
        lines = [ContextLine(i, by_id[i].text, speakers.get(i, UNKNOWN)) for i in g.line_ids]
        hits = {} if trie is None else {i: retrieve(by_id[i].text, trie, i) for i in g.line_ids}
        contexts.append(PromptContext(g.group_id, lines, hits, dict(descriptors or {}), preamble))
    return contexts


def load_descriptors(path) -> dict[str, Descriptor]:
    out = {}
    for lineno, rec in iter_jsonl(path):
        if "speaker" not in rec:
            raise ValueError(f"{path}:{lineno}: descriptor needs a speaker")
        out[str(rec["speaker"])] = Descriptor(str(rec.get("age", UNKNOWN)), str(rec.get("gender", UNKNOWN)))
    return out


def sft_record(ctx: PromptContext, targets: Mapping[int, str]) -> Optional[dict]:
    missing = [ln.line_id for ln in ctx.lines if ln.line_id not in targets]
    if missing:
        log.warning("prompt %d skipped: no target for lines %s", ctx.prompt_id, missing)
        return None
    return {"input": ctx.render(), "target": [targets[ln.line_id] for ln in ctx.lines]}


def emit_sft_dataset(contexts: Iterable[PromptContext], targets: Mapping[int, str], path) -> tuple[int, list[int]]:
    """Write SFT records; returns (written, skipped prompt ids)."""
    skipped: list[int] = []

    def records():
        for ctx in contexts:
            rec = sft_record(ctx, targets)
            if rec is None:
                skipped.append(ctx.prompt_id)
            else:
                yield rec

    return write_jsonl(path, records()), skipped


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class CandidateSet:
    line_index: int  # 1-based position in the prompt
    source: str
    candidates: tuple[str, ...]
    scores: tuple[int, ...]
    chosen: int
    rejected: int
    has_reference: bool = False

    def __post_init__(self):
        if len(self.candidates) != len(self.scores):
            raise IntegrityError(f"line {self.line_index}: {len(self.candidates)} candidates, {len(self.scores)} scores")
        if not self.candidates:
            raise IntegrityError(f"line {self.line_index}: empty candidate set")

    def to_json(self) -> dict:
        return {"line_index": self.line_index, "source": self.source,
                "candidates": list(self.candidates), "scores": list(self.scores),
                "chosen": self.chosen, "rejected": self.rejected,
                "has_reference": self.has_reference}

    @classmethod
    def from_json(cls, rec: dict) -> "CandidateSet":
        return cls(int(rec["line_index"]), rec["source"], tuple(rec["candidates"]),
                   tuple(int(s) for s in rec["scores"]), int(rec["chosen"]), int(rec["rejected"]),
                   bool(rec.get("has_reference", False)))


@dataclass
class SegmentSample:
    prompt_id: int
    sets: list[CandidateSet] = field(default_factory=list)

    @property
    def prefix(self) -> list[str]:
        return [cs.candidates[cs.chosen] for cs in self.sets]

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "sets": [cs.to_json() for cs in self.sets]}

    @classmethod
    def from_json(cls, rec: dict) -> "SegmentSample":
        return cls(int(rec["prompt_id"]), [CandidateSet.from_json(s) for s in rec["sets"]])


def dedup(candidates: Iterable[str]) -> list[str]:
    seen, out = set(), []
    for c in candidates:
        c = c.strip()
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def pick(scores: Sequence[int]) -> tuple[int, int]:
    """Chosen = first maximum, rejected = last minimum."""
    hi, lo = max(scores), min(scores)
    chosen = scores.index(hi)
    rejected = len(scores) - 1 - list(reversed(scores)).index(lo)
    return chosen, rejected


def sample_segments(ctx: PromptContext, translator: Translator, judge: Judge, k: int = DEFAULT_K,
                    reference: Optional[Sequence[Optional[str]]] = None,
                    params: SamplingParams = SamplingParams()) -> SegmentSample:
    """Sample, score and pick per line; each line is conditioned on the
    chosen translations of the lines before it."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if reference is not None and len(reference) != len(ctx.lines):
        raise ValueError("reference must give one entry per line")
    context = ctx.render()
    lines = [ln.text for ln in ctx.lines]
    sample = SegmentSample(ctx.prompt_id)
    for i, ln in enumerate(ctx.lines):
        try:
            raw = translator.translate(context, lines, sample.prefix, params, k)
        except ClientError as exc:
            raise SamplingError(f"prompt {ctx.prompt_id} line {i + 1}: {exc}", sample) from exc
        cands = dedup(raw)
        ref = reference[i].strip() if reference is not None and reference[i] else None
        if ref:
            cands = [ref] + [c for c in cands if c != ref]
        scores = judge.judge_scores(ln.text, context, cands)
        if len(scores) != len(cands):
            raise ProtocolError(f"judge returned {len(scores)} scores for {len(cands)} candidates")
        chosen, rejected = pick(list(scores))
        sample.sets.append(CandidateSet(i + 1, ln.text, tuple(cands), tuple(int(s) for s in scores),
                                        chosen, rejected, bool(ref)))
    return sample


def sample_many(contexts: Sequence[PromptContext], translator: Translator, judge: Judge,
                k: int = DEFAULT_K, references: Optional[Mapping[int, Sequence]] = None,
                params: SamplingParams = SamplingParams(), jobs: int = 1) -> list[SegmentSample]:
    """Sample independent prompts with at most ``jobs`` in flight; output order
    follows ``contexts``."""
    def one(ctx):
        ref = None if references is None else references.get(ctx.prompt_id)
        return sample_segments(ctx, translator, judge, k, ref, params)

    if jobs <= 1:
        return [one(c) for c in contexts]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, contexts))


# ---------------------------------------------------------------- weights

def gate(cs: CandidateSet) -> int:
    if len(cs.candidates) <= MIN_CANDIDATES:
        return 0
    if max(cs.scores) - min(cs.scores) <= MIN_SCORE_RANGE:
        return 0
    return 1


def importance(sizes: Sequence[int]) -> list[float]:
    if not sizes:
        raise ValueError("no lines")
    if any(s < 1 for s in sizes):
        raise ValueError("candidate set sizes must be >= 1")
    total = sum(sizes)
    return [s / total for s in sizes]


@dataclass(frozen=True)
class AdaptiveWeight:
    line_index: int
    gate: int
    importance: float
    weight: float

    def to_json(self) -> dict:
        return {"line_index": self.line_index, "gate": self.gate,
                "importance": self.importance, "weight": self.weight}


def adaptive_weights(sample: SegmentSample) -> list[AdaptiveWeight]:
    """Gate times importance; the importance denominator counts every line,
    gated or not."""
    deltas = importance([len(cs.candidates) for cs in sample.sets])
    out = []
    for cs, d in zip(sample.sets, deltas):
        g = gate(cs)
        out.append(AdaptiveWeight(cs.line_index, g, d, g * d))
    return out


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class PoLossInput:
    beta: float
    policy_chosen: float
    policy_rejected: float
    ref_chosen: float
    ref_rejected: float


def log_sigmoid(x: float) -> float:
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def dpo_segment_loss(inp: PoLossInput) -> float:
    """log sigmoid(beta * (margin on chosen - margin on rejected))."""
    vals = (inp.beta, inp.policy_chosen, inp.policy_rejected, inp.ref_chosen, inp.ref_rejected)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("loss inputs must be finite")
    if inp.beta <= 0:
        raise ValueError("beta must be positive")
    d_chosen = inp.policy_chosen - inp.ref_chosen
    d_rejected = inp.policy_rejected - inp.ref_rejected
    return log_sigmoid(inp.beta * (d_chosen - d_rejected))


def sapo_loss(weights: Sequence, segment_losses: Sequence[float]) -> float:
    """Negative weighted sum of per-line losses for one prompt."""
    if len(weights) != len(segment_losses):
        raise ValueError(f"{len(weights)} weights for {len(segment_losses)} losses")
    ws = [w.weight if isinstance(w, AdaptiveWeight) else float(w) for w in weights]
    return -math.fsum(w * loss for w, loss in zip(ws, segment_losses))


# ---------------------------------------------------------------- preference dataset

def preference_records(sample: SegmentSample) -> tuple[list[dict], dict]:
    weights = adaptive_weights(sample)
    records = []
    counts = {"total_lines": len(sample.sets), "records": 0, "gated_by_size": 0, "gated_by_range": 0}
    for cs, w in zip(sample.sets, weights):
        if not w.gate:
            key = "gated_by_size" if len(cs.candidates) <= MIN_CANDIDATES else "gated_by_range"
            counts[key] += 1
            continue
        if cs.scores[cs.chosen] <= cs.scores[cs.rejected]:
            raise IntegrityError(f"prompt {sample.prompt_id} line {cs.line_index}: "
                                 f"chosen score {cs.scores[cs.chosen]} <= rejected score {cs.scores[cs.rejected]}")
        prefix = [s.candidates[s.chosen] for s in sample.sets[: cs.line_index - 1]]
        records.append({
            "prompt_id": sample.prompt_id,
            "line_index": cs.line_index,
            "prefix": prefix,
            "source": cs.source,
            "chosen": cs.candidates[cs.chosen],
            "rejected": cs.candidates[cs.rejected],
            "weight": w.weight,
            "candidates": list(cs.candidates),
            "scores": list(cs.scores),
        })
        counts["records"] += 1
    return records, counts


def emit_preference_dataset(samples: Iterable[SegmentSample], path) -> dict:
    """Write one record per gated-on line plus a ``.summary.json`` sidecar.
    Nothing is written if any record fails the integrity check."""
    path = Path(path)
    all_records = []
    summary = {"prompts": 0, "total_lines": 0, "records": 0, "gated_by_size": 0, "gated_by_range": 0}
    for s in samples:
        recs, counts = preference_records(s)
        all_records.extend(recs)
        summary["prompts"] += 1
        for key, v in counts.items():
            summary[key] += v
    write_jsonl(path, all_records)
    write_json(summary_path(path), summary)
    return summary


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.json")


def save_samples(path, samples: Iterable[SegmentSample]) -> int:
    return write_jsonl(path, (s.to_json() for s in samples))


def load_samples(path) -> list[SegmentSample]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(SegmentSample.from_json(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad sample record ({exc})") from None
    return out


def load_loss_inputs(path) -> list[tuple[PoLossInput, float]]:
    out = []
    keys = ("beta", "policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected")
    for lineno, rec in iter_jsonl(path):
        try:
            vals = [float(rec[k]) for k in keys]
            weight = float(rec.get("weight", 1.0))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: loss record needs {', '.join(keys)}") from None
        out.append((PoLossInput(*vals), weight))
    return out


def loss_check(path) -> dict:
    rows = load_loss_inputs(path)
    losses = [dpo_segment_loss(inp) for inp, _ in rows]
    return {"segment_losses": losses, "sapo_loss": sapo_loss([w for _, w in rows], losses)}

