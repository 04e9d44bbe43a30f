"""Cross-modal speaker registration, turn grouping and new-speaker supplementation."""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from subling.diarization.clustering import (
    DEFAULT_AFFINITY_POWER,
    DEFAULT_K_MAX,
    cosine,
    spectral_cluster,
)
from subling.diarization.features import LineFeatures

DEFAULT_EPSILON = 0.35
DEFAULT_ETA = 0.4


class NoVisualAnchorError(ValueError):
    pass


class Origin(str, Enum):
    VISUAL = "visual"
    SUPPLEMENTED = "supplemented"


@dataclass
class SpeakerEntry:
    speaker_id: int
    prototype: np.ndarray
    origin: Origin
    member_line_ids: list[int] = field(default_factory=list)
    audio_cluster: Optional[int] = None


@dataclass
class SpeakerRegistry:
    entries: list[SpeakerEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def get(self, speaker_id: int) -> SpeakerEntry:
        for e in self.entries:
            if e.speaker_id == speaker_id:
                return e
        raise KeyError(speaker_id)

    def of_origin(self, origin: Origin) -> list[SpeakerEntry]:
        return [e for e in self.entries if e.origin is origin]

    def next_id(self) -> int:
        return max((e.speaker_id for e in self.entries), default=0) + 1

    def to_json(self) -> list[dict]:
        return [
            {
                "speaker": e.speaker_id,
                "origin": e.origin.value,
                "audio_cluster": e.audio_cluster,
                "members": list(e.member_line_ids),
                "prototype": e.prototype.tolist(),
            }
            for e in self.entries
        ]


def register_speakers(features: Sequence[LineFeatures]) -> SpeakerRegistry:
    """One speaker per visual cluster, with a timbre prototype taken from the
    audio cluster that wins the vote among that visual cluster's lines."""
    detected = [f for f in features if f.active_detected]
    if not detected:
        raise NoVisualAnchorError("no visual anchor: no line has an active speaker")
    by_visual: dict[int, list[LineFeatures]] = {}
    for f in detected:
        if f.visual_cluster is None or f.audio_cluster is None:
            raise ValueError(f"line {f.line_id}: detected line lacks cluster labels")
        by_visual.setdefault(f.visual_cluster, []).append(f)

    registry = SpeakerRegistry()
    for vis in sorted(by_visual):
        members = by_visual[vis]
        votes = Counter(f.audio_cluster for f in members)
        top = max(votes.values())
        winner = min(label for label, n in votes.items() if n == top)
        voters = [f.timbre for f in members if f.audio_cluster == winner]
        registry.entries.append(SpeakerEntry(
            speaker_id=vis,
            prototype=np.mean(voters, axis=0),
            origin=Origin.VISUAL,
            member_line_ids=[f.line_id for f in members],
            audio_cluster=winner,
        ))
    return registry


def _best_match(vector, entries: Sequence[SpeakerEntry]) -> tuple[int, float]:
    best_id, best_sim = None, -np.inf
    for e in sorted(entries, key=lambda e: e.speaker_id):
        sim = cosine(vector, e.prototype)
        if sim > best_sim:
            best_id, best_sim = e.speaker_id, sim
    return best_id, float(best_sim)


def assign_undetected(line: LineFeatures, registry: SpeakerRegistry) -> tuple[int, float]:
    if line.active_detected:
        raise ValueError(f"line {line.line_id} has a detected speaker")
    if not registry.entries:
        raise ValueError("empty speaker registry")
    return _best_match(line.timbre, registry.entries)


def new_speaker_score(line: LineFeatures, registry: SpeakerRegistry) -> float:
    if line.active_detected:
        return 1.0
    visual = registry.of_origin(Origin.VISUAL)
    if not visual:
        raise ValueError("registry has no visual-origin speakers")
    return _best_match(line.timbre, visual)[1]


# ---------------------------------------------------------------- turn groups

@dataclass(frozen=True)
class Group:
    group_id: int
    line_ids: tuple[int, ...]
    similarities: tuple[float, ...]  # between consecutive lines inside the group
    boundary_similarity: Optional[float]  # to the previous group's last line


def adjacent_similarities(features: Sequence[LineFeatures]) -> list[float]:
    return [cosine(a.timbre, b.timbre) for a, b in zip(features, features[1:])]


def groups_from_similarities(line_ids: Sequence[int], similarities: Sequence[float],
                             epsilon: float = DEFAULT_EPSILON) -> list[Group]:
    """Cut the line sequence wherever the adjacent similarity is below ``epsilon``."""
    if not line_ids:
        raise ValueError("no lines to group")
    if len(similarities) != len(line_ids) - 1:
        raise ValueError("need one similarity per adjacent line pair")
    if not -1 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (-1, 1), got {epsilon}")
    groups = []
    start, boundary = 0, None
    for i in range(1, len(line_ids) + 1):
        if i < len(line_ids) and similarities[i - 1] >= epsilon:
            continue
        groups.append(Group(
            group_id=len(groups) + 1,
            line_ids=tuple(line_ids[start:i]),
            similarities=tuple(similarities[start:i - 1]),
            boundary_similarity=boundary,
        ))
        if i < len(line_ids):
            boundary = similarities[i - 1]
        start = i
    return groups


def group_by_turns(features: Sequence[LineFeatures], epsilon: float = DEFAULT_EPSILON) -> list[Group]:
    return groups_from_similarities([f.line_id for f in features],
                                    adjacent_similarities(features), epsilon)


# ---------------------------------------------------------------- supplementation

class Operation(str, Enum):
    NONE = "none"
    REGISTER = "register"
    MERGE = "merge"


@dataclass(frozen=True)
class GroupDecision:
    group_id: int
    score: float
    operation: Operation
    speaker_id: Optional[int] = None
    merge_similarity: Optional[float] = None


def group_score(scores: Sequence[float]) -> float:
    if not scores:
        raise ValueError("empty group")
    return sum(scores) / len(scores)


def supplement_scored(groups: Sequence[Group], line_scores: Mapping[int, float],
                      timbres: Mapping[int, np.ndarray], registry: SpeakerRegistry,
                      eta: float = DEFAULT_ETA, epsilon: float = DEFAULT_EPSILON,
                      ) -> tuple[SpeakerRegistry, list[GroupDecision]]:
    """Register or merge new speakers for groups whose mean new-speaker score
    falls below ``eta``, given precomputed per-line scores."""
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    registry = copy.deepcopy(registry)
    decisions = []
    for g in groups:
        if not g.line_ids:
            raise ValueError(f"group {g.group_id} is empty")
        score = group_score([line_scores[i] for i in g.line_ids])
        if score >= eta:
            decisions.append(GroupDecision(g.group_id, score, Operation.NONE))
            continue
        centroid = np.mean([timbres[i] for i in g.line_ids], axis=0)
        existing = registry.of_origin(Origin.SUPPLEMENTED)
        target, sim = _best_match(centroid, existing) if existing else (None, -np.inf)
        if target is not None and sim >= epsilon:
            entry = registry.get(target)
            entry.member_line_ids.extend(g.line_ids)
            entry.prototype = np.mean([timbres[i] for i in entry.member_line_ids], axis=0)
            decisions.append(GroupDecision(g.group_id, score, Operation.MERGE, target, sim))
        else:
            new_id = registry.next_id()
            registry.entries.append(SpeakerEntry(
                speaker_id=new_id, prototype=centroid, origin=Origin.SUPPLEMENTED,
                member_line_ids=list(g.line_ids),
            ))
            decisions.append(GroupDecision(
                g.group_id, score, Operation.REGISTER, new_id,
                None if target is None else sim,
            ))
    return registry, decisions


def supplement(groups: Sequence[Group], features: Sequence[LineFeatures], registry: SpeakerRegistry,
               eta: float = DEFAULT_ETA, epsilon: float = DEFAULT_EPSILON,
               ) -> tuple[SpeakerRegistry, list[GroupDecision]]:
    scores = {f.line_id: new_speaker_score(f, registry) for f in features}
    timbres = {f.line_id: f.timbre for f in features}
    return supplement_scored(groups, scores, timbres, registry, eta, epsilon)


# ---------------------------------------------------------------- full pass

@dataclass(frozen=True)
class Assignment:
    line_id: int
    speaker_id: int
    confidence: float
    origin: Origin

    def to_json(self) -> dict:
        return {"line_id": self.line_id, "speaker": self.speaker_id,
                "confidence": round(self.confidence, 6), "origin": self.origin.value}


@dataclass
class DiarizationResult:
    assignments: list[Assignment]
    registry: SpeakerRegistry
    groups: list[Group]
    decisions: list[GroupDecision]

    def labels(self) -> dict[int, int]:
        return {a.line_id: a.speaker_id for a in self.assignments}


def cluster_features(features: Sequence[LineFeatures], seed: int = 0, k_max: int = DEFAULT_K_MAX,
                     affinity_power: float = DEFAULT_AFFINITY_POWER) -> list[LineFeatures]:
    """Fill in missing visual/audio cluster labels. Inputs are not modified."""
    out = [replace(f) for f in features]
    detected = [f for f in out if f.active_detected]
    if detected and any(f.visual_cluster is None for f in detected):
        labels = ([1] if len(detected) == 1 else
                  spectral_cluster([f.face for f in detected], k_max=k_max, seed=seed,
                                   affinity_power=affinity_power))
        for f, c in zip(detected, labels):
            f.visual_cluster = c
    if any(f.audio_cluster is None for f in out):
        labels = ([1] if len(out) == 1 else
                  spectral_cluster([f.timbre for f in out], k_max=k_max, seed=seed,
                                   affinity_power=affinity_power))
        for f, c in zip(out, labels):
            f.audio_cluster = c
    return out


def diarize(features: Sequence[LineFeatures], eta: float = DEFAULT_ETA,
            epsilon: float = DEFAULT_EPSILON, seed: int = 0, k_max: int = DEFAULT_K_MAX,
            affinity_power: float = DEFAULT_AFFINITY_POWER) -> DiarizationResult:
    """Assign a speaker to every line.

    Detected lines take their visual cluster's speaker. Undetected lines in
    groups that triggered supplementation take the supplemented speaker;
    the rest go to the most similar prototype in the final registry.
    """
    feats = cluster_features(features, seed=seed, k_max=k_max, affinity_power=affinity_power)
    registry = register_speakers(feats)
    groups = group_by_turns(feats, epsilon)
    registry, decisions = supplement(groups, feats, registry, eta, epsilon)

    supplemented_for: dict[int, int] = {}
    for g, d in zip(groups, decisions):
        if d.operation is not Operation.NONE:
            for i in g.line_ids:
                supplemented_for[i] = d.speaker_id

    assignments = []
    for f in feats:
        if f.active_detected:
            assignments.append(Assignment(f.line_id, f.visual_cluster, 1.0, Origin.VISUAL))
            continue
        if f.line_id in supplemented_for:
            entry = registry.get(supplemented_for[f.line_id])
            sim = cosine(f.timbre, entry.prototype)
            spk = entry.speaker_id
        else:
            spk, sim = assign_undetected(f, registry)
        origin = registry.get(spk).origin
        assignments.append(Assignment(f.line_id, spk, float(np.clip(sim, 0.0, 1.0)), origin))
    return DiarizationResult(assignments, registry, groups, decisions)
