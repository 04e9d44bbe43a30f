"""Diarization scoring (DER, JER, Text DER) and the speaker-turn threshold sweep."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from subling.diarization.features import LineFeatures
from subling.diarization.speakers import adjacent_similarities
from subling.subtitles import Subtitle


@dataclass(frozen=True)
class DiarizationMetrics:
    der: float
    jer: float
    text_der: float

    def to_json(self) -> dict:
        return asdict(self)


def _overlap(ref_of: Sequence[int], pred_of: Sequence[int], weights: np.ndarray,
             n_ref: int, n_pred: int) -> np.ndarray:
    m = np.zeros((n_ref, n_pred))
    np.add.at(m, (np.asarray(ref_of), np.asarray(pred_of)), weights)
    return m


def _best_mapping(overlap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return linear_sum_assignment(overlap, maximize=True)


def score_diarization(pred: Mapping[int, Hashable], ref: Mapping[int, Hashable],
                      lines: Subtitle) -> DiarizationMetrics:
    """Score predicted speaker labels against a reference.

    Labels are matched one-to-one by maximum overlap (line count for Text DER,
    duration for DER, Jaccard for JER). Lines left on unmatched labels count
    as errors, and an unmatched reference speaker scores a Jaccard error of 1.
    """
    if set(pred) != set(ref):
        missing = sorted(set(pred) ^ set(ref))
        raise ValueError(f"prediction and reference cover different lines: {missing[:10]}")
    by_id = lines.by_id()
    unknown = sorted(set(ref) - set(by_id))
    if unknown:
        raise ValueError(f"lines {unknown[:10]} not in the subtitle document")
    ids = sorted(ref)
    if not ids:
        raise ValueError("nothing to score")

    ref_labels = sorted({ref[i] for i in ids}, key=repr)
    pred_labels = sorted({pred[i] for i in ids}, key=repr)
    r_idx = {lab: k for k, lab in enumerate(ref_labels)}
    p_idx = {lab: k for k, lab in enumerate(pred_labels)}
    ref_of = [r_idx[ref[i]] for i in ids]
    pred_of = [p_idx[pred[i]] for i in ids]

    counts = _overlap(ref_of, pred_of, np.ones(len(ids)), len(ref_labels), len(pred_labels))
    rows, cols = _best_mapping(counts)
    text_der = 1.0 - counts[rows, cols].sum() / len(ids)

    durations = np.array([by_id[i].duration_cs for i in ids], dtype=np.float64)
    total = durations.sum()
    if total <= 0:
        raise ValueError("total line duration is zero")
    dur = _overlap(ref_of, pred_of, durations, len(ref_labels), len(pred_labels))
    drows, dcols = _best_mapping(dur)
    der = 1.0 - dur[drows, dcols].sum() / total

    # JER takes its own mapping, the one maximizing total Jaccard, so the
    # value does not depend on how count-overlap ties were broken.
    ref_sizes = counts.sum(axis=1)
    pred_sizes = counts.sum(axis=0)
    jaccard = counts / (ref_sizes[:, None] + pred_sizes[None, :] - counts)
    jrows, jcols = _best_mapping(jaccard)
    errors = np.ones(len(ref_labels))
    errors[jrows] = 1.0 - jaccard[jrows, jcols]
    jer = float(np.mean(errors))

    clip = lambda v: float(min(1.0, max(0.0, v)))  # noqa: E731
    return DiarizationMetrics(der=clip(der), jer=clip(jer), text_der=clip(text_der))


def reference_turns(labels: Sequence[Hashable]) -> list[bool]:
    return [a != b for a, b in zip(labels, labels[1:])]


def turn_accuracy(similarities: Sequence[float], ref_turns: Sequence[bool],
                  grid: Sequence[float]) -> list[tuple[float, float]]:
    if not grid:
        raise ValueError("empty epsilon grid")
    if len(similarities) != len(ref_turns):
        raise ValueError("need one reference turn label per adjacent line pair")
    if not similarities:
        raise ValueError("need at least two lines")
    sims = np.asarray(similarities, dtype=np.float64)
    truth = np.asarray(ref_turns, dtype=bool)
    return [(float(eps), float(np.mean((sims < eps) == truth))) for eps in grid]


def sweep_epsilon(features: Sequence[LineFeatures], ref_turns: Sequence[bool],
                  grid: Sequence[float]) -> list[tuple[float, float]]:
    """Turn-detection accuracy for each threshold in ``grid``."""
    return turn_accuracy(adjacent_similarities(features), ref_turns, grid)
