"""Per-line embedding records and their on-disk formats."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from subling.jsonl import iter_jsonl

MODALITIES = ("face", "timbre")


class EmbeddingError(ValueError):
    pass


def as_embedding(vector, *, where: str = "") -> np.ndarray:
    arr = np.asarray(vector, dtype=np.float64)
    prefix = f"{where}: " if where else ""
    if arr.ndim != 1 or arr.size == 0:
        raise EmbeddingError(f"{prefix}embedding must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError(f"{prefix}non-finite embedding component")
    if not np.any(arr):
        raise EmbeddingError(f"{prefix}zero embedding vector")
    return arr


@dataclass
class LineFeatures:
    """Embeddings and cluster labels for one subtitle line.

    A face embedding is present exactly when an active speaker was detected
    on screen for the line.
    """

    line_id: int
    timbre: np.ndarray
    face: Optional[np.ndarray] = None
    visual_cluster: Optional[int] = None
    audio_cluster: Optional[int] = None

    @property
    def active_detected(self) -> bool:
        return self.face is not None

    def __post_init__(self):
        if self.face is None and self.visual_cluster is not None:
            raise EmbeddingError(f"line {self.line_id}: visual cluster without face embedding")


def _check_dims(records: dict[int, np.ndarray], modality: str) -> None:
    dims = {v.shape[0] for v in records.values()}
    if len(dims) > 1:
        raise EmbeddingError(f"{modality} embeddings have mixed dimensions {sorted(dims)}")


def build_features(timbres: dict[int, np.ndarray],
                   faces: dict[int, np.ndarray] | None = None) -> list[LineFeatures]:
    faces = faces or {}
    _check_dims(timbres, "timbre")
    _check_dims(faces, "face")
    orphan = sorted(set(faces) - set(timbres))
    if orphan:
        raise EmbeddingError(f"face embeddings without timbre for lines {orphan[:10]}")
    return [LineFeatures(line_id=i, timbre=timbres[i], face=faces.get(i))
            for i in sorted(timbres)]


def load_embeddings_jsonl(path: str | Path) -> list[LineFeatures]:
    """Read ``{"line_id", "modality", "vector"}`` records."""
    store: dict[str, dict[int, np.ndarray]] = {m: {} for m in MODALITIES}
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            line_id = int(rec["line_id"])
            modality = rec["modality"]
            vector = rec["vector"]
        except (KeyError, TypeError, ValueError):
            raise EmbeddingError(f"{where}: record needs line_id, modality and vector") from None
        if modality not in store:
            raise EmbeddingError(f"{where}: unknown modality {modality!r}")
        if line_id in store[modality]:
            raise EmbeddingError(f"{where}: duplicate {modality} record for line {line_id}")
        store[modality][line_id] = as_embedding(vector, where=where)
    return build_features(store["timbre"], store["face"])


def save_embeddings_jsonl(path: str | Path, features: Iterable[LineFeatures]) -> None:
    from subling.jsonl import write_jsonl

    def records():
        for f in features:
            if f.face is not None:
                yield {"line_id": f.line_id, "modality": "face", "vector": f.face.tolist()}
            yield {"line_id": f.line_id, "modality": "timbre", "vector": f.timbre.tolist()}

    write_jsonl(path, records())


def load_embeddings_binary(manifest_path: str | Path) -> dict[int, np.ndarray]:
    """Read one modality stored as little-endian float32 rows.

    The manifest is ``{"dim", "count", "modality", "line_ids"}`` and sits next
    to a ``.f32`` file of the same stem (or names it under ``"data"``).
    """
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    dim, count, line_ids = int(meta["dim"]), int(meta["count"]), list(meta["line_ids"])
    if len(line_ids) != count:
        raise EmbeddingError(f"{manifest_path}: {len(line_ids)} line_ids for count {count}")
    data_path = manifest_path.parent / meta.get("data", manifest_path.stem + ".f32")
    flat = np.fromfile(data_path, dtype="<f4")
    if flat.size != dim * count:
        raise EmbeddingError(f"{data_path}: expected {dim * count} floats, found {flat.size}")
    rows = flat.reshape(count, dim)
    return {int(i): as_embedding(r, where=f"{data_path} line {i}") for i, r in zip(line_ids, rows)}


def save_embeddings_binary(manifest_path: str | Path, modality: str,
                           vectors: dict[int, np.ndarray]) -> None:
    manifest_path = Path(manifest_path)
    ids = sorted(vectors)
    dim = len(vectors[ids[0]])
    data_name = manifest_path.stem + ".f32"
    np.asarray([vectors[i] for i in ids], dtype="<f4").tofile(manifest_path.parent / data_name)
    manifest_path.write_text(json.dumps({
        "dim": dim, "count": len(ids), "modality": modality, "line_ids": ids, "data": data_name,
    }), encoding="utf-8")


def load_features(path: str | Path) -> list[LineFeatures]:
    """Load features from a JSONL file or from a directory of binary manifests."""
    path = Path(path)
    if path.is_dir():
        by_modality: dict[str, dict[int, np.ndarray]] = {}
        for manifest in sorted(path.glob("*.json")):
            modality = json.loads(manifest.read_text(encoding="utf-8")).get("modality")
            if modality not in MODALITIES:
                raise EmbeddingError(f"{manifest}: unknown modality {modality!r}")
            by_modality.setdefault(modality, {}).update(load_embeddings_binary(manifest))
        if "timbre" not in by_modality:
            raise EmbeddingError(f"{path}: no timbre manifest")
        return build_features(by_modality["timbre"], by_modality.get("face"))
    return load_embeddings_jsonl(path)
