"""Term candidate voting, a prefix-tree index over term surfaces, retrieval
and the term-identification dataset."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from subling.clients import Extractor, ProtocolError, TransportError
from subling.jsonl import iter_jsonl, write_jsonl
from subling.subtitles import PromptGroup, Subtitle

log = logging.getLogger(__name__)

DEFAULT_MIN_SUPPORT = 2
DEFAULT_TI_PREAMBLE = ("Identify the proper nouns in the subtitle lines below. "
                       "Give each one's type and its translation.")


@dataclass(frozen=True)
class TermCandidate:
    surface: str
    term_type: str
    translation: str
    group_id: int

    def to_json(self) -> dict:
        return {"surface": self.surface, "type": self.term_type,
                "translation": self.translation, "group_id": self.group_id}


@dataclass(frozen=True)
class TermRecord:
    surface: str
    term_type: str
    translation: str
    support: int

    def to_json(self) -> dict:
        return {"surface": self.surface, "type": self.term_type,
                "translation": self.translation, "support": self.support}


@dataclass
class TermTable:
    records: dict[str, TermRecord] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __contains__(self, surface):
        return surface in self.records

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.records.values()]


# ---------------------------------------------------------------- collection

@dataclass(frozen=True)
class BilingualGroup:
    group_id: int
    source_lines: tuple[str, ...]
    target_lines: tuple[str, ...]


@dataclass
class CollectionResult:
    candidates: list[TermCandidate]
    dropped: int = 0
    failed_groups: list[dict] = field(default_factory=list)


def bilingual_groups(src: Subtitle, groups: Sequence[PromptGroup],
                     targets: Mapping[int, str]) -> list[BilingualGroup]:
    """Attach aligned target text to prompt groups. Source lines without an
    aligned target contribute an empty target string."""
    by_id = src.by_id()
    return [BilingualGroup(g.group_id,
                           tuple(by_id[i].text for i in g.line_ids),
                           tuple(targets.get(i, "") for i in g.line_ids))
            for g in groups]


def _extract_one(extractor: Extractor, group: BilingualGroup):
    try:
        return extractor.extract_terms(list(group.source_lines), list(group.target_lines)), None
    except TransportError as exc:
        return None, {"group_id": group.group_id, "error": "transport", "message": str(exc)}
    except ProtocolError as exc:
        return None, {"group_id": group.group_id, "error": "protocol", "message": str(exc)}


def collect_candidates(groups: Sequence[BilingualGroup], extractor: Extractor,
                       jobs: int = 1) -> CollectionResult:
    """One extractor call per group. Tuples whose surface does not occur in
    the group's source text are dropped and counted."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1:
        outcomes = [_extract_one(extractor, g) for g in groups]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda g: _extract_one(extractor, g), groups))

    result = CollectionResult(candidates=[])
    for g, (terms, failure) in zip(groups, outcomes):
        if failure is not None:
            log.warning("group %d skipped: %s", g.group_id, failure["message"])
            result.failed_groups.append(failure)
            continue
        for surface, term_type, translation in terms:
            if not surface or not any(surface in line for line in g.source_lines):
                result.dropped += 1
                continue
            result.candidates.append(TermCandidate(surface, term_type, translation, g.group_id))
    if result.dropped:
        log.warning("dropped %d term candidates not found in their group", result.dropped)
    return result


# ---------------------------------------------------------------- voting

def filter_and_vote(raw: Iterable[TermCandidate], min_support: int = DEFAULT_MIN_SUPPORT) -> TermTable:
    """Keep surfaces with at least ``min_support`` candidates and vote on
    their type and translation.

    Type ties go to the lexicographically smallest value. Translation ties go
    to the value first proposed by the lowest group id, then lexicographic.
    Records are ordered by surface.
    """
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    by_surface: dict[str, list[TermCandidate]] = {}
    for c in raw:
        by_surface.setdefault(c.surface, []).append(c)

    table = TermTable()
    for surface in sorted(by_surface):
        cands = by_surface[surface]
        if len(cands) < min_support:
            continue
        types = Counter(c.term_type for c in cands)
        term_type = min(types, key=lambda t: (-types[t], t))
        trans = Counter(c.translation for c in cands)
        earliest: dict[str, int] = {}
        for c in cands:
            earliest[c.translation] = min(earliest.get(c.translation, c.group_id), c.group_id)
        translation = min(trans, key=lambda t: (-trans[t], earliest[t], t))
        table.records[surface] = TermRecord(surface, term_type, translation, len(cands))
    return table


# ---------------------------------------------------------------- trie

def _fold_ascii(ch: str) -> str:
    return ch.lower() if "A" <= ch <= "Z" else ch


class _Node:
    __slots__ = ("children", "record")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.record: Optional[TermRecord] = None


class TermTrie:
    """Prefix tree over the Unicode scalars of term surfaces.

    With ``ascii_casefold`` set, ASCII letters match regardless of case;
    everything else matches exactly.
    """

    def __init__(self, ascii_casefold: bool = False):
        self.root = _Node()
        self.ascii_casefold = ascii_casefold
        self.size = 0

    def _key(self, ch: str) -> str:
        return _fold_ascii(ch) if self.ascii_casefold else ch

    def insert(self, record: TermRecord) -> None:
        if not record.surface:
            raise ValueError("empty term surface")
        node = self.root
        for ch in record.surface:
            node = node.children.setdefault(self._key(ch), _Node())
        if node.record is None:
            self.size += 1
        node.record = record

    def lookup(self, surface: str) -> Optional[TermRecord]:
        node = self.root
        for ch in surface:
            node = node.children.get(self._key(ch))
            if node is None:
                return None
        return node.record

    def __contains__(self, surface):
        return self.lookup(surface) is not None

    def __len__(self):
        return self.size

    def longest_at(self, text: str, pos: int) -> tuple[int, Optional[TermRecord]]:
        """End offset and record of the longest terminal match starting at ``pos``."""
        node, best_end, best = self.root, pos, None
        for i in range(pos, len(text)):
            node = node.children.get(self._key(text[i]))
            if node is None:
                break
            if node.record is not None:
                best_end, best = i + 1, node.record
        return best_end, best


def build_trie(table: TermTable, ascii_casefold: bool = False) -> TermTrie:
    if not len(table):
        raise ValueError("cannot index an empty term table")
    trie = TermTrie(ascii_casefold)
    for record in table.records.values():
        trie.insert(record)
    return trie


@dataclass(frozen=True)
class TermHit:
    """A term occurrence. ``start``/``end`` are scalar offsets into the line
    text; ``byte_span`` is the same span in UTF-8 bytes."""

    line_id: int
    start: int
    end: int
    byte_span: tuple[int, int]
    surface: str
    term_type: str
    translation: str
    table_surface: str

    def to_json(self) -> dict:
        return {"line_id": self.line_id, "start": self.start, "end": self.end,
                "byte_span": list(self.byte_span), "surface": self.surface,
                "type": self.term_type, "translation": self.translation}


def retrieve(line_text: str, trie: TermTrie, line_id: int = 0) -> list[TermHit]:
    """Leftmost-longest, non-overlapping term matches in ``line_text``."""
    hits = []
    pos = 0
    while pos < len(line_text):
        end, record = trie.longest_at(line_text, pos)
        if record is None:
            pos += 1
            continue
        b0 = len(line_text[:pos].encode("utf-8"))
        b1 = b0 + len(line_text[pos:end].encode("utf-8"))
        hits.append(TermHit(line_id, pos, end, (b0, b1), line_text[pos:end],
                            record.term_type, record.translation, record.surface))
        pos = end
    return hits


def retrieve_document(src: Subtitle, trie: TermTrie) -> dict[int, list[TermHit]]:
    return {ln.line_id: retrieve(ln.text, trie, ln.line_id) for ln in src.lines}


# ---------------------------------------------------------------- TI dataset

def ti_record(source_lines: Sequence[str], hits: Iterable[TermHit],
              preamble: str = DEFAULT_TI_PREAMBLE) -> dict:
    target, seen = [], set()
    for h in hits:
        if h.table_surface in seen:
            continue
        seen.add(h.table_surface)
        target.append({"surface": h.table_surface, "type": h.term_type, "translation": h.translation})
    return {"input": "\n".join([preamble, *source_lines]), "target": target}


def emit_ti_dataset(src: Subtitle, groups: Sequence[PromptGroup], trie: Optional[TermTrie],
                    path: str | Path, preamble: str = DEFAULT_TI_PREAMBLE) -> int:
    """Write one record per prompt group; returns the record count. With no
    trie (an empty term table) every target is empty."""
    by_id = src.by_id()
    covered = [i for g in groups for i in g.line_ids]
    if sorted(covered) != sorted(by_id):
        raise ValueError("prompt groups do not cover the document")

    def records():
        for g in groups:
            lines = [by_id[i].text for i in g.line_ids]
            hits = ([] if trie is None else
                    [h for i in g.line_ids for h in retrieve(by_id[i].text, trie, i)])
            yield ti_record(lines, hits, preamble)

    return write_jsonl(path, records())


# ---------------------------------------------------------------- persistence

def save_candidates(path, candidates: Iterable[TermCandidate]) -> int:
    return write_jsonl(path, (c.to_json() for c in candidates))


def load_candidates(path) -> list[TermCandidate]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(TermCandidate(rec["surface"], rec["type"], rec["translation"], int(rec["group_id"])))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: term candidate needs surface, type, translation, group_id") from None
    return out


def save_table(path, table: TermTable) -> int:
    return write_jsonl(path, table.to_json())


def load_table(path) -> TermTable:
    table = TermTable()
    for lineno, rec in iter_jsonl(path):
        try:
            r = TermRecord(rec["surface"], rec["type"], rec["translation"], int(rec["support"]))
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: term record needs surface, type, translation, support") from None
        if r.surface in table.records:
            raise ValueError(f"{path}:{lineno}: duplicate surface {r.surface!r}")
        table.records[r.surface] = r
    return table
