"""Independent reference implementations used as test oracles.

Each one is written for clarity, not speed, and shares no code with the
package beyond the data types.
"""

import itertools

import numpy as np


def exhaustive_align(src, tgt, max_start_delta=0.7):
    """O(N^2) reference: every (source, target) pair is scored up front."""
    limit = round(max_start_delta * 100)
    s = np.array([ln.start.cs for ln in src.lines])
    t = np.array([ln.start.cs for ln in tgt.lines])
    margin = abs(len(s) - len(t))
    idx_i = np.arange(len(s))[:, None]
    idx_j = np.arange(len(t))[None, :]
    delta = np.abs(s[:, None] - t[None, :])
    ok = (np.abs(idx_i - idx_j) <= margin) & (delta <= limit)
    # lexicographic (delta, j) key
    key = np.where(ok, delta * len(t) + idx_j, np.iinfo(np.int64).max)
    claimed = np.zeros(len(t), dtype=bool)
    pairs, un_src = [], []
    for i in range(len(s)):
        row = np.where(claimed, np.iinfo(np.int64).max, key[i])
        j = int(np.argmin(row))
        if row[j] == np.iinfo(np.int64).max:
            un_src.append(src.lines[i].line_id)
            continue
        claimed[j] = True
        pairs.append((src.lines[i].line_id, tgt.lines[j].line_id))
    un_tgt = [tgt.lines[j].line_id for j in range(len(t)) if not claimed[j]]
    return pairs, un_src, un_tgt


def naive_scan(text, surfaces):
    """Reference matcher: try every surface at every position, longest first."""
    by_len = sorted(set(surfaces), key=len, reverse=True)
    out, pos = [], 0
    while pos < len(text):
        for s in by_len:
            if text.startswith(s, pos):
                out.append((pos, pos + len(s), s))
                pos += len(s)
                break
        else:
            pos += 1
    return out


def brute_vote(raw, min_support):
    """Reference tally written independently of the production code."""
    surfaces = {}
    for c in raw:
        surfaces.setdefault(c.surface, []).append(c)
    out = {}
    for s, cs in surfaces.items():
        if len(cs) < min_support:
            continue
        types = sorted({c.term_type for c in cs})
        best_n = max(sum(c.term_type == t for c in cs) for t in types)
        tp = [t for t in types if sum(c.term_type == t for c in cs) == best_n][0]
        trs = {c.translation for c in cs}
        best_n = max(sum(c.translation == t for c in cs) for t in trs)
        tied = [t for t in trs if sum(c.translation == t for c in cs) == best_n]
        first_group = min(min(c.group_id for c in cs if c.translation == t) for t in tied)
        tied = sorted(t for t in tied if min(c.group_id for c in cs if c.translation == t) == first_group)
        out[s] = (tp, tied[0], len(cs))
    return out


def brute_text_der(pred, ref):
    ids = sorted(ref)
    rl = sorted(set(ref.values()))
    pl = sorted(set(pred.values()))
    best = 0
    # every partial injection between the smaller and larger label sets
    small, large, swap = (rl, pl, False) if len(rl) <= len(pl) else (pl, rl, True)
    for perm in itertools.permutations(large, len(small)):
        m = dict(zip(small, perm))
        if swap:
            m = {v: k for k, v in m.items()}  # always reference -> predicted
        hits = sum(1 for i in ids if m.get(ref[i]) == pred[i])
        best = max(best, hits)
    return 1 - best / len(ids)
