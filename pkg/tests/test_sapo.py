import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subling.clients import MockJudge, MockTranslator, SamplingParams, TransportError
from subling.sapo import (
    AdaptiveWeight,
    CandidateSet,
    ContextLine,
    Descriptor,
    IntegrityError,
    PoLossInput,
    PromptContext,
    SamplingError,
    SegmentSample,
    adaptive_weights,
    build_contexts,
    dpo_segment_loss,
    emit_preference_dataset,
    emit_sft_dataset,
    gate,
    importance,
    load_samples,
    loss_check,
    pick,
    sample_segments,
    sapo_loss,
    save_samples,
    split_holdout,
    summary_path,
)
from subling.subtitles import segment_prompts
from subling.terminology import TermRecord, TermTable, build_trie

from synth import make_subtitle

DATA = Path(__file__).parent / "data"
LOG_HALF = math.log(0.5)


def cset(scores, cands=None, idx=1):
    cands = cands or [f"c{i}" for i in range(len(scores))]
    ch, rj = pick(list(scores))
    return CandidateSet(idx, "src", tuple(cands), tuple(scores), ch, rj)


# ---------------------------------------------------------------- holdout

def test_split_holdout_sizes():
    sft, sapo = split_holdout(list(range(100)), 0.2, seed=1)
    assert (len(sft), len(sapo)) == (80, 20)
    assert sorted(sft + sapo) == list(range(100)) and not set(sft) & set(sapo)
    assert split_holdout(list(range(3)), 0.2)[1].__len__() == 1
    assert split_holdout(list(range(10)), 0.25)[1].__len__() == 3  # 2.5 rounds up


def test_split_holdout_deterministic():
    ids = [f"p{i}" for i in range(40)]
    assert split_holdout(ids, 0.5, seed=9) == split_holdout(ids, 0.5, seed=9)
    with pytest.raises(ValueError):
        split_holdout([], 0.2)
    with pytest.raises(ValueError):
        split_holdout([1, 2], 1.0)


# ---------------------------------------------------------------- gate / importance / weights

def test_gate_cases():
    assert gate(cset([10, 50, 90])) == 0
    assert gate(cset([70, 90, 85, 88, 92])) == 1
    assert gate(cset([80, 80, 85, 85])) == 0
    assert gate(cset([80, 80, 86, 85])) == 1


def test_importance_examples():
    assert importance([3, 3, 3, 3]) == [0.25] * 4
    assert importance([2, 6]) == [0.25, 0.75]
    assert importance([7]) == [1.0]
    with pytest.raises(ValueError):
        importance([0, 2])


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=200))
def test_importance_sums_to_one(sizes):
    assert abs(math.fsum(importance(sizes)) - 1.0) <= 1e-9


def test_adaptive_weights_examples():
    s = SegmentSample(1, [cset([50, 60, 70, 80, 90]), cset([50, 50, 50, 50, 50], idx=2)])
    w = adaptive_weights(s)
    assert [(x.gate, x.importance, x.weight) for x in w] == [(1, 0.5, 0.5), (0, 0.5, 0.0)]
    off = SegmentSample(2, [cset([1, 2]), cset([3], idx=2)])
    assert all(x.weight == 0 for x in adaptive_weights(off))
    assert math.fsum(x.importance for x in adaptive_weights(off)) == pytest.approx(1.0)


def test_weight_worked_example():
    s = SegmentSample(1, [cset([70, 90, 85, 88, 92])] + [cset([1] * 5, idx=i) for i in range(2, 6)])
    assert adaptive_weights(s)[0].weight == pytest.approx(0.2)


# ---------------------------------------------------------------- loss

@pytest.mark.parametrize("beta", [0.01, 0.1, 1, 10])
def test_dpo_equal_margins(beta):
    assert dpo_segment_loss(PoLossInput(beta, -3.0, -5.0, -3.0, -5.0)) == pytest.approx(-0.693147, abs=1e-6)


def test_dpo_examples():
    assert dpo_segment_loss(PoLossInput(1, 1, 0, 0, 0)) == pytest.approx(-0.313262, abs=1e-6)
    v = dpo_segment_loss(PoLossInput(0.1, -1000, 0, 0, 0))
    assert v == pytest.approx(-100, abs=1e-6) and math.isfinite(v)


@pytest.mark.parametrize("x", [1e4, -1e4, 700, -700, 1e-12])
def test_dpo_stable(x):
    v = dpo_segment_loss(PoLossInput(1.0, x, 0, 0, 0))
    assert math.isfinite(v) and v <= 0
    # float64 oracle via logaddexp
    assert v == pytest.approx(-np.logaddexp(0, -x), abs=1e-9)


def test_dpo_rejects_bad_input():
    with pytest.raises(ValueError):
        dpo_segment_loss(PoLossInput(0, 1, 0, 0, 0))
    with pytest.raises(ValueError):
        dpo_segment_loss(PoLossInput(1, float("inf"), 0, 0, 0))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 10), st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 5))
def test_dpo_monotone(beta, dc, dr, step):
    base = dpo_segment_loss(PoLossInput(beta, dc, dr, 0, 0))
    assert dpo_segment_loss(PoLossInput(beta, dc + step, dr, 0, 0)) >= base
    assert dpo_segment_loss(PoLossInput(beta, dc, dr + step, 0, 0)) <= base
    assert dpo_segment_loss(PoLossInput(beta, dc, dc, 0, 0)) == pytest.approx(LOG_HALF)


def test_sapo_loss_examples():
    ws = [0.2, 0.4, 0.0]
    assert sapo_loss(ws, [LOG_HALF] * 3) == pytest.approx(0.6 * 0.693147, abs=1e-6)
    assert sapo_loss([AdaptiveWeight(1, 0, 0.5, 0.0)], [-3.0]) == 0.0
    assert sapo_loss([1.0], [-0.31326]) == pytest.approx(0.31326)
    with pytest.raises(ValueError):
        sapo_loss([1.0], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-1e3, 0)), min_size=1, max_size=20))
def test_sapo_loss_nonnegative(pairs):
    assert sapo_loss([w for w, _ in pairs], [v for _, v in pairs]) >= 0


# ---------------------------------------------------------------- sampling

def test_pick_tie_breaks():
    assert pick([90, 70, 90, 70]) == (0, 3)
    assert pick([5]) == (0, 0)


def test_pick_worked_example():
    cs = cset([70, 90, 85, 88, 92])
    assert cs.candidates[cs.chosen] == "c4" and cs.candidates[cs.rejected] == "c0"


def _ctx(texts, speakers=None, pid=1):
    speakers = speakers or ["A"] * len(texts)
    return PromptContext(pid, [ContextLine(i, t, s) for i, (t, s) in enumerate(zip(texts, speakers), 1)])


class ScriptedTranslator:
    def __init__(self, outputs):
        self.outputs = outputs
        self.prefixes = []

    def translate(self, context, lines, prefix, params, k):
        self.prefixes.append(list(prefix))
        return list(self.outputs[len(prefix)])


class ScriptedJudge:
    def __init__(self, table):
        self.table = table

    def judge_scores(self, source, context, candidates):
        return [self.table[c] for c in candidates]


def test_sample_degenerate_k1():
    s = sample_segments(_ctx(["hello"]), MockTranslator(), MockJudge(), k=1)
    (cs,) = s.sets
    assert len(cs.candidates) == 1 and cs.chosen == cs.rejected == 0
    assert gate(cs) == 0


def test_sample_dedup_reference_and_prefix_chain():
    tr = ScriptedTranslator([[" x ", "x", "y", "ref"], ["p", "q"]])
    judge = ScriptedJudge({"ref": 90, "x": 90, "y": 10, "p": 50, "q": 60})
    s = sample_segments(_ctx(["a", "b"]), tr, judge, k=4, reference=["ref", None])
    first, second = s.sets
    assert first.candidates == ("ref", "x", "y")
    assert first.has_reference and first.chosen == 0 and first.rejected == 2
    assert second.candidates == ("p", "q") and not second.has_reference
    assert tr.prefixes == [[], ["ref"]]
    assert s.prefix == ["ref", "q"]


def test_sample_reference_prepended_when_absent():
    tr = ScriptedTranslator([["x", "y"]])
    s = sample_segments(_ctx(["a"]), tr, ScriptedJudge({"gold": 1, "x": 2, "y": 3}), k=2, reference=["gold"])
    assert s.sets[0].candidates == ("gold", "x", "y")


class BadJudge:
    def judge_scores(self, source, context, candidates):
        return [1]


class DeadTranslator:
    def __init__(self):
        self.n = 0

    def translate(self, context, lines, prefix, params, k):
        if prefix:
            raise TransportError("down")
        return ["a", "b"]


def test_sample_errors():
    from subling.clients import ProtocolError
    with pytest.raises(ProtocolError):
        sample_segments(_ctx(["a"]), ScriptedTranslator([["x", "y"]]), BadJudge(), k=2)
    with pytest.raises(SamplingError) as info:
        sample_segments(_ctx(["a", "b"]), DeadTranslator(), MockJudge(), k=2)
    assert len(info.value.partial.sets) == 1


def test_sample_mock_determinism():
    ctx = _ctx(["first line here", "second line", "third one"], ["A", "B", "A"])
    a = sample_segments(ctx, MockTranslator(seed=1), MockJudge(), k=15, params=SamplingParams(seed=1))
    b = sample_segments(ctx, MockTranslator(seed=1), MockJudge(), k=15, params=SamplingParams(seed=1))
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


# ---------------------------------------------------------------- datasets

def test_render_speaker_tags_terms_and_descriptors():
    table = TermTable({"沧澜": TermRecord("沧澜", "location", "Canglan", 2)})
    sub = make_subtitle([0, 200], texts=["去沧澜", "好"], language="zh")
    groups = segment_prompts(sub, [0, 0])
    (ctx,) = build_contexts(sub, groups, {1: 7, 2: 9}, build_trie(table), {"7": Descriptor("adult", "male")})
    text = ctx.render()
    assert "[A] 去沧澜" in text and "[B] 好" in text
    assert "沧澜 -> Canglan (location)" in text
    assert "[A] age: adult; gender: male" in text and "[B] age: unknown; gender: unknown" in text


def _golden_contexts():
    table = TermTable({"沧澜城": TermRecord("沧澜城", "location", "Canglan City", 3)})
    texts = ["去沧澜城找他", "我不去", "为什么", "沧澜城太远了", "那就算了", "走吧"]
    sub = make_subtitle([i * 300 for i in range(6)], texts=texts, language="zh")
    speakers = {1: 1, 2: 2, 3: 1, 4: 2, 5: 2, 6: 3}
    groups = segment_prompts(sub, [0, 0, 1, 1, 2, 2])
    ctxs = build_contexts(sub, groups, speakers, build_trie(table),
                          {"1": Descriptor("young adult", "female"), "2": Descriptor("elderly", "male")})
    targets = {1: "Go find him in Canglan City", 2: "I'm not going", 3: "Why?",
               4: "Canglan City is too far", 5: "Forget it then", 6: "Let's go"}
    return ctxs, targets


def test_sft_golden(tmp_path):
    ctxs, targets = _golden_contexts()
    n, skipped = emit_sft_dataset(ctxs, targets, tmp_path / "sft.jsonl")
    assert (n, skipped) == (3, [])
    assert (tmp_path / "sft.jsonl").read_bytes() == (DATA / "sft_golden.jsonl").read_bytes()


def test_sft_skips_missing_targets(tmp_path):
    ctxs, targets = _golden_contexts()
    del targets[4]
    n, skipped = emit_sft_dataset(ctxs, targets, tmp_path / "sft.jsonl")
    assert (n, skipped) == (2, [2])


def test_preference_emission_counts(tmp_path):
    sets = [cset([50, 60, 70, 80, 90], idx=1), cset([1, 2], idx=2), cset([50, 51, 52, 53], idx=3),
            cset([10, 20, 30, 40], idx=4), cset([5, 5, 5, 5, 5, 5], idx=5)]
    s = SegmentSample(3, sets)
    summary = emit_preference_dataset([s], tmp_path / "pref.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "pref.jsonl").read_text().splitlines()]
    assert [r["line_index"] for r in recs] == [1, 4]
    assert summary == {"prompts": 1, "total_lines": 5, "records": 2, "gated_by_size": 1, "gated_by_range": 2}
    assert json.loads(summary_path(tmp_path / "pref.jsonl").read_text()) == summary
    assert list(recs[0]) == ["prompt_id", "line_index", "prefix", "source", "chosen", "rejected",
                             "weight", "candidates", "scores"]
    assert recs[1]["prefix"] == ["c4", "c1", "c3"]
    assert all(r["scores"][r["candidates"].index(r["chosen"])] > r["scores"][r["candidates"].index(r["rejected"])]
               for r in recs)


def test_preference_integrity_error(tmp_path):
    bad = CandidateSet(1, "s", ("a", "b", "c", "d"), (10, 20, 30, 40), 0, 3)
    with pytest.raises(IntegrityError):
        emit_preference_dataset([SegmentSample(1, [bad])], tmp_path / "p.jsonl")
    assert not (tmp_path / "p.jsonl").exists()


def test_samples_round_trip(tmp_path):
    s = sample_segments(_ctx(["one", "two"]), MockTranslator(), MockJudge(), k=5)
    save_samples(tmp_path / "s.jsonl", [s])
    assert load_samples(tmp_path / "s.jsonl") == [s]


def test_loss_check_file(tmp_path):
    p = tmp_path / "loss.jsonl"
    rows = [{"beta": 0.1, "policy_chosen": -2, "policy_rejected": -4, "ref_chosen": -2,
             "ref_rejected": -4, "weight": 0.6},
            {"beta": 1, "policy_chosen": 1, "policy_rejected": 0, "ref_chosen": 0,
             "ref_rejected": 0, "weight": 0}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out = loss_check(p)
    assert out["segment_losses"][0] == pytest.approx(LOG_HALF)
    assert out["sapo_loss"] == pytest.approx(0.6 * 0.693147, abs=1e-6)
