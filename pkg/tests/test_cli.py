import hashlib
import json
from pathlib import Path

import pytest

from subling.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run

from synth import write_pipeline_fixture

DATA = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("HERMES_SEED", raising=False)


def summary(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    return json.loads(out[0])


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pipeline(fx, out, *extra):
    """align -> diarize -> terms -> sft-emit -> sapo sample -> sapo emit."""
    src = str(fx["source"])
    steps = [
        ["align", src, str(fx["target"])],
        ["diarize", str(fx["embeddings"])],
        ["terms", "collect", src, f"{out}/aligned.jsonl", f"{out}/diarization.jsonl",
         "--dictionary", str(fx["dictionary"])],
        ["terms", "vote", f"{out}/terms_raw.jsonl"],
        ["sft-emit", src, f"{out}/aligned.jsonl", f"{out}/diarization.jsonl",
         "--table", f"{out}/terms_table.jsonl"],
        ["sapo", "sample", src, f"{out}/aligned.jsonl", f"{out}/diarization.jsonl",
         "--table", f"{out}/terms_table.jsonl"],
        ["sapo", "emit", f"{out}/samples.jsonl"],
    ]
    for step in steps:
        assert run(step + ["--out", str(out), "--mock", *extra]) == EXIT_OK, step


# ---------------------------------------------------------------- usage and config

def test_unknown_command_is_usage_error(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_command_and_bad_option(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["terms"]) == EXIT_USAGE
    assert run(["align", "a.ass", "b.ass", "--jobs", "many"]) == EXIT_USAGE


def test_epsilon_out_of_range_in_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"thresholds": {"epsilon": 1.5}}))
    assert run(["diarize", "emb.jsonl", "--config", str(cfg)]) == EXIT_INVALID
    assert "epsilon" in capsys.readouterr().err


def test_flags_shadow_config_and_manifest_echoes(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "thresholds": {"eta": 0.5}}))
    monkeypatch.setenv("HERMES_SEED", "6")
    code = run(["align", str(DATA / "courtroom_en.ass"), str(DATA / "courtroom_zh.ass"), "--config", str(cfg),
                "--seed", "7", "--set", "thresholds.max_start_delta=0.5", "--out", "o"])
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["command"] == "align"
    assert manifest["config"]["seed"] == 7
    assert manifest["config"]["thresholds"]["eta"] == 0.5
    assert manifest["config"]["thresholds"]["max_start_delta"] == 0.5


def test_real_clients_need_an_endpoint(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=20)
    assert run(["align", str(fx["source"]), str(fx["target"]), "--out", "o"]) == EXIT_OK
    assert run(["diarize", str(fx["embeddings"]), "--out", "o"]) == EXIT_OK
    capsys.readouterr()
    code = run(["terms", "collect", str(fx["source"]), "o/aligned.jsonl", "o/diarization.jsonl", "--out", "o"])
    assert code == EXIT_INVALID
    assert "endpoints.extractor.base_url" in capsys.readouterr().err


def test_transport_failure_is_runtime_error(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=20)
    run(["align", str(fx["source"]), str(fx["target"]), "--out", "o"])
    run(["diarize", str(fx["embeddings"]), "--out", "o"])
    capsys.readouterr()
    code = run(["sapo", "sample", str(fx["source"]), "o/aligned.jsonl", "o/diarization.jsonl", "--out", "o",
                "--set", 'endpoints.translator.base_url="http://127.0.0.1:9/v1"',
                "--set", 'endpoints.judge.base_url="http://127.0.0.1:9/v1"',
                "--set", "retry.max_attempts=1"])
    assert code == EXIT_RUNTIME
    assert "sapo sample" in capsys.readouterr().err


def test_missing_and_malformed_inputs(tmp_path, capsys):
    assert run(["terms", "vote", "absent.jsonl", "--out", "o"]) == EXIT_RUNTIME
    bad = tmp_path / "raw.jsonl"
    bad.write_text('{"surface": "x"}\n')
    assert run(["terms", "vote", str(bad), "--out", "o"]) == EXIT_INVALID
    assert "raw.jsonl:1" in capsys.readouterr().err


# ---------------------------------------------------------------- commands

def test_align_courtroom_fixture(tmp_path, capsys):
    code = run(["align", str(DATA / "courtroom_en.ass"), str(DATA / "courtroom_zh.ass"), "--out", "o"])
    assert code == EXIT_OK
    s = summary(capsys)
    # the last English row repeats the previous start time, 4.08 s before its Chinese counterpart
    assert s == {"command": "align", "pairs": 6, "unmatched_source": 1, "unmatched_target": 1}
    recs = [json.loads(x) for x in (tmp_path / "o" / "aligned.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [(r["src_id"], r["tgt_id"]) for r in recs] == [(i, i) for i in range(1, 7)]
    assert recs[0]["tgt_text"] == "我这儿子确实犯了不可饶恕的错误"


def test_full_mock_pipeline_outputs(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx")
    pipeline(fx, tmp_path / "o")
    out = tmp_path / "o"
    for name in ("aligned.jsonl", "diarization.jsonl", "terms_table.jsonl", "sft.jsonl", "split.json",
                 "samples.jsonl", "preference.jsonl", "preference.summary.json", "manifest.json"):
        assert (out / name).exists(), name
    table = {json.loads(x)["surface"] for x in (out / "terms_table.jsonl").read_text(encoding="utf-8").splitlines()}
    assert table <= set(json.loads(x)["surface"] for x in fx["dictionary"].read_text(encoding="utf-8").splitlines())
    split = json.loads((out / "split.json").read_text())
    assert not set(split["sft"]) & set(split["sapo"])
    pref = [json.loads(x) for x in (out / "preference.jsonl").read_text(encoding="utf-8").splitlines()]
    assert pref and {r["prompt_id"] for r in pref} <= set(split["sapo"])
    assert all(r["scores"][r["candidates"].index(r["chosen"])] > r["scores"][r["candidates"].index(r["rejected"])]
               for r in pref)


def test_sapo_sample_repeatable(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=60)
    pipeline(fx, tmp_path / "a", "--seed", "3")
    pipeline(fx, tmp_path / "b", "--seed", "3")
    assert digest(tmp_path / "a" / "samples.jsonl") == digest(tmp_path / "b" / "samples.jsonl")
    pipeline(fx, tmp_path / "c", "--seed", "4")
    assert digest(tmp_path / "a" / "samples.jsonl") != digest(tmp_path / "c" / "samples.jsonl")


def test_terms_retrieve_and_emit(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=40)
    pipeline(fx, tmp_path / "o")
    capsys.readouterr()
    assert run(["terms", "retrieve", "o/terms_table.jsonl", str(fx["source"]), "--out", "o"]) == EXIT_OK
    hits = summary(capsys)["hits"]
    assert hits == len((tmp_path / "o" / "term_hits.jsonl").read_text(encoding="utf-8").splitlines())
    assert run(["terms", "emit", str(fx["source"]), "o/diarization.jsonl", "o/terms_table.jsonl",
                "--out", "o"]) == EXIT_OK
    assert summary(capsys)["records"] > 0


def test_sapo_weights_and_loss_check(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=60)
    pipeline(fx, tmp_path / "o")
    capsys.readouterr()
    assert run(["sapo", "weights", "o/samples.jsonl", "--out", "o"]) == EXIT_OK
    rows = [json.loads(x) for x in (tmp_path / "o" / "weights.jsonl").read_text().splitlines()]
    by_prompt = {}
    for r in rows:
        by_prompt.setdefault(r["prompt_id"], []).append(r["importance"])
    assert all(abs(sum(v) - 1) < 1e-9 for v in by_prompt.values())

    inp = tmp_path / "loss.jsonl"
    inp.write_text(json.dumps({"beta": 0.1, "policy_chosen": -1.0, "policy_rejected": -2.0,
                               "ref_chosen": -1.0, "ref_rejected": -2.0, "weight": 1.0}) + "\n")
    capsys.readouterr()
    assert run(["loss-check", str(inp), "--out", "o"]) == EXIT_OK
    assert summary(capsys)["sapo_loss"] == pytest.approx(0.693147, abs=1e-6)


def test_diarize_score_and_sweep(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=60)
    ref = tmp_path / "ref.jsonl"
    ref.write_text("".join(json.dumps({"line_id": i, "speaker": f"s{lab}"}) + "\n"
                           for i, lab in enumerate(fx["labels"], 1)))
    assert run(["diarize-score", str(ref), str(ref), str(fx["source"]), "--out", "o"]) == EXIT_OK
    assert summary(capsys) == {"command": "diarize-score", "der": 0.0, "jer": 0.0, "text_der": 0.0}
    assert run(["sweep-epsilon", str(fx["embeddings"]), str(ref), "--grid", "0.1:0.9:0.1", "--out", "o"]) == EXIT_OK
    s = summary(capsys)
    assert s["points"] == 9 and 0 <= s["best_accuracy"] <= 1
    assert run(["sweep-epsilon", str(fx["embeddings"]), str(ref), "--grid", "x:y", "--out", "o"]) == EXIT_INVALID


def test_eval_commands_build_one_report(tmp_path, capsys):
    src = tmp_path / "src.srt"
    src.write_text("1\n00:00:01,000 --> 00:00:02,000\n她去沧澜\n\n2\n00:00:03,000 --> 00:00:04,000\n他来了\n",
                   encoding="utf-8")
    outputs = tmp_path / "out.jsonl"
    outputs.write_text(json.dumps({"line_id": 1, "text": "She went to Canglan"}) + "\n"
                       + json.dumps({"line_id": 2, "text": "It came"}) + "\n")
    ann = tmp_path / "ann.jsonl"
    ann.write_text(json.dumps({"line_id": 1, "pronoun": "她", "acceptable": ["She"]}, ensure_ascii=False) + "\n"
                   + json.dumps({"line_id": 2, "pronoun": "他", "acceptable": ["He"]}, ensure_ascii=False) + "\n",
                   encoding="utf-8")
    table = tmp_path / "table.jsonl"
    table.write_text(json.dumps({"surface": "沧澜", "type": "location", "translation": "Canglan", "support": 2},
                                ensure_ascii=False) + "\n", encoding="utf-8")
    scores = tmp_path / "s1.jsonl"
    scores.write_text(json.dumps({"segment_id": "a", "scores": {"accuracy": 80}}) + "\n")
    scores2 = tmp_path / "s2.jsonl"
    scores2.write_text(json.dumps({"segment_id": "a", "scores": {"accuracy": 90}}) + "\n")
    outcomes = tmp_path / "wl.jsonl"
    outcomes.write_text("".join(json.dumps({"item_id": i, "dimension": "accuracy", "result": r}) + "\n"
                                for i, r in enumerate(["win", "tie", "loss", "win"])))

    assert run(["eval", "pa", str(ann), str(src), str(outputs), "--out", "r"]) == EXIT_OK
    assert run(["eval", "tc", str(table), str(src), str(outputs), "--out", "r"]) == EXIT_OK
    assert run(["eval", "aggregate", str(scores), str(scores2), "--out", "r"]) == EXIT_OK
    assert run(["eval", "winrate", str(outcomes), "--out", "r"]) == EXIT_OK
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report == {"pa": 50.0, "tc": 100.0, "dims": {"accuracy": 85.0}, "win_rate": {"accuracy": "50:25:25"}}
    assert "win:tie:loss accuracy" in (tmp_path / "r" / "report.txt").read_text()


def test_prompt_template_file_replaces_preamble(tmp_path, capsys):
    fx = write_pipeline_fixture(tmp_path / "fx", n_lines=20)
    tpl = tmp_path / "translate.txt"
    tpl.write_text("Render these lines into English.\n", encoding="utf-8")
    assert run(["align", str(fx["source"]), str(fx["target"]), "--out", "o"]) == EXIT_OK
    assert run(["diarize", str(fx["embeddings"]), "--out", "o"]) == EXIT_OK
    assert run(["sft-emit", str(fx["source"]), "o/aligned.jsonl", "o/diarization.jsonl", "--out", "o",
                "--set", f"prompts.translate={json.dumps(str(tpl))}", "--set", "thresholds.holdout_fraction=0.5"]) == EXIT_OK
    first = json.loads((tmp_path / "o" / "sft.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert first["input"].startswith("Render these lines into English.\n")
    tpl.write_text("  \n")
    assert run(["sft-emit", str(fx["source"]), "o/aligned.jsonl", "o/diarization.jsonl", "--out", "o",
                "--set", f"prompts.translate={json.dumps(str(tpl))}"]) == EXIT_INVALID
    assert "prompts.translate" in capsys.readouterr().err
