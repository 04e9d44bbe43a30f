"""Command-line entry point: ``subling <command> [options]``.

Every command reads its declared inputs, writes artifacts plus a
``manifest.json`` (the effective configuration) into ``--out``, and prints a
one-line JSON summary. Exit status: 0 ok, 1 validation error, 2 runtime or
transport error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from subling import evaluation, sapo, terminology
from subling.clients import (
    ClientError,
    Endpoint,
    HttpModelClient,
    MockExtractor,
    MockJudge,
    MockTranslator,
    RetryPolicy,
    SamplingParams,
)
from subling.config import ConfigError, load_config
from subling.diarization import (
    diarize,
    load_features,
    reference_turns,
    score_diarization,
    sweep_epsilon,
)
from subling.jsonl import iter_jsonl, write_json, write_jsonl
from subling.subtitles import Subtitle, align_bitext, drop_noise, load_subtitle, segment_prompts

log = logging.getLogger("subling")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- input helpers

def _load_labels(path) -> dict[int, int]:
    out = {}
    for lineno, rec in iter_jsonl(path):
        try:
            out[int(rec["line_id"])] = rec["speaker"]
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: record needs line_id and speaker") from None
    return out


def _load_targets(path) -> dict[int, str]:
    out = {}
    for lineno, rec in iter_jsonl(path):
        try:
            out[int(rec["src_id"])] = rec["tgt_text"]
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: aligned record needs src_id and tgt_text") from None
    return out


def _load_outputs(path) -> dict[int, str]:
    """System outputs keyed by source line id: JSONL ``{"line_id", "text"}``
    or a subtitle file whose line ids follow the source."""
    if Path(path).suffix.lower() in (".ass", ".ssa", ".srt"):
        return {ln.line_id: ln.text for ln in load_subtitle(path).lines}
    out = {}
    for lineno, rec in iter_jsonl(path):
        try:
            out[int(rec["line_id"])] = rec["text"]
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{path}:{lineno}: output record needs line_id and text") from None
    return out


def _source(args) -> Subtitle:
    sub = load_subtitle(args.source, getattr(args, "src_lang", "und"))
    return sub if getattr(args, "keep_noise", False) else drop_noise(sub)


def _groups(cfg, src: Subtitle, labels: dict[int, int]):
    return segment_prompts(src, [labels.get(ln.line_id) for ln in src.lines],
                           n_max=cfg["thresholds"]["n_max"])


def _trie(args, cfg):
    path = getattr(args, "table", None)
    if path is None:
        return None
    table = terminology.load_table(path)
    if not len(table):
        log.warning("%s: empty term table", path)
        return None
    return terminology.build_trie(table, ascii_casefold=getattr(args, "casefold", False))


def _descriptors(args, cfg):
    path = getattr(args, "descriptors", None) or cfg["paths"]["descriptors"]
    return sapo.load_descriptors(path) if path else {}


def _preamble(cfg, key: str, default: str) -> str:
    path = cfg["prompts"][key]
    if path is None:
        return default
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise ConfigError(f"prompts.{key}", f"{path} is empty")
    return text


def _endpoint_client(cfg, role: str) -> HttpModelClient:
    ep = cfg["endpoints"][role]
    if not ep["base_url"]:
        raise ConfigError(f"endpoints.{role}.base_url", "required unless --mock is given")
    r = cfg["retry"]
    return HttpModelClient(Endpoint(ep["base_url"], ep["token_env"], ep["timeout"]),
                           RetryPolicy(r["max_attempts"], r["base_backoff"], r["multiplier"]))


def _dictionary(path) -> dict[str, tuple[str, str]]:
    out = {}
    if path is None:
        return out
    for lineno, rec in iter_jsonl(path):
        try:
            out[rec["surface"]] = (rec["type"], rec["translation"])
        except (KeyError, TypeError):
            raise ValueError(f"{path}:{lineno}: dictionary entry needs surface, type, translation") from None
    return out


def _sampling(cfg) -> SamplingParams:
    s = cfg["sampling"]
    return SamplingParams(s["temperature"], s["top_k"], s["top_p"], seed=cfg["seed"])


def _split(cfg, groups):
    return sapo.split_holdout([g.group_id for g in groups],
                              cfg["thresholds"]["holdout_fraction"], cfg["seed"])


# ---------------------------------------------------------------- commands

def cmd_align(args, cfg, out: Path) -> dict:
    src = _source(args)
    tgt = load_subtitle(args.target, args.tgt_lang)
    if not args.keep_noise:
        tgt = drop_noise(tgt)
    res = align_bitext(src, tgt, cfg["thresholds"]["max_start_delta"])
    write_jsonl(out / "aligned.jsonl", res.records(src, tgt))
    write_jsonl(out / "unmatched.jsonl", res.unmatched_records())
    return {"pairs": len(res.pairs), "unmatched_source": len(res.unmatched_source),
            "unmatched_target": len(res.unmatched_target)}


def cmd_diarize(args, cfg, out: Path) -> dict:
    th, cl = cfg["thresholds"], cfg["clustering"]
    res = diarize(load_features(args.embeddings), eta=th["eta"], epsilon=th["epsilon"],
                  seed=cfg["seed"], k_max=cl["k_max"], affinity_power=cl["affinity_power"])
    write_jsonl(out / "diarization.jsonl", (a.to_json() for a in res.assignments))
    write_json(out / "speakers.json", res.registry.to_json())
    write_jsonl(out / "turn_groups.jsonl", (
        {"group_id": g.group_id, "line_ids": list(g.line_ids), "score": round(d.score, 6),
         "operation": d.operation.value, "speaker": d.speaker_id}
        for g, d in zip(res.groups, res.decisions)))
    supplemented = sum(1 for d in res.decisions if d.operation.value != "none")
    return {"lines": len(res.assignments), "speakers": len(res.registry),
            "supplemented_groups": supplemented}


def cmd_diarize_score(args, cfg, out: Path) -> dict:
    metrics = score_diarization(_load_labels(args.pred), _load_labels(args.ref),
                                load_subtitle(args.subtitle))
    write_json(out / "metrics.json", metrics.to_json())
    return metrics.to_json()


def _grid(spec: str) -> list[float]:
    try:
        if ":" in spec:
            start, stop, step = (float(x) for x in spec.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("grid", f"{spec!r} is not START:STOP:STEP or a comma list") from None


def cmd_sweep_epsilon(args, cfg, out: Path) -> dict:
    feats = load_features(args.embeddings)
    labels = _load_labels(args.ref)
    missing = [f.line_id for f in feats if f.line_id not in labels]
    if missing:
        raise ValueError(f"reference has no speaker for lines {missing[:10]}")
    rows = sweep_epsilon(feats, reference_turns([labels[f.line_id] for f in feats]), _grid(args.grid))
    write_jsonl(out / "sweep.jsonl", ({"epsilon": e, "accuracy": a} for e, a in rows))
    best = max(rows, key=lambda r: r[1])  # first maximum
    return {"points": len(rows), "best_epsilon": best[0], "best_accuracy": best[1]}


def cmd_terms_collect(args, cfg, out: Path) -> dict:
    src = _source(args)
    groups = _groups(cfg, src, _load_labels(args.diarization))
    bigroups = terminology.bilingual_groups(src, groups, _load_targets(args.aligned))
    if args.mock:
        extractor = MockExtractor(_dictionary(args.dictionary or cfg["paths"]["term_dictionary"]))
    else:
        extractor = _endpoint_client(cfg, "extractor")
    res = terminology.collect_candidates(bigroups, extractor, jobs=cfg["jobs"])
    terminology.save_candidates(out / "terms_raw.jsonl", res.candidates)
    write_jsonl(out / "terms_failed.jsonl", res.failed_groups)
    return {"groups": len(bigroups), "candidates": len(res.candidates),
            "dropped": res.dropped, "failed_groups": len(res.failed_groups)}


def cmd_terms_vote(args, cfg, out: Path) -> dict:
    raw = terminology.load_candidates(args.raw)
    table = terminology.filter_and_vote(raw, cfg["thresholds"]["min_support"])
    terminology.save_table(out / "terms_table.jsonl", table)
    return {"candidates": len(raw), "terms": len(table)}


def cmd_terms_retrieve(args, cfg, out: Path) -> dict:
    src = _source(args)
    trie = _trie(args, cfg)
    hits = [] if trie is None else [h for ln in src.lines for h in terminology.retrieve(ln.text, trie, ln.line_id)]
    write_jsonl(out / "term_hits.jsonl", (h.to_json() for h in hits))
    return {"lines": len(src.lines), "hits": len(hits)}


def cmd_terms_emit(args, cfg, out: Path) -> dict:
    src = _source(args)
    groups = _groups(cfg, src, _load_labels(args.diarization))
    n = terminology.emit_ti_dataset(src, groups, _trie(args, cfg), out / "ti.jsonl",
                                    _preamble(cfg, "terms", terminology.DEFAULT_TI_PREAMBLE))
    return {"records": n}


def _contexts(args, cfg):
    src = _source(args)
    labels = _load_labels(args.diarization)
    groups = _groups(cfg, src, labels)
    sft_ids, sapo_ids = _split(cfg, groups)
    contexts = sapo.build_contexts(src, groups, labels, _trie(args, cfg), _descriptors(args, cfg),
                                   _preamble(cfg, "translate", sapo.DEFAULT_PREAMBLE))
    return contexts, sft_ids, sapo_ids


def cmd_sft_emit(args, cfg, out: Path) -> dict:
    contexts, sft_ids, sapo_ids = _contexts(args, cfg)
    keep = set(sft_ids)
    n, skipped = sapo.emit_sft_dataset([c for c in contexts if c.prompt_id in keep],
                                       _load_targets(args.aligned), out / "sft.jsonl")
    write_json(out / "split.json", {"sft": list(sft_ids), "sapo": list(sapo_ids)})
    return {"records": n, "skipped": len(skipped), "held_out": len(sapo_ids)}


def cmd_sapo_sample(args, cfg, out: Path) -> dict:
    contexts, sft_ids, sapo_ids = _contexts(args, cfg)
    keep = set(sapo_ids)
    contexts = [c for c in contexts if c.prompt_id in keep]
    references = None
    if not args.no_reference:
        targets = _load_targets(args.aligned)
        references = {c.prompt_id: [targets.get(ln.line_id) for ln in c.lines] for c in contexts}
    if args.mock:
        translator, judge = MockTranslator(cfg["seed"]), MockJudge()
    else:
        translator, judge = _endpoint_client(cfg, "translator"), _endpoint_client(cfg, "judge")
    try:
        samples = sapo.sample_many(contexts, translator, judge, cfg["thresholds"]["k"],
                                   references, _sampling(cfg), jobs=cfg["jobs"])
    except sapo.SamplingError as exc:
        sapo.save_samples(out / "samples.partial.jsonl", [exc.partial])
        raise
    sapo.save_samples(out / "samples.jsonl", samples)
    return {"prompts": len(samples), "lines": sum(len(s.sets) for s in samples)}


def cmd_sapo_weights(args, cfg, out: Path) -> dict:
    samples = sapo.load_samples(args.samples)
    rows = [{"prompt_id": s.prompt_id, **w.to_json()} for s in samples for w in sapo.adaptive_weights(s)]
    write_jsonl(out / "weights.jsonl", rows)
    return {"prompts": len(samples), "lines": len(rows), "gated_on": sum(r["gate"] for r in rows)}


def cmd_sapo_emit(args, cfg, out: Path) -> dict:
    return sapo.emit_preference_dataset(sapo.load_samples(args.samples), out / "preference.jsonl")


def cmd_loss_check(args, cfg, out: Path) -> dict:
    res = sapo.loss_check(args.input)
    write_json(out / "loss.json", res)
    return {"segments": len(res["segment_losses"]), "sapo_loss": res["sapo_loss"]}


def _merge_report(out: Path, **fields) -> dict:
    path = out / "report.json"
    report = evaluation.build_report()
    if path.exists():
        report.update(json.loads(path.read_text(encoding="utf-8")))
    report.update(fields)
    evaluation.write_report(out, report)
    return report


def cmd_eval_pa(args, cfg, out: Path) -> dict:
    src = load_subtitle(args.source)
    pa = evaluation.pronoun_accuracy(evaluation.load_annotations(args.annotations, src),
                                     _load_outputs(args.outputs))
    _merge_report(out, pa=pa)
    return {"pa": pa}


def cmd_eval_tc(args, cfg, out: Path) -> dict:
    trie = _trie(args, cfg)
    src = load_subtitle(args.source)
    tc = (evaluation.NOT_AVAILABLE if trie is None else
          evaluation.terminology_consistency(trie, src, _load_outputs(args.outputs)))
    _merge_report(out, tc=tc)
    return {"tc": tc}


def cmd_eval_aggregate(args, cfg, out: Path) -> dict:
    dims = evaluation.aggregate_scores([evaluation.load_segment_scores(p) for p in args.scores])
    report = _merge_report(out, dims={d: evaluation.round1(v) for d, v in dims.items()})
    return {"dims": report["dims"]}


def cmd_eval_winrate(args, cfg, out: Path) -> dict:
    wins = evaluation.win_rate(evaluation.load_outcomes(args.outcomes))
    _merge_report(out, win_rate=wins)
    return {"win_rate": wins}


# ---------------------------------------------------------------- parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="JSON configuration file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. thresholds.epsilon=0.3")
    g.add_argument("--seed", type=int, help="random seed (shadows config and HERMES_SEED)")
    g.add_argument("--jobs", type=int, help="concurrent prompts or groups (default 1)")
    g.add_argument("--mock", action="store_true", help="use offline mock model clients")
    g.add_argument("--out", help="output directory (default paths.outputs)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="subling", description="Subtitle translation pipeline tooling.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def leaf(subparsers, name, func, help_text):
        p = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func, name=name)
        return p

    def src_opts(p, target=False):
        p.add_argument("--src-lang", default="und")
        if target:
            p.add_argument("--tgt-lang", default="und")
        p.add_argument("--keep-noise", action="store_true", help="keep bracketed annotation lines")

    p = leaf(sub, "align", cmd_align, "pair source and target subtitle lines by start time")
    p.add_argument("source")
    p.add_argument("target")
    src_opts(p, target=True)

    p = leaf(sub, "diarize", cmd_diarize, "assign a speaker to every line from embeddings")
    p.add_argument("embeddings", help="embedding JSONL or a directory of binary manifests")

    p = leaf(sub, "diarize-score", cmd_diarize_score, "DER, JER and Text DER against a reference")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("subtitle", help="subtitle file giving line durations")

    p = leaf(sub, "sweep-epsilon", cmd_sweep_epsilon, "turn-detection accuracy over an epsilon grid")
    p.add_argument("embeddings")
    p.add_argument("ref", help="reference speaker labels JSONL")
    p.add_argument("--grid", default="0.05:0.95:0.05", help="START:STOP:STEP or a comma list")

    terms = sub.add_parser("terms", help="terminology collection, voting and retrieval")
    tsub = terms.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    p = leaf(tsub, "collect", cmd_terms_collect, "extract term candidates per prompt group")
    p.add_argument("source")
    p.add_argument("aligned")
    p.add_argument("diarization")
    p.add_argument("--dictionary", help="planted dictionary for --mock (shadows paths.term_dictionary)")
    src_opts(p)
    p = leaf(tsub, "vote", cmd_terms_vote, "filter and vote raw candidates into a term table")
    p.add_argument("raw")
    p = leaf(tsub, "retrieve", cmd_terms_retrieve, "find term-table entries in the source lines")
    p.add_argument("table")
    p.add_argument("source")
    p.add_argument("--casefold", action="store_true", help="ASCII case-insensitive matching")
    src_opts(p)
    p = leaf(tsub, "emit", cmd_terms_emit, "write the terminology-identification dataset")
    p.add_argument("source")
    p.add_argument("diarization")
    p.add_argument("table")
    p.add_argument("--casefold", action="store_true")
    src_opts(p)

    def prompt_opts(p):
        p.add_argument("source")
        p.add_argument("aligned")
        p.add_argument("diarization")
        p.add_argument("--table", help="term table for prompt context")
        p.add_argument("--casefold", action="store_true")
        p.add_argument("--descriptors", help="speaker descriptor JSONL (shadows paths.descriptors)")
        src_opts(p)

    p = leaf(sub, "sft-emit", cmd_sft_emit, "write the supervised fine-tuning dataset")
    prompt_opts(p)

    sap = sub.add_parser("sapo", help="candidate sampling, adaptive weights, preference data")
    ssub = sap.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    p = leaf(ssub, "sample", cmd_sapo_sample, "sample and score candidates for held-out prompts")
    prompt_opts(p)
    p.add_argument("--no-reference", action="store_true", help="do not add the human reference")
    p = leaf(ssub, "weights", cmd_sapo_weights, "per-line gate, importance and weight")
    p.add_argument("samples")
    p = leaf(ssub, "emit", cmd_sapo_emit, "write the preference dataset")
    p.add_argument("samples")

    p = leaf(sub, "loss-check", cmd_loss_check, "evaluate the reference segment loss on log-prob records")
    p.add_argument("input")

    ev = sub.add_parser("eval", help="evaluation metrics and reports")
    esub = ev.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    p = leaf(esub, "pa", cmd_eval_pa, "pronoun accuracy")
    p.add_argument("annotations")
    p.add_argument("source")
    p.add_argument("outputs")
    p = leaf(esub, "tc", cmd_eval_tc, "terminology consistency")
    p.add_argument("table")
    p.add_argument("source")
    p.add_argument("outputs")
    p = leaf(esub, "aggregate", cmd_eval_aggregate, "mean judge scores per dimension")
    p.add_argument("scores", nargs="+", help="one score file per evaluator")
    p = leaf(esub, "winrate", cmd_eval_winrate, "win:tie:loss percentages per dimension")
    p.add_argument("outcomes")
    return parser


def _effective_config(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if args.out is not None:
        overrides.append("paths.outputs=" + json.dumps(args.out))
    return load_config(args.config, tuple(overrides))


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    try:
        cfg = _effective_config(args)
        out = Path(cfg["paths"]["outputs"])
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "manifest.json", {"command": command, "mock": args.mock, "config": cfg})
        summary = args.func(args, cfg, out)
    except ConfigError as exc:
        print(f"subling: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ClientError, sapo.SamplingError, OSError, RuntimeError) as exc:
        print(f"subling: {command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"subling: {command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps({"command": command, **summary}, ensure_ascii=False))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
