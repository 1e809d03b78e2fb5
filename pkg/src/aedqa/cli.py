"""Command-line entry point: ``aedqa {ingest,eval,chart-eval,stats,qagen}``.

Exit codes: 0 success, 1 data error, 2 config error, 3 backend/transport error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import backends as be
from .agents import Backends, answer_question, ask_chart, chart_expert
from .core import (
    ROLES,
    Document,
    EngineConfig,
    QAPair,
    RoleEndpoint,
    check_qa_against,
    default_roles,
    write_qa_file,
)
from .ingest import IngestError, build_manifest, html_files, ingest_file, load_manifest
from .metrics import (
    NON_NUMERICAL,
    NUMERICAL,
    EvalReport,
    Lexicon,
    classify_answer_type,
    evaluate_corpus,
)
from .qagen import (
    QaGenConfig,
    UnparseableGeneration,
    generate_qa_pairs,
    quality_check,
    write_flagged,
    write_manual_queue,
)

log = logging.getLogger("aedqa")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    qagen: QaGenConfig = field(default_factory=QaGenConfig)
    corpus: Optional[Path] = None
    qa: Optional[Path] = None
    out: Path = Path("out")
    lexicon: Optional[Path] = None
    mock: bool = False
    mock_script: Optional[Path] = None
    capture: Optional[Path] = None
    replay: Optional[Path] = None


def _path(v: Any, base: Path) -> Optional[Path]:
    if v is None or v == "":
        return None
    p = Path(v)
    return p if p.is_absolute() else base / p


def load_config(path: Optional[Path], args: argparse.Namespace) -> RunConfig:
    """Config file, then environment, then command-line flags."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent

    eng = dict(raw.get("engine", {}))
    roles = default_roles()
    for role, spec in raw.get("roles", {}).items():
        if role not in ROLES:
            raise ConfigError(f"unknown role [roles.{role}]")
        roles[role] = RoleEndpoint(url=spec.get("url", ""), model=spec.get("model", roles[role].model))
    env_urls = {"embedding": be.ENV_EMBED_URL, "ocr": be.ENV_OCR_URL}
    for role in ROLES:
        var = env_urls.get(role, be.ENV_CHAT_URL)
        if os.environ.get(var):
            roles[role] = replace(roles[role], url=os.environ[var])
    if getattr(args, "threshold", None) is not None:
        eng["activation_threshold"] = args.threshold
    if getattr(args, "concurrency", None) is not None:
        eng["max_concurrency"] = args.concurrency
    try:
        engine = EngineConfig(roles=roles, **eng)
        qagen = QaGenConfig(**raw.get("qagen", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    rc = RunConfig(
        engine=engine,
        qagen=qagen,
        corpus=_path(raw.get("corpus"), base),
        qa=_path(raw.get("qa"), base),
        out=_path(raw.get("out"), base) or Path("out"),
        lexicon=_path(raw.get("lexicon"), base),
        mock_script=_path(raw.get("mock_script"), base),
    )
    for name in ("corpus", "qa", "lexicon", "out", "capture", "replay"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc, name, Path(v))
    mock = getattr(args, "mock", None)
    if mock is not None:
        rc.mock = True
        if mock is not True:
            rc.mock_script = Path(mock)
    for name in ("corpus", "qa", "lexicon", "replay", "mock_script"):
        p = getattr(rc, name)
        if p is not None and not p.exists():
            raise ConfigError(f"{name} path does not exist: {p}")
    return rc


# -- backends ---------------------------------------------------------------------


def _rule_script(rules: Sequence[dict]) -> Callable[[be.MockCall], Optional[str]]:
    def script(call: be.MockCall) -> Optional[str]:
        for r in rules:
            if "equals" in r and call.user != r["equals"]:
                continue
            if "contains" in r and r["contains"] not in call.user:
                continue
            return r["reply"]
        return None

    return script


def build_backends(rc: RunConfig, fixture_dirs: Sequence[Path] = ()) -> Backends:
    """One backend per role: mock, replay or HTTP, optionally capturing to a transcript.

    A mock script is JSON keyed by role name, each a list of rules
    ``{"contains"|"equals": <user text>, "reply": <text>}``; first match wins.
    """
    limit = rc.engine.max_concurrency
    script: dict = {}
    if rc.mock and rc.mock_script is not None:
        with open(rc.mock_script, encoding="utf-8") as fh:
            script = json.load(fh)
    made = {}
    for role in ROLES:
        ep = rc.engine.roles[role]
        if rc.replay is not None:
            b: be.Backend = be.ReplayBackend(rc.replay, model=ep.model, max_concurrency=limit)
        elif rc.mock:
            rules = _rule_script(script.get(role, []))
            b = be.MockBackend(rules, rules, fixture_dirs, model=ep.model, max_concurrency=limit)
        else:
            b = be.HttpBackend(
                ep.model,
                chat_url=ep.url if role not in ("embedding", "ocr") else None,
                embed_url=ep.url if role == "embedding" else None,
                ocr_url=ep.url if role == "ocr" else None,
                max_concurrency=limit,
            )
        made[role] = b
    if rc.capture is not None:
        transcript = be.Transcript(rc.capture)
        made = {k: be.CapturingBackend(v, transcript) for k, v in made.items()}
    return Backends(**made)


def _fixture_dirs(docs: Sequence[Document], corpus: Optional[Path]) -> list[Path]:
    dirs = {c.local_path.parent for d in docs for c in d.charts}
    if corpus is not None:
        dirs.add(corpus.parent)
    return sorted(dirs)


# -- helpers ------------------------------------------------------------------------


def _err(payload: dict) -> None:
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _jsonl(path: Path, rows: Sequence[dict]) -> None:
    _write(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def _load_inputs(rc: RunConfig) -> tuple[dict[str, Document], list[QAPair]]:
    if rc.corpus is None or rc.qa is None:
        raise ConfigError("both a corpus manifest and a QA file are required")
    docs = {d.id: d for d in load_manifest(rc.corpus)}
    qa = []
    with open(rc.qa, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                qa.append(QAPair.from_json(line))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{rc.qa}:{n}: {exc}") from exc
    for q in qa:
        if q.doc_id not in docs:
            raise ConfigError(f"{q.id}: unknown document {q.doc_id}")
        problems = check_qa_against(q, docs[q.doc_id])
        if problems:
            raise ConfigError("; ".join(problems))
    return docs, qa


def _lexicon(rc: RunConfig) -> Lexicon:
    return Lexicon.from_tsv(rc.lexicon) if rc.lexicon else Lexicon.default()


def _run_all(items: Sequence, fn: Callable, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _finish_eval(
    rc: RunConfig,
    qa: Sequence[QAPair],
    results: Sequence[tuple[Optional[str], Optional[str], Any, Optional[Exception]]],
    method: str,
    md_subsets: Sequence[str],
) -> int:
    """Write predictions, traces and report; results are (answer, modality, trace, error) per question."""
    rc.out.mkdir(parents=True, exist_ok=True)
    predictions, pred_rows, trace_rows, failures = {}, [], [], {}
    transport_failures = 0
    for q, (answer, modality, trace, error) in zip(qa, results):
        if error is not None:
            failures[q.id] = f"{type(error).__name__}: {error}"
            cause = getattr(error, "cause", error)
            transport_failures += isinstance(cause, be.TransportError)
        else:
            predictions[q.id] = answer
        pred_rows.append({"id": q.id, "answer": answer, "modality": modality, "error": failures.get(q.id)})
        trace_rows.append({"id": q.id, "trace": trace})
    report: EvalReport = evaluate_corpus(predictions, qa, _lexicon(rc), method=method)
    report.failures = failures
    _jsonl(rc.out / "predictions.jsonl", pred_rows)
    _jsonl(rc.out / "traces.jsonl", trace_rows)
    _write(rc.out / "report.json", report.to_json())
    _write(rc.out / "report.md", report.to_markdown(md_subsets))
    print(report.to_markdown(md_subsets), end="")
    if qa and transport_failures == len(qa):
        return EXIT_BACKEND
    return EXIT_OK


# -- commands -------------------------------------------------------------------------


def cmd_ingest(input_dir: Path, asset_dir: Path, out_dir: Path) -> int:
    if not input_dir.is_dir():
        _err({"error": "ConfigError", "message": f"input directory not found: {input_dir}"})
        return EXIT_CONFIG
    docs, reports, failed = [], [], 0
    for path in html_files(input_dir):
        try:
            doc, report = ingest_file(path, asset_dir)
        except IngestError as exc:
            failed += 1
            _err({"error": type(exc).__name__, "file": str(path), "message": str(exc)})
            continue
        docs.append(doc)
        reports.append(report.to_dict())
    try:
        manifest = build_manifest(docs, out_dir)
    except IngestError as exc:
        _err({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_DATA
    _write(out_dir / "ingest_report.json", json.dumps({"reports": reports}, ensure_ascii=False, indent=2) + "\n")
    log.info("wrote %s (%d documents, %d failed)", manifest, len(docs), failed)
    return EXIT_DATA if failed else EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    docs, qa = _load_inputs(rc)
    backends = build_backends(rc, _fixture_dirs(list(docs.values()), rc.corpus))

    def run(q: QAPair):
        try:
            final, trace = answer_question(docs[q.doc_id], q.question, rc.engine, backends)
            return final.answer, final.selected_modality.tag, trace.to_dict(), None
        except Exception as exc:  # recorded as a miss
            log.warning("%s failed: %s", q.id, exc)
            return None, None, None, exc

    results = _run_all(qa, run, rc.engine.max_concurrency)
    return _finish_eval(rc, qa, results, "AED", ("Text", "Table", "Chart", "All"))


def cmd_chart_eval(rc: RunConfig, no_rank: bool) -> int:
    docs, qa = _load_inputs(rc)
    qa = [q for q in qa if any(m.kind == "chart" for m in q.modalities)]
    backends = build_backends(rc, _fixture_dirs(list(docs.values()), rc.corpus))

    def run(q: QAPair):
        doc = docs[q.doc_id]
        try:
            if no_rank:
                designated = next(m for m in q.modalities if m.kind == "chart")
                ans = ask_chart(doc.chart(designated.index), q.question, backends.vision)
                trace = {"mode": "no_rank", "chart": designated.tag}
            else:
                ranking: list = []
                ans = chart_expert(
                    doc.charts, q.question, rc.engine.chart_top_k, backends=backends, ranking_out=ranking
                )
                trace = {"mode": "rank", "chart_ranking": [s.to_dict() for s in ranking]}
            trace["expert_answer"] = ans.to_dict()
            return ans.answer, ans.modality.tag, trace, None
        except Exception as exc:
            log.warning("%s failed: %s", q.id, exc)
            return None, None, None, exc

    results = _run_all(qa, run, rc.engine.max_concurrency)
    method = "chart expert, no ranking" if no_rank else "chart expert, ranked"
    return _finish_eval(rc, qa, results, method, ("Chart",))


COMBINATIONS = (
    ("Text", {"text"}),
    ("Table", {"table"}),
    ("Chart", {"chart"}),
    ("Common (Text, Table)", {"text", "table"}),
    ("Common (Text, Chart)", {"text", "chart"}),
    ("Common (Table, Chart)", {"table", "chart"}),
)


def answer_stats(pairs: Sequence[QAPair]) -> dict:
    n = len(pairs)
    pct = lambda k: round(100.0 * k / n, 1) if n else 0.0  # noqa: E731
    types = {NUMERICAL: 0, NON_NUMERICAL: 0}
    for p in pairs:
        types[classify_answer_type(p.gold_answer)] += 1
    combos = {}
    for name, kinds in COMBINATIONS:
        k = sum(1 for p in pairs if kinds <= {m.kind for m in p.modalities})
        combos[name] = {"count": k, "percent": pct(k)}
    return {
        "answers": n,
        "answer_types": {t: {"count": c, "percent": pct(c)} for t, c in types.items()},
        "modalities": combos,
    }


def cmd_stats(qa_file: Path) -> int:
    if not qa_file.is_file():
        _err({"error": "ConfigError", "message": f"QA file not found: {qa_file}"})
        return EXIT_CONFIG
    pairs, bad = [], 0
    with open(qa_file, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(QAPair.from_json(line))
            except (ValueError, KeyError) as exc:
                bad += 1
                _err({"error": "MalformedQaLine", "line": n, "message": str(exc)})
    stats = answer_stats(pairs)
    print(f"answers: {stats['answers']}")
    for t, v in stats["answer_types"].items():
        print(f"{t}: {v['count']} ({v['percent']:.1f}%)")
    for name, v in stats["modalities"].items():
        print(f"{name}: {v['count']} ({v['percent']:.1f}%)")
    return EXIT_DATA if bad else EXIT_OK


def cmd_qagen(rc: RunConfig) -> int:
    if rc.corpus is None:
        raise ConfigError("qagen needs a corpus manifest")
    docs = load_manifest(rc.corpus)
    backends = build_backends(rc, _fixture_dirs(docs, rc.corpus))
    pairs, warnings = [], []
    for doc in docs:
        got, warns = generate_qa_pairs(doc, rc.qagen, backends.text_expert, backends.vision)
        pairs += got
        warnings += warns
    for w in warnings:
        log.warning("%s", w)
    rc.out.mkdir(parents=True, exist_ok=True)
    if pairs:
        manual, _, flagged = quality_check(pairs, rc.qagen, backends.decision, {d.id: d for d in docs})
    else:
        manual, flagged = [], []
    bad_ids = {f.pair.id for f in flagged}
    write_qa_file([p for p in pairs if p.id not in bad_ids], rc.out / "qa.jsonl")
    md_paths = {d.id: str(rc.corpus.parent / f"{d.id}.md") for d in docs}
    write_manual_queue(manual, rc.out / "manual_queue.jsonl", md_paths)
    write_flagged(flagged, rc.out / "flagged.jsonl")
    print(f"generated {len(pairs)} pairs: {len(manual)} for manual review, {len(flagged)} flagged")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--mock", nargs="?", const=True, default=None, metavar="SCRIPT",
                        help="use in-process mock backends, optionally scripted by a JSON file")
    common.add_argument("--concurrency", type=int, help="max in-flight requests / questions")
    common.add_argument("--threshold", type=float, help="expert activation threshold")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--replay", type=Path, metavar="TRANSCRIPT", help="answer backend calls from a transcript")
    common.add_argument("--capture", type=Path, metavar="TRANSCRIPT", help="record backend calls to a transcript")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", type=Path, help="corpus.json manifest")
    data.add_argument("--qa", type=Path, help="QA pairs (JSON Lines)")
    data.add_argument("--lexicon", type=Path, help="CLKM lexicon TSV")

    p = argparse.ArgumentParser(prog="aedqa", description="Multimodal statistical-report QA toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("ingest", parents=[common], help="convert HTML pages into a corpus")
    s.add_argument("input_dir", type=Path)
    s.add_argument("asset_dir", type=Path)
    sub.add_parser("eval", parents=[common, data], help="answer and score every QA pair")
    s = sub.add_parser("chart-eval", parents=[common, data], help="score the chart expert on chart questions")
    s.add_argument("--no-rank", action="store_true", help="answer from the designated chart without ranking")
    s = sub.add_parser("stats", parents=[common], help="answer-type and modality statistics of a QA file")
    s.add_argument("qa_file", type=Path)
    sub.add_parser("qagen", parents=[common, data], help="generate and quality-check QA pairs")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "ingest":
            return cmd_ingest(args.input_dir, args.asset_dir, args.out or Path("corpus"))
        if args.command == "stats":
            return cmd_stats(args.qa_file)
        rc = load_config(args.config, args)
        if args.command == "eval":
            return cmd_eval(rc)
        if args.command == "chart-eval":
            return cmd_chart_eval(rc, args.no_rank)
        if args.command == "qagen":
            return cmd_qagen(rc)
    except ConfigError as exc:
        _err({"error": "ConfigError", "message": str(exc)})
        return EXIT_CONFIG
    except IngestError as exc:
        _err({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_DATA
    except (UnparseableGeneration, ValueError) as exc:
        _err({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_DATA
    except be.BackendError as exc:
        _err({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_BACKEND
    except OSError as exc:
        _err({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
