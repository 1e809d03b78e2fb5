"""One test per acceptance criterion; each records a PASS/FAIL line for the summary."""
import json
import random
import time
from collections import Counter

from aedqa.agents import Backends, answer_question, chart_expert
from aedqa.backends import MockBackend
from aedqa.cli import main
from aedqa.core import CellTuple, ChartRef, Document, EngineConfig, ModalityRef, QAPair, TableRecord, validate_document
from aedqa.ingest import build_manifest, ingest_file
from aedqa.metrics import Lexicon, classify_answer_type, clkm_match, evaluate_corpus, extract_keywords, km_match
from aedqa.qagen import QaGenConfig, quality_check
from conftest import PAGES, token, write_chart
from corpus_builder import build_corpus, echo_rules, garbage_rules
from oracles import best_chart, data_cell_values, has_digit, is_cjk_char, naive_km, placeholder_order

RETAIL_GOLD = "全年社会消费品零售总额38,336.9亿元，同比增长8.6%"


def test_1_retail_sales_fixture(acceptance):
    generated = "根据资料，全年社会消费品零售总额为38336.9亿元，同比增长8.6"
    km_match(RETAIL_GOLD, generated)  # warm caches so the timing is of the match alone
    t0 = time.perf_counter()
    hit = km_match(RETAIL_GOLD, generated).hit
    elapsed = time.perf_counter() - t0
    miss = km_match(RETAIL_GOLD, generated.replace("8.6", "")).hit
    ok = hit and not miss and elapsed < 1e-3
    acceptance("1 retail-sales KM fixture", ok, f"hit={hit} without-8.6={miss} {elapsed * 1e6:.0f}us")


# -- randomized metric pairs ---------------------------------------------------------

CJK_WORDS = ["增长", "下降", "同比", "产量", "亿元", "工业", "零售", "总额", "持平", "煤炭"]
LATIN_WORDS = ["growth", "Decline", "GDP", "output", "yuan", "rise", "Total", "coal"]


def _number(rng):
    n = rng.choice([str(rng.randint(0, 99)), f"{rng.randint(0, 99)}.{rng.randint(0, 9)}",
                    f"{rng.randint(1, 99)},{rng.randint(100, 999)}.{rng.randint(0, 9)}"])
    if rng.random() < 0.2:
        n = "".join(chr(ord(c) + 0xFEE0) if c.isdigit() else c for c in n)
    return n + rng.choice(["", "", "%", "亿元", "个百分点"])


def _piece(rng):
    r = rng.random()
    if r < 0.35:
        return _number(rng)
    if r < 0.7:
        return rng.choice(CJK_WORDS)
    if r < 0.9:
        w = rng.choice(LATIN_WORDS)
        return " " + (w.upper() if rng.random() < 0.3 else w) + " "
    return rng.choice(["，", "。", ".", ",", " ", "："])


def _mutate(rng, text):
    chars = list(text)
    for _ in range(rng.randint(0, 3)):
        op = rng.random()
        i = rng.randint(0, len(chars))
        if op < 0.4 and chars:
            del chars[min(i, len(chars) - 1)]
        elif op < 0.8:
            chars.insert(i, rng.choice("0123456789.,增长"))
        else:
            chars.insert(i, _piece(rng))
    return "".join(chars)


def random_pairs(n=400, seed=20240501):
    rng = random.Random(seed)
    pairs = []
    for _ in range(n):
        gold = "".join(_piece(rng) for _ in range(rng.randint(1, 4)))
        if rng.random() < 0.5:
            cand = _mutate(rng, gold)
        else:
            cand = "".join(_piece(rng) for _ in range(rng.randint(0, 6)))
        pairs.append((gold, cand))
    return pairs


def lexicon_50():
    lex = Lexicon()
    rng = random.Random(3)
    entries = [(c, l.lower()) for c in CJK_WORDS for l in LATIN_WORDS]
    chosen = rng.sample(entries, 50)
    for term, eq in chosen:
        lex.add(term, eq)
    return lex, len(set(chosen))


def test_2_metric_oracle_equivalence(acceptance):
    pairs = random_pairs()
    disagree = [(g, c) for g, c in pairs
                if km_match(g, c).hit != naive_km([(k.kind, k.normalized) for k in extract_keywords(g)], c)]
    hits = sum(km_match(g, c).hit for g, c in pairs)
    acceptance("2 KM oracle equivalence", not disagree and len(pairs) >= 200,
               f"{len(pairs)} pairs, {hits} hits, {len(disagree)} disagreements {disagree[:2]}")


def test_3_relaxation(acceptance):
    pairs = random_pairs()
    lex, n_entries = lexicon_50()
    violations = [(g, c) for g, c in pairs if km_match(g, c).hit and not clkm_match(g, c, lex).hit]
    extra = sum(clkm_match(g, c, lex).hit and not km_match(g, c).hit for g, c in pairs)
    rng = random.Random(11)
    kinds = [ModalityRef.text(), ModalityRef.table(1), ModalityRef.chart(1)]
    qa, preds = [], {}
    for i, (g, c) in enumerate(pairs):
        qa.append(QAPair(f"q{i}", "d", "?", g, tuple(rng.sample(kinds, rng.randint(1, 2)))))
        preds[f"q{i}"] = c
    report = evaluate_corpus(preds, qa, lex)
    subsets_ok = all(s.clkm_hits >= s.km_hits for s in report.subsets.values())
    ok = n_entries == 50 and not violations and subsets_ok
    acceptance("3 relaxation km=>clkm", ok,
               f"{len(violations)} violations, {extra} clkm-only hits, subsets {report.to_dict()['subsets']}")


def test_4_ingest_conservation(acceptance, asset_dir, tmp_path):
    pages = sorted(PAGES.glob("*.html"))
    problems = []
    docs = []
    for page in pages:
        html = page.read_text(encoding="utf-8")
        doc, _ = ingest_file(page, asset_dir)
        docs.append(doc)
        for t in doc.tables:
            if Counter(data_cell_values(t.html_source)) != Counter(x.value for x in t.tuples):
                problems.append(f"{doc.id}/{t.tag}: cell multiset differs")
        if validate_document(doc):
            problems.append(f"{doc.id}: {validate_document(doc)}")
        tags = [ln for ln in doc.markdown.splitlines() if ln.startswith(("table", "img")) and ln[-1].isdigit()]
        if tags != placeholder_order(html):
            problems.append(f"{doc.id}: placeholders {tags} != {placeholder_order(html)}")
    a = build_manifest(docs, tmp_path / "a").parent
    b = build_manifest([ingest_file(p, asset_dir)[0] for p in pages], tmp_path / "b").parent
    for f in sorted(a.iterdir()):
        if f.read_bytes() != (b / f.name).read_bytes():
            problems.append(f"{f.name} differs between runs")
    covered = {
        "spans": any("colspan" in p.read_text(encoding="utf-8") for p in pages),
        "no tables": any(not d.tables for d in docs),
        "no charts": any(not d.charts for d in docs),
    }
    ok = len(pages) >= 10 and not problems and all(covered.values())
    acceptance("4 ingest conservation", ok,
               f"{len(pages)} pages, {sum(len(d.tables) for d in docs)} tables, {problems[:3]} {covered}")


def test_5_threshold_strictness(acceptance):
    doc = Document("d", "正文\n\ntable1\n", tables=(TableRecord("table1", "", (CellTuple("煤炭", "2024", "12"),)),))
    text = MockBackend(lambda c: "ANSWER: 1\nCONFIDENCE: 0.5")
    table = MockBackend(lambda c: "ANSWER: 12\nCONFIDENCE: 0.5")
    decision = MockBackend()
    alloc = MockBackend(lambda c: "P(text)=0.10\nP(table_1)=0.11")
    final, trace = answer_question(
        doc, "2024年煤炭?", EngineConfig(), Backends(alloc, decision, text, table, MockBackend(), MockBackend(), MockBackend())
    )
    calls = {"text": text.count(), "table": table.count(), "decision": decision.count()}
    ok = calls == {"text": 0, "table": 1, "decision": 0} and final.selected_modality == ModalityRef.table(1)
    acceptance("5 threshold strictness", ok, f"expert calls {calls}, activated {[m.tag for m in trace.activated]}")


POOL = ["工业增加值", "原煤产量", "社会消费品零售总额", "出口", "同比增长", "发电量", "粗钢", "CPI", "12.5%", "亿元",
        "1-11月", "进出口", "服务业", "GDP"]


def test_6_chart_ranking_oracle(acceptance, tmp_path):
    rng = random.Random(99)
    mismatches, ties = [], 0
    n_sets = 40
    for s in range(n_sets):
        n = rng.randint(3, 5)
        token_sets = [[rng.choice(POOL) for _ in range(rng.randint(1, 3))] for _ in range(n)]
        if s % 4 == 0:
            i, j = rng.sample(range(n), 2)
            token_sets[j] = list(token_sets[i])
        if not any(any(is_cjk_char(ch) for t in ts for ch in t) for ts in token_sets):
            token_sets[0].append("工业")
        refs = []
        for j, ts in enumerate(token_sets, start=1):
            path = write_chart(tmp_path / f"s{s}" / f"c{j}.png", s * 10 + j, [token(t, 12 * k) for k, t in enumerate(ts)])
            refs.append(ChartRef(f"img{j}", path))
        aggregates = [" ".join(t for t in ts if any(is_cjk_char(ch) for ch in t)) for ts in token_sets]
        question = " ".join(rng.sample(POOL, 2)) + "是多少?"
        expected = best_chart(aggregates, question)
        ties += len(set(aggregates)) < len(aggregates)
        mock = MockBackend(vision_script=lambda c: "ANSWER: x\nCONFIDENCE: 0.5", fixture_dirs=[tmp_path / f"s{s}"])
        got = chart_expert(refs, question, backends=Backends.single(mock)).modality.index
        if got != expected:
            mismatches.append((s, got, expected))
    acceptance("6 chart ranking oracle", not mismatches and n_sets >= 20,
               f"{n_sets} sets ({ties} with duplicate aggregates), mismatches {mismatches[:3]}")


def test_7_end_to_end(acceptance, tmp_path):
    t0 = time.perf_counter()
    corpus = build_corpus(tmp_path)
    combos = {tuple(q["modalities"]) for q in corpus.questions}
    good, bad = corpus.script("good", echo_rules(corpus.questions)), corpus.script("bad", garbage_rules(corpus.questions))

    def run(out, script):
        code = main(["eval", "--corpus", str(corpus.manifest), "--qa", str(corpus.qa), "--out", str(tmp_path / out),
                     "--mock", str(script)])
        return code, json.loads((tmp_path / out / "report.json").read_text(encoding="utf-8"))

    c1, r1 = run("good1", good)
    c2, r2 = run("good2", good)
    c3, r3 = run("bad", bad)
    elapsed = time.perf_counter() - t0
    scores = lambda r: {k: (v["km"], v["clkm"]) for k, v in r["subsets"].items()}  # noqa: E731
    identical = all(
        (tmp_path / "good1" / f).read_bytes() == (tmp_path / "good2" / f).read_bytes()
        for f in ("report.json", "report.md", "predictions.jsonl")
    )
    ok = (
        (c1, c2, c3) == (0, 0, 0)
        and len(corpus.questions) == 12 and len(combos) == 6
        and set(scores(r1).values()) == {(100.0, 100.0)}
        and set(scores(r3).values()) == {(0.0, 0.0)}
        and identical and elapsed < 10
    )
    acceptance("7 end-to-end determinism", ok,
               f"echo {scores(r1)['All']} garbage {scores(r3)['All']} identical={identical} {elapsed:.2f}s")


def fixture_answers(n=100, seed=5):
    fixed = ["5,238.5 billion yuan", "Decline", "", "持平", "８．６％", "一百", "上涨3成", "Ⅻ", "二〇二三年", "x"]
    rng = random.Random(seed)
    alphabet = "abcXYZ增长下降亿元 ,.%" + "0123456789" + "０１２３"
    out = list(fixed)
    while len(out) < n:
        pool = alphabet if rng.random() < 0.5 else alphabet[:20]
        out.append("".join(rng.choice(pool) for _ in range(rng.randint(1, 12))))
    return out


def test_8_answer_type_classifier(acceptance):
    answers = fixture_answers()
    wrong = [a for a in answers if (classify_answer_type(a) == "Numerical") != has_digit(a)]
    examples = (classify_answer_type("5,238.5 billion yuan"), classify_answer_type("Decline"))
    numerical = sum(has_digit(a) for a in answers)
    ok = len(answers) == 100 and not wrong and examples == ("Numerical", "NonNumerical")
    acceptance("8 answer-type classifier", ok, f"{numerical}/100 numerical, disagreements {wrong[:3]}, examples {examples}")


def test_9_quality_check_partition(acceptance):
    pairs = [QAPair(f"d-q{i:03d}", "d", f"问题{i}?", f"{i}亿元", (ModalityRef.text(),)) for i in range(100)]
    cfg = QaGenConfig(manual_ratio=0.25, seed=42)
    judge = MockBackend(lambda c: "VALID")
    manual, verified, flagged = quality_check(pairs, cfg, judge)
    again = quality_check(pairs, cfg, MockBackend(lambda c: "VALID"))
    ids_m, ids_v = {p.id for p in manual}, {p.id for p in verified}
    ok = (
        len(manual) == 25
        and not ids_m & ids_v
        and Counter(p.id for p in manual + verified) == Counter(p.id for p in pairs)
        and (manual, verified) == again[:2]
        and judge.count() == 75 and flagged == []
    )
    acceptance("9 quality-check partition", ok, f"manual={len(manual)} verified={len(verified)} judged={judge.count()}")
