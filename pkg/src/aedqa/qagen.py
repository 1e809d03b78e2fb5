"""QA-pair generation from documents and the sampled quality check."""
from __future__ import annotations

import json
import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .agents import render_for_allocation
from .backends import Backend, BackendError, ChatRequest
from .core import AgentProfile, Document, ModalityRef, QAPair

log = logging.getLogger(__name__)


class UnparseableGeneration(Exception):
    pass


@dataclass(frozen=True)
class QaGenConfig:
    pairs_per_text: int = 3
    pairs_per_table: int = 2
    pairs_per_chart: int = 2
    seed: int = 42
    manual_ratio: float = 0.25
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if min(self.pairs_per_text, self.pairs_per_table, self.pairs_per_chart) < 0:
            raise ValueError("pair counts must be >= 0")
        if not 0.0 <= self.manual_ratio <= 1.0:
            raise ValueError("manual_ratio must be in [0, 1]")


GEN_FORMAT = (
    "Write each pair as two lines, separated from the next pair by a blank line:\n"
    "Q: <question>\n"
    "A: <answer>\n"
    "Prefer questions whose answers are numbers or named entities. "
    "Do not write yes/no questions. Answers must be stated in the content."
)

TEXT_GEN_PROFILE = AgentProfile(
    "You write question-answer pairs about a Chinese statistical report, in Chinese.", GEN_FORMAT
)
TABLE_GEN_PROFILE = AgentProfile(
    "You write question-answer pairs about one table of a Chinese statistical report, in Chinese. "
    "The table is given as (row label, column label, value) tuples.",
    GEN_FORMAT,
)
CHART_GEN_PROFILE = AgentProfile(
    "You write question-answer pairs about the attached statistical chart, in Chinese.", GEN_FORMAT
)
JUDGE_PROFILE = AgentProfile(
    "You check question-answer pairs written about a webpage. A pair is valid when the question is "
    "clear and the answer is correct according to the content.",
    "Reply with VALID, or with INVALID: <reason>.",
)

_PAIR_RE = re.compile(r"^\s*Q\s*[:：]\s*(.+?)\s*\n\s*A\s*[:：]\s*(.+?)\s*$", re.MULTILINE)
_YESNO_Q_RE = re.compile(
    r"^(is|are|was|were|do|does|did|can|could|has|have|had|will|would|should)\b|是否|是不是|吗[？?]?$",
    re.IGNORECASE,
)
_YESNO_A = {"yes", "no", "是", "否", "不是", "对", "不对", "是的", "没有", "有", "true", "false"}


def parse_pairs(reply: str) -> list[tuple[str, str]]:
    pairs = [(m.group(1), m.group(2)) for m in _PAIR_RE.finditer(reply)]
    if not pairs and reply.strip():
        raise UnparseableGeneration(f"no 'Q: ... / A: ...' block in {reply[:200]!r}")
    return pairs


def is_yes_no(question: str, answer: str) -> bool:
    a = re.sub(r"[\s.。!！,，]+", "", answer).casefold()
    return a in _YESNO_A or bool(_YESNO_Q_RE.search(question.strip()))


def _ask(profile: AgentProfile, content: str, n: int, backend: Backend, image: Optional[bytes] = None) -> str:
    req = ChatRequest(profile, (("user", f"{content}\n\nWrite {n} question-answer pairs."),))
    return backend.chat(req) if image is None else backend.vision_chat(req, image)


def generate_qa_pairs(
    doc: Document, cfg: QaGenConfig, chat: Backend, vision: Backend
) -> tuple[list[QAPair], list[str]]:
    """Ask the models for pairs per modality. Returns the kept pairs and warnings.

    Yes/no pairs are dropped, and so are repeats of an answer already given
    for the same document.
    """
    raw: list[tuple[str, str, ModalityRef]] = []
    warnings: list[str] = []
    if cfg.pairs_per_text:
        reply = _ask(TEXT_GEN_PROFILE, doc.markdown, cfg.pairs_per_text, chat)
        raw += [(q, a, ModalityRef.text()) for q, a in parse_pairs(reply)]
    if cfg.pairs_per_table:
        for t in doc.tables:
            reply = _ask(TABLE_GEN_PROFILE, f"{t.tag}:\n{t.render_tuples()}", cfg.pairs_per_table, chat)
            raw += [(q, a, ModalityRef.table(t.index)) for q, a in parse_pairs(reply)]
    if cfg.pairs_per_chart:
        if not doc.charts:
            warnings.append(f"{doc.id}: NoCharts: pairs_per_chart={cfg.pairs_per_chart} but document has no charts")
        for c in doc.charts:
            reply = _ask(CHART_GEN_PROFILE, f"Chart {c.tag}.", cfg.pairs_per_chart, vision, c.local_path.read_bytes())
            raw += [(q, a, ModalityRef.chart(c.index)) for q, a in parse_pairs(reply)]

    pairs: list[QAPair] = []
    seen_answers: set[str] = set()
    for q, a, mod in raw:
        if is_yes_no(q, a):
            warnings.append(f"{doc.id}: YesNoFiltered: {q!r}")
            continue
        key = a.strip().casefold()
        if key in seen_answers:
            warnings.append(f"{doc.id}: DuplicateAnswer: {a!r} for {q!r}")
            continue
        seen_answers.add(key)
        pairs.append(QAPair(f"{doc.id}-q{len(pairs) + 1:03d}", doc.id, q, a, (mod,)))
    return pairs, warnings


@dataclass(frozen=True)
class FlaggedPair:
    pair: QAPair
    reason: str


def _judge(pair: QAPair, context: str, judge: Backend) -> Optional[str]:
    """Return the rejection reason, or None when the judge accepts the pair."""
    content = f"{context}\n\nQ: {pair.question}\nA: {pair.gold_answer}"
    try:
        reply = judge.chat(ChatRequest(JUDGE_PROFILE, (("user", content),))).strip()
    except BackendError as exc:
        return f"error: {type(exc).__name__}: {exc}"
    if re.match(r"^\s*INVALID\b", reply, re.IGNORECASE):
        return reply.split(":", 1)[1].strip() if ":" in reply else "invalid"
    if re.match(r"^\s*VALID\b", reply, re.IGNORECASE):
        return None
    return f"unparseable verdict: {reply[:100]!r}"


def split_for_review(pairs: Sequence[QAPair], cfg: QaGenConfig) -> tuple[list[QAPair], list[QAPair]]:
    order = list(pairs)
    random.Random(cfg.seed).shuffle(order)
    n_manual = math.ceil(cfg.manual_ratio * len(order))
    return order[:n_manual], order[n_manual:]


def quality_check(
    pairs: Sequence[QAPair],
    cfg: QaGenConfig,
    judge: Backend,
    docs: Optional[Mapping[str, Document]] = None,
) -> tuple[list[QAPair], list[QAPair], list[FlaggedPair]]:
    """Split pairs into a manual-review share and a model-verified rest.

    The model-verified pairs all go through the judge; the ones it rejects
    (or that fail to get a verdict) are also returned as flagged.
    """
    if not pairs:
        raise ValueError("quality_check needs at least one pair")
    manual, verified = split_for_review(pairs, cfg)
    docs = docs or {}

    def context(p: QAPair) -> str:
        d = docs.get(p.doc_id)
        return render_for_allocation(d) if d is not None else ""

    with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
        reasons = list(pool.map(lambda p: _judge(p, context(p), judge), verified))
    flagged = [FlaggedPair(p, r) for p, r in zip(verified, reasons) if r is not None]
    return manual, verified, flagged


def write_manual_queue(manual: Sequence[QAPair], path: Path, doc_paths: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in manual:
            rec = json.loads(p.to_json())
            rec["document_path"] = doc_paths.get(p.doc_id, "")
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_flagged(flagged: Sequence[FlaggedPair], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in flagged:
            rec = json.loads(f.pair.to_json())
            rec["reason"] = f.reason
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
