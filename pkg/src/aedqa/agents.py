"""Allocate, answer per modality, decide.

One question flows through three stages. The allocator scores how likely the
answer is to sit in the text, in each table and in each chart. Every modality
scoring strictly above the activation threshold gets its expert. The decision
stage then picks one expert's answer, or reports the question unanswerable
when nobody was activated.
"""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import Backend, ChatRequest, cosine
from .core import (
    AgentMemory,
    AgentProfile,
    AllocationResult,
    ChartRef,
    Document,
    EngineConfig,
    ExpertAnswer,
    FinalAnswer,
    ModalityRef,
    TableRecord,
)

log = logging.getLogger(__name__)

UNANSWERABLE_TEXT = "unanswerable"


class AgentError(Exception):
    pass


class UnparseableAllocation(AgentError):
    pass


class OutOfRange(AgentError):
    pass


class UnparseableExpertReply(AgentError):
    pass


class NoChartsActivated(AgentError):
    pass


class NoUsableChart(AgentError):
    pass


class UnparseableDecision(AgentError):
    pass


class UnknownModalityChosen(AgentError):
    pass


class StageError(AgentError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")


@dataclass
class Backends:
    """One client per role. Roles may share a client."""

    allocator: Backend
    decision: Backend
    text_expert: Backend
    table_expert: Backend
    vision: Backend
    embedding: Backend
    ocr: Backend

    @classmethod
    def single(cls, backend: Backend) -> "Backends":
        return cls(*(backend,) * 7)


# -- profiles -------------------------------------------------------------------

EXPERT_FORMAT = (
    "Reply in exactly this format:\n"
    "ANSWER: <your answer, as short as possible>\n"
    "CONFIDENCE: <a number between 0 and 1>\n"
    "If the content does not contain the answer, write ANSWER: unknown and a low confidence."
)

ALLOCATOR_PROFILE_ROLE = (
    "You are an adept assistant for multimodal web-based question answering. "
    "A webpage is given as Markdown text in which tables appear as (row, column, value) tuples "
    "under their tags table1, table2, ... and charts appear only as tags img1, img2, .... "
    "Estimate, for the text and for every individual table and chart, the probability that the "
    "answer to the question can be found there."
)

TEXT_PROFILE = AgentProfile(
    "You are a proficient economic analyst. Read the webpage content and answer the question "
    "using only what the page states.",
    EXPERT_FORMAT,
)

TABLE_PROFILE = AgentProfile(
    "You are a skilled data analyst. The table is given as tuples, one per line, in the form "
    "(row label, column label, value). A label made of several header levels joins them with '/', "
    "outermost first. Find the tuple or tuples that answer the question; compute only when the "
    "question asks for it.",
    EXPERT_FORMAT,
)

CHART_PROFILE = AgentProfile(
    "You are an adept statistician. Read the statistical chart in the image and answer the question "
    "from the values it shows.",
    EXPERT_FORMAT,
)

DECISION_PROFILE = AgentProfile(
    "You are a proficient data synthesis analyst. Several experts each answered the same question "
    "from a different part of a webpage (the text, one table, or one chart) and reported a confidence. "
    "Analyze the candidates together and pick the answer from the modality that actually contains it.",
    "Reply in exactly this format:\n"
    "MODALITY: <the tag of the chosen candidate, e.g. text, table1, img2>\n"
    "ANSWER: <that candidate's answer>",
)


def allocator_profile(doc: Document) -> AgentProfile:
    lines = ["P(text)=<probability>"]
    lines += [f"P(table_{i})=<probability>" for i in range(1, len(doc.tables) + 1)]
    lines += [f"P(img_{j})=<probability>" for j in range(1, len(doc.charts) + 1)]
    fmt = (
        "Reply with one line per modality and nothing else, each probability between 0 and 1:\n"
        + "\n".join(lines)
    )
    return AgentProfile(ALLOCATOR_PROFILE_ROLE, fmt)


def render_for_allocation(doc: Document) -> str:
    """The page as the allocator reads it: tables expanded to tuples, charts left as tags."""
    by_tag = {t.tag: t for t in doc.tables}
    out = []
    for line in doc.markdown.splitlines():
        out.append(line)
        rec = by_tag.get(line.strip())
        if rec is not None:
            if rec.caption:
                out.append(f"caption: {rec.caption}")
            out.extend(t.render() for t in rec.tuples)
    return "\n".join(out)


@dataclass
class Agent:
    """Profile + memory around a chat backend. Short memory keeps the latest exchange only."""

    profile: AgentProfile
    memory: AgentMemory
    backend: Backend

    def messages(self, question: str) -> tuple[tuple[str, str], ...]:
        msgs: list[tuple[str, str]] = []
        if self.memory.short is not None:
            prev_q, prev_a = self.memory.short
            msgs += [("user", prev_q), ("assistant", prev_a)]
        msgs.append(("user", f"{self.memory.long}\n\nQuestion: {question}"))
        return tuple(msgs)

    def ask(self, question: str, image: Optional[bytes] = None) -> str:
        req = ChatRequest(self.profile, self.messages(question))
        reply = self.backend.chat(req) if image is None else self.backend.vision_chat(req, image)
        self.memory.remember(question, reply)
        return reply


# -- allocation -------------------------------------------------------------------

_PROB_RE = re.compile(
    r"P\s*\(\s*(text|table[_ ]?(\d+)|(?:img|chart)[_ ]?(\d+))\s*\)\s*[=:：]\s*([-+]?\d+(?:\.\d+)?|[-+]?\.\d+)",
    re.IGNORECASE,
)


def parse_allocation(reply: str, doc: Document) -> AllocationResult:
    p_text = 0.0
    p_table = {i: 0.0 for i in range(1, len(doc.tables) + 1)}
    p_chart = {j: 0.0 for j in range(1, len(doc.charts) + 1)}
    found = False
    for m in _PROB_RE.finditer(reply):
        found = True
        value = float(m.group(4))
        if not 0.0 <= value <= 1.0:
            raise OutOfRange(f"{m.group(0).strip()}: probability outside [0, 1]")
        if m.group(2):
            i = int(m.group(2))
            if i in p_table:
                p_table[i] = value
            else:
                log.warning("allocator scored unknown table_%d; ignored", i)
        elif m.group(3):
            j = int(m.group(3))
            if j in p_chart:
                p_chart[j] = value
            else:
                log.warning("allocator scored unknown img_%d; ignored", j)
        else:
            p_text = value
    if not found:
        raise UnparseableAllocation(f"no P(...)=x line in allocator reply: {reply[:200]!r}")
    return AllocationResult(p_text, p_table, p_chart)


def allocate(doc: Document, question: str, backend: Backend) -> AllocationResult:
    agent = Agent(allocator_profile(doc), AgentMemory(render_for_allocation(doc)), backend)
    return parse_allocation(agent.ask(question), doc)


def activated_experts(alloc: AllocationResult, threshold: float = 0.1) -> list[ModalityRef]:
    """Modalities whose probability is strictly greater than ``threshold``."""
    out = []
    if alloc.p_text > threshold:
        out.append(ModalityRef.text())
    out += [ModalityRef.table(i) for i, p in sorted(alloc.p_table.items()) if p > threshold]
    out += [ModalityRef.chart(j) for j, p in sorted(alloc.p_chart.items()) if p > threshold]
    return out


# -- experts ----------------------------------------------------------------------

_ANSWER_RE = re.compile(r"ANSWER\s*[:：]\s*(.*?)\s*/?\s*(?=CONFIDENCE\s*[:：]|\Z)", re.IGNORECASE | re.DOTALL)
_CONF_RE = re.compile(r"CONFIDENCE\s*[:：]\s*([-+]?\d+(?:\.\d+)?|[-+]?\.\d+)", re.IGNORECASE)


def parse_expert_reply(reply: str) -> tuple[str, float]:
    a = _ANSWER_RE.search(reply)
    c = _CONF_RE.search(reply)
    if a is None or c is None:
        raise UnparseableExpertReply(f"expected ANSWER/CONFIDENCE lines, got {reply[:200]!r}")
    answer = a.group(1).strip()
    confidence = float(c.group(1))
    if not answer:
        raise UnparseableExpertReply("empty ANSWER")
    if not 0.0 <= confidence <= 1.0:
        raise UnparseableExpertReply(f"confidence {confidence} outside [0, 1]")
    return answer, confidence


def text_expert(
    doc_markdown: str, question: str, backend: Backend, memory: Optional[AgentMemory] = None
) -> ExpertAnswer:
    agent = Agent(TEXT_PROFILE, memory or AgentMemory(doc_markdown), backend)
    answer, conf = parse_expert_reply(agent.ask(question))
    return ExpertAnswer(ModalityRef.text(), answer, conf, "text")


def table_expert(table: TableRecord, question: str, backend: Backend) -> ExpertAnswer:
    body = [f"{table.tag}:"]
    if table.caption:
        body.append(f"caption: {table.caption}")
    body.append(table.render_tuples())
    agent = Agent(TABLE_PROFILE, AgentMemory("\n".join(body)), backend)
    answer, conf = parse_expert_reply(agent.ask(question))
    return ExpertAnswer(ModalityRef.table(table.index), answer, conf, table.tag)


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF  # unified ideographs
        or 0x3400 <= cp <= 0x4DBF  # extension A
        or 0x3000 <= cp <= 0x303F  # CJK symbols and punctuation
    )


def has_cjk(text: str) -> bool:
    return any(is_cjk(ch) for ch in text)


@dataclass(frozen=True)
class ChartScore:
    tag: str
    index: int
    aggregate: str
    similarity: float

    def to_dict(self) -> dict:
        return {"tag": self.tag, "aggregate": self.aggregate, "similarity": round(self.similarity, 12)}


def rank_charts(charts: Sequence[ChartRef], question: str, ocr: Backend, embedding: Backend) -> list[ChartScore]:
    """OCR each chart, keep CJK-bearing tokens, and rank by cosine to the question.

    A chart without any CJK token scores -1. Ties go to the lower chart index.
    """
    q_vec = embedding.embed(question)
    scores = []
    for ref in charts:
        tokens = ocr.ocr(ref.local_path.read_bytes())
        aggregate = " ".join(t.text for t in tokens if has_cjk(t.text))
        sim = cosine(embedding.embed(aggregate), q_vec) if aggregate else -1.0
        scores.append(ChartScore(ref.tag, ref.index, aggregate, sim))
    scores.sort(key=lambda s: (-s.similarity, s.index))
    return scores


def ask_chart(chart: ChartRef, question: str, vision: Backend) -> ExpertAnswer:
    agent = Agent(CHART_PROFILE, AgentMemory(f"Chart {chart.tag} is attached."), vision)
    answer, conf = parse_expert_reply(agent.ask(question, image=chart.local_path.read_bytes()))
    return ExpertAnswer(ModalityRef.chart(chart.index), answer, conf, chart.tag)


def chart_expert(
    charts: Sequence[ChartRef],
    question: str,
    top_k: int = 1,
    *,
    backends: Backends,
    ranking_out: Optional[list] = None,
) -> ExpertAnswer:
    """Pick the chart most similar to the question and answer from its image.

    With ``top_k > 1`` the vision model reads each of the best ``top_k`` charts
    and the most confident answer wins (earlier rank on ties).
    """
    if not charts:
        raise NoChartsActivated("chart expert called without charts")
    ranking = rank_charts(charts, question, backends.ocr, backends.embedding)
    if ranking_out is not None:
        ranking_out.extend(ranking)
    usable = [s for s in ranking if s.aggregate]
    if not usable:
        raise NoUsableChart("no chart produced any CJK OCR text")
    by_index = {c.index: c for c in charts}
    best: Optional[ExpertAnswer] = None
    for s in usable[:top_k]:
        ans = ask_chart(by_index[s.index], question, backends.vision)
        if best is None or ans.confidence > best.confidence:
            best = ans
    best_score = next(s for s in ranking if s.index == best.modality.index)
    return ExpertAnswer(
        best.modality, best.answer, best.confidence, best.source_tag,
        rationale=f"ranked first among {len(charts)} chart(s), similarity {best_score.similarity:.4f}",
    )


# -- decision ---------------------------------------------------------------------

_MODALITY_RE = re.compile(r"MODALITY\s*[:：]\s*([A-Za-z]+\s*_?\s*\d*)", re.IGNORECASE)


def decision_prompt(question: str, answers: Sequence[ExpertAnswer]) -> str:
    lines = ["Candidates:"]
    for a in answers:
        lines.append(f"- [{a.modality.tag}] answer: {a.answer} (confidence {a.confidence:g})")
    lines.append("")
    lines.append(f"Question: {question}")
    return "\n".join(lines)


def _normalize_tag(raw: str) -> str:
    t = re.sub(r"[\s_]", "", raw.strip().lower())
    return re.sub(r"^chart(?=\d)", "img", t)


def decide(
    question: str, expert_answers: Sequence[ExpertAnswer], backend: Optional[Backend] = None
) -> tuple[FinalAnswer, str]:
    """Return the final answer and the decision prompt sent ("" when no call was made)."""
    if not expert_answers:
        return FinalAnswer(UNANSWERABLE_TEXT, ModalityRef.unanswerable()), ""
    if len(expert_answers) == 1:
        only = expert_answers[0]
        return FinalAnswer(only.answer, only.modality), ""
    if backend is None:
        raise ValueError("a decision backend is needed for more than one candidate")
    prompt = decision_prompt(question, expert_answers)
    req = ChatRequest(DECISION_PROFILE, (("user", prompt),))
    reply = backend.chat(req)
    m = _MODALITY_RE.search(reply)
    if m is None:
        raise UnparseableDecision(f"no MODALITY line in {reply[:200]!r}")
    tag = _normalize_tag(m.group(1))
    chosen = next((a for a in expert_answers if a.modality.tag == tag), None)
    if chosen is None:
        raise UnknownModalityChosen(f"decision chose {tag!r}, not one of {[a.modality.tag for a in expert_answers]}")
    # the decision picks a candidate; its restated ANSWER line is not trusted over the expert's own
    return FinalAnswer(chosen.answer, chosen.modality), prompt


# -- pipeline ---------------------------------------------------------------------


@dataclass
class Trace:
    allocation: Optional[AllocationResult] = None
    activated: list[ModalityRef] = field(default_factory=list)
    expert_answers: list[ExpertAnswer] = field(default_factory=list)
    decision_prompt: str = ""
    passthrough: bool = False
    chart_ranking: list[ChartScore] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "allocation": self.allocation.to_dict() if self.allocation else None,
            "activated": [m.tag for m in self.activated],
            "expert_answers": [a.to_dict() for a in self.expert_answers],
            "decision_prompt": self.decision_prompt,
            "passthrough": self.passthrough,
            "chart_ranking": [s.to_dict() for s in self.chart_ranking],
        }
        if include_timings:
            d["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        return d


class _Timer:
    def __init__(self, trace: Trace, stage: str):
        self.trace, self.stage = trace, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, exc_type, exc, tb):
        self.trace.timings[self.stage] = self.trace.timings.get(self.stage, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.stage, exc) from exc
        return False


def answer_question(
    doc: Document, question: str, config: EngineConfig, backends: Backends
) -> tuple[FinalAnswer, Trace]:
    trace = Trace()
    with _Timer(trace, "allocate"):
        trace.allocation = allocate(doc, question, backends.allocator)
    trace.activated = activated_experts(trace.allocation, config.activation_threshold)

    answers: list[ExpertAnswer] = []
    if ModalityRef.text() in trace.activated:
        with _Timer(trace, "text_expert"):
            answers.append(text_expert(doc.markdown, question, backends.text_expert))
    for mod in trace.activated:
        if mod.kind == "table":
            with _Timer(trace, "table_expert"):
                answers.append(table_expert(doc.table(mod.index), question, backends.table_expert))
    chart_mods = [m for m in trace.activated if m.kind == "chart"]
    if chart_mods:
        charts = list(doc.charts) if config.ocr_all_charts else [doc.chart(m.index) for m in chart_mods]
        with _Timer(trace, "chart_expert"):
            answers.append(
                chart_expert(charts, question, config.chart_top_k, backends=backends, ranking_out=trace.chart_ranking)
            )
    trace.expert_answers = answers

    with _Timer(trace, "decide"):
        final, prompt = decide(question, answers, backends.decision)
    trace.decision_prompt = prompt
    trace.passthrough = len(answers) == 1
    return FinalAnswer(final.answer, final.selected_modality, trace), trace

