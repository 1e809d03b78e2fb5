"""Shared domain types and (de)serialization.

Every value type here is a frozen dataclass. Text fields are NFC-normalized at
construction so keyword matching on CJK content is stable.
"""
from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

TEXT = "text"
TABLE = "table"
CHART = "chart"
UNANSWERABLE = "unanswerable"

_TABLE_TAG_RE = re.compile(r"^table(\d+)$")
_IMG_TAG_RE = re.compile(r"^img(\d+)$")


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _set(obj: object, name: str, value: Any) -> None:
    object.__setattr__(obj, name, value)


def table_tag(index: int) -> str:
    return f"table{index}"


def chart_tag(index: int) -> str:
    return f"img{index}"


def tag_index(tag: str) -> int:
    """Return the 1-based index of a ``table{i}`` / ``img{j}`` tag."""
    m = _TABLE_TAG_RE.match(tag) or _IMG_TAG_RE.match(tag)
    if not m:
        raise ValueError(f"not a placeholder tag: {tag!r}")
    return int(m.group(1))


@dataclass(frozen=True, order=True)
class ModalityRef:
    """Where an answer lives: text, a specific table, a specific chart, or nowhere."""

    kind: str
    index: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind in (TEXT, UNANSWERABLE):
            if self.index is not None:
                raise ValueError(f"{self.kind} modality takes no index")
        elif self.kind in (TABLE, CHART):
            if self.index is None or self.index < 1:
                raise ValueError(f"{self.kind} modality needs an index >= 1")
        else:
            raise ValueError(f"unknown modality kind {self.kind!r}")

    @classmethod
    def text(cls) -> "ModalityRef":
        return cls(TEXT)

    @classmethod
    def table(cls, index: int) -> "ModalityRef":
        return cls(TABLE, index)

    @classmethod
    def chart(cls, index: int) -> "ModalityRef":
        return cls(CHART, index)

    @classmethod
    def unanswerable(cls) -> "ModalityRef":
        return cls(UNANSWERABLE)

    @property
    def tag(self) -> str:
        if self.kind == TABLE:
            return table_tag(self.index)
        if self.kind == CHART:
            return chart_tag(self.index)
        return self.kind

    @classmethod
    def parse(cls, tag: str) -> "ModalityRef":
        t = tag.strip().lower()
        if t in (TEXT, UNANSWERABLE):
            return cls(t)
        m = _TABLE_TAG_RE.match(t)
        if m:
            return cls.table(int(m.group(1)))
        m = _IMG_TAG_RE.match(t)
        if m:
            return cls.chart(int(m.group(1)))
        raise ValueError(f"unrecognized modality tag {tag!r}")

    def __str__(self) -> str:
        return self.tag


def _sort_key(m: ModalityRef) -> tuple:
    order = {TEXT: 0, TABLE: 1, CHART: 2, UNANSWERABLE: 3}
    return (order[m.kind], m.index or 0)


def sorted_modalities(mods: Iterable[ModalityRef]) -> tuple[ModalityRef, ...]:
    return tuple(sorted(set(mods), key=_sort_key))


@dataclass(frozen=True)
class CellTuple:
    row_label: str
    col_label: str
    value: str

    def __post_init__(self) -> None:
        _set(self, "row_label", nfc(self.row_label))
        _set(self, "col_label", nfc(self.col_label))
        _set(self, "value", nfc(self.value))

    def render(self) -> str:
        return f"({self.row_label}, {self.col_label}, {self.value})"

    def to_dict(self) -> dict:
        return {"row_label": self.row_label, "col_label": self.col_label, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CellTuple":
        return cls(d["row_label"], d["col_label"], d["value"])


@dataclass(frozen=True)
class TableRecord:
    tag: str
    html_source: str
    tuples: tuple[CellTuple, ...] = ()
    caption: Optional[str] = None

    def __post_init__(self) -> None:
        _set(self, "tag", nfc(self.tag))
        _set(self, "html_source", nfc(self.html_source))
        _set(self, "tuples", tuple(self.tuples))
        if self.caption is not None:
            _set(self, "caption", nfc(self.caption))

    @property
    def index(self) -> int:
        return tag_index(self.tag)

    def render_tuples(self) -> str:
        return "\n".join(t.render() for t in self.tuples)


@dataclass(frozen=True)
class ChartRef:
    tag: str
    local_path: Path
    remote_url: Optional[str] = None

    def __post_init__(self) -> None:
        _set(self, "tag", nfc(self.tag))
        _set(self, "local_path", Path(self.local_path))

    @property
    def index(self) -> int:
        return tag_index(self.tag)


@dataclass(frozen=True)
class Document:
    id: str
    markdown: str
    tables: tuple[TableRecord, ...] = ()
    charts: tuple[ChartRef, ...] = ()
    source_url: str = ""

    def __post_init__(self) -> None:
        _set(self, "id", nfc(self.id))
        _set(self, "markdown", nfc(self.markdown))
        _set(self, "source_url", nfc(self.source_url))
        _set(self, "tables", tuple(self.tables))
        _set(self, "charts", tuple(self.charts))

    def table(self, index: int) -> TableRecord:
        return self.tables[index - 1]

    def chart(self, index: int) -> ChartRef:
        return self.charts[index - 1]

    def has(self, mod: ModalityRef) -> bool:
        if mod.kind == TEXT:
            return True
        if mod.kind == TABLE:
            return 1 <= mod.index <= len(self.tables)
        if mod.kind == CHART:
            return 1 <= mod.index <= len(self.charts)
        return False


@dataclass(frozen=True)
class QAPair:
    id: str
    doc_id: str
    question: str
    gold_answer: str
    modalities: tuple[ModalityRef, ...]

    def __post_init__(self) -> None:
        for name in ("id", "doc_id", "question", "gold_answer"):
            _set(self, name, nfc(getattr(self, name)))
        mods = sorted_modalities(self.modalities)
        if not mods:
            raise ValueError(f"QA pair {self.id} has no modalities")
        if any(m.kind == UNANSWERABLE for m in mods):
            raise ValueError(f"QA pair {self.id}: 'unanswerable' is not a source modality")
        _set(self, "modalities", mods)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "doc_id": self.doc_id,
                "question": self.question,
                "answer": self.gold_answer,
                "modalities": [m.tag for m in self.modalities],
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "QAPair":
        d = json.loads(line)
        return cls(
            id=str(d["id"]),
            doc_id=str(d["doc_id"]),
            question=d["question"],
            gold_answer=d["answer"],
            modalities=tuple(ModalityRef.parse(t) for t in d["modalities"]),
        )


def check_qa_against(qa: QAPair, doc: Document) -> list[str]:
    return [f"{qa.id}: {m.tag} not in document {doc.id}" for m in qa.modalities if not doc.has(m)]


def read_qa_file(path: Path) -> list[QAPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(QAPair.from_json(line))
    return pairs


def write_qa_file(pairs: Iterable[QAPair], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qa in pairs:
            fh.write(qa.to_json() + "\n")


@dataclass(frozen=True)
class AllocationResult:
    p_text: float
    p_table: Mapping[int, float] = field(default_factory=dict)
    p_chart: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _set(self, "p_table", dict(sorted(self.p_table.items())))
        _set(self, "p_chart", dict(sorted(self.p_chart.items())))
        for p in (self.p_text, *self.p_table.values(), *self.p_chart.values()):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "p_text": self.p_text,
            "p_table": {str(k): v for k, v in self.p_table.items()},
            "p_chart": {str(k): v for k, v in self.p_chart.items()},
        }


@dataclass(frozen=True)
class ExpertAnswer:
    modality: ModalityRef
    answer: str
    confidence: float
    source_tag: str
    rationale: Optional[str] = None

    def __post_init__(self) -> None:
        _set(self, "answer", nfc(self.answer))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "modality": self.modality.tag,
            "answer": self.answer,
            "confidence": self.confidence,
            "source_tag": self.source_tag,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class FinalAnswer:
    answer: str
    selected_modality: ModalityRef
    trace: Any = None

    def __post_init__(self) -> None:
        _set(self, "answer", nfc(self.answer))


@dataclass(frozen=True)
class AgentProfile:
    role_description: str
    output_format_instructions: str

    def __post_init__(self) -> None:
        if not self.role_description.strip() or not self.output_format_instructions.strip():
            raise ValueError("agent profile needs both a role description and format instructions")

    def system_prompt(self) -> str:
        return f"{self.role_description}\n\n{self.output_format_instructions}"


@dataclass
class AgentMemory:
    """Long memory is the content the agent reads; short memory keeps one exchange."""

    long: str
    short: Optional[tuple[str, str]] = None

    def remember(self, question: str, answer: str) -> None:
        self.short = (question, answer)


ROLES = ("allocator", "decision", "text_expert", "table_expert", "vision", "embedding", "ocr")


@dataclass(frozen=True)
class RoleEndpoint:
    url: str = ""
    model: str = ""


DEFAULT_MODELS = {
    "allocator": "gpt-4-0125-preview",
    "decision": "gpt-4-0125-preview",
    "text_expert": "gpt-3.5-turbo-0125",
    "table_expert": "gpt-3.5-turbo-0125",
    "vision": "gpt-4-vision-preview",
    "embedding": "text-embedding-3-large",
    "ocr": "",
}


def default_roles() -> dict[str, RoleEndpoint]:
    return {role: RoleEndpoint(model=DEFAULT_MODELS[role]) for role in ROLES}


@dataclass(frozen=True)
class EngineConfig:
    activation_threshold: float = 0.1
    max_concurrency: int = 4
    chart_top_k: int = 1
    ocr_all_charts: bool = False
    roles: Mapping[str, RoleEndpoint] = field(default_factory=default_roles)

    def __post_init__(self) -> None:
        if not 0.0 <= self.activation_threshold < 1.0:
            raise ValueError("activation_threshold must satisfy 0 <= t < 1")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.chart_top_k < 1:
            raise ValueError("chart_top_k must be >= 1")
        unknown = set(self.roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown backend roles: {sorted(unknown)}")


def _placeholder_counts(markdown: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for line in markdown.splitlines():
        s = line.strip()
        if _TABLE_TAG_RE.match(s) or _IMG_TAG_RE.match(s):
            counts[s] = counts.get(s, 0) + 1
    return counts


def validate_document(doc: Document) -> list[str]:
    """List every broken placeholder/record invariant of ``doc``; empty when valid."""
    problems = []
    counts = _placeholder_counts(doc.markdown)
    expected = [table_tag(i) for i in range(1, len(doc.tables) + 1)]
    expected += [chart_tag(j) for j in range(1, len(doc.charts) + 1)]
    for tag in expected:
        n = counts.get(tag, 0)
        if n == 0:
            problems.append(f"missing placeholder {tag}")
        elif n > 1:
            problems.append(f"duplicate placeholder {tag}")
    for tag in sorted(set(counts) - set(expected), key=lambda t: (t[0], tag_index(t))):
        problems.append(f"unexpected placeholder {tag}")

    for i, rec in enumerate(doc.tables, start=1):
        if rec.tag != table_tag(i):
            problems.append(f"table record {i} has tag {rec.tag}, expected {table_tag(i)}")
    for j, ref in enumerate(doc.charts, start=1):
        if ref.tag != chart_tag(j):
            problems.append(f"chart record {j} has tag {ref.tag}, expected {chart_tag(j)}")

    # placeholders must appear in index order within each kind
    for prefix, n in (("table", len(doc.tables)), ("img", len(doc.charts))):
        seen = [
            tag_index(line.strip())
            for line in doc.markdown.splitlines()
            if line.strip().startswith(prefix) and line.strip() in counts
        ]
        if n and seen != sorted(seen):
            problems.append(f"{prefix} placeholders out of order")
    return problems
