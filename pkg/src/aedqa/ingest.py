"""HTML statistical pages to canonical documents.

Body text becomes Markdown, every ``<table>`` becomes a ``table{i}`` line backed
by flat (row, column, value) tuples, and every chart image becomes an
``img{j}`` line pointing at a file under the asset directory.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path, PurePosixPath
from typing import Iterable, Optional
from urllib.parse import urlparse

from bs4 import BeautifulSoup, NavigableString, Tag
from bs4.element import Comment, Declaration, Doctype, ProcessingInstruction

from .core import (
    CellTuple,
    ChartRef,
    Document,
    TableRecord,
    chart_tag,
    table_tag,
    validate_document,
)

log = logging.getLogger(__name__)

LABEL_SEP = "/"
MIN_CHART_PX = 64

_DROP = {"script", "style", "nav", "noscript", "template", "head", "iframe", "svg", "form", "button"}
_BLOCK = {
    "p", "div", "section", "article", "main", "header", "footer", "aside", "center",
    "blockquote", "pre", "figure", "figcaption", "ul", "ol", "dl", "dt", "dd",
    "h1", "h2", "h3", "h4", "h5", "h6", "hr", "address",
}
_PLACEHOLDER_RE = re.compile(r"^(table|img)\d+$")
_WS_RE = re.compile(r"[ \t\r\n\f\v ]+")


class IngestError(Exception):
    pass


class UnparseableHtml(IngestError):
    pass


class NotATable(IngestError):
    pass


class ManifestValidationError(IngestError):
    def __init__(self, violations: dict[str, list[str]]):
        self.violations = violations
        lines = [f"{doc_id}: {v}" for doc_id, vs in violations.items() for v in vs]
        super().__init__("refusing to write invalid documents:\n" + "\n".join(lines))


class IoFailure(IngestError):
    pass


@dataclass
class IngestReport:
    doc_id: str
    tables_found: int = 0
    charts_found: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "tables_found": self.tables_found,
            "charts_found": self.charts_found,
            "warnings": list(self.warnings),
        }


def _clean(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


# -- tables -----------------------------------------------------------------


def _span(cell: Tag, attr: str) -> int:
    try:
        return max(1, int(str(cell.get(attr, "1")).strip() or 1))
    except ValueError:
        return 1


def _rows(table: Tag) -> list[tuple[Tag, bool]]:
    """Direct rows of ``table`` with a flag for rows inside ``<thead>``."""
    rows = []
    for child in table.children:
        if not isinstance(child, Tag):
            continue
        if child.name == "tr":
            rows.append((child, False))
        elif child.name in ("thead", "tbody", "tfoot"):
            in_head = child.name == "thead"
            rows.extend((tr, in_head) for tr in child.find_all("tr", recursive=False))
    return rows


@dataclass
class _Cell:
    uid: int
    text: str
    header: bool


def _grid(table: Tag) -> tuple[dict[tuple[int, int], _Cell], list[_Cell], int]:
    rows = _rows(table)
    has_header = any(in_head for _, in_head in rows) or any(
        c.name == "th" for tr, _ in rows for c in tr.find_all(["td", "th"], recursive=False)
    )
    grid: dict[tuple[int, int], _Cell] = {}
    cells: list[_Cell] = []
    for y, (tr, in_head) in enumerate(rows):
        x = 0
        for td in tr.find_all(["td", "th"], recursive=False):
            while (y, x) in grid:
                x += 1
            header = td.name == "th" or in_head or (not has_header and y == 0)
            cell = _Cell(len(cells), _clean(td.get_text(" ")), header)
            cells.append(cell)
            for pos in product(range(y, y + _span(td, "rowspan")), range(x, x + _span(td, "colspan"))):
                grid.setdefault(pos, cell)
            x += _span(td, "colspan")
    return grid, cells, len(rows)


def _join(cells: Iterable[_Cell]) -> str:
    seen: set[int] = set()
    parts = []
    for c in cells:
        if c.uid in seen:
            continue
        seen.add(c.uid)
        if c.text:
            parts.append(c.text)
    return LABEL_SEP.join(parts)


def tuples_from_table(table: Tag) -> list[CellTuple]:
    grid, cells, n_rows = _grid(table)
    if not grid:
        return []
    n_cols = max(x for _, x in grid) + 1
    header_rows = [
        y for y in range(n_rows)
        if all(grid[(y, x)].header for x in range(n_cols) if (y, x) in grid)
        and any((y, x) in grid for x in range(n_cols))
    ]
    anchors: dict[int, tuple[int, int]] = {}
    for pos in sorted(grid):
        anchors.setdefault(grid[pos].uid, pos)

    out = []
    for pos in sorted(grid):
        cell = grid[pos]
        if cell.header or anchors[cell.uid] != pos:
            continue
        y, x = pos
        row_label = _join(grid[(y, c)] for c in range(n_cols) if (y, c) in grid and grid[(y, c)].header)
        col_label = _join(grid[(r, x)] for r in header_rows if r < y and (r, x) in grid)
        out.append(CellTuple(row_label, col_label, cell.text))
    return out


def table_html_to_tuples(table_html: str) -> list[CellTuple]:
    """Flatten one HTML table into row-major (row label, column label, value) tuples.

    Multi-level headers collapse into a single "/"-joined label and spanned
    header cells label every row or column they cover.
    """
    soup = BeautifulSoup(table_html, "html.parser")
    roots = [c for c in soup.children if isinstance(c, Tag)]
    if len(roots) != 1 or roots[0].name != "table":
        raise NotATable(f"expected a single <table> element, got {[r.name for r in roots]}")
    return tuples_from_table(roots[0])


# -- documents ----------------------------------------------------------------


def _declared_px(img: Tag, attr: str) -> Optional[int]:
    raw = img.get(attr)
    if raw is None:
        m = re.search(rf"{attr}\s*:\s*(\d+)\s*px", str(img.get("style", "")))
        raw = m.group(1) if m else None
    if raw is None:
        return None
    m = re.match(r"\s*(\d+)", str(raw))
    return int(m.group(1)) if m else None


def _is_decoration(img: Tag) -> bool:
    dims = [_declared_px(img, "width"), _declared_px(img, "height")]
    return any(d is not None and d < MIN_CHART_PX for d in dims)


def _image_name(src: str) -> str:
    path = urlparse(src).path if "://" in src else src
    return PurePosixPath(path.replace("\\", "/")).name


class _Renderer:
    def __init__(self, doc_id: str, asset_dir: Path):
        self.doc_id = doc_id
        self.asset_dir = asset_dir
        self.blocks: list[str] = []
        self.inline: list[str] = []
        self.tables: list[TableRecord] = []
        self.charts: list[ChartRef] = []
        self.warnings: list[str] = []

    def flush(self, prefix: str = "") -> None:
        text = _clean("".join(self.inline))
        self.inline = []
        if text:
            if _PLACEHOLDER_RE.match(text):
                # body text that looks like a placeholder must not count as one
                text = "\\" + text
            self.blocks.append(prefix + text)

    def emit_block(self, text: str) -> None:
        self.flush()
        self.blocks.append(text)

    def walk(self, node) -> None:
        for child in node.children:
            if isinstance(child, (Comment, Doctype, Declaration, ProcessingInstruction)):
                continue
            if isinstance(child, NavigableString):
                self.inline.append(str(child))
                continue
            if not isinstance(child, Tag):
                continue
            name = child.name
            if name in _DROP:
                continue
            if name == "table":
                self.table(child)
            elif name == "img":
                self.image(child)
            elif name == "br":
                self.flush()
            elif name in ("h1", "h2", "h3", "h4", "h5", "h6"):
                self.flush()
                self.walk(child)
                self.flush("#" * int(name[1]) + " ")
            elif name == "li":
                self.flush()
                self.walk(child)
                self.flush("- ")
            elif name in _BLOCK:
                self.flush()
                self.walk(child)
                self.flush()
            else:
                self.walk(child)

    def table(self, el: Tag) -> None:
        tag = table_tag(len(self.tables) + 1)
        caption = el.find("caption", recursive=False)
        self.tables.append(
            TableRecord(
                tag=tag,
                html_source=str(el),
                tuples=tuple(tuples_from_table(el)),
                caption=_clean(caption.get_text(" ")) if caption else None,
            )
        )
        self.emit_block(tag)

    def image(self, el: Tag) -> None:
        src = str(el.get("src") or el.get("data-src") or "").strip()
        if not src or src.startswith("data:") or _is_decoration(el):
            return
        tag = chart_tag(len(self.charts) + 1)
        name = _image_name(src)
        local = self.asset_dir / name
        remote = src if urlparse(src).scheme in ("http", "https") else None
        if not name or not local.is_file():
            self.warnings.append(f"MissingAsset: {tag} -> {local}")
        self.charts.append(ChartRef(tag=tag, local_path=local, remote_url=remote))
        self.emit_block(tag)


def html_to_document(html: str, doc_id: str, asset_dir: Path | str, source_url: str = "") -> tuple[Document, IngestReport]:
    soup = BeautifulSoup(html, "html5lib")
    body = soup.body
    if body is None or (not body.get_text(strip=True) and body.find(["table", "img"]) is None):
        raise UnparseableHtml(f"{doc_id}: no recoverable body content")
    if not source_url:
        link = soup.find("link", rel="canonical")
        if link is not None and link.get("href"):
            source_url = str(link["href"])

    r = _Renderer(doc_id, Path(asset_dir))
    r.walk(body)
    r.flush()
    doc = Document(
        id=doc_id,
        markdown="\n\n".join(r.blocks) + "\n",
        tables=tuple(r.tables),
        charts=tuple(r.charts),
        source_url=source_url,
    )
    report = IngestReport(doc_id, len(doc.tables), len(doc.charts), r.warnings)
    for w in r.warnings:
        log.warning("%s: %s", doc_id, w)
    return doc, report


def ingest_file(path: Path | str, asset_dir: Path | str) -> tuple[Document, IngestReport]:
    path = Path(path)
    try:
        html = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise UnparseableHtml(f"{path.name}: not UTF-8 text ({exc.reason})") from exc
    return html_to_document(html, path.stem, asset_dir)


# -- manifest -----------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def build_manifest(docs: list[Document], out_dir: Path | str) -> Path:
    """Write markdown, table sources, tuples and ``corpus.json`` into ``out_dir``.

    Nothing is written if any document fails :func:`validate_document`.
    """
    out_dir = Path(out_dir)
    violations = {d.id: v for d in docs if (v := validate_document(d))}
    if violations:
        raise ManifestValidationError(violations)
    entries = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for doc in docs:
            md_name = f"{doc.id}.md"
            _write(out_dir / md_name, doc.markdown)
            tables = []
            for rec in doc.tables:
                html_name = f"{doc.id}.{rec.tag}.html"
                tuples_name = f"{doc.id}.{rec.tag}.json"
                _write(out_dir / html_name, rec.html_source)
                _write(out_dir / tuples_name, _dump([t.to_dict() for t in rec.tuples]))
                tables.append({"tag": rec.tag, "caption": rec.caption, "html_path": html_name, "tuples_path": tuples_name})
            charts = [
                {"tag": c.tag, "image_path": c.local_path.as_posix(), "image_url": c.remote_url}
                for c in doc.charts
            ]
            entries.append(
                {"id": doc.id, "source_url": doc.source_url, "markdown_path": md_name, "tables": tables, "charts": charts}
            )
        manifest = out_dir / "corpus.json"
        _write(manifest, _dump({"documents": entries}))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def _read(path: Path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def load_manifest(path: Path | str) -> list[Document]:
    path = Path(path)
    base = path.parent
    data = json.loads(_read(path))
    docs = []
    for entry in data["documents"]:
        tables = []
        for t in entry.get("tables", []):
            tuples = json.loads(_read(base / t["tuples_path"]))
            tables.append(
                TableRecord(
                    tag=t["tag"],
                    html_source=_read(base / t["html_path"]),
                    tuples=tuple(CellTuple.from_dict(x) for x in tuples),
                    caption=t.get("caption"),
                )
            )
        charts = [ChartRef(c["tag"], Path(c["image_path"]), c.get("image_url")) for c in entry.get("charts", [])]
        docs.append(
            Document(
                id=entry["id"],
                source_url=entry.get("source_url", ""),
                markdown=_read(base / entry["markdown_path"]),
                tables=tuple(tables),
                charts=tuple(charts),
            )
        )
    return docs


def html_files(input_dir: Path | str) -> list[Path]:
    return sorted(p for p in Path(input_dir).iterdir() if p.suffix.lower() in (".html", ".htm") and p.is_file())

