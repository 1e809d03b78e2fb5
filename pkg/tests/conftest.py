from __future__ import annotations

import io
import json
import re
import sys
from pathlib import Path

import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

PAGES = Path(__file__).parent / "fixtures" / "pages"

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def png_bytes(seed: int, size: tuple[int, int] = (80, 60)) -> bytes:
    color = ((seed * 37) % 256, (seed * 91) % 256, (seed * 53 + 7) % 256)
    img = Image.new("RGB", size, color)
    img.putpixel((seed % size[0], (seed // size[0]) % size[1]), (255 - color[0], 0, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_chart(path: Path, seed: int, ocr_tokens: list[dict] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(seed))
    if ocr_tokens is not None:
        (path.parent / (path.name + ".ocr.json")).write_text(json.dumps(ocr_tokens, ensure_ascii=False), encoding="utf-8")
    return path


def token(text: str, x: float = 0.0, score: float = 0.95) -> dict:
    return {"text": text, "bbox": [[x, 0], [x + 10, 0], [x + 10, 8], [x, 8]], "score": score}


def question_of(user: str) -> str:
    m = re.search(r"Question: (.*)\Z", user, re.DOTALL)
    return m.group(1).strip() if m else ""


@pytest.fixture
def asset_dir(tmp_path: Path) -> Path:
    """Every image referenced by the fixture pages, as real PNG files."""
    d = tmp_path / "assets"
    names = set()
    for page in PAGES.glob("*.html"):
        names.update(re.findall(r'src="(?:[^"]*/)?([^"/]+)"', page.read_text(encoding="utf-8")))
    for i, name in enumerate(sorted(names)):
        write_chart(d / name, i + 1, [token("统计图"), token(str(i))])
    return d


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(criterion: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[criterion] = (ok, detail)
        assert ok, f"{criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
