"""Keyword Match (KM) and Cross-Linguistic Keyword Match (CLKM).

A question counts as answered when every keyword of the gold answer appears in
the generated answer. Keywords are numbers (separators, percent signs and units
removed) and, for answers without numbers, content words. Matching is done on
a canonical form: NFC, half-width, case-folded, thousands separators dropped.
CLKM additionally accepts a lexicon translation of each word keyword.
"""
from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .core import CHART, TABLE, TEXT, QAPair

NUMERIC = "numeric"
TERM = "term"
NUMERICAL = "Numerical"
NON_NUMERICAL = "NonNumerical"
SUBSETS = ("Text", "Table", "Chart", "All")

_THOUSANDS_RE = re.compile(r"(?<=[0-9]),(?=[0-9])")
_NUMBER_RE = re.compile(r"[0-9]+(?:[.,][0-9]+)*")
_PLAIN_NUMBER_RE = re.compile(r"[0-9]+(?:\.[0-9]+)?")
_DIGIT_RE = re.compile(r"[0-9０-９]")
_CJK_SPLIT_RE = re.compile(r"([㐀-䶿一-鿿]+)")
_WORD_RE = re.compile(r"[^\W\d_]+")


class UnknownQaId(KeyError):
    pass


def _load_list(name: str) -> tuple[str, ...]:
    text = resources.files("aedqa.data").joinpath(name).read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


DEFAULT_UNITS = _load_list("units.txt")
DEFAULT_STOPWORDS = frozenset(_load_list("stopwords.txt"))


def to_halfwidth(text: str) -> str:
    out = []
    for ch in text:
        cp = ord(ch)
        if 0xFF01 <= cp <= 0xFF5E:
            out.append(chr(cp - 0xFEE0))
        elif cp == 0x3000:
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def canonicalize(text: str) -> str:
    """NFC, full-width to half-width, case-fold, drop thousands separators."""
    t = unicodedata.normalize("NFC", text)
    t = to_halfwidth(t)
    t = unicodedata.normalize("NFC", t.casefold())
    return _THOUSANDS_RE.sub("", t)


@dataclass(frozen=True)
class Keyword:
    surface: str
    normalized: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind == NUMERIC and not re.fullmatch(r"[0-9]+(?:\.[0-9]+)?", self.normalized):
            raise ValueError(f"bad numeric keyword {self.normalized!r}")

    def to_dict(self) -> dict:
        return {"surface": self.surface, "normalized": self.normalized, "kind": self.kind}


@dataclass(frozen=True)
class MatchReport:
    hit: bool
    matched: tuple[Keyword, ...] = ()
    missing: tuple[Keyword, ...] = ()
    diagnostic: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "hit": self.hit,
            "matched": [k.to_dict() for k in self.matched],
            "missing": [k.to_dict() for k in self.missing],
            "diagnostic": self.diagnostic,
        }


@dataclass(frozen=True)
class KeywordRules:
    """Unit suffixes and stopwords; override either for a different corpus."""

    units: tuple[str, ...] = DEFAULT_UNITS
    stopwords: frozenset[str] = DEFAULT_STOPWORDS
    min_term_length: int = 2
    # numbers carry the answer; words around them are context
    terms_with_numbers: bool = False


DEFAULT_RULES = KeywordRules()


def extract_keywords(gold: str, rules: KeywordRules = DEFAULT_RULES) -> list[Keyword]:
    text = to_halfwidth(unicodedata.normalize("NFC", gold))
    numbers: list[Keyword] = []
    rest = []
    pos = 0
    units = sorted(rules.units, key=len, reverse=True)
    for m in _NUMBER_RE.finditer(text):
        rest.append(text[pos:m.start()])
        end = m.end()
        surface = m.group(0)
        if text.startswith("%", end):
            surface += "%"
            end += 1
        else:
            unit = next((u for u in units if text.startswith(u, end)), None)
            if unit:
                end += len(unit)
        plain = m.group(0).replace(",", "")
        if _PLAIN_NUMBER_RE.fullmatch(plain):
            numbers.append(Keyword(surface, plain, NUMERIC))
        else:
            # dates and versions such as 2023.11.05 are matched literally
            numbers.append(Keyword(m.group(0), canonicalize(m.group(0)), TERM))
        rest.append(" ")
        pos = end
    rest.append(text[pos:])

    terms: list[Keyword] = []
    if rules.terms_with_numbers or not numbers:
        remainder = "".join(rest)
        for m in _WORD_RE.finditer(remainder):
            chunk = m.group(0)
            # split mixed runs so CJK runs and Latin words stay separate
            for part in _CJK_SPLIT_RE.split(chunk):
                if not part:
                    continue
                norm = canonicalize(part)
                if len(norm) < rules.min_term_length or norm in rules.stopwords:
                    continue
                terms.append(Keyword(part, norm, TERM))

    out: list[Keyword] = []
    seen: set[tuple[str, str]] = set()
    for kw in sorted(numbers + terms, key=lambda k: _position(text, k)):
        key = (kw.kind, kw.normalized)
        if key not in seen:
            seen.add(key)
            out.append(kw)
    return out


def _position(text: str, kw: Keyword) -> int:
    i = text.find(kw.surface)
    return i if i >= 0 else len(text)


def _is_number_char(s: str, i: int, toward: int) -> bool:
    """Whether ``s[i]`` continues a number next to the match.

    A digit always does. A "." does when the character beyond it (stepping by
    ``toward``) is a digit, so "8.6" is blocked in "38.68" but allowed before a
    sentence-final period.
    """
    if i < 0 or i >= len(s):
        return False
    if "0" <= s[i] <= "9":
        return True
    if s[i] == ".":
        j = i + toward
        return 0 <= j < len(s) and "0" <= s[j] <= "9"
    return False


def number_in(canonical: str, number: str) -> bool:
    start = canonical.find(number)
    while start >= 0:
        end = start + len(number)
        if not _is_number_char(canonical, start - 1, -1) and not _is_number_char(canonical, end, 1):
            return True
        start = canonical.find(number, start + 1)
    return False


def _keyword_in(canonical: str, kw: Keyword) -> bool:
    if kw.kind == NUMERIC:
        return number_in(canonical, kw.normalized)
    return kw.normalized in canonical


def _report(keywords: list[Keyword], found: Sequence[bool]) -> MatchReport:
    if not keywords:
        return MatchReport(False, diagnostic="gold answer has no keywords")
    matched = tuple(k for k, ok in zip(keywords, found) if ok)
    missing = tuple(k for k, ok in zip(keywords, found) if not ok)
    return MatchReport(not missing, matched, missing)


def km_match(gold: str, generated: str, rules: KeywordRules = DEFAULT_RULES) -> MatchReport:
    keywords = extract_keywords(gold, rules)
    canon = canonicalize(generated)
    return _report(keywords, [_keyword_in(canon, k) for k in keywords])


class Lexicon:
    """Cross-language equivalents. Lookups work in both directions."""

    def __init__(self, entries: Optional[Mapping[str, Iterable[str]]] = None):
        self._map: dict[str, set[str]] = {}
        for term, equivs in (entries or {}).items():
            for e in equivs:
                self.add(term, e)

    def add(self, term: str, equivalent: str) -> None:
        a, b = canonicalize(term).strip(), canonicalize(equivalent).strip()
        if not a or not b or a == b:
            return
        self._map.setdefault(a, set()).add(b)
        self._map.setdefault(b, set()).add(a)

    def equivalents(self, term: str) -> frozenset[str]:
        return frozenset(self._map.get(canonicalize(term).strip(), ()))

    def __len__(self) -> int:
        return len(self._map)

    @classmethod
    def from_tsv(cls, path: Path | str) -> "Lexicon":
        """Read ``term<TAB>equiv1|equiv2`` lines; ``#`` starts a comment line."""
        lex = cls()
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                if "\t" not in line:
                    raise ValueError(f"{path}:{n}: expected term<TAB>equivalents")
                term, equivs = line.split("\t", 1)
                for e in equivs.split("|"):
                    lex.add(term, e)
        return lex

    @classmethod
    def default(cls) -> "Lexicon":
        with resources.as_file(resources.files("aedqa.data").joinpath("lexicon.tsv")) as p:
            return cls.from_tsv(p)


def clkm_match(gold: str, generated: str, lexicon: Lexicon, rules: KeywordRules = DEFAULT_RULES) -> MatchReport:
    keywords = extract_keywords(gold, rules)
    canon = canonicalize(generated)
    found = []
    for kw in keywords:
        ok = _keyword_in(canon, kw)
        if not ok and kw.kind == TERM:
            ok = any(e in canon for e in lexicon.equivalents(kw.normalized))
        found.append(ok)
    return _report(keywords, found)


def classify_answer_type(answer: str) -> str:
    return NUMERICAL if _DIGIT_RE.search(answer) else NON_NUMERICAL


# -- corpus scoring -------------------------------------------------------------------


@dataclass
class SubsetScore:
    count: int = 0
    km_hits: int = 0
    clkm_hits: int = 0

    @property
    def km(self) -> float:
        return 100.0 * self.km_hits / self.count if self.count else 0.0

    @property
    def clkm(self) -> float:
        return 100.0 * self.clkm_hits / self.count if self.count else 0.0

    def to_dict(self) -> dict:
        return {"count": self.count, "km": round(self.km, 4), "clkm": round(self.clkm, 4)}


@dataclass
class EvalReport:
    subsets: dict[str, SubsetScore] = field(default_factory=lambda: {s: SubsetScore() for s in SUBSETS})
    failures: dict[str, str] = field(default_factory=dict)
    method: str = "AED"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "subsets": {k: v.to_dict() for k, v in self.subsets.items()},
            "failures": dict(sorted(self.failures.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n"

    def to_markdown(self, subsets: Sequence[str] = SUBSETS) -> str:
        head = ["Method"] + [f"{s} {m}" for s in subsets for m in ("KM", "CLKM")]
        row = [self.method] + [f"{v:.1f}" for s in subsets for v in (self.subsets[s].km, self.subsets[s].clkm)]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]

        def line(cells):
            return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        counts = ", ".join(f"{s}={self.subsets[s].count}" for s in subsets)
        return "\n".join([line(head), sep, line(row), "", f"Questions: {counts}"]) + "\n"


def subsets_of(qa: QAPair) -> list[str]:
    kinds = {m.kind for m in qa.modalities}
    out = [name for name, kind in (("Text", TEXT), ("Table", TABLE), ("Chart", CHART)) if kind in kinds]
    return out + ["All"]


def evaluate_corpus(
    predictions: Mapping[str, str],
    qa: Sequence[QAPair],
    lexicon: Optional[Lexicon] = None,
    rules: KeywordRules = DEFAULT_RULES,
    method: str = "AED",
) -> EvalReport:
    """Score predictions per modality subset; a question counts in every subset it touches."""
    lexicon = lexicon if lexicon is not None else Lexicon()
    known = {q.id for q in qa}
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise UnknownQaId(f"predictions for unknown QA ids: {unknown[:5]}")
    report = EvalReport(method=method)
    for q in qa:
        pred = predictions.get(q.id)
        km = clkm = False
        if pred is not None:
            km = km_match(q.gold_answer, pred, rules).hit
            clkm = clkm_match(q.gold_answer, pred, lexicon, rules).hit
        for name in subsets_of(q):
            s = report.subsets[name]
            s.count += 1
            s.km_hits += km
            s.clkm_hits += clkm
    return report
