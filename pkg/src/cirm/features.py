"""Word tokenization and the five spurious-feature measurements."""

from __future__ import annotations

import unicodedata
from dataclasses import asdict, dataclass

BIASES = ("len", "para", "over", "excl", "bold")


@dataclass(frozen=True)
class QueryResponse:
    query: str
    response: str


@dataclass(frozen=True)
class FeatureVector:
    len: int
    para: int
    over: float
    excl: int
    bold: int

    def __getitem__(self, bias: str):
        if bias not in BIASES:
            raise KeyError(bias)
        return getattr(self, bias)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVector":
        return cls(int(d["len"]), int(d["para"]), float(d["over"]), int(d["excl"]), int(d["bold"]))


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_punct(word: str) -> str:
    start, end = 0, len(word)
    while start < end and _is_punct(word[start]):
        start += 1
    while end > start and _is_punct(word[end - 1]):
        end -= 1
    return word[start:end]


def tokenize_words(text: str) -> list[str]:
    """Lowercased whitespace-delimited words with edge punctuation removed."""
    out = []
    for raw in text.lower().split():
        w = _strip_punct(raw)
        if w:
            out.append(w)
    return out


def overlap_ratio(query: str, response: str) -> float:
    resp = tokenize_words(response)
    if not resp:
        return 0.0
    vocab = set(tokenize_words(query))
    return sum(1 for w in resp if w in vocab) / len(resp)


def extract_features(pair: QueryResponse) -> FeatureVector:
    r = pair.response
    # str.count scans left to right without overlap: "***" has one "**"
    return FeatureVector(
        len=len(r),
        para=r.count("\n\n"),
        over=overlap_ratio(pair.query, r),
        excl=r.count("!"),
        bold=r.count("**"),
    )
