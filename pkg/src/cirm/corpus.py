"""Synthetic preference pairs with planted content quality and style biases.

Each response is a bag of five-letter content words: "good" words (all
containing a ``z``) and noise words.  The gold response has strictly more good
words, and that is the only thing gold depends on.  Style is injected on top
with a separate random stream: for every bias the side that gets *more* of the
feature is the gold side with probability ``bias_strength[bias]`` and the other
side otherwise.  Extra length comes from neutral filler words, paragraphs from
``"\\n\\n"`` separators, overlap from copied query words, and ``!`` / ``**``
markers from decorations that do not change word tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorpusFormatError
from .features import BIASES, FeatureVector, QueryResponse, extract_features
from .scoring import PreferencePair

GOOD_WORDS = ("zesty", "zonal", "azure", "blaze", "glaze", "hazel", "pizza", "woozy", "dozen", "froze", "zebra", "prize")
NOISE_WORDS = ("vague", "murky", "messy", "lousy", "shaky", "bland", "dingy", "soggy", "tacky", "faint", "stale", "drab")
FILLER_WORDS = ("really", "very", "also", "indeed", "just", "simply", "truly", "mostly", "often", "surely")
QUERY_WORDS = (
    "river", "engine", "garden", "market", "planet", "bridge", "castle", "forest",
    "rocket", "island", "valley", "harbor", "desert", "meadow", "canyon", "temple",
    "violin", "copper", "turtle", "winter", "signal", "pepper", "ladder", "mirror",
)

JSONL_FIELDS = ("query", "response_a", "response_b", "gold", "features_a", "features_b", "quality_a", "quality_b")


@dataclass(frozen=True)
class CorpusConfig:
    n_pairs: int = 2000
    bias_strength: dict = field(default_factory=lambda: {b: 0.5 for b in BIASES})
    seed: int = 0
    content_words: tuple[int, int] = (5, 9)
    query_words: tuple[int, int] = (2, 4)
    filler_words: tuple[int, int] = (2, 6)
    good_words: tuple[str, ...] = GOOD_WORDS
    noise_words: tuple[str, ...] = NOISE_WORDS
    filler_vocab: tuple[str, ...] = FILLER_WORDS
    query_vocab: tuple[str, ...] = QUERY_WORDS

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")
        strengths = {b: float(self.bias_strength.get(b, 0.5)) for b in BIASES}
        extra = set(self.bias_strength) - set(BIASES)
        if extra:
            raise ConfigError(f"unknown biases {sorted(extra)}")
        for b, s in strengths.items():
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"bias_strength[{b}]={s} outside [0, 1]")
        object.__setattr__(self, "bias_strength", strengths)
        for name in ("content_words", "query_words", "filler_words"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} range must satisfy 1 <= lo <= hi")
        if set(self.good_words) & set(self.noise_words):
            raise ConfigError("good and noise vocabularies overlap")


@dataclass
class LabeledPair:
    query: str
    response_a: str
    response_b: str
    gold: str
    features_a: FeatureVector
    features_b: FeatureVector
    quality_a: float
    quality_b: float
    extra: dict = field(default_factory=dict)

    @property
    def preference(self) -> PreferencePair:
        return PreferencePair(self.query, self.response_a, self.response_b, self.gold)

    @property
    def chosen_features(self) -> FeatureVector:
        return self.features_a if self.gold == "A" else self.features_b

    @property
    def rejected_features(self) -> FeatureVector:
        return self.features_b if self.gold == "A" else self.features_a

    @property
    def chosen(self) -> str:
        return self.response_a if self.gold == "A" else self.response_b

    def to_json(self) -> str:
        doc = {
            "query": self.query,
            "response_a": self.response_a,
            "response_b": self.response_b,
            "gold": self.gold,
            "features_a": self.features_a.to_dict(),
            "features_b": self.features_b.to_dict(),
            "quality_a": self.quality_a,
            "quality_b": self.quality_b,
        }
        for k, v in self.extra.items():
            doc.setdefault(k, v)
        return json.dumps(doc, ensure_ascii=False)


def make_pair(query, response_a, response_b, gold, quality_a=0.0, quality_b=0.0, extra=None) -> LabeledPair:
    """Build a :class:`LabeledPair`, computing features from the texts."""
    return LabeledPair(
        query,
        response_a,
        response_b,
        gold,
        extract_features(QueryResponse(query, response_a)),
        extract_features(QueryResponse(query, response_b)),
        float(quality_a),
        float(quality_b),
        dict(extra or {}),
    )


# -- generation -------------------------------------------------------------------------

_CONTENT, _STYLE = 0, 1


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


class _Draft:
    """Mutable response under construction: a word list plus decorations."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.breaks: set[int] = set()  # gap indices rendered as "\n\n"
        self.bangs: list[int] = []  # word indices followed by "!"
        self.bold: set[int] = set()

    def insert(self, rng, word):
        pos = int(rng.integers(0, len(self.words) + 1))
        self.words.insert(pos, word)
        self.breaks = {g + 1 if g >= pos else g for g in self.breaks}
        self.bangs = [i + 1 if i >= pos else i for i in self.bangs]
        self.bold = {i + 1 if i >= pos else i for i in self.bold}

    def render(self) -> str:
        parts = []
        for i, w in enumerate(self.words):
            if i in self.bold:
                w = f"**{w}**"
            w += "!" * self.bangs.count(i)
            if i:
                parts.append("\n\n" if i in self.breaks else " ")
            parts.append(w)
        return "".join(parts)


def _content(rng, cfg: CorpusConfig, n: int, n_good: int) -> list[str]:
    words = list(rng.choice(cfg.good_words, size=n_good)) + list(rng.choice(cfg.noise_words, size=n - n_good))
    return [str(w) for w in words]


def _query(rng, cfg: CorpusConfig) -> tuple[str, list[str]]:
    k = int(rng.integers(cfg.query_words[0], cfg.query_words[1] + 1))
    words = [str(w) for w in rng.choice(cfg.query_vocab, size=k, replace=False)]
    return " ".join(words), words


def _fewer(rng, more: int) -> int:
    return int(rng.integers(0, more))


def _decorate(rng, draft: _Draft, n_breaks: int, n_bangs: int, n_bold: int):
    gaps = list(range(1, len(draft.words)))
    if n_breaks and gaps:
        draft.breaks = set(int(g) for g in rng.choice(gaps, size=min(n_breaks, len(gaps)), replace=False))
    draft.bangs = [int(i) for i in rng.integers(0, len(draft.words), size=n_bangs)]
    if n_bold:
        draft.bold = set(int(i) for i in rng.choice(len(draft.words), size=min(n_bold, len(draft.words)), replace=False))


def _measure(query, draft) -> FeatureVector:
    return extract_features(QueryResponse(query, draft.render()))


def _inject_style(rng, cfg: CorpusConfig, query, qwords, drafts, gold_idx):
    """Give one side strictly more of every feature; which side is per bias_strength."""
    more = {}
    for b in BIASES:
        hit = rng.random() < cfg.bias_strength[b]
        more[b] = gold_idx if hit else 1 - gold_idx

    amounts = [dict.fromkeys(BIASES, 0), dict.fromkeys(BIASES, 0)]
    top = {"para": 2, "excl": 3, "bold": 2, "over": 3}
    for b, hi in top.items():
        k = int(rng.integers(1, hi + 1))
        amounts[more[b]][b] = k
        amounts[1 - more[b]][b] = _fewer(rng, k)
    lo, hi = cfg.filler_words
    amounts[more["len"]]["len"] = int(rng.integers(lo, hi + 1))

    for side, draft in enumerate(drafts):
        for _ in range(amounts[side]["over"]):
            draft.insert(rng, str(rng.choice(qwords)))
        for _ in range(amounts[side]["len"]):
            draft.insert(rng, str(rng.choice(cfg.filler_vocab)))
        _decorate(rng, draft, amounts[side]["para"], amounts[side]["excl"], amounts[side]["bold"])

    # copied query words and filler interact through length and token counts;
    # top up the designated side until every ordering is strict
    for _ in range(64):
        fa, fb = _measure(query, drafts[0]), _measure(query, drafts[1])
        f = (fa, fb)
        m = more["over"]
        if f[m].over <= f[1 - m].over:
            drafts[m].insert(rng, str(rng.choice(qwords)))
            continue
        m = more["len"]
        if f[m].len <= f[1 - m].len:
            drafts[m].insert(rng, str(rng.choice(cfg.filler_vocab)))
            continue
        break
    else:
        raise ConfigError("style injection did not converge; check the filler and query vocabularies")


def generate_pair(cfg: CorpusConfig, index: int) -> LabeledPair:
    crng = _rng(cfg.seed, _CONTENT, index)
    query, qwords = _query(crng, cfg)
    n = int(crng.integers(cfg.content_words[0], cfg.content_words[1] + 1))
    lo_good = int(crng.integers(0, n))
    hi_good = int(crng.integers(lo_good + 1, n + 1))
    gold = "A" if crng.random() < 0.5 else "B"
    gold_idx = 0 if gold == "A" else 1
    goods = [lo_good, lo_good]
    goods[gold_idx] = hi_good
    drafts = [_Draft(_content(crng, cfg, n, g)) for g in goods]
    for d in drafts:
        crng.shuffle(d.words)

    srng = _rng(cfg.seed, _STYLE, index)
    _inject_style(srng, cfg, query, qwords, drafts, gold_idx)
    ra, rb = drafts[0].render(), drafts[1].render()
    return make_pair(query, ra, rb, gold, goods[0] / n, goods[1] / n)


def generate_corpus(cfg: CorpusConfig) -> list[LabeledPair]:
    return [generate_pair(cfg, i) for i in range(cfg.n_pairs)]


def candidate_response(rng, cfg: CorpusConfig, query: str, qwords: Sequence[str], n: int) -> tuple[str, float]:
    """One free-standing response with random quality and random style amounts."""
    n_good = int(rng.integers(0, n + 1))
    draft = _Draft(_content(rng, cfg, n, n_good))
    rng.shuffle(draft.words)
    for _ in range(int(rng.integers(0, 4))):
        draft.insert(rng, str(rng.choice(qwords)))
    for _ in range(int(rng.integers(0, cfg.filler_words[1] + 1))):
        draft.insert(rng, str(rng.choice(cfg.filler_vocab)))
    _decorate(rng, draft, int(rng.integers(0, 3)), int(rng.integers(0, 4)), int(rng.integers(0, 3)))
    return draft.render(), n_good / n


def generate_candidates(cfg: CorpusConfig, n_sets: int, n_candidates: int = 5, seed: int | None = None):
    """``n_sets`` queries with ``n_candidates`` independently styled responses each.

    Returns a list of ``(query, responses, qualities)`` tuples.
    """
    base = cfg.seed if seed is None else seed
    out = []
    for i in range(n_sets):
        rng = _rng(base, 2, i)
        query, qwords = _query(rng, cfg)
        n = int(rng.integers(cfg.content_words[0], cfg.content_words[1] + 1))
        resp, qual = zip(*(candidate_response(rng, cfg, query, qwords, n) for _ in range(n_candidates)))
        out.append((query, list(resp), list(qual)))
    return out


# -- subsets ---------------------------------------------------------------------------------


@dataclass
class SubsetSplit:
    biased: list
    unbiased: list
    ties: list


def subset_of(pair: LabeledPair, bias: str) -> str:
    """``"biased"`` if the gold response has more of the feature, ``"unbiased"`` if less."""
    c, r = pair.chosen_features[bias], pair.rejected_features[bias]
    if c > r:
        return "biased"
    if c < r:
        return "unbiased"
    return "ties"


def split_subsets(pairs: Iterable[LabeledPair], bias: str) -> SubsetSplit:
    if bias not in BIASES:
        raise KeyError(bias)
    split = SubsetSplit([], [], [])
    for p in pairs:
        if p.gold not in ("A", "B"):
            raise CorpusFormatError("split_subsets needs gold labels")
        getattr(split, subset_of(p, bias)).append(p)
    return split


# -- persistence ------------------------------------------------------------------------------


def write_jsonl(pairs: Iterable[LabeledPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(p.to_json())
            fh.write("\n")


def parse_pair(doc: dict, where: str = "") -> LabeledPair:
    missing = [k for k in JSONL_FIELDS if k not in doc]
    if missing:
        raise CorpusFormatError(f"{where}missing field(s) {missing}")
    try:
        pair = LabeledPair(
            doc["query"],
            doc["response_a"],
            doc["response_b"],
            doc["gold"],
            FeatureVector.from_dict(doc["features_a"]),
            FeatureVector.from_dict(doc["features_b"]),
            float(doc["quality_a"]),
            float(doc["quality_b"]),
            {k: v for k, v in doc.items() if k not in JSONL_FIELDS},
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise CorpusFormatError(f"{where}bad field value: {exc}") from exc
    fresh = make_pair(pair.query, pair.response_a, pair.response_b, pair.gold)
    if fresh.features_a != pair.features_a or fresh.features_b != pair.features_b:
        raise CorpusFormatError(f"{where}stored features disagree with the extractor")
    return pair


def read_jsonl(path) -> list[LabeledPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(doc, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected a JSON object")
            out.append(parse_pair(doc, f"{path}:{lineno}: "))
    return out
