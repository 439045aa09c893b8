"""Evaluation: subset accuracies, best-of-n annotation, bias ratios, histograms.

Conventions (also written into every report): a tied prediction earns 0.5
credit; pairs tied on a feature are excluded from that feature's bias ratio.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import LabeledPair, make_pair, split_subsets, subset_of
from .errors import InputError
from .features import BIASES, QueryResponse, extract_features
from .model import SITES, Model, NeuronAddress, Site, compile_patch
from .probe import DEFAULT_TEMPLATE, InterventionManifest
from .scoring import (
    LwrCalibration,
    PreferencePair,
    ScoredPair,
    intervention_variant,
    lp_score,
    reward,
)

CONVENTIONS = {
    "ties": "a tied prediction (exactly equal rewards) counts 0.5 correct",
    "bias_ratio": "pairs tied on the feature are excluded from numerator and denominator",
    "subsets": "B = gold response has more of the feature, B_bar = fewer, tied = equal",
}

SUBSET_KEYS = {"biased": "B", "unbiased": "B_bar", "ties": "tied"}


# -- scorers -------------------------------------------------------------------------------


class Scorer:
    """A named per-response reward; pairs are decided by comparing the two rewards."""

    def __init__(self, method: str, fn: Callable[[QueryResponse], float]):
        self.method = method
        self.fn = fn

    def reward(self, qr: QueryResponse) -> float:
        return float(self.fn(qr))

    def __call__(self, pair: PreferencePair) -> ScoredPair:
        return ScoredPair.decide(self.reward(pair.a), self.reward(pair.b), self.method)


def vanilla_scorer(model: Model, template: str = DEFAULT_TEMPLATE) -> Scorer:
    return Scorer("vanilla", lambda qr: reward(model, qr, None, template))


def cirm_scorer(model: Model, manifest: InterventionManifest, template: str = DEFAULT_TEMPLATE) -> Scorer:
    manifest.check_model(model)
    patch = compile_patch(model.config, manifest.patch())
    return Scorer("cirm", lambda qr: reward(model, qr, patch, template))


def zero_scorer(model: Model, manifest: InterventionManifest, template: str = DEFAULT_TEMPLATE) -> Scorer:
    manifest.check_model(model)
    patch = compile_patch(model.config, {a: 0.0 for a in manifest.addresses()})
    return Scorer("zero", lambda qr: reward(model, qr, patch, template))


def swap_scorer(model: Model, manifest: InterventionManifest, template: str = DEFAULT_TEMPLATE, direction="ab"):
    """Pair-only scorer for the swap variant (it has no per-response reward)."""

    def score(pair: PreferencePair) -> ScoredPair:
        return intervention_variant(model, pair, manifest, "swap", template, direction)

    return score


def lp_scorer(base: Scorer, alpha: float) -> Scorer:
    return Scorer("lp", lambda qr: lp_score(base.reward(qr), qr, alpha))


def lwr_scorer(base: Scorer, calibration: LwrCalibration) -> Scorer:
    return Scorer("lwr", lambda qr: calibration.debias(base.reward(qr), len(qr.response)))


def fit_lwr(base: Scorer, responses: Iterable[QueryResponse], frac: float = 0.3) -> LwrCalibration:
    """Calibrate LWR on (length, vanilla reward) of the given responses."""
    rs = list(responses)
    return LwrCalibration([len(q.response) for q in rs], [base.reward(q) for q in rs], frac)


def tune_lp_alpha(base: Scorer, pairs: Sequence[LabeledPair], alphas: Sequence[float]) -> tuple[float, dict]:
    """Pick the alpha with the best validation accuracy; ties go to the smallest alpha."""
    if not alphas:
        raise InputError("no alpha candidates")
    if not pairs:
        raise InputError("no validation pairs")
    cache = {}
    for p in pairs:
        for qr in (p.preference.a, p.preference.b):
            if qr not in cache:
                cache[qr] = base.reward(qr)
    scores = {}
    for a in sorted(set(float(x) for x in alphas)):
        if a < 0:
            raise InputError(f"alpha must be >= 0, got {a}")
        s = Scorer("lp", lambda qr, a=a: lp_score(cache[qr], qr, a))
        scores[a] = _acc(s, pairs)
    best = max(scores, key=lambda a: (scores[a], -a))
    return best, scores


def _acc(scorer, pairs) -> float:
    return sum(scorer(p.preference).credit(p.gold) for p in pairs) / len(pairs)


# -- evaluate ------------------------------------------------------------------------------


@dataclass
class Cell:
    n: int = 0
    correct: float = 0.0
    ties: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.n if self.n else None

    def add(self, scored: ScoredPair, gold: str):
        self.n += 1
        self.correct += scored.credit(gold)
        self.ties += int(scored.tie)

    def to_dict(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "ties": self.ties}


@dataclass
class MethodReport:
    method: str
    overall: Cell = field(default_factory=Cell)
    subsets: dict = field(default_factory=dict)  # bias -> {"B": Cell, "B_bar": Cell, "tied": Cell}

    def accuracy(self, bias: str | None = None, subset: str | None = None) -> float | None:
        if bias is None:
            return self.overall.accuracy
        return self.subsets[bias][subset].accuracy

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "subsets": {b: {k: c.to_dict() for k, c in cells.items()} for b, cells in self.subsets.items()},
        }


def evaluate(scorer, pairs: Sequence[LabeledPair], method: str | None = None) -> MethodReport:
    """Accuracy overall and on each bias's B / B_bar / tied partition."""
    if not pairs:
        raise InputError("evaluate needs at least one pair")
    name = method or getattr(scorer, "method", "custom")
    rep = MethodReport(name, subsets={b: {k: Cell() for k in SUBSET_KEYS.values()} for b in BIASES})
    for i, p in enumerate(pairs):
        if p.gold not in ("A", "B"):
            raise InputError(f"pair {i} has no gold label")
        s = scorer(p.preference)
        rep.overall.add(s, p.gold)
        for b in BIASES:
            rep.subsets[b][SUBSET_KEYS[subset_of(p, b)]].add(s, p.gold)
    return rep


# -- annotation ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    query: str
    responses: tuple
    qualities: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        if self.qualities is not None:
            object.__setattr__(self, "qualities", tuple(float(q) for q in self.qualities))
            if len(self.qualities) != len(self.responses):
                raise InputError("qualities must align with responses")
        if len(self.responses) < 2:
            raise InputError("a candidate set needs at least two responses")
        if any(not r for r in self.responses):
            raise InputError("candidate responses must be non-empty")


def pick_extremes(rewards: Sequence[float]) -> tuple[int, int, bool]:
    """(chosen, rejected, degenerate): argmax and argmin, lowest index on ties."""
    if len(rewards) < 2:
        raise InputError("need at least two rewards")
    r = list(rewards)
    hi, lo = max(r), min(r)
    if hi == lo:
        return 0, 1, True
    return r.index(hi), r.index(lo), False


def annotate(scorer: Scorer, sets: Sequence[CandidateSet]) -> list[LabeledPair]:
    """Best-vs-worst pairs; ``gold`` is always ``"A"`` (the chosen response)."""
    out = []
    for s in sets:
        if len(s.responses) < 2:
            raise InputError("a candidate set needs at least two responses")
        rewards = [scorer.reward(QueryResponse(s.query, r)) for r in s.responses]
        c, r, degenerate = pick_extremes(rewards)
        q = s.qualities or (0.0,) * len(s.responses)
        extra = {
            "method": scorer.method,
            "reward_chosen": rewards[c],
            "reward_rejected": rewards[r],
            "chosen_index": c,
            "rejected_index": r,
            "degenerate": degenerate,
        }
        out.append(make_pair(s.query, s.responses[c], s.responses[r], "A", q[c], q[r], extra))
    return out


@dataclass(frozen=True)
class BiasRatio:
    ratio: float | None
    n_biased: int
    n_unbiased: int
    n_ties: int

    @property
    def defined(self) -> bool:
        return self.ratio is not None

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "defined": self.defined,
            "n_biased": self.n_biased,
            "n_unbiased": self.n_unbiased,
            "n_ties": self.n_ties,
        }


def bias_ratio(annotated: Sequence[LabeledPair], bias: str) -> BiasRatio:
    """|B| / (|B| + |B_bar|); ``ratio`` is None when no pair differs on the feature."""
    split = split_subsets(annotated, bias)
    nb, nu = len(split.biased), len(split.unbiased)
    return BiasRatio(nb / (nb + nu) if nb + nu else None, nb, nu, len(split.ties))


def feature_means(responses: Sequence[str], queries: Sequence[str]) -> dict[str, float]:
    if len(responses) != len(queries):
        raise InputError("responses and queries must align")
    if not responses:
        raise InputError("feature_means needs at least one response")
    fvs = [extract_features(QueryResponse(q, r)) for q, r in zip(queries, responses)]
    return {b: float(np.mean([fv[b] for fv in fvs])) for b in BIASES}


# -- histograms -----------------------------------------------------------------------------


def layer_histogram(addresses: Iterable[NeuronAddress]) -> tuple[dict[int, int], dict[tuple[int, Site], int]]:
    addrs = list(addresses)
    if not addrs:
        raise InputError("layer_histogram needs a non-empty neuron set")
    by_layer = Counter(a.layer for a in addrs)
    by_site = Counter((a.layer, a.site) for a in addrs)
    return dict(sorted(by_layer.items())), dict(sorted(by_site.items(), key=lambda kv: (kv[0][0], SITES.index(kv[0][1]))))


def histogram_rows(sets: Mapping[str, Sequence[NeuronAddress]]) -> list[tuple[int, str, str, int]]:
    """(layer, site, bias, count) rows for every non-empty per-bias set."""
    rows = []
    for b in BIASES:
        addrs = sets.get(b, [])
        if not addrs:
            continue
        _, by_site = layer_histogram(addrs)
        rows.extend((layer, site.value, b, n) for (layer, site), n in by_site.items())
    return rows


def write_histogram_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "site", "bias", "count"])
        w.writerows(rows)


def write_report(report: Mapping, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(report, indent=1, ensure_ascii=False))
        fh.write("\n")
