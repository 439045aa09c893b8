"""Per-bias k selection: exhaustive grid search and a small categorical TPE.

Grids map a bias name to its candidate k values.  Biases absent from a grid
are pinned to 0, so a one-dimensional search is just a grid with one key.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .features import BIASES
from .model import CompiledPatch, Model, compile_patch, last_token_step, prefix_state
from .probe import (
    DEFAULT_TEMPLATE,
    ActivationMatrix,
    all_medians,
    build_manifest,
    rank_all,
    render,
)
from .scoring import PreferencePair, ScoredPair

LARGE_MODEL_GRID = (50, 100, 200, 500, 1000, 2000, 5000)
TOY_GRID = (0, 1, 2, 4, 8, 16, 32)


@dataclass(frozen=True, order=True)
class KConfig:
    len: int = 0
    para: int = 0
    over: int = 0
    excl: int = 0
    bold: int = 0

    def __post_init__(self):
        for b in BIASES:
            v = getattr(self, b)
            if int(v) != v or v < 0:
                raise ConfigError(f"k for {b} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, b, int(v))

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, b) for b in BIASES)

    def to_dict(self) -> dict[str, int]:
        return {b: getattr(self, b) for b in BIASES}

    @classmethod
    def from_mapping(cls, m: Mapping[str, int]) -> "KConfig":
        unknown = set(m) - set(BIASES)
        if unknown:
            raise ConfigError(f"unknown biases {sorted(unknown)}")
        return cls(**{b: int(m.get(b, 0)) for b in BIASES})


def normalize_grids(grids: Mapping[str, Sequence[int]]) -> dict[str, tuple[int, ...]]:
    """Full five-dimensional grids: sorted, de-duplicated, absent biases -> (0,)."""
    unknown = set(grids) - set(BIASES)
    if unknown:
        raise ConfigError(f"unknown biases in grid: {sorted(unknown)}")
    out = {}
    for b in BIASES:
        vals = tuple(sorted(set(int(v) for v in grids.get(b, (0,)))))
        if not vals:
            raise ConfigError(f"grid for {b} is empty")
        if vals[0] < 0:
            raise ConfigError(f"grid for {b} has negative values")
        out[b] = vals
    return out


def grid_size(grids) -> int:
    return math.prod(len(v) for v in normalize_grids(grids).values())


def in_grid(kc: KConfig, grids) -> bool:
    g = normalize_grids(grids)
    return all(getattr(kc, b) in g[b] for b in BIASES)


@dataclass
class SearchTrace:
    seed: int | None = None
    trials: list[tuple[int, KConfig, float]] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)

    def record(self, kc: KConfig, value: float) -> None:
        best = value if not self.best_so_far else max(self.best_so_far[-1], value)
        self.trials.append((len(self.trials), kc, float(value)))
        self.best_so_far.append(best)

    def __len__(self):
        return len(self.trials)

    def best(self) -> tuple[KConfig, float]:
        """Highest objective; ties go to the lexicographically smallest config."""
        if not self.trials:
            raise InputError("empty search trace")
        _, kc, v = min(self.trials, key=lambda t: (-t[2], t[1].as_tuple()))
        return kc, v

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", *(f"k_{b}" for b in BIASES), "objective", "best_so_far"])
            for (i, kc, v), b in zip(self.trials, self.best_so_far):
                w.writerow([i, *kc.as_tuple(), repr(v), repr(b)])


# -- objective --------------------------------------------------------------------------


def _accuracy(scored: Sequence[ScoredPair], pairs: Sequence[PreferencePair]) -> float:
    return sum(s.credit(p.gold) for s, p in zip(scored, pairs)) / len(pairs)


class Objective:
    """Validation accuracy of median intervention for a given :class:`KConfig`.

    Rankings, per-neuron medians and the patch-independent prefix of every
    validation sequence are computed once; each call then only reruns the last
    position, which gives exactly the rewards :func:`scoring.predict_cde` would.
    """

    def __init__(
        self,
        model: Model,
        matrix: ActivationMatrix,
        val_pairs: Sequence[PreferencePair],
        template: str = DEFAULT_TEMPLATE,
        rankings=None,
        medians=None,
    ):
        if not val_pairs:
            raise InputError("objective needs validation pairs")
        for i, p in enumerate(val_pairs):
            if p.gold is None:
                raise InputError(f"validation pair {i} has no gold label")
        self.model = model
        self.checksum = model.checksum()
        self.matrix = matrix
        self.pairs = list(val_pairs)
        self.rankings = rank_all(matrix) if rankings is None else rankings
        self.medians = all_medians(matrix) if medians is None else medians
        self.states = [
            (prefix_state(model, render(p.a, template)), prefix_state(model, render(p.b, template)))
            for p in self.pairs
        ]
        self.calls = 0

    def manifest(self, kc: KConfig):
        return build_manifest(self.checksum, self.matrix, kc.to_dict(), self.rankings, self.medians)

    def __call__(self, kc: KConfig) -> float:
        self.calls += 1
        manifest = self.manifest(kc)
        patch = compile_patch(self.model.config, manifest.patch()) if len(manifest) else CompiledPatch()
        scored = []
        for sa, sb in self.states:
            ra = last_token_step(self.model, sa, patch)[0]
            rb = last_token_step(self.model, sb, patch)[0]
            scored.append(ScoredPair.decide(ra, rb, "cirm"))
        return _accuracy(scored, self.pairs)


def objective(model: Model, matrix: ActivationMatrix, val_pairs, kc: KConfig, template: str = DEFAULT_TEMPLATE) -> float:
    """One-shot form of :class:`Objective`."""
    return Objective(model, matrix, val_pairs, template)(kc)


# -- searchers --------------------------------------------------------------------------


def grid_search(fn: Callable[[KConfig], float], grids, budget_cap: int = 20000) -> tuple[KConfig, SearchTrace]:
    """Evaluate every configuration in lexicographic order."""
    g = normalize_grids(grids)
    size = math.prod(len(v) for v in g.values())
    if size > budget_cap:
        raise ConfigError(f"grid has {size} configurations, above the budget cap {budget_cap}")
    trace = SearchTrace()
    for combo in itertools.product(*(g[b] for b in BIASES)):
        kc = KConfig(*combo)
        trace.record(kc, float(fn(kc)))
    return trace.best()[0], trace


def _categorical_logpdf(history: Sequence[KConfig], grids, b) -> np.ndarray:
    vals = grids[b]
    counts = np.ones(len(vals))
    idx = {v: i for i, v in enumerate(vals)}
    for kc in history:
        counts[idx[getattr(kc, b)]] += 1
    return np.log(counts / counts.sum())


def tpe_search(
    fn: Callable[[KConfig], float],
    grids,
    budget: int,
    seed: int = 0,
    gamma: float = 0.25,
    n_candidates: int = 16,
    n_startup: int | None = None,
    max_resample: int = 10,
) -> tuple[KConfig, SearchTrace]:
    """Independent-dimension categorical TPE over the grid.

    The first ``max(5, budget // 5)`` trials are uniform.  After that the
    history is split at the ``gamma`` quantile; each dimension gets add-one
    smoothed categorical densities l (good) and g (bad); ``n_candidates``
    draws from l are ranked by log l - log g.  Configurations already
    evaluated are redrawn up to ``max_resample`` times, then replaced by a
    uniform draw among the unseen ones.  Stops early once the grid is
    exhausted.
    """
    if budget < 1:
        raise InputError("budget must be >= 1")
    g = normalize_grids(grids)
    size = math.prod(len(v) for v in g.values())
    rng = np.random.default_rng(seed)
    startup = max(5, budget // 5) if n_startup is None else n_startup
    trace = SearchTrace(seed=seed)
    seen: set[KConfig] = set()

    def uniform() -> KConfig:
        return KConfig(*(g[b][int(rng.integers(len(g[b])))] for b in BIASES))

    def unseen_uniform() -> KConfig:
        rest = [c for c in itertools.product(*(g[b] for b in BIASES)) if KConfig(*c) not in seen]
        return KConfig(*rest[int(rng.integers(len(rest)))])

    def proposal() -> KConfig:
        if len(trace) < startup:
            return uniform()
        ranked = sorted(trace.trials, key=lambda t: (-t[2], t[0]))
        n_good = max(1, int(math.ceil(gamma * len(ranked))))
        good = [t[1] for t in ranked[:n_good]]
        bad = [t[1] for t in ranked[n_good:]]
        dens = {b: (_categorical_logpdf(good, g, b), _categorical_logpdf(bad, g, b)) for b in BIASES}
        best, best_score = None, -math.inf
        for _ in range(n_candidates):
            parts, score = [], 0.0
            for b in BIASES:
                lg, lb = dens[b]
                i = int(rng.choice(len(g[b]), p=np.exp(lg)))
                parts.append(g[b][i])
                score += lg[i] - lb[i]
            if score > best_score:
                best, best_score = KConfig(*parts), score
        return best

    while len(trace) < budget and len(seen) < size:
        kc = proposal()
        for _ in range(max_resample):
            if kc not in seen:
                break
            kc = proposal()
        if kc in seen:
            kc = unseen_uniform()
        seen.add(kc)
        trace.record(kc, float(fn(kc)))
    return trace.best()[0], trace
