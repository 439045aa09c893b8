"""Preference prediction: vanilla rewards, median intervention and two baselines.

``predict_te`` compares plain rewards.  ``predict_cde`` scores both responses
with the manifest's neurons clamped to the same median values, so differences
routed through those neurons cancel.  ``lp_score`` and :class:`LwrCalibration`
are the training-free length baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit

from .errors import InputError
from .features import QueryResponse
from .model import CompiledPatch, Model, compile_patch, last_token_step, prefix_state
from .probe import DEFAULT_TEMPLATE, InterventionManifest, render

METHODS = ("vanilla", "cirm", "lp", "lwr", "zero", "swap")
VARIANTS = ("median", "zero", "swap")


@dataclass(frozen=True)
class PreferencePair:
    query: str
    response_a: str
    response_b: str
    gold: Literal["A", "B"] | None = None

    def __post_init__(self):
        if not self.response_a or not self.response_b:
            raise InputError("both responses must be non-empty")
        if self.gold not in (None, "A", "B"):
            raise InputError(f"gold must be 'A', 'B' or None, got {self.gold!r}")

    @property
    def a(self) -> QueryResponse:
        return QueryResponse(self.query, self.response_a)

    @property
    def b(self) -> QueryResponse:
        return QueryResponse(self.query, self.response_b)

    def swapped(self) -> "PreferencePair":
        gold = None if self.gold is None else ("B" if self.gold == "A" else "A")
        return PreferencePair(self.query, self.response_b, self.response_a, gold)


@dataclass(frozen=True)
class ScoredPair:
    reward_a: float
    reward_b: float
    method: str
    choice: Literal["A", "B"]
    tie: bool

    @classmethod
    def decide(cls, reward_a: float, reward_b: float, method: str) -> "ScoredPair":
        # exact equality is a tie and goes to A
        tie = reward_a == reward_b
        return cls(reward_a, reward_b, method, "A" if reward_a >= reward_b else "B", tie)

    def credit(self, gold: str) -> float:
        """1 for a correct choice, 0.5 for a tie, 0 otherwise."""
        if self.tie:
            return 0.5
        return 1.0 if self.choice == gold else 0.0


def _finite(*xs):
    for x in xs:
        if not math.isfinite(x):
            raise InputError(f"non-finite reward {x}")


def bt_probability(r1: float, r2: float) -> float:
    """Probability that the first response is preferred: sigmoid(r1 - r2)."""
    _finite(r1, r2)
    return float(expit(r1 - r2))


def reward(model: Model, pair: QueryResponse, patch=None, template: str = DEFAULT_TEMPLATE) -> float:
    toks = render(pair, template)
    return last_token_step(model, prefix_state(model, toks), compile_patch(model.config, patch))[0]


def predict_te(model: Model, pair: PreferencePair, template: str = DEFAULT_TEMPLATE) -> ScoredPair:
    return ScoredPair.decide(reward(model, pair.a, None, template), reward(model, pair.b, None, template), "vanilla")


def _checked_patch(model: Model, manifest: InterventionManifest, values=None) -> CompiledPatch:
    manifest.check_model(model)
    patch = manifest.patch() if values is None else {a: values for a in manifest.addresses()}
    return compile_patch(model.config, patch)


def predict_cde(
    model: Model, pair: PreferencePair, manifest: InterventionManifest, template: str = DEFAULT_TEMPLATE
) -> ScoredPair:
    """Both responses scored with the same median patch."""
    patch = _checked_patch(model, manifest)
    ra = reward(model, pair.a, patch, template)
    rb = reward(model, pair.b, patch, template)
    return ScoredPair.decide(ra, rb, "cirm")


def intervention_variant(
    model: Model,
    pair: PreferencePair,
    manifest: InterventionManifest,
    variant: str = "median",
    template: str = DEFAULT_TEMPLATE,
    swap_direction: Literal["ab", "ba"] = "ab",
) -> ScoredPair:
    """Median, zero or swap replacement of the manifest neurons.

    ``swap`` patches response A with the activations response B produces at
    the manifest addresses and compares the result with B's plain reward
    (``swap_direction="ba"`` does the mirror image).
    """
    if variant == "median":
        return predict_cde(model, pair, manifest, template)
    if variant == "zero":
        patch = _checked_patch(model, manifest, 0.0)
        ra = reward(model, pair.a, patch, template)
        rb = reward(model, pair.b, patch, template)
        return ScoredPair.decide(ra, rb, "zero")
    if variant != "swap":
        raise InputError(f"unknown intervention variant {variant!r}")
    manifest.check_model(model)
    addrs = manifest.addresses()
    src, dst = (pair.b, pair.a) if swap_direction == "ab" else (pair.a, pair.b)
    src_state = prefix_state(model, render(src, template))
    r_src, rec = last_token_step(model, src_state, CompiledPatch())
    patch = compile_patch(model.config, {a: rec[a] for a in addrs})
    r_dst = last_token_step(model, prefix_state(model, render(dst, template)), patch)[0]
    if swap_direction == "ab":
        return ScoredPair.decide(r_dst, r_src, "swap")
    return ScoredPair.decide(r_src, r_dst, "swap")


# -- baselines -------------------------------------------------------------------------


def lp_score(reward: float, response, alpha: float = 0.001) -> float:
    """Length penalty: ``reward - alpha * character length of the response``."""
    if alpha < 0:
        raise InputError("alpha must be non-negative")
    text = response.response if isinstance(response, QueryResponse) else response
    _finite(reward)
    return reward - alpha * len(text)


class LwrCalibration:
    """Local linear fit of reward against response length (tricube weights).

    For a query length, the nearest ``frac`` of the calibration points define
    the bandwidth; points are weighted by ``(1 - (d/h)**3)**3`` and a weighted
    least-squares line is evaluated at the query length.  Points are sorted on
    construction so the fit does not depend on input order.
    """

    def __init__(self, lengths, rewards, frac: float = 0.3):
        lengths = np.asarray(lengths, dtype=np.float64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if lengths.shape != rewards.shape or lengths.ndim != 1:
            raise InputError("lengths and rewards must be equal-length 1-D sequences")
        if lengths.size < 5:
            raise InputError(f"LWR needs at least 5 points, got {lengths.size}")
        if np.all(lengths == lengths[0]):
            raise InputError("LWR needs at least two distinct lengths")
        if not (np.all(np.isfinite(lengths)) and np.all(np.isfinite(rewards))):
            raise InputError("LWR points must be finite")
        if not 0 < frac <= 1:
            raise InputError("frac must lie in (0, 1]")
        order = np.lexsort((rewards, lengths))
        self.lengths = lengths[order]
        self.rewards = rewards[order]
        self.frac = float(frac)
        self.span = max(2, int(math.ceil(frac * lengths.size)))

    def weights(self, length: float) -> np.ndarray:
        d = np.abs(self.lengths - length)
        h = np.partition(d, self.span - 1)[self.span - 1]
        if h == 0.0:
            return (d == 0.0).astype(np.float64)
        u = np.minimum(d / h, 1.0)
        return (1.0 - u**3) ** 3

    def __call__(self, length: float) -> float:
        x, y = self.lengths, self.rewards
        w = self.weights(float(length))
        sw = w.sum()
        live = w > 0
        # deviations from a reference keep constant data exact
        x0, y0 = x[live][0], y[live][0]
        xbar = x0 + float(w @ (x - x0)) / sw
        ybar = y0 + float(w @ (y - y0)) / sw
        dx = x - xbar
        sxx = float(w @ (dx * dx))
        if sxx <= 1e-12 * max(1.0, xbar * xbar):
            return ybar
        slope = float(w @ (dx * (y - ybar))) / sxx
        return ybar + slope * (float(length) - xbar)

    def debias(self, reward: float, length: float) -> float:
        return reward - self(length)


def lwr_calibrate(points: Sequence[tuple[float, float]], frac: float = 0.3) -> LwrCalibration:
    """Fit an :class:`LwrCalibration` from ``(length, reward)`` points."""
    pts = list(points)
    if len(pts) < 5:
        raise InputError(f"LWR needs at least 5 points, got {len(pts)}")
    lengths, rewards = zip(*pts)
    return LwrCalibration(lengths, rewards, frac)
