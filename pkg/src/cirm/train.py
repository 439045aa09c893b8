"""Bradley-Terry training of the toy reward model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import LabeledPair
from .errors import ConfigError, DivergenceError, InputError, NonFiniteError
from .features import QueryResponse
from .model import Model, build_reward_graph, param_shapes
from .numerics import ExprGraph, value_and_gradient
from .probe import DEFAULT_TEMPLATE, render


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 3e-4
    optimizer: str = "adam"
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


def bt_loss(r_chosen: float, r_rejected: float) -> float:
    """``-log sigmoid(r_chosen - r_rejected)``, computed stably."""
    if not (math.isfinite(r_chosen) and math.isfinite(r_rejected)):
        raise InputError("bt_loss needs finite rewards")
    d = r_chosen - r_rejected
    return float(np.logaddexp(0.0, -d))


def build_bt_loss_graph(g: ExprGraph, r_chosen: str, r_rejected: str, name: str = "loss") -> str:
    """Add ``softplus(r_rejected - r_chosen)`` on two scalar nodes."""
    return g.softplus(g.add(r_rejected, g.scale(r_chosen, -1.0)), name=name)


def _loss_graph():
    g = ExprGraph()
    rc, rr = g.leaf("r_chosen", ()), g.leaf("r_rejected", ())
    return g, build_bt_loss_graph(g, rc, rr)


class _Grads:
    """Per-length reward graphs, built once and reused."""

    def __init__(self, model: Model):
        self.config = model.config
        self.names = list(param_shapes(model.config))
        self.graphs: dict[int, tuple[ExprGraph, str, str]] = {}
        self.loss_graph, self.loss_node = _loss_graph()

    def reward_grad(self, params, tokens):
        T = len(tokens)
        if T not in self.graphs:
            g = ExprGraph()
            ids, out = build_reward_graph(g, self.config, T)
            self.graphs[T] = (g, ids, out)
        g, ids, out = self.graphs[T]
        bindings = dict(params)
        bindings[ids] = np.asarray(tokens, dtype=np.float64)
        return value_and_gradient(g, bindings, self.names, out)

    def pair(self, params, chosen, rejected):
        rc, gc = self.reward_grad(params, chosen)
        rr, gr = self.reward_grad(params, rejected)
        b = {"r_chosen": np.float64(rc), "r_rejected": np.float64(rr)}
        loss, outer = value_and_gradient(self.loss_graph, b, ["r_chosen", "r_rejected"], self.loss_node)
        dc, dr = float(outer["r_chosen"]), float(outer["r_rejected"])
        return loss, {k: dc * gc[k] + dr * gr[k] for k in self.names}


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; return the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] *= s
    return norm


class _Adam:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1, bc2 = 1 - c.beta1**self.t, 1 - c.beta2**self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] = params[k] - c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


class _Sgd:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = params[k] - self.cfg.lr * g


def _encode(pairs, template, max_len):
    out = []
    for i, p in enumerate(pairs):
        if p.gold not in ("A", "B"):
            raise InputError(f"training pair {i} has no gold label")
        a = render(QueryResponse(p.query, p.response_a), template)
        b = render(QueryResponse(p.query, p.response_b), template)
        for t in (a, b):
            if len(t) > max_len:
                raise InputError(f"training pair {i} renders to {len(t)} tokens (max {max_len})")
        out.append((a, b) if p.gold == "A" else (b, a))
    return out


def train(
    model: Model,
    pairs: Sequence[LabeledPair],
    config: TrainConfig = TrainConfig(),
    template: str = DEFAULT_TEMPLATE,
    log=None,
) -> tuple[Model, list[float]]:
    """Mini-batch BT training; returns a new model and the per-epoch mean loss.

    Gradients are accumulated over a batch in pair order and scaled by ``1/B``
    before clipping, so results depend only on the seeds.
    """
    if not pairs:
        raise InputError("train needs at least one pair")
    data = _encode(pairs, template, model.config.max_seq_len)
    params = {k: v.copy() for k, v in model.params.items()}
    if config.epochs == 0:
        return Model(model.config, params), []
    opt = (_Adam if config.optimizer == "adam" else _Sgd)(config, params)
    grads_of = _Grads(model)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for j in batch:
                try:
                    loss, g = grads_of.pair(params, *data[j])
                except NonFiniteError as exc:
                    raise DivergenceError(f"non-finite values at epoch {epoch}, batch {bi}: {exc}") from exc
                batch_loss += loss
                for k in acc:
                    acc[k] += g[k]
            if not math.isfinite(batch_loss) or not all(np.all(np.isfinite(a)) for a in acc.values()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            for k in acc:
                acc[k] /= len(batch)
            clip_global_norm(acc, config.clip_norm)
            opt.step(params, acc)
            total += batch_loss
        curve.append(total / len(data))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} mean loss {curve[-1]:.6f}")
    return Model(model.config, params), curve


def write_loss_curve(curve: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve, 1):
            w.writerow([i, repr(float(v))])
