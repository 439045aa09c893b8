"""Locate bias-specific neurons and build intervention manifests.

Pipeline: score every validation example once and keep its last-token
activations (:func:`collect_activations`), correlate every neuron with every
bias feature by Spearman's rho (:func:`rank_neurons`), keep the top and bottom
``k`` per bias (:func:`select_bias_neurons`) and attach per-neuron medians
over the validation activations (:func:`build_manifest`).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import CorpusFormatError, InputError, ManifestMismatchError
from .features import BIASES, FeatureVector, QueryResponse, extract_features
from .model import Model, ModelConfig, NeuronAddress, PrefixState, encode_text, last_token_step, prefix_state
from .model import CompiledPatch

DEFAULT_TEMPLATE = "Q: {query}\nA: {response}"


def render(pair: QueryResponse, template: str = DEFAULT_TEMPLATE) -> np.ndarray:
    return encode_text(template.format(query=pair.query, response=pair.response))


def dataset_hash(dataset: Sequence[QueryResponse], template: str = DEFAULT_TEMPLATE) -> str:
    payload = json.dumps([template] + [[qr.query, qr.response] for qr in dataset], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ActivationMatrix:
    config: ModelConfig
    values: np.ndarray  # (n_examples, n_neurons)
    features: list[FeatureVector]
    model_checksum: str = ""
    valset_hash: str = ""

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_neurons:
            raise InputError(f"activation matrix has shape {self.values.shape}")
        if self.values.shape[0] != len(self.features):
            raise InputError("one feature vector per activation row is required")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def feature_column(self, bias: str) -> np.ndarray:
        return np.array([float(f[bias]) for f in self.features])

    def column(self, addr: NeuronAddress) -> np.ndarray:
        return self.values[:, self.config.flat_index(addr)]

    def save(self, path_stem) -> None:
        stem = Path(path_stem)
        with open(stem.with_suffix(".npy"), "wb") as fh:
            np.save(fh, self.values, allow_pickle=False)
        meta = {
            "model_checksum": self.model_checksum,
            "valset_hash": self.valset_hash,
            "config": self.config.__dict__,
            "features": [f.to_dict() for f in self.features],
        }
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, path_stem) -> "ActivationMatrix":
        stem = Path(path_stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        values = np.load(stem.with_suffix(".npy"), allow_pickle=False)
        return cls(
            ModelConfig(**meta["config"]),
            values,
            [FeatureVector.from_dict(f) for f in meta["features"]],
            meta["model_checksum"],
            meta["valset_hash"],
        )


def collect_activations(
    model: Model,
    dataset: Sequence[QueryResponse],
    template: str = DEFAULT_TEMPLATE,
    keep_prefix: bool = False,
):
    """Score each example and stack its last-token record.

    With ``keep_prefix=True`` also returns the per-example :class:`PrefixState`
    so later interventions on the same inputs can skip the prefix pass.
    """
    if not dataset:
        raise InputError("cannot collect activations over an empty dataset")
    rows, feats, states = [], [], []
    for i, qr in enumerate(dataset):
        toks = render(qr, template)
        if toks.size > model.config.max_seq_len:
            raise InputError(f"example {i} renders to {toks.size} tokens > max_seq_len={model.config.max_seq_len}")
        state = prefix_state(model, toks)
        _, record = last_token_step(model, state, CompiledPatch())
        rows.append(record.values)
        feats.append(extract_features(qr))
        if keep_prefix:
            states.append(state)
    matrix = ActivationMatrix(model.config, np.vstack(rows), feats, model.checksum(), dataset_hash(dataset, template))
    return (matrix, states) if keep_prefix else matrix


# -- correlation ---------------------------------------------------------------------


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, bool]:
    """Spearman's rho with average ranks for ties.

    Returns ``(rho, degenerate)``; a constant input has no rank variance, in
    which case rho is reported as 0 and ``degenerate`` is True.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"spearman needs equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("spearman needs at least two observations")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    rho = float(rx @ ry) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho))), False


@dataclass
class NeuronRanking:
    bias: str
    config: ModelConfig
    rho: np.ndarray
    degenerate: np.ndarray

    def __getitem__(self, addr: NeuronAddress) -> float:
        return float(self.rho[self.config.flat_index(addr)])

    @property
    def n_valid(self) -> int:
        return int((~self.degenerate).sum())


def rank_neurons(matrix: ActivationMatrix, bias: str) -> NeuronRanking:
    """Spearman's rho of every neuron column against one bias feature."""
    if bias not in BIASES:
        raise InputError(f"unknown bias {bias!r}")
    n = matrix.n_rows
    if n < 2:
        raise InputError("ranking needs at least two validation examples")
    feat = rankdata(matrix.feature_column(bias)) - (n + 1) / 2.0
    ranks = rankdata(matrix.values, axis=0) - (n + 1) / 2.0
    sff = float(feat @ feat)
    scc = np.einsum("ij,ij->j", ranks, ranks)
    degenerate = (scc == 0.0) | (sff == 0.0)
    rho = np.zeros(matrix.values.shape[1])
    ok = ~degenerate
    rho[ok] = (feat @ ranks[:, ok]) / np.sqrt(scc[ok] * sff)
    np.clip(rho, -1.0, 1.0, out=rho)
    return NeuronRanking(bias, matrix.config, rho, degenerate)


def select_bias_neurons(ranking: NeuronRanking, k: int) -> list[NeuronAddress]:
    """Top-``k`` and bottom-``k`` rho among non-degenerate neurons.

    Ties go to the lower canonical address.  When fewer than ``2k`` neurons are
    usable all of them are returned (see :func:`selection_truncated`).
    """
    if k < 0:
        raise InputError("k must be non-negative")
    if k == 0:
        return []
    idx = np.flatnonzero(~ranking.degenerate)
    rho = ranking.rho[idx]
    desc = idx[np.lexsort((idx, -rho))]
    if idx.size <= 2 * k:
        chosen = list(desc)
    else:
        top = desc[:k]
        rest = np.setdiff1d(idx, top)  # ties could otherwise put a neuron in both halves
        asc = rest[np.lexsort((rest, ranking.rho[rest]))]
        chosen = list(top) + list(asc[:k])
    cfg = ranking.config
    return [cfg.address(int(i)) for i in chosen]


def selection_truncated(ranking: NeuronRanking, k: int) -> bool:
    return ranking.n_valid < 2 * k


def compute_medians(matrix: ActivationMatrix, addresses) -> dict[NeuronAddress, float]:
    if matrix.n_rows == 0:
        raise InputError("empty activation matrix")
    return {a: float(np.median(matrix.column(a))) for a in addresses}


# -- manifest ----------------------------------------------------------------------------


@dataclass
class InterventionManifest:
    model_checksum: str
    valset_hash: str
    k_per_bias: dict[str, int]
    per_bias: dict[str, list[NeuronAddress]]
    medians: dict[NeuronAddress, float]
    truncated: dict[str, bool] = field(default_factory=dict)

    def addresses(self) -> list[NeuronAddress]:
        return sorted(self.medians)

    def __len__(self):
        return len(self.medians)

    def patch(self) -> dict[NeuronAddress, float]:
        return {a: self.medians[a] for a in self.addresses()}

    def check_model(self, model_or_checksum) -> None:
        got = model_or_checksum if isinstance(model_or_checksum, str) else model_or_checksum.checksum()
        if got != self.model_checksum:
            raise ManifestMismatchError(
                f"manifest was built for model {self.model_checksum[:12]}, not {got[:12]}"
            )

    def to_json(self) -> str:
        doc = {
            "model_checksum": self.model_checksum,
            "valset_hash": self.valset_hash,
            "k_per_bias": {b: int(self.k_per_bias.get(b, 0)) for b in BIASES},
            "per_bias_addresses": {b: [str(a) for a in self.per_bias.get(b, [])] for b in BIASES},
            "medians": {str(a): self.medians[a] for a in self.addresses()},
            "truncation_flags": {b: bool(self.truncated.get(b, False)) for b in BIASES},
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "InterventionManifest":
        try:
            doc = json.loads(text)
            medians = {NeuronAddress.parse(a): float(v) for a, v in doc["medians"].items()}
            per_bias = {b: [NeuronAddress.parse(a) for a in v] for b, v in doc["per_bias_addresses"].items()}
            m = cls(
                doc["model_checksum"],
                doc["valset_hash"],
                {b: int(v) for b, v in doc["k_per_bias"].items()},
                per_bias,
                medians,
                {b: bool(v) for b, v in doc["truncation_flags"].items()},
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise CorpusFormatError(f"malformed manifest: {exc}") from exc
        for b, addrs in m.per_bias.items():
            missing = [a for a in addrs if a not in m.medians]
            if missing:
                raise CorpusFormatError(f"manifest bias {b} lists {missing[0]} without a median")
        return m

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "InterventionManifest":
        return cls.from_json(Path(path).read_text())


def empty_manifest(model_checksum: str, valset_hash: str = "") -> InterventionManifest:
    return InterventionManifest(model_checksum, valset_hash, {b: 0 for b in BIASES}, {b: [] for b in BIASES}, {})


def rank_all(matrix: ActivationMatrix) -> dict[str, NeuronRanking]:
    return {b: rank_neurons(matrix, b) for b in BIASES}


def build_manifest(
    model_checksum: str,
    matrix: ActivationMatrix,
    k_config: Mapping[str, int],
    rankings: Mapping[str, NeuronRanking] | None = None,
    medians: Mapping[NeuronAddress, float] | None = None,
) -> InterventionManifest:
    """Select per-bias neuron sets and attach one shared median per neuron.

    ``model_checksum`` may also be a :class:`Model`.  ``rankings`` and
    ``medians`` may be passed in precomputed (the search loop does this).
    """
    if not isinstance(model_checksum, str):
        model_checksum = model_checksum.checksum()
    if matrix.model_checksum and matrix.model_checksum != model_checksum:
        raise ManifestMismatchError("activation matrix was collected from a different model")
    unknown = set(k_config) - set(BIASES)
    if unknown:
        raise InputError(f"unknown biases in k config: {sorted(unknown)}")
    per_bias, truncated, union = {}, {}, set()
    for b in BIASES:
        k = int(k_config.get(b, 0))
        if k < 0:
            raise InputError(f"k for {b} must be non-negative")
        if k == 0:
            per_bias[b], truncated[b] = [], False
            continue
        ranking = rankings[b] if rankings is not None else rank_neurons(matrix, b)
        per_bias[b] = select_bias_neurons(ranking, k)
        truncated[b] = selection_truncated(ranking, k)
        union.update(per_bias[b])
    addrs = sorted(union)
    if medians is None:
        med = compute_medians(matrix, addrs)
    else:
        med = {a: float(medians[a]) for a in addrs}
    return InterventionManifest(
        model_checksum,
        matrix.valset_hash,
        {b: int(k_config.get(b, 0)) for b in BIASES},
        per_bias,
        med,
        truncated,
    )


def all_medians(matrix: ActivationMatrix) -> dict[NeuronAddress, float]:
    """Median of every neuron column, keyed by address."""
    med = np.median(matrix.values, axis=0)
    return {matrix.config.address(i): float(v) for i, v in enumerate(med)}
