"""Toy decoder-only reward model with tapped projection sites.

Architecture: learned token embeddings (plus learned absolute position
embeddings when ``positional="learned"``; the default ``"none"`` adds no
position signal), ``n_layers`` pre-norm blocks (RMS norm, causal multi-head attention, SiLU-gated MLP), a final RMS norm
and a linear reward head read at the last position.

Seven sites per layer are tapped at the last token:
``Q, K, V, O`` (width ``d_model``), ``GATE, UP`` (width ``d_ff``) and ``DOWN``
(width ``d_model``).  :func:`score_intervened` overwrites tapped values at the
last position as soon as they are produced, so everything downstream consumes
the patched value.

Inference runs on plain numpy; :func:`build_reward_graph` expresses the same
computation as an :class:`~cirm.numerics.ExprGraph` for training.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ChecksumError, ConfigError, FormatVersionError, InputError, ModelFileError
from .numerics import ExprGraph

FORMAT_VERSION = 1
MAGIC = b"CIRM"
RMS_EPS = 1e-6


class Site(str, enum.Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"
    GATE = "GATE"
    UP = "UP"
    DOWN = "DOWN"


SITES = tuple(Site)
POSITIONAL = ("none", "learned")
_SITE_RANK = {s: i for i, s in enumerate(SITES)}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 512
    init_seed: int = 0
    positional: str = "none"

    def __post_init__(self):
        if self.positional not in POSITIONAL:
            raise ConfigError(f"positional must be one of {POSITIONAL}, got {self.positional!r}")
        for f in fields(self):
            if f.name not in ("init_seed", "positional") and int(getattr(self, f.name)) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.init_seed < 2**64:
            raise ConfigError("init_seed must fit in 64 unsigned bits")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def site_width(self, site: Site) -> int:
        return self.d_ff if site in (Site.GATE, Site.UP) else self.d_model

    @property
    def layer_width(self) -> int:
        return 5 * self.d_model + 2 * self.d_ff

    @property
    def n_neurons(self) -> int:
        return self.n_layers * self.layer_width

    def site_offset(self, layer: int, site: Site) -> int:
        off = layer * self.layer_width
        for s in SITES[: _SITE_RANK[site]]:
            off += self.site_width(s)
        return off

    def flat_index(self, addr: "NeuronAddress") -> int:
        addr.validate(self)
        return self.site_offset(addr.layer, addr.site) + addr.index

    def address(self, flat: int) -> "NeuronAddress":
        if not 0 <= flat < self.n_neurons:
            raise IndexError(flat)
        layer, rest = divmod(flat, self.layer_width)
        for s in SITES:
            w = self.site_width(s)
            if rest < w:
                return NeuronAddress(layer, s, rest)
            rest -= w
        raise AssertionError("unreachable")

    def addresses(self) -> list["NeuronAddress"]:
        return [self.address(i) for i in range(self.n_neurons)]


@dataclass(frozen=True)
class NeuronAddress:
    layer: int
    site: Site
    index: int

    def __post_init__(self):
        object.__setattr__(self, "site", Site(self.site))

    def sort_key(self):
        return (self.layer, _SITE_RANK[self.site], self.index)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __str__(self):
        return f"{self.layer}.{self.site.value}.{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NeuronAddress":
        try:
            layer, site, index = text.split(".")
            return cls(int(layer), Site(site), int(index))
        except ValueError as exc:
            raise InputError(f"bad neuron address {text!r}") from exc

    def validate(self, config: ModelConfig):
        if not 0 <= self.layer < config.n_layers:
            raise InputError(f"{self}: layer out of range for {config.n_layers} layers")
        if not 0 <= self.index < config.site_width(self.site):
            raise InputError(f"{self}: index out of range for site width {config.site_width(self.site)}")


class ActivationRecord:
    """Last-token activations for every tapped neuron, in canonical order."""

    def __init__(self, config: ModelConfig, values: np.ndarray):
        if values.shape != (config.n_neurons,):
            raise InputError(f"record has {values.shape}, expected ({config.n_neurons},)")
        self.config = config
        self.values = values

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, addr: NeuronAddress) -> float:
        return float(self.values[self.config.flat_index(addr)])

    def site(self, layer: int, site: Site) -> np.ndarray:
        off = self.config.site_offset(layer, site)
        return self.values[off : off + self.config.site_width(site)]

    def items(self):
        for i, v in enumerate(self.values):
            yield self.config.address(i), float(v)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names/order do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self._checksum = None

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def checksum(self) -> str:
        """sha256 of the serialized model file (cached; models are not mutated after construction)."""
        if self._checksum is None:
            self._checksum = hashlib.sha256(to_bytes(self)).hexdigest()
        return self._checksum


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {"tok_emb": (config.vocab_size, d)}
    if config.positional == "learned":
        shapes["pos_emb"] = (config.max_seq_len, d)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, 1)
    return shapes


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return Model(config, params)


# -- inference ------------------------------------------------------------------


def _embed(model: Model, toks: np.ndarray, start: int = 0) -> np.ndarray:
    x = model.params["tok_emb"][toks]
    if model.config.positional == "learned":
        x = x + model.params["pos_emb"][start : start + toks.shape[0]]
    return x

@functools.lru_cache(maxsize=64)
def _causal_masks(n: int):
    keep = np.tril(np.ones((n, n), dtype=bool))
    return np.where(keep, 0.0, -np.inf), keep.astype(np.float64)


def _rms(x, gain):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS) * gain


def _softmax_causal(s):
    bias, keep = _causal_masks(s.shape[-1])
    z = s - (s + bias).max(axis=-1, keepdims=True)
    np.minimum(z, 0.0, out=z)
    np.exp(z, out=z)
    z *= keep
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _softmax(s):
    z = s - s.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


class CompiledPatch(dict):
    """``(layer, site) -> (indices, values)``; build with :func:`compile_patch`."""


def compile_patch(config: ModelConfig, patch: Mapping[NeuronAddress, float] | None) -> CompiledPatch:
    """Group an address -> value mapping by (layer, site) as index/value arrays."""
    if isinstance(patch, CompiledPatch):
        return patch
    if not patch:
        return CompiledPatch()
    grouped: dict[tuple[int, Site], tuple[list, list]] = {}
    for addr, value in patch.items():
        if not isinstance(addr, NeuronAddress):
            raise InputError(f"patch key {addr!r} is not a NeuronAddress")
        addr.validate(config)
        value = float(value)
        if not np.isfinite(value):
            raise InputError(f"non-finite replacement for {addr}")
        idx, vals = grouped.setdefault((addr.layer, addr.site), ([], []))
        idx.append(addr.index)
        vals.append(value)
    out = CompiledPatch()
    for key, (idx, vals) in grouped.items():
        if len(set(idx)) != len(idx):
            raise InputError(f"duplicate address in patch at layer {key[0]} site {key[1].value}")
        out[key] = (np.array(idx, dtype=np.int64), np.array(vals))
    return out


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim != 1 or toks.size == 0:
        raise InputError("token sequence must be a non-empty 1-D sequence")
    if toks.size > config.max_seq_len:
        raise InputError(f"sequence length {toks.size} exceeds max_seq_len={config.max_seq_len}")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InputError("tokens must be integers")
    if toks.min() < 0 or toks.max() >= config.vocab_size:
        raise InputError(f"token out of range [0, {config.vocab_size})")
    return toks.astype(np.int64)


@dataclass(frozen=True)
class PrefixState:
    """Per-layer keys and values for every position but the last.

    Interventions only touch the last position, and under the causal mask no
    earlier position reads it, so this state is patch-independent and can be
    reused across interventions on the same sequence.
    """

    tokens: np.ndarray
    keys: tuple  # per layer, (H, T-1, d_head)
    values: tuple


def prefix_state(model: Model, tokens) -> PrefixState:
    cfg, p = model.config, model.params
    toks = check_tokens(cfg, tokens)
    P, H, dh = toks.size - 1, cfg.n_heads, cfg.d_head
    keys, values = [], []
    x = _embed(model, toks[:-1])
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        n = _rms(x, p[pre + "attn_norm"])
        qh = (n @ p[pre + "wq"]).reshape(P, H, dh).transpose(1, 0, 2)
        kh = (n @ p[pre + "wk"]).reshape(P, H, dh).transpose(1, 0, 2)
        vh = (n @ p[pre + "wv"]).reshape(P, H, dh).transpose(1, 0, 2)
        keys.append(kh)
        values.append(vh)
        if l == cfg.n_layers - 1:
            break  # the last layer's residual output at earlier positions is never read
        if P:
            att = _softmax_causal((qh @ kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)))
            mixed = (att @ vh).transpose(1, 0, 2).reshape(P, cfg.d_model)
            x = x + mixed @ p[pre + "wo"]
            n = _rms(x, p[pre + "mlp_norm"])
            gate = n @ p[pre + "w_gate"]
            x = x + (gate * expit(gate) * (n @ p[pre + "w_up"])) @ p[pre + "w_down"]
    return PrefixState(toks, tuple(keys), tuple(values))


def last_token_step(model: Model, state: PrefixState, compiled: CompiledPatch) -> tuple[float, ActivationRecord]:
    """Run the last position on top of ``state`` with ``compiled`` applied."""
    cfg, p = model.config, model.params
    toks = state.tokens
    T, H, dh, d = toks.size, cfg.n_heads, cfg.d_head, cfg.d_model
    record = np.empty(cfg.n_neurons)
    scale = 1.0 / np.sqrt(dh)

    def tap(layer, site, act):
        hit = compiled.get((layer, site))
        if hit is not None:
            act[hit[0]] = hit[1]
        off = cfg.site_offset(layer, site)
        record[off : off + act.shape[0]] = act
        return act

    x = _embed(model, toks[-1:], T - 1)[0]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        n = _rms(x, p[pre + "attn_norm"])
        q = tap(l, Site.Q, n @ p[pre + "wq"])
        k = tap(l, Site.K, n @ p[pre + "wk"])
        v = tap(l, Site.V, n @ p[pre + "wv"])
        keys = np.concatenate([state.keys[l], k.reshape(H, 1, dh)], axis=1)
        vals = np.concatenate([state.values[l], v.reshape(H, 1, dh)], axis=1)
        att = _softmax((keys @ q.reshape(H, dh, 1))[:, :, 0] * scale)
        mixed = (att[:, None, :] @ vals).reshape(d)
        x = x + tap(l, Site.O, mixed @ p[pre + "wo"])
        n = _rms(x, p[pre + "mlp_norm"])
        gate = tap(l, Site.GATE, n @ p[pre + "w_gate"])
        up = tap(l, Site.UP, n @ p[pre + "w_up"])
        x = x + tap(l, Site.DOWN, (gate * expit(gate) * up) @ p[pre + "w_down"])
    reward = float(_rms(x, p["final_norm"]) @ p["head"][:, 0])
    if not np.isfinite(reward):
        raise FloatingPointError("non-finite reward")
    return reward, ActivationRecord(cfg, record)


def score(model: Model, tokens) -> tuple[float, ActivationRecord]:
    """Reward and last-token activation record for one token sequence."""
    return last_token_step(model, prefix_state(model, tokens), CompiledPatch())


def score_intervened(model: Model, tokens, patch) -> tuple[float, ActivationRecord]:
    """Like :func:`score`, with last-token activations overwritten by ``patch``.

    ``patch`` maps ``NeuronAddress -> float``; a :class:`CompiledPatch` is
    accepted too when one patch is applied many times.  ``tokens`` may also be a
    :class:`PrefixState` computed earlier for the same model.
    """
    compiled = compile_patch(model.config, patch)
    state = tokens if isinstance(tokens, PrefixState) else prefix_state(model, tokens)
    return last_token_step(model, state, compiled)


def trace_all_positions(model: Model, tokens) -> dict[tuple[int, Site], np.ndarray]:
    """Every tapped site at every position as (T, width) arrays, plus the rewards.

    Straight full-sequence implementation; used to cross-check the two-phase
    path and the causal structure.  ``("reward", None)`` holds the reward read
    at each position.
    """
    cfg, p = model.config, model.params
    toks = check_tokens(cfg, tokens)
    T, H, dh = toks.size, cfg.n_heads, cfg.d_head
    out: dict = {}
    x = _embed(model, toks)
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        n = _rms(x, p[pre + "attn_norm"])
        q = out[(l, Site.Q)] = n @ p[pre + "wq"]
        k = out[(l, Site.K)] = n @ p[pre + "wk"]
        v = out[(l, Site.V)] = n @ p[pre + "wv"]
        qh = q.reshape(T, H, dh).transpose(1, 0, 2)
        kh = k.reshape(T, H, dh).transpose(1, 2, 0)
        vh = v.reshape(T, H, dh).transpose(1, 0, 2)
        att = _softmax_causal((qh @ kh) * (1.0 / np.sqrt(dh)))
        mixed = (att @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
        o = out[(l, Site.O)] = mixed @ p[pre + "wo"]
        x = x + o
        n = _rms(x, p[pre + "mlp_norm"])
        gate = out[(l, Site.GATE)] = n @ p[pre + "w_gate"]
        up = out[(l, Site.UP)] = n @ p[pre + "w_up"]
        down = out[(l, Site.DOWN)] = (gate * expit(gate) * up) @ p[pre + "w_down"]
        x = x + down
    out[("reward", None)] = (_rms(x, p["final_norm"]) @ p["head"])[:, 0]
    return out


# -- training graph ---------------------------------------------------------------


def build_reward_graph(g: ExprGraph, config: ModelConfig, length: int, prefix: str = "") -> tuple[str, str]:
    """Add the reward computation for one sequence of ``length`` tokens to ``g``.

    Parameters become shared leaves named as in :func:`param_shapes`; the token
    ids are a per-sequence leaf ``{prefix}ids``.  Returns ``(ids_leaf, reward_node)``.
    """
    if not 1 <= length <= config.max_seq_len:
        raise InputError(f"sequence length {length} outside [1, {config.max_seq_len}]")
    shapes = param_shapes(config)
    P = {name: g.leaf(name, shape) for name, shape in shapes.items()}
    T, H, dh, d = length, config.n_heads, config.d_head, config.d_model

    ids = g.leaf(prefix + "ids", (T,))
    x = g.embedding(P["tok_emb"], ids)
    if config.positional == "learned":
        x = g.add(x, g.slice(P["pos_emb"], 0, 0, T))
    for l in range(config.n_layers):
        pre = f"layers.{l}."
        n = g.rms_norm(x, P[pre + "attn_norm"], RMS_EPS)
        q = g.matmul(n, P[pre + "wq"])
        k = g.matmul(n, P[pre + "wk"])
        v = g.matmul(n, P[pre + "wv"])
        qh = g.transpose(g.reshape(q, (T, H, dh)), (1, 0, 2))
        kh = g.transpose(g.reshape(k, (T, H, dh)), (1, 2, 0))
        vh = g.transpose(g.reshape(v, (T, H, dh)), (1, 0, 2))
        att = g.softmax(g.scale(g.matmul(qh, kh), 1.0 / np.sqrt(dh)), causal=True)
        mixed = g.reshape(g.transpose(g.matmul(att, vh), (1, 0, 2)), (T, d))
        x = g.add(x, g.matmul(mixed, P[pre + "wo"]))
        n = g.rms_norm(x, P[pre + "mlp_norm"], RMS_EPS)
        gate = g.matmul(n, P[pre + "w_gate"])
        up = g.matmul(n, P[pre + "w_up"])
        x = g.add(x, g.matmul(g.mul(g.silu(gate), up), P[pre + "w_down"]))
    last = g.slice(x, 0, T - 1, T)
    h = g.rms_norm(last, P["final_norm"], RMS_EPS)
    reward = g.sum(g.matmul(h, P["head"]), name=prefix + "reward")
    return ids, reward


# -- persistence --------------------------------------------------------------------

_CONFIG_FMT = "<7IQ"  # six sizes, positional code, init seed


def _checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def to_bytes(model: Model, version: int = FORMAT_VERSION) -> bytes:
    c = model.config
    parts = [
        MAGIC,
        struct.pack("<I", version),
        struct.pack(
            _CONFIG_FMT,
            c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len,
            POSITIONAL.index(c.positional), c.init_seed,
        ),
    ]
    for name in param_shapes(c):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum64(body))


def from_bytes(data: bytes) -> Model:
    header = len(MAGIC) + 4 + struct.calcsize(_CONFIG_FMT)
    if len(data) < header + 8:
        raise ChecksumError(f"model file truncated ({len(data)} bytes)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum64(body) != stored:
        raise ChecksumError("model file checksum mismatch (truncated or corrupted)")
    if body[:4] != MAGIC:
        raise ModelFileError("not a CIRM model file (bad magic)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"model file format version {version}; this build reads {FORMAT_VERSION}")
    *sizes, pos_code, init_seed = struct.unpack(_CONFIG_FMT, body[8:header])
    if pos_code >= len(POSITIONAL):
        raise ModelFileError(f"unknown positional code {pos_code}")
    config = ModelConfig(*sizes, init_seed=init_seed, positional=POSITIONAL[pos_code])
    params, pos = {}, header
    for name, shape in param_shapes(config).items():
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(body):
            raise ModelFileError(f"model file ends inside parameter {name}")
        params[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise ModelFileError("trailing bytes after parameters")
    return Model(config, params)


def save_model(model: Model, path) -> str:
    """Write the model file; returns the model checksum."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    return from_bytes(data)


def encode_text(text: str) -> np.ndarray:
    """Byte-level tokenization (UTF-8 bytes)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def graph_bindings(model: Model, token_seqs: Mapping[str, Sequence[int]]) -> dict[str, np.ndarray]:
    """Leaf bindings for :func:`build_reward_graph` graphs: params plus per-prefix ids."""
    b = dict(model.params)
    for prefix, toks in token_seqs.items():
        b[prefix + "ids"] = np.asarray(toks, dtype=np.float64)
    return b
