import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirm.errors import ChecksumError, ConfigError, FormatVersionError, InputError, ModelFileError
from cirm.model import (
    SITES,
    ModelConfig,
    NeuronAddress,
    Site,
    build_reward_graph,
    from_bytes,
    graph_bindings,
    init_model,
    last_token_step,
    load_model,
    prefix_state,
    save_model,
    score,
    score_intervened,
    to_bytes,
    trace_all_positions,
)
from cirm.numerics import ExprGraph, evaluate

from conftest import random_tokens


def _bytes(model):
    return b"".join(v.tobytes() for v in model.params.values())


# -- init ---------------------------------------------------------------------------------


def test_init_is_deterministic(tiny_config):
    assert _bytes(init_model(tiny_config)) == _bytes(init_model(tiny_config))


def test_init_seed_sensitivity(tiny_config):
    a = init_model(dataclasses.replace(tiny_config, init_seed=1))
    b = init_model(dataclasses.replace(tiny_config, init_seed=2))
    assert _bytes(a) != _bytes(b)


def test_init_statistics():
    m = init_model(ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=64, init_seed=5))
    for name, v in m.params.items():
        if name.endswith("norm"):
            assert np.all(v == 1.0)
    w = np.concatenate([v.ravel() for n, v in m.params.items() if not n.endswith("norm")])
    assert abs(w.mean()) < 1e-3
    assert abs(w.std() - 0.02) < 1e-3


def test_divisibility_error():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(d_model=63, n_heads=4)


@pytest.mark.parametrize("field", ["vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"])
def test_extents_must_be_positive(field):
    with pytest.raises(ConfigError):
        ModelConfig(**{field: 0})


def test_unknown_positional_mode():
    with pytest.raises(ConfigError):
        ModelConfig(positional="rotary")


def test_learned_positions_add_a_parameter(tiny_config):
    learned = init_model(dataclasses.replace(tiny_config, positional="learned"))
    assert learned.params["pos_emb"].shape == (tiny_config.max_seq_len, tiny_config.d_model)
    assert "pos_emb" not in init_model(tiny_config).params


def test_head_maps_d_model_to_one(tiny_model, tiny_config):
    assert tiny_model.params["head"].shape == (tiny_config.d_model, 1)


# -- addresses ----------------------------------------------------------------------------


def test_record_size_matches_invariant(tiny_model, tiny_config):
    _, rec = score(tiny_model, [1, 2, 3])
    c = tiny_config
    assert len(rec) == c.n_layers * (4 * c.d_model + 2 * c.d_ff + c.d_model)


def test_address_validation(tiny_config):
    NeuronAddress(1, Site.GATE, tiny_config.d_ff - 1).validate(tiny_config)
    with pytest.raises(InputError):
        NeuronAddress(0, Site.Q, tiny_config.d_model).validate(tiny_config)
    with pytest.raises(InputError):
        NeuronAddress(tiny_config.n_layers, Site.O, 0).validate(tiny_config)
    with pytest.raises(InputError):
        NeuronAddress.parse("0.Q")


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_flat_index_round_trip(data):
    cfg = ModelConfig(d_model=16, n_layers=3, n_heads=2, d_ff=24, max_seq_len=8)
    i = data.draw(st.integers(0, cfg.n_neurons - 1))
    a = cfg.address(i)
    assert cfg.flat_index(a) == i
    assert NeuronAddress.parse(str(a)) == a


def test_canonical_order_is_layer_site_index(tiny_config):
    addrs = tiny_config.addresses()
    assert addrs == sorted(addrs)
    assert [a.site for a in addrs[: 4 * tiny_config.d_model : tiny_config.d_model]] == list(SITES[:4])


# -- score ----------------------------------------------------------------------------------


def test_score_is_deterministic(tiny_model):
    toks = random_tokens(np.random.default_rng(0), 30)
    r1, rec1 = score(tiny_model, toks)
    r2, rec2 = score(tiny_model, toks)
    assert r1 == r2
    assert rec1.values.tobytes() == rec2.values.tobytes()


def test_last_token_changes_record(noisy_model):
    rng = np.random.default_rng(1)
    toks = random_tokens(rng, 20)
    other = toks.copy()
    other[-1] = (other[-1] + 1) % 256
    assert not np.array_equal(score(noisy_model, toks)[1].values, score(noisy_model, other)[1].values)


def test_score_errors(tiny_model, tiny_config):
    with pytest.raises(InputError):
        score(tiny_model, [])
    with pytest.raises(InputError):
        score(tiny_model, [1] * (tiny_config.max_seq_len + 1))
    with pytest.raises(InputError):
        score(tiny_model, [1, 256])
    with pytest.raises(InputError):
        score(tiny_model, [-1, 2])


def test_single_token_input(tiny_model):
    r, rec = score(tiny_model, [65])
    assert np.isfinite(r)


@pytest.mark.parametrize("positional", ["none", "learned"])
def test_two_phase_matches_full_trace(noisy_model, positional):
    model = noisy_model
    if positional == "learned":
        cfg = dataclasses.replace(noisy_model.config, positional="learned")
        model = init_model(cfg)
    toks = random_tokens(np.random.default_rng(2), 25)
    r, rec = score(model, toks)
    trace = trace_all_positions(model, toks)
    assert abs(trace[("reward", None)][-1] - r) < 1e-12
    for l in range(model.config.n_layers):
        for s in SITES:
            np.testing.assert_allclose(rec.site(l, s), trace[(l, s)][-1], rtol=0, atol=1e-12)


def test_graph_matches_inference(noisy_model):
    toks = random_tokens(np.random.default_rng(3), 12)
    g = ExprGraph()
    ids, out = build_reward_graph(g, noisy_model.config, len(toks))
    val = evaluate(g, graph_bindings(noisy_model, {"": toks}), out)[out]
    assert abs(float(val) - score(noisy_model, toks)[0]) < 1e-12


# -- intervention -----------------------------------------------------------------------------


def test_empty_patch_is_bitwise_identity(noisy_model):
    rng = np.random.default_rng(4)
    for _ in range(10):
        toks = random_tokens(rng, int(rng.integers(1, 40)))
        r0, rec0 = score(noisy_model, toks)
        r1, rec1 = score_intervened(noisy_model, toks, {})
        assert r0 == r1 and rec0.values.tobytes() == rec1.values.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5, allow_nan=False), st.integers(1, 6))
def test_patch_faithfulness(noisy_model, seed, value, n_addr):
    rng = np.random.default_rng(seed)
    cfg = noisy_model.config
    flat = rng.choice(cfg.n_neurons, size=n_addr, replace=False)
    patch = {cfg.address(int(i)): value + j for j, i in enumerate(flat)}
    _, rec = score_intervened(noisy_model, random_tokens(rng, 15), patch)
    for a, v in patch.items():
        assert rec[a] == v


def test_patching_observed_values_is_a_no_op(noisy_model):
    toks = random_tokens(np.random.default_rng(5), 18)
    r0, rec0 = score(noisy_model, toks)
    for layer in range(noisy_model.config.n_layers):
        patch = {a: v for a, v in rec0.items() if a.layer == layer}
        r1, _ = score_intervened(noisy_model, toks, patch)
        assert r1 == r0


def test_invalid_patch_address(tiny_model):
    with pytest.raises(InputError):
        score_intervened(tiny_model, [1, 2], {NeuronAddress(0, Site.UP, 10_000): 0.0})
    with pytest.raises(InputError):
        score_intervened(tiny_model, [1, 2], {"0.Q.0": 0.0})


@pytest.mark.parametrize("site", list(SITES))
def test_patch_in_layer_l_leaves_earlier_layers(noisy_model, site):
    cfg = noisy_model.config
    toks = random_tokens(np.random.default_rng(6), 14)
    _, rec0 = score(noisy_model, toks)
    L = cfg.n_layers - 1
    a = NeuronAddress(L, site, 1)
    r1, rec1 = score_intervened(noisy_model, toks, {a: rec0[a] + 3.0})
    cut = cfg.site_offset(L, SITES[0])
    assert rec1.values[:cut].tobytes() == rec0.values[:cut].tobytes()
    # sites of the same layer produced before the patched one are untouched too
    before = cfg.site_offset(L, site)
    assert rec1.values[:before].tobytes() == rec0.values[:before].tobytes()


def test_final_down_patch_acts_through_residual_only(noisy_model):
    cfg = noisy_model.config
    toks = random_tokens(np.random.default_rng(7), 10)
    r0, rec0 = score(noisy_model, toks)
    L = cfg.n_layers - 1
    a = NeuronAddress(L, Site.DOWN, 0)
    r1, rec1 = score_intervened(noisy_model, toks, {a: rec0[a] + 1.0})
    assert r1 != r0
    mask = np.ones(cfg.n_neurons, dtype=bool)
    mask[cfg.flat_index(a)] = False
    assert rec1.values[mask].tobytes() == rec0.values[mask].tobytes()


def test_attention_is_causal(noisy_model):
    rng = np.random.default_rng(8)
    toks = random_tokens(rng, 16)
    longer = np.concatenate([toks, random_tokens(rng, 9)])
    short, long_ = trace_all_positions(noisy_model, toks), trace_all_positions(noisy_model, longer)
    for key, v in short.items():
        np.testing.assert_allclose(long_[key][: len(toks)], v, rtol=0, atol=1e-13)


def test_prefix_state_reuse(noisy_model):
    toks = random_tokens(np.random.default_rng(9), 21)
    state = prefix_state(noisy_model, toks)
    a = NeuronAddress(0, Site.V, 2)
    assert score_intervened(noisy_model, state, {a: 0.5})[0] == score_intervened(noisy_model, toks, {a: 0.5})[0]


# -- persistence -----------------------------------------------------------------------------


@pytest.mark.parametrize("positional", ["none", "learned"])
def test_save_load_round_trip(tmp_path, tiny_config, positional):
    m = init_model(dataclasses.replace(tiny_config, positional=positional))
    p1, p2 = tmp_path / "a.cirm", tmp_path / "b.cirm"
    save_model(m, p1)
    m2 = load_model(p1)
    save_model(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert m2.config == m.config
    toks = [3, 1, 4, 1, 5]
    assert score(m, toks)[0] == score(m2, toks)[0]


def test_truncated_file(tmp_path, tiny_model):
    p = tmp_path / "m.cirm"
    save_model(tiny_model, p)
    data = p.read_bytes()
    for cut in (len(data) - 1, len(data) // 2, 10):
        p.write_bytes(data[:cut])
        with pytest.raises(ChecksumError):
            load_model(p)


def test_corrupted_byte(tiny_model):
    data = bytearray(to_bytes(tiny_model))
    data[100] ^= 0x01
    with pytest.raises(ChecksumError):
        from_bytes(bytes(data))


def test_future_format_version(tmp_path, tiny_model):
    with pytest.raises(FormatVersionError):
        from_bytes(to_bytes(tiny_model, version=2))


def test_missing_file(tmp_path):
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "absent.cirm")
