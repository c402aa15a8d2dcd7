import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from test_model import random_ensemble

from fwens.decoding import DecodeConfig, choose_token, filter_distribution, generate, generate_batch
from fwens.errors import ConfigError


@pytest.mark.parametrize("kw", [{"temperature": 0}, {"top_p": 0}, {"top_p": 1.5}, {"top_k": 0}, {"mode": "beam"}])
def test_invalid_decode(kw):
    with pytest.raises(ConfigError):
        DecodeConfig(**kw)


def test_greedy_tie_lowest_id():
    assert choose_token(np.array([0.1, 0.45, 0.45]), DecodeConfig(), None) == 1


def test_top_k_then_top_p_then_temperature():
    p = np.array([0.5, 0.3, 0.15, 0.05])
    q = filter_distribution(p, DecodeConfig.sampled(temperature=1.0, top_p=0.75, top_k=3))
    # top-3 renormalised: .526, .316, .158 -> nucleus at 0.75 keeps two
    np.testing.assert_allclose(q, [0.5 / 0.8, 0.3 / 0.8, 0, 0])
    q2 = filter_distribution(p, DecodeConfig.sampled(temperature=0.5, top_p=0.75, top_k=3))
    np.testing.assert_allclose(q2, np.array([0.25, 0.09, 0, 0]) / 0.34)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 5.0), st.integers(0, 1000))
def test_top_k_one_is_greedy(temp, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(8))
    rng = np.random.default_rng(seed)
    assert choose_token(p, DecodeConfig.sampled(temp, 0.99, 1), rng) == int(np.argmax(p))


def test_low_temperature_is_argmax():
    p = np.array([0.3, 0.36, 0.34])
    rng = np.random.default_rng(0)
    picks = {choose_token(p, DecodeConfig.sampled(1e-3, 1.0, 3), rng) for _ in range(50)}
    assert picks == {1}


def test_generation_deterministic_and_records_steps(rng):
    _, ens = random_ensemble(M=3)
    prefix = rng.integers(0, 20, size=4)
    a = generate(ens, prefix, DecodeConfig.sampled(), max_new=5, seed=7)
    b = generate(ens, prefix, DecodeConfig.sampled(), max_new=5, seed=7)
    assert a.tokens == b.tokens and len(a.steps) == 5
    assert a.steps[0].member_probs.shape == (3, 20)


def test_stop_token(rng):
    _, ens = random_ensemble(M=2)
    prefix = rng.integers(0, 20, size=4)
    first = generate(ens, prefix, max_new=1).tokens[0]
    g = generate(ens, prefix, max_new=6, stop_token=first)
    assert g.tokens == [first] and g.ended


def test_batch_matches_single(rng):
    _, ens = random_ensemble(M=2)
    prefixes = [rng.integers(0, 20, size=n) for n in (3, 6, 4)]
    batch = generate_batch(ens, prefixes, max_new=3)
    for p, g in zip(prefixes, batch):
        single = generate(ens, p, max_new=3)
        assert single.tokens == g.tokens
        for s1, s2 in zip(single.member_probs, g.member_probs):
            np.testing.assert_allclose(s1, s2, atol=1e-12)


def test_max_new_validated():
    _, ens = random_ensemble()
    with pytest.raises(ConfigError):
        generate(ens, [1, 2], max_new=0)
