import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embinv.embedders import (CallableEmbedder, EmbedderDescriptor, NoiseConfig, NoisyEmbedder,
                              SyntheticEmbedder, cosine_rows, cosine_similarity, embed_batch,
                              noisy_embed, unwrap)
from embinv.errors import ConfigError, ContractError

words = st.text(alphabet="abcdefgh", min_size=1, max_size=4)
texts = st.lists(words, min_size=1, max_size=6).map(" ".join)


def test_single_text_shape_and_norm(emb):
    v = embed_batch(["a"], emb)
    assert v.shape == (1, 32)
    assert abs(np.linalg.norm(v[0]) - 1) < 1e-5


def test_same_string_bit_identical(emb):
    a = emb.embed(["some text here"])
    b = SyntheticEmbedder(dim=32, seed=0).embed(["some text here"])
    assert a.tobytes() == b.tobytes()


def test_hello_world_matches_standalone_definition(emb):
    # recompute the synthetic embedder from its definition, independent of the class
    def row(tok):
        key = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little")
        return np.random.default_rng([0, key]).standard_normal(32)

    mean = (row("hello") + row("world")) / 2
    expected = mean / np.linalg.norm(mean)
    np.testing.assert_allclose(emb.embed(["hello world"])[0], expected, atol=1e-12)


def test_empty_text_rejected(emb):
    with pytest.raises(ContractError):
        emb.embed([""])
    with pytest.raises(ContractError):
        emb.embed([])


def test_truncation_is_recorded_not_raised():
    e = SyntheticEmbedder(dim=8, max_input_tokens=3)
    v = e.embed(["a b c d e"])
    np.testing.assert_array_equal(v, e.embed(["a b c"]))
    assert e.truncations == [(5, 3)]


def test_query_counter(emb):
    emb.embed(["a", "b"])
    emb.embed(["c"])
    assert emb.n_queries == 3


def test_descriptor_validation():
    with pytest.raises(ContractError):
        EmbedderDescriptor("m", 0)
    with pytest.raises((ConfigError, ContractError)):
        EmbedderDescriptor("m", 4, kind="telepathy")


def test_callable_embedder_contract_checks():
    desc = EmbedderDescriptor("fn", 3, unit_norm=True, kind="local-encoder")
    bad_norm = CallableEmbedder(lambda t: np.ones((len(t), 3)), desc)
    with pytest.raises(ContractError):
        bad_norm.embed(["x"])
    bad_shape = CallableEmbedder(lambda t: np.ones((len(t), 4)) / 2, desc)
    with pytest.raises(ContractError):
        bad_shape.embed(["x"])
    nan = CallableEmbedder(lambda t: np.full((len(t), 3), np.nan), desc)
    with pytest.raises(ContractError):
        nan.embed(["x"])


# -- cosine ---------------------------------------------------------------------------

def test_cosine_hand_values():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-6)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-6)
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_errors():
    with pytest.raises(ContractError):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ContractError):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_rows_matches_pairwise(rng):
    t = rng.standard_normal(5)
    rows = rng.standard_normal((4, 5))
    np.testing.assert_allclose(cosine_rows(t, rows), [cosine_similarity(t, r) for r in rows])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(a, b):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    c = cosine_similarity(a, b)
    assert c == cosine_similarity(b, a)
    assert abs(c) <= 1 + 1e-9


@settings(max_examples=60, deadline=None)
@given(texts)
def test_unit_norm_and_determinism(text):
    e = SyntheticEmbedder(dim=16, seed=3)
    v = e.embed([text, text])
    assert abs(np.linalg.norm(v[0]) - 1) <= 1e-5
    assert v[0].tobytes() == v[1].tobytes()


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=6), st.randoms())
def test_bag_of_tokens_permutation_invariance(tokens, rnd):
    e = SyntheticEmbedder(dim=16)
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    a, b = e.embed([" ".join(tokens), " ".join(shuffled)])
    assert a.tobytes() == b.tobytes()


# -- noise ------------------------------------------------------------------------------

def test_noise_lambda_zero_bit_exact(emb):
    texts_ = ["a b", "c", "hello world"]
    assert noisy_embed(emb, NoiseConfig(0.0, seed=5), texts_).tobytes() == emb.embed(texts_).tobytes()


def test_noise_half_normal_mean(emb):
    # E|lam * eps| = lam * sqrt(2/pi) for eps ~ N(0, 1)
    texts_ = [f"t{i}" for i in range(313)]  # 313 * 32 > 10k coordinates
    base = emb.embed(texts_)
    noisy = noisy_embed(emb, NoiseConfig(1.0, seed=0), texts_)
    mean_abs = np.abs(noisy - base).mean()
    expected = math.sqrt(2 / math.pi)
    assert abs(mean_abs - expected) / expected < 0.05


def test_noise_fresh_per_call_and_seeded(emb):
    n1 = NoisyEmbedder(emb, NoiseConfig(0.1, seed=7))
    n2 = NoisyEmbedder(emb, NoiseConfig(0.1, seed=7))
    a, b = n1.embed(["x"]), n1.embed(["x"])
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, n2.embed(["x"]))


def test_noise_wrapper_descriptor(emb):
    n = NoisyEmbedder(emb, NoiseConfig(0.5, seed=1))
    assert n.descriptor.unit_norm is False
    assert n.model_id != emb.model_id
    assert unwrap(n) is emb
    with pytest.raises(ContractError):
        NoiseConfig(-0.1, seed=0)


def test_noise_grid_runs(emb):
    base = emb.embed(["a b c"])
    gaps = [np.abs(noisy_embed(emb, NoiseConfig(lam, 0), ["a b c"]) - base).mean()
            for lam in (0.001, 0.01, 0.1, 1.0)]
    assert gaps == sorted(gaps)
