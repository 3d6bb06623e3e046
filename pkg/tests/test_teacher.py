import numpy as np
import pytest

from tokenbudget import teacher as tch
from tokenbudget.numerics import RngState


@pytest.fixture(scope="module")
def model():
    return tch.ToyDecoder(6, width=16, depth=2, heads=4, seed=1)


def test_single_token_attention(model):
    _, attn = tch.decode(RngState(0).normal(size=(1, 16)), model, capture_attention=True)
    np.testing.assert_array_equal(attn, np.ones((4, 1, 1)))


def test_attention_rows_stochastic(model):
    _, attn = tch.decode(RngState(1).normal(size=(9, 16)), model, capture_attention=True)
    assert attn.shape == (4, 9, 9)
    assert np.abs(attn.sum(axis=-1) - 1).max() < 1e-12


def test_no_capture_returns_none(model):
    out, attn = tch.decode(RngState(1).normal(size=(3, 16)), model)
    assert attn is None and out.shape == (3, 16)


def test_duplicate_tokens_get_equal_columns(model):
    x = RngState(2).normal(size=(6, 16))
    x[4] = x[1]
    _, attn = tch.decode(x, model, capture_attention=True)
    avg = attn.mean(axis=0)
    assert np.abs(avg[:, 1] - avg[:, 4]).max() < 1e-9


def test_width_mismatch(model):
    with pytest.raises(tch.ConfigError):
        tch.decode(np.zeros((3, 8)), model)


def test_pseudo_scores_examples():
    S = 5
    sig = tch.pseudo_scores(np.full((2, S, S), 1 / S), np.arange(3))
    np.testing.assert_allclose(sig.full_column_means, 1 / S)
    assert sig.scores.shape == (3,)
    peaked = np.full((1, S, S), 1e-6)
    peaked[0, :, 2] = 1 - 4e-6
    sig = tch.pseudo_scores(peaked, np.arange(S))
    assert sig.scores[2] == pytest.approx(1, abs=1e-5)
    assert abs(sig.full_column_means.sum() - 1) < 1e-9
    with pytest.raises(IndexError):
        tch.pseudo_scores(peaked, [5])


def test_head_average_commutes_with_column_mean():
    a = RngState(3).uniform(size=(4, 6, 6))
    a /= a.sum(axis=-1, keepdims=True)
    lhs = tch.pseudo_scores(a, np.arange(6)).full_column_means
    rhs = a.mean(axis=1).mean(axis=0)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-15)


def test_auxiliary_pass(model):
    stack = RngState(4).normal(size=(3, 5, 6))
    text = RngState(5).normal(size=(2, 16))
    a = tch.auxiliary_pass(stack, text, model)
    b = tch.auxiliary_pass(stack, text, model)
    assert a.scores.shape == (15,)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert abs(a.full_column_means.sum() - 1) < 1e-9


def test_auxiliary_pass_full_scale_length():
    model = tch.ToyDecoder(256, width=32, depth=1, heads=2, seed=0).astype(np.float32)
    stack = RngState(0).normal(size=(30, 100, 256)).astype(np.float32)
    assert tch.auxiliary_pass(stack, np.zeros((4, 32), np.float32), model).scores.shape == (3000,)


def test_text_count_with_value_mixing_disabled():
    m = tch.ToyDecoder(4, width=8, depth=1, heads=1, seed=0, value_mixing=False)
    stack = RngState(6).normal(size=(2, 3, 4))
    for n_text in (0, 1, 5):
        sig = tch.auxiliary_pass(stack, RngState(7).normal(size=(n_text, 8)), m)
        assert abs(sig.full_column_means.sum() - 1) < 1e-9


def test_weights_are_frozen(model):
    before = model.checksum()
    with pytest.raises(ValueError):
        model.weights["block0.W_q"][0, 0] = 1.0
    assert model.checksum() == before
    assert model.astype(np.float32).weights["visual_proj"].dtype == np.float32


def test_focus_raises_attention_to_focus_tokens():
    sig_dir = np.zeros(6)
    sig_dir[0] = 1
    m = tch.ToyDecoder(6, width=32, depth=2, heads=4, seed=0, focus=sig_dir, focus_gain=3.0)
    stack = RngState(8).normal(size=(2, 8, 6))
    stack[:, 3] = 3 * sig_dir
    s = tch.auxiliary_pass(stack, np.zeros((0, 32)), m).scores.reshape(2, 8)
    assert s[:, 3].mean() > 2 * np.delete(s, 3, axis=1).mean()


def test_token_sequence_locate():
    seq = tch.TokenSequence(np.zeros((6, 4)), np.zeros((2, 4)), 3)
    assert len(seq) == 8
    assert seq.locate(4) == ("visual", 1, 1)
    assert seq.locate(7) == ("text", None, 1)
    with pytest.raises(IndexError):
        seq.locate(8)
