import math

import numpy as np
import pytest

from conftest import randomize, random_sentence, tiny_model
from sslab.autodiff import grad_check
from sslab.models import DecoderState, ModelConfig, attention, decode_step, encode, sinusoid_table
from sslab.training import make_batch, nll_loss


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(arch="gru")
    with pytest.raises(ValueError):
        ModelConfig(arch="transformer", hidden_dim=9, heads=2)
    with pytest.raises(ValueError):
        ModelConfig(emb_dim=0)
    assert ModelConfig(arch="lstm").layers == 1
    assert ModelConfig(arch="transformer").layers == 2


def test_encode_shape_and_determinism(arch):
    model = tiny_model(arch)
    src = [3, 4, 5, 6, 7, 8, 9]
    out = encode(model, src)
    assert out.shape == (7, model.config.hidden_dim)
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, encode(model, src))


def test_lstm_is_order_sensitive():
    model = tiny_model("lstm")
    a = encode(model, [3, 4, 5, 6])
    b = encode(model, [6, 5, 4, 3])
    assert not np.allclose(a[-1], b[-1])


def test_encode_rejects_out_of_vocab(arch):
    model = tiny_model(arch)
    with pytest.raises(ValueError):
        encode(model, [3, 99])


def test_attention_examples():
    w, ctx = attention([1.0, 0.0], [[2.0, 1.0]])
    np.testing.assert_allclose(w, [1.0])
    w, _ = attention([0.3, 0.1], [[1.0, 1.0]] * 4)
    np.testing.assert_allclose(w, [0.25] * 4, atol=1e-15)
    w, ctx = attention([1.0], [[math.log(3.0)], [0.0]], values=[[2.0], [6.0]], scale=False)
    np.testing.assert_allclose(w, [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(ctx, [0.75 * 2 + 0.25 * 6], atol=1e-14)
    with pytest.raises(ValueError):
        attention([1.0], np.zeros((0, 1)))
    with pytest.raises(ValueError):
        attention([1.0, 2.0], [[1.0]])


def _rollout(model, src, prefix):
    g = model.graph(record=False)
    enc = model.encode(g, np.asarray(src)[None, :])
    state, rows = None, []
    for tok in [1] + list(prefix):
        logp, state = decode_step(model, tok, state, enc, g)
        rows.append(logp[0])
    return np.array(rows), state


def test_decode_step_is_a_distribution_and_counts_steps(arch):
    model = tiny_model(arch)
    rows, state = _rollout(model, [3, 5, 7], [4, 6, 8])
    np.testing.assert_allclose(np.exp(rows).sum(axis=-1), 1.0, atol=1e-9)
    assert rows.shape == (4, model.config.tgt_vocab)
    assert isinstance(state, DecoderState) and state.step == 4
    again, _ = _rollout(model, [3, 5, 7], [4, 6, 8])
    np.testing.assert_array_equal(rows, again)


def test_incremental_decoding_equals_full_prefix(arch, rng):
    model = tiny_model(arch, seed=3)
    for _ in range(3):
        src, tgt = random_sentence(rng), random_sentence(rng)
        rows, _ = _rollout(model, src, tgt)
        g = model.graph(record=False)
        enc = model.encode(g, np.asarray(src)[None, :])
        full = g.log_softmax(model.logits(g, enc, np.asarray([[1] + tgt]))).value[0]
        np.testing.assert_allclose(rows, full, atol=1e-9, rtol=0)


def test_state_of_other_architecture_is_rejected():
    lstm, trf = tiny_model("lstm"), tiny_model("transformer")
    g = trf.graph(record=False)
    enc = trf.encode(g, np.array([[3, 4]]))
    _, state = decode_step(trf, 1, None, enc, g)
    with pytest.raises(ValueError):
        lstm.step(g, np.array([1]), state, enc)


def test_step_loss_passes_grad_check(arch):
    model = randomize(tiny_model(arch, emb_dim=4, hidden_dim=4, vocab=7, layers=1))
    batch = make_batch([[3, 4, 5], [6, 5]], [[4, 3, 6], [5, 6]])
    g = model.graph()
    g.output("loss", nll_loss(model, batch, g=g))
    assert grad_check(g, "loss") < 1e-4


def test_sinusoid_table_shape():
    t = sinusoid_table(10, 6)
    assert t.shape == (10, 6)
    np.testing.assert_allclose(t[0, 0::2], 0.0)
    np.testing.assert_allclose(t[0, 1::2], 1.0)
