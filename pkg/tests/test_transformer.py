import json

import numpy as np
import pytest

from icl_newton.errors import FormatError, ShapeMismatch
from icl_newton.transformer import (CAUSAL, FULL, NORMALIZED_RELU, SOFTMAX, AttnLayer, Head, MlpLayer, TFProgram,
                                    attention_weights, attn_forward, forward, mlp_forward, readout, run_program)


def rand_states(rng, width=6, cols=5):
    return rng.normal(size=(width, cols))


def test_zero_attention_is_residual(rng):
    h = rand_states(rng)
    z = np.zeros((6, 6))
    for act in (SOFTMAX, NORMALIZED_RELU):
        for mask in (CAUSAL, FULL):
            assert np.array_equal(attn_forward(AttnLayer((Head(z, z, z),), act, mask), h), h)


def test_relu_pair_is_linear_attention(rng):
    h = rand_states(rng, 6, 7)
    q, k, v = (rng.normal(size=(6, 6)) for _ in range(3))
    pair = AttnLayer((Head(q, k, v), Head(q, -k, -v)), NORMALIZED_RELU, FULL)
    scores = (q @ h).T @ (k @ h)  # [t, j]
    linear = h + (v @ h) @ scores.T / h.shape[1]
    assert np.max(np.abs(attn_forward(pair, h) - linear)) <= 1e-12 * max(1.0, np.max(np.abs(linear)))


def test_equal_value_pair_computes_absolute_value(rng):
    # the unsigned variant sums ReLU(a) + ReLU(-a) = |a|
    h = rand_states(rng, 4, 5)
    q, k, v = (rng.normal(size=(4, 4)) for _ in range(3))
    pair = AttnLayer((Head(q, k, v), Head(q, -k, v)), NORMALIZED_RELU, FULL)
    scores = np.abs((q @ h).T @ (k @ h))
    assert np.allclose(attn_forward(pair, h), h + (v @ h) @ scores.T / 5, atol=1e-12)


def test_softmax_rows_sum_to_one_and_causal(rng):
    h = rand_states(rng, 6, 8)
    head = Head(rng.normal(size=(6, 6)), rng.normal(size=(6, 6)), np.eye(6))
    layer = AttnLayer((head,), SOFTMAX, CAUSAL)
    w = attention_weights(layer, head, h)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(np.triu(w, 1) == 0.0)
    # position t never reads j > t: perturbing later columns leaves earlier outputs unchanged
    h2 = h.copy()
    h2[:, 5:] += 10.0
    assert np.allclose(attn_forward(layer, h)[:, :5], attn_forward(layer, h2)[:, :5], atol=1e-14)


def test_causal_relu_normalizes_by_position(rng):
    h = rand_states(rng, 3, 4)
    head = Head(np.eye(3), np.eye(3), np.eye(3))
    w = attention_weights(AttnLayer((head,), NORMALIZED_RELU, CAUSAL), head, h)
    raw = np.maximum(h.T @ h, 0.0)
    for t in range(4):
        assert np.allclose(w[t, :t + 1], raw[t, :t + 1] / (t + 1))
        assert np.all(w[t, t + 1:] == 0)


def test_sum_lemma(rng):
    # one head with constant score 1 on a ones row: every column receives sum_j h_j / N; value scaled by N
    h = rand_states(rng, 5, 6)
    h[4] = 1.0
    sel = np.zeros((1, 5))
    sel[0, 4] = 1.0
    value = np.zeros((5, 5))
    value[3, 0] = 6.0
    out = attn_forward(AttnLayer((Head(sel, sel, value),), NORMALIZED_RELU, FULL), h)
    assert np.allclose(out[3], h[3] + h[0].sum())


def test_mlp_examples(rng):
    h = rand_states(rng)
    ident = MlpLayer(np.eye(6), np.zeros(6), np.eye(6), np.zeros(6), "identity", False)
    assert np.allclose(mlp_forward(ident, h), h)
    block = np.zeros((6, 6))
    block[:3, :3] = np.eye(3)
    doubled = mlp_forward(MlpLayer.linear(block), h)
    assert np.allclose(doubled[:3], 2 * h[:3]) and np.allclose(doubled[3:], h[3:])
    assert np.array_equal(mlp_forward(MlpLayer.linear(np.zeros((6, 6))), h), h)
    relu = MlpLayer(np.eye(6), np.zeros(6), np.eye(6), np.zeros(6), "relu", False)
    assert np.allclose(mlp_forward(relu, h), np.maximum(h, 0))


def test_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        Head(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        MlpLayer(np.zeros((4, 6)), np.zeros(4), np.zeros((5, 4)), np.zeros(5), "relu", True)
    layer = AttnLayer((Head(np.eye(3), np.eye(3), np.eye(3)),), SOFTMAX, FULL)
    with pytest.raises(ShapeMismatch):
        attn_forward(layer, rand_states(rng, 4, 2))
    prog = TFProgram(3, (), np.eye(3)[0], 0.0)
    with pytest.raises(ShapeMismatch):
        run_program(prog, rand_states(rng, 4, 2))


def test_empty_program_reads_query(rng):
    h = rand_states(rng, 4, 3)
    prog = TFProgram(4, (), np.eye(4)[0], 0.0)
    assert run_program(prog, h) == h[0, -1]
    assert readout(TFProgram(4, (), np.eye(4)[1], 2.5), h) == pytest.approx(h[1, -1] + 2.5)


def test_forward_keeps_states_and_batches(rng):
    layer = (AttnLayer((Head(np.eye(4), np.eye(4), 0.1 * np.eye(4)),), SOFTMAX, CAUSAL), MlpLayer.identity(4))
    prog = TFProgram(4, (layer, layer), np.eye(4)[2], 0.0)
    stack = rng.normal(size=(3, 4, 5))
    out, states = forward(prog, stack, keep_states=True)
    assert len(states) == 2 and np.array_equal(states[-1], out)
    assert np.allclose(states[1], mlp_forward(layer[1], attn_forward(layer[0], states[0])))
    for i in range(3):
        assert np.allclose(run_program(prog, stack[i]), run_program(prog, stack)[i], atol=1e-14)


def test_program_json_round_trip(rng):
    layer = (AttnLayer((Head(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(4, 4))),),
                       NORMALIZED_RELU, FULL),
             MlpLayer(rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=4),
                      "relu", True))
    prog = TFProgram(4, (layer,), rng.normal(size=4), 0.5, -1, {"note": "x"})
    back = TFProgram.from_json(prog.to_json())
    h = rng.normal(size=(4, 5))
    assert run_program(back, h) == run_program(prog, h)
    assert back.meta == {"note": "x"}
    with pytest.raises(FormatError):
        TFProgram.from_json("{}")
    with pytest.raises(FormatError):
        TFProgram.from_json(json.dumps({"width": 4, "layers": [{"bogus": 1}], "readout": {"u": [0] * 4, "v": 0}}))
