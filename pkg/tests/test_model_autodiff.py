import math

import numpy as np
import pytest
from scipy.special import expit, softmax

from model.components import autodiff as ad
from model.components.autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeStateError,
    Tensor,
    backward,
)
from model.components.gradcheck import finite_difference_check, relative_error
from model.components.layers import (
    Dense,
    MhaParams,
    Mlp,
    attention_pairs,
    grouped_multihead_attention,
    init_mha,
    init_mlp,
    mlp_forward,
    multihead_attention,
)
from model.components.optim import clip_grad_norm, sgd_step


def identity_mha(dim):
    eye = Tensor(np.eye(dim))
    return MhaParams(wq=(eye,), wk=(eye,), wv=(eye,), wo=eye)


# ==========================================
# Tensor and tape tests
# ==========================================


def test_tensor_shapes_and_immutability():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0]).shape == (1, 2)
    t = Tensor(np.ones((2, 3)))
    assert not t.data.flags.writeable
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_ops_refuse_to_emit_non_finite_values():
    big = Tensor([[1e308]])
    with pytest.raises(NonFiniteError):
        ad.scale(big, 1e10)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_state_errors():
    empty = Tape()
    with pytest.raises(TapeStateError):
        backward(empty, Tensor(0.0))

    tape = Tape()
    w = Tensor(np.ones((2, 2)), name="w")
    loss = ad.sum_all(w, tape)
    with pytest.raises(TapeStateError):
        tape.grad(w)
    with pytest.raises(TapeStateError):
        backward(tape, Tensor(1.0))
    with pytest.raises(ShapeError):
        backward(tape, ad.mul(w, w, tape))

    backward(tape, loss)
    with pytest.raises(TapeStateError):
        backward(tape, loss)
    with pytest.raises(TapeStateError):
        ad.sum_all(w, tape)


def test_backward_identity_layer_and_unused_parameter():
    x = Tensor([[1.0, 2.0, 3.0]])
    w = Tensor(np.eye(3), name="w")
    b = Tensor(np.zeros((1, 3)), name="b")
    unused = Tensor(np.ones((2, 2)), name="unused")
    layer = Mlp((Dense(w, b, "identity"),))

    tape = Tape()
    loss = ad.sum_all(mlp_forward(layer, x, tape), tape)
    grads = backward(tape, loss, {"w": w, "b": b, "unused": unused})

    assert np.allclose(grads["w"], np.outer([1.0, 2.0, 3.0], np.ones(3)))
    assert np.allclose(grads["b"], np.ones((1, 3)))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_gradients_accumulate_over_reused_tensor():
    w = Tensor([[2.0, -1.0]], name="w")
    tape = Tape()
    loss = ad.sum_all(ad.add(ad.mul(w, w, tape), w, tape), tape)
    grads = backward(tape, loss, {"w": w})
    assert np.allclose(grads["w"], [[5.0, -1.0]])


# ==========================================
# Layer tests
# ==========================================


def test_mlp_identity_and_relu():
    eye = Tensor(np.eye(2))
    zero = Tensor(np.zeros((1, 2)))
    x = Tensor([[-1.0, 2.0]])
    out = mlp_forward(Mlp((Dense(eye, zero, "identity"),)), x)
    assert np.array_equal(out.data, x.data)
    out = mlp_forward(Mlp((Dense(eye, zero, "relu"),)), x)
    assert np.array_equal(out.data, [[0.0, 2.0]])


def test_mlp_matches_straight_line_evaluation():
    rng = np.random.default_rng(0)
    m = init_mlp(rng, [3, 5, 2], ["relu", "sigmoid"])
    m = Mlp(
        tuple(
            Dense(
                layer.weight,
                Tensor(rng.normal(size=layer.bias.shape)),
                layer.activation,
            )
            for layer in m.layers
        )
    )
    x = rng.normal(size=(4, 3))
    hidden = np.maximum(x @ m.layers[0].weight.data + m.layers[0].bias.data, 0.0)
    expected = expit(hidden @ m.layers[1].weight.data + m.layers[1].bias.data)
    assert np.allclose(mlp_forward(m, Tensor(x)).data, expected, atol=1e-12)


def test_mlp_rejects_wrong_width():
    m = init_mlp(np.random.default_rng(0), [3, 2], ["relu"])
    with pytest.raises(ShapeError):
        mlp_forward(m, Tensor(np.ones((1, 4))))
    with pytest.raises(ShapeError):
        Mlp(tuple(init_mlp(np.random.default_rng(0), [3, 2], ["relu"]).layers * 2))


def test_softmax_rows_examples():
    out = ad.softmax_rows(Tensor(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25)

    out = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)

    out = ad.softmax_rows(Tensor([[0.0, math.log(2), math.log(3)]]))
    assert np.allclose(out.data, [[1 / 6, 2 / 6, 3 / 6]])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = np.random.default_rng(1).normal(size=(5, 7)) * 10
    out = ad.softmax_rows(Tensor(x)).data
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    shifted = ad.softmax_rows(Tensor(x + np.arange(5)[:, None])).data
    assert np.allclose(out, shifted, atol=1e-12)


def test_multihead_attention_uniform_attention():
    p = identity_mha(3)
    v = np.array([[1.0, 2.0, 3.0], [3.0, 0.0, -1.0]])
    q = Tensor(np.zeros((4, 3)))
    out = multihead_attention(p, q, Tensor(np.zeros((2, 3))), Tensor(v))
    assert np.allclose(out.data, np.tile(v.mean(axis=0), (4, 1)))


def test_multihead_attention_single_key():
    rng = np.random.default_rng(2)
    p = init_mha(rng, in_dim=3, d_k=2, heads=2, out_dim=3)
    v = rng.normal(size=(1, 3))
    out = multihead_attention(
        p, Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(1, 3))), Tensor(v)
    )
    heads = np.concatenate([v @ w.data for w in p.wv], axis=1)
    assert np.allclose(out.data, np.tile(heads @ p.wo.data, (5, 1)))


def test_multihead_attention_reduces_to_scaled_dot_product():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(n, 4)) for n in (3, 5, 5))
    out = multihead_attention(identity_mha(4), Tensor(q), Tensor(k), Tensor(v))
    expected = softmax(q @ k.T / 2.0, axis=1) @ v
    assert np.allclose(out.data, expected, atol=1e-12)


def test_multihead_attention_shape_checks():
    p = identity_mha(3)
    with pytest.raises(ShapeError):
        multihead_attention(
            p, Tensor(np.ones((1, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))
        )
    with pytest.raises(ShapeError):
        multihead_attention(
            p, Tensor(np.ones((1, 2))), Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))
        )


def test_grouped_attention_matches_per_group_attention():
    rng = np.random.default_rng(4)
    p = init_mha(rng, in_dim=4, d_k=3, heads=2, out_dim=4)
    q_groups = np.array([0, 0, 1, 1, 1, 2])
    k_groups = np.array([0, 0, 0, 1, 1])
    q = rng.normal(size=(6, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    pairs = attention_pairs(q_groups, k_groups)
    out = grouped_multihead_attention(p, Tensor(q), Tensor(k), Tensor(v), pairs).data

    for g in (0, 1):
        rows, keys = q_groups == g, k_groups == g
        expected = multihead_attention(
            p, Tensor(q[rows]), Tensor(k[keys]), Tensor(v[keys])
        ).data
        assert np.allclose(out[rows], expected, atol=1e-12)
    # A query without keys gets a zero row
    assert np.allclose(out[q_groups == 2], 0.0)


# ==========================================
# Gradient checking tests
# ==========================================


def test_finite_difference_quadratic_and_zero():
    w = {"w": Tensor(3.0, name="w")}

    def square(params, tape):
        return ad.sum_all(ad.mul(params["w"], params["w"], tape), tape)

    assert finite_difference_check(square, w) < 1e-8

    tape = Tape()
    backward(tape, square(w, tape))
    assert tape.grad(w["w"])[0, 0] == pytest.approx(6.0)

    def zero(params, tape):
        return ad.scale(ad.sum_all(params["w"], tape), 0.0, tape)

    assert finite_difference_check(zero, w) == 0.0


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_gradients_of_structural_ops():
    rng = np.random.default_rng(5)
    params = {
        "logits": Tensor(rng.normal(size=(6, 1)), name="logits"),
        "values": Tensor(rng.normal(size=(4, 3)), name="values"),
        "extra": Tensor(rng.normal(size=(6, 2)), name="extra"),
    }
    gather = np.array([0, 1, 1, 3, 2, 0])
    segments = np.array([0, 0, 1, 1, 1, 2])

    def f(p, tape):
        alpha = ad.segment_softmax(p["logits"], segments, 3, tape)
        picked = ad.gather_rows(p["values"], gather, tape)
        joined = ad.concat([ad.mul(alpha, picked, tape), p["extra"]], axis=1, tape=tape)
        pooled = ad.scatter_add_rows(joined, segments, 3, tape)
        flat = ad.transpose(ad.reshape(pooled, 5, 3, tape), tape)
        shifted = ad.sub(flat, Tensor(0.1), tape)
        return ad.mean_all(ad.leaky_relu(shifted, 0.2, tape), tape)

    assert finite_difference_check(f, params) < 1e-5


def test_gradients_of_random_compositions():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mlp = init_mlp(rng, [4, 5, 4], ["sigmoid", "identity"], prefix="mlp")
        mha = init_mha(rng, in_dim=4, d_k=2, heads=2, out_dim=3, prefix="mha")
        params = {**mlp.named_parameters("mlp"), **mha.named_parameters("mha")}
        x = Tensor(rng.normal(size=(3, 4)))
        targets = rng.integers(0, 2, size=3)
        weights = rng.uniform(0.5, 2.0, size=3)

        def f(p, tape):
            m = Mlp.from_parameters("mlp", p, ["sigmoid", "identity"])
            h = mlp_forward(m, x, tape)
            att = multihead_attention(
                MhaParams.from_parameters("mha", p, 2), h, h, h, tape
            )
            probs = ad.sigmoid(ad.sum_cols(att, tape), tape)
            return ad.weighted_binary_cross_entropy(probs, targets, weights, tape=tape)

        err = finite_difference_check(f, params, max_entries=4, rng=rng)
        assert err < 1e-4, f"seed {seed}: relative error {err}"


# ==========================================
# Loss and optimizer tests
# ==========================================


def test_weighted_binary_cross_entropy_values():
    loss = ad.weighted_binary_cross_entropy(Tensor([[0.5]]), [1.0], [2.0])
    assert loss.item() == pytest.approx(2.0 * math.log(2))

    perfect = ad.weighted_binary_cross_entropy(
        Tensor([[1.0], [0.0]]), [1.0, 0.0], [1.0, 1.0]
    )
    assert perfect.item() == pytest.approx(0.0, abs=1e-9)

    empty = ad.weighted_binary_cross_entropy(Tensor(np.zeros((0, 1))), [], [])
    assert empty.item() == 0.0

    with pytest.raises(ShapeError):
        ad.weighted_binary_cross_entropy(Tensor([[0.5]]), [1.0, 0.0], [1.0])


def test_sgd_step_examples():
    w = {"w": Tensor(1.0, name="w")}
    same, _ = sgd_step(w, {"w": np.zeros((1, 1))}, lr=0.1)
    assert same["w"].item() == 1.0

    once, _ = sgd_step(w, {"w": np.ones((1, 1))}, lr=0.1, momentum=0.0)
    assert once["w"].item() == pytest.approx(0.9)

    step1, velocity = sgd_step(w, {"w": np.ones((1, 1))}, lr=0.1, momentum=0.9)
    step2, _ = sgd_step(step1, {"w": np.ones((1, 1))}, 0.1, 0.9, velocity)
    assert 1.0 - step2["w"].item() == pytest.approx(0.1 + 0.19)


def test_sgd_step_shape_errors():
    w = {"w": Tensor(np.ones((2, 2)), name="w")}
    with pytest.raises(ShapeError):
        sgd_step(w, {"w": np.ones((2, 3))}, lr=0.1)
    with pytest.raises(ShapeError):
        sgd_step(w, {}, lr=0.1)


def test_clip_grad_norm():
    grads = {"a": np.array([[3.0, 4.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(clipped["a"], [[0.6, 0.8]])
    untouched, _ = clip_grad_norm(grads, None)
    assert np.array_equal(untouched["a"], grads["a"])


def test_count_parameters():
    assert ad.count_parameters([Tensor(np.ones((2, 3))), Tensor(1.0)]) == 7
