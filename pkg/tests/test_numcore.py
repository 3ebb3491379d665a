import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fitflow.errors import ContractError, DimensionError, FormatError, TrainingError
from fitflow.numcore import (
    ParamStore,
    Tape,
    Tensor,
    adam_update,
    affine,
    dumps_checkpoint,
    finite_diff_check,
    loads_checkpoint,
    ops,
    value_and_grad,
)
from fitflow.numcore import nn


def test_affine_identity_constant_and_hand_case():
    W = Tensor(np.eye(2))
    b = Tensor(np.zeros(2))
    np.testing.assert_array_equal(affine(Tensor([1.0, 2.0]), W, b).data, [1.0, 2.0])
    out = affine(Tensor([7.0, -4.0]), Tensor(np.zeros((2, 1))), Tensor([3.0]))
    np.testing.assert_array_equal(out.data, [3.0])
    out = affine(Tensor([5.0]), Tensor([[2.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [11.0])


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine(Tensor(np.ones(3)), Tensor(np.ones((2, 2))))


def test_backward_examples():
    store = ParamStore()
    w = store.add("w", [1.0])
    other = store.add("other", [5.0])
    with Tape() as tape:
        loss = ops.tsum(ops.mul(w, 3.0))
    gw, go = tape.gradient(loss, [w, other])
    assert gw.tolist() == [3.0]
    assert go.tolist() == [0.0]

    v = store.add("v", [1.0, -2.0])
    with Tape() as tape:
        loss = ops.tsum(ops.square(v))
    (gv,) = tape.gradient(loss, [v])
    assert gv.tolist() == [2.0, -4.0]


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(w, 2.0)
    with pytest.raises(ContractError):
        tape.gradient(y, [w])


def test_no_recording_without_tape():
    w = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    ops.mul(w, 2.0)
    assert tape.nodes == []


def test_shared_subexpression_visited_once():
    w = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(w, w)
        loss = ops.tsum(ops.add(y, y))
    (g,) = tape.gradient(loss, [w])
    assert g.tolist() == [8.0]
    assert len(tape.nodes) == 3


def test_adam_first_step_closed_form():
    store = ParamStore()
    store.add("a", np.zeros((2, 3)))
    adam_update(store, {"a": np.ones((2, 3))}, lr=0.1)
    np.testing.assert_allclose(store["a"].data, -0.1 / (1.0 + 1e-8), rtol=0, atol=1e-15)
    assert store.steps["a"] == 1


def test_adam_zero_gradient_leaves_params():
    store = ParamStore()
    store.add("a", [1.0, 2.0])
    adam_update(store, {"a": np.zeros(2)}, lr=0.1)
    assert store["a"].data.tolist() == [1.0, 2.0]


def test_adam_two_step_trace():
    # Hand trace with g=1 twice: m=[0.1, 0.19], v=[0.001, 0.001999]; both
    # bias-corrected ratios are exactly 1, so each step is lr/(1+eps) < lr.
    store = ParamStore()
    store.add("a", [0.0])
    lr, eps = 0.1, 1e-8
    adam_update(store, {"a": np.ones(1)}, lr=lr, eps=eps)
    first = -store["a"].data[0]
    adam_update(store, {"a": np.ones(1)}, lr=lr, eps=eps)
    second = -store["a"].data[0] - first
    m2, v2 = 0.19, 0.001999
    expected = lr * (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.999**2)) + eps)
    assert abs(second - expected) < 1e-15
    assert second < lr and first < lr


def test_adam_non_finite_gradient_names_parameter():
    store = ParamStore()
    store.add("layer.w", [1.0])
    with pytest.raises(TrainingError, match="layer.w"):
        adam_update(store, {"layer.w": np.array([np.nan])}, lr=0.1)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(0, 1000))
def test_adam_first_update_direction_scale_invariant(scale, seed):
    g = np.random.default_rng(seed).standard_normal(6)
    a, b = ParamStore(), ParamStore()
    a.add("p", np.zeros(6))
    b.add("p", np.zeros(6))
    adam_update(a, {"p": g}, lr=0.01)
    adam_update(b, {"p": g * scale}, lr=0.01)
    assert np.array_equal(np.sign(a["p"].data), np.sign(b["p"].data))


def test_frozen_parameters_untouched():
    store = ParamStore()
    store.add("enc.w", [1.0])
    store.add("dec.w", [1.0])
    store.freeze("enc.")
    adam_update(store, {"enc.w": np.ones(1), "dec.w": np.ones(1)}, lr=0.1)
    assert store["enc.w"].data.tolist() == [1.0]
    assert store["dec.w"].data[0] < 1.0


def test_finite_diff_quadratic_and_constant():
    store = ParamStore()
    w = store.add("w", [0.3, -1.2, 2.0])
    assert finite_diff_check(lambda: ops.tsum(ops.square(w)), store) < 1e-6
    assert finite_diff_check(lambda: Tensor(4.0) + ops.mul(w, 0.0).sum(), store) == 0.0


def _rand(rng, *shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize(
    "build",
    [
        lambda x: ops.gelu(x),
        lambda x: ops.sigmoid(x),
        lambda x: ops.softmax(x, axis=-1),
        lambda x: ops.log_softmax(x, axis=-1),
        lambda x: ops.layer_norm(x),
        lambda x: ops.tanh(x),
        lambda x: ops.exp(ops.mul(x, 0.3)),
        lambda x: ops.clip(x, -0.5, 0.5),
        lambda x: ops.concat([x, ops.mul(x, 2.0)], axis=1),
        lambda x: ops.transpose(x, (1, 0, 2)),
        lambda x: x[:, 1:3],
        lambda x: ops.gather_windows(x, 2, 2),
        lambda x: ops.scatter_windows(ops.reshape(x, (2, 2, 2, 3)), 2),
        lambda x: ops.matmul(x, ops.swap_last(x)),
        lambda x: ops.div(x, ops.add(ops.square(x), 1.0)),
    ],
)
def test_primitive_gradients(build):
    rng = np.random.default_rng(3)
    store = ParamStore()
    x = store.add("x", _rand(rng, 2, 4, 3))
    probe = _rand(rng, *build(Tensor(x.data)).shape)
    assert finite_diff_check(lambda: ops.tsum(ops.mul(build(x), probe)), store) < 1e-6


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(0)
    store = ParamStore()
    logits = store.add("z", _rand(rng, 3, 4, 5))
    targets = rng.integers(0, 5, size=(3, 4))
    loss = ops.cross_entropy(Tensor(logits.data), targets).item()
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    ref = -np.mean(np.take_along_axis(lp, targets[..., None], -1))
    assert abs(loss - ref) < 1e-12
    assert finite_diff_check(lambda: ops.cross_entropy(logits, targets), store) < 1e-6


def test_layers_gradients():
    rng = np.random.default_rng(1)
    store = ParamStore()
    block = nn.TransformerBlock(store, "blk", 6, 8, rng)
    conv = nn.Conv1d(store, "conv", 6, 4, 2, 2, rng)
    up = nn.ConvTranspose1d(store, "up", 4, 6, 2, 2, rng)
    emb = store.add("emb", _rand(rng, 5, 6))
    idx = rng.integers(0, 5, size=(3, 4))

    def loss():
        h = ops.take_rows(emb, idx)
        y = up(conv(block(h)))
        return ops.mean(ops.square(y))

    assert finite_diff_check(loss, store) < 1e-6


def test_conv_shapes_and_adjoint():
    rng = np.random.default_rng(2)
    store = ParamStore()
    conv = nn.Conv1d(store, "c", 3, 5, 5, 5, rng)
    up = nn.ConvTranspose1d(store, "u", 5, 3, 5, 5, rng)
    x = Tensor(_rand(rng, 2, 10, 3))
    assert conv(x).shape == (2, 2, 5)
    assert up(conv(x)).shape == (2, 10, 3)
    # <gather(x), p> == <x, scatter(p)>
    p = _rand(rng, 2, 2, 5, 3)
    lhs = np.sum(ops.gather_windows(x, 5, 5).data * p)
    rhs = np.sum(x.data * ops.scatter_windows(Tensor(p), 5).data)
    assert abs(lhs - rhs) < 1e-12


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.standard_normal((3, 4)), "b": np.array(2.5), "c": rng.standard_normal(7)}
    back = loads_checkpoint(dumps_checkpoint(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
        assert back[k].shape == np.shape(tensors[k])


def test_checkpoint_corruption():
    blob = dumps_checkpoint({"w": np.ones(4)})
    with pytest.raises(FormatError, match="magic"):
        loads_checkpoint(b"XX" + blob[2:])
    with pytest.raises(FormatError, match="offset"):
        loads_checkpoint(blob[:-3])


def _train(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    lin = nn.Linear(store, "l", 3, 2, rng)
    x = rng.standard_normal((8, 3))
    y = rng.standard_normal((8, 2))
    for _ in range(20):
        _, grads = value_and_grad(store, lambda: ops.mean(ops.square(ops.sub(lin(x), y))))
        adam_update(store, grads, lr=0.05)
    return store.state_dict()


def test_training_is_bitwise_deterministic():
    a, b = _train(4), _train(4)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
