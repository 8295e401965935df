import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grain_graph import diffcore as dc
from grain_graph.errors import NumericError, ShapeError, UsageError


def _store(**arrays):
    s = dc.ParamStore()
    for name, value in arrays.items():
        s.add(name, value)
    return s


def test_matmul_identity():
    X = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(dc.matmul(dc.Tensor(np.eye(3)), dc.Tensor(X)).data, X)


def test_leaky_relu_values():
    assert dc.leaky_relu(dc.Tensor(np.array(-1.0)), 0.2).data == pytest.approx(-0.2)
    assert dc.leaky_relu(dc.Tensor(np.array(3.0))).data == 3.0


def test_dropout_eval_identity_and_train_scaling():
    X = dc.Tensor(np.ones((50, 40)))
    assert dc.dropout(X, 0.5, False) is X
    Y = dc.dropout(X, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(Y)) <= {0.0, 2.0}
    assert abs(Y.mean() - 1.0) < 0.1
    with pytest.raises(UsageError):
        dc.dropout(X, 0.5, True)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        dc.add(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        dc.concat([dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 4)))], axis=0)


def test_no_silent_row_broadcast():
    with pytest.raises(ShapeError):
        dc.add(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones(3)))
    out = dc.add(dc.Tensor(np.ones((2, 3))), 2.0)
    assert np.all(out.data == 3.0)


def test_non_finite_output_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        dc.mul(dc.Tensor(np.array([1e308])), dc.Tensor(np.array([1e308])))
    with pytest.raises(NumericError):
        dc.add(dc.Tensor(np.array([np.nan, 1.0])), 1.0)


def test_segment_softmax_examples():
    sm = dc.segment_softmax(dc.Tensor(np.array([0.7, 0.7])), np.array([0, 0])).data
    np.testing.assert_allclose(sm, [0.5, 0.5])
    assert dc.segment_softmax(dc.Tensor(np.array([3.0])), np.array([0])).data[0] == 1.0
    got = dc.segment_softmax(dc.Tensor(np.array([1.0, 2.0])), np.array([0, 0])).data
    e1, e2 = np.exp(1.0), np.exp(2.0)
    np.testing.assert_allclose(got, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-12)
    np.testing.assert_allclose(got, [0.26894, 0.73106], atol=1e-5)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.integers(0, 1000))
def test_segment_softmax_sums_to_one(logits, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, size=len(logits))
    y = dc.segment_softmax(dc.Tensor(np.array(logits)), dc.Segments(ids, 5)).data
    for s in np.unique(ids):
        assert abs(y[ids == s].sum() - 1.0) < 1e-12


def test_segments_sum_max_match_loops():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 7, size=40)
    ids[ids == 3] = 4  # leave segment 3 empty
    vals = rng.normal(size=(40, 2))
    seg = dc.Segments(ids, 7)
    s, m = seg.sum(vals), seg.max(vals)
    for k in range(7):
        rows = vals[ids == k]
        np.testing.assert_allclose(s[k], rows.sum(axis=0) if len(rows) else 0.0)
        if len(rows):
            np.testing.assert_allclose(m[k], rows.max(axis=0))
    identity = dc.Segments(np.arange(5), 5)
    out = identity.sum(vals[:5])
    np.testing.assert_array_equal(out, vals[:5])
    assert out is not vals[:5]


def test_linear_gradient():
    x = np.array([1.0, -2.0, 3.0])
    store = _store(W=np.random.default_rng(2).normal(size=(2, 3)))
    with dc.Tape() as tape:
        P = store.leaves()
        f = dc.reduce_sum(dc.matmul(P["W"], dc.Tensor(x)))
    np.testing.assert_allclose(tape.backward(f)["W"], np.outer(np.ones(2), x))


def test_tanh_gradient():
    store = _store(w=np.array(0.37))
    with dc.Tape() as tape:
        f = dc.tanh(store.leaves()["w"])
    assert tape.backward(f)["w"] == pytest.approx(1 - np.tanh(0.37) ** 2)


def test_backward_needs_scalar():
    store = _store(w=np.ones(3))
    with dc.Tape() as tape:
        f = dc.tanh(store.leaves()["w"])
    with pytest.raises(UsageError):
        tape.backward(f)


def test_nothing_recorded_outside_tape():
    store = _store(w=np.ones(3))
    out = dc.tanh(store.leaves()["w"])
    assert not out.requires_grad
    with dc.Tape() as tape:
        dc.tanh(store.leaves(requires_grad=False)["w"])
    assert tape.nodes == []


def test_backward_zero_fill_for_unused_params():
    store = _store(a=np.ones(2), b=np.ones((2, 2)))
    with dc.Tape() as tape:
        f = dc.reduce_sum(store.leaves()["a"])
    grads = tape.backward(f, store)
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_grad_check_quadratic():
    store = _store(w=np.array([0.3, -1.2, 2.0]))
    err = dc.grad_check(lambda P: dc.reduce_sum(dc.square(dc.sub(P["w"], 0.5))), store)
    assert err < 1e-9


def test_grad_check_rejects_dropout():
    store = _store(w=np.ones((4, 3)))
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        dc.grad_check(lambda P: dc.reduce_sum(dc.dropout(P["w"], 0.5, True, rng)), store)


def _composite(P):
    rng_ids = dc.Segments(np.array([0, 0, 1, 2, 2, 2]), 3)
    x = dc.layer_norm(dc.add_bias(dc.matmul(P["X"], P["W"]), P["b"]))
    x = dc.mul_row(dc.leaky_relu(x, 0.2), P["g"])
    rows = dc.gather_rows(x, np.array([0, 1, 1, 2, 3, 0]))
    logits = dc.matmul(rows, P["a"])
    alpha = dc.segment_softmax(dc.tanh(logits), rng_ids)
    agg = dc.segment_sum(dc.scale_rows(rows, alpha), rng_ids)
    both = dc.concat([agg, dc.mul(x, 0.5)], axis=0)
    w = dc.softmax(dc.stack_scalars([dc.reduce_mean(both), dc.reduce_sum(P["a"]), P["c"]]))
    mix = dc.weighted_sum([agg, dc.square(agg)], dc.stack_scalars([dc.reduce_sum(w), P["c"]]))
    return dc.add(dc.reduce_mean(mix), dc.reduce_sum(dc.reduce_mean(both, axis=0)))


def test_grad_check_every_op():
    rng = np.random.default_rng(3)
    store = _store(X=rng.normal(size=(4, 3)), W=rng.normal(size=(3, 5)), b=rng.normal(size=5),
                   g=rng.normal(size=5), a=rng.normal(size=5), c=np.array(0.3))
    assert dc.grad_check(_composite, store, samples_per_tensor=1000) < 1e-6


def test_param_store_flat_views():
    store = _store(a=np.arange(3.0), b=np.ones((2, 2)))
    assert store.size == 7
    store.flat[:] += 1.0
    np.testing.assert_array_equal(store["a"], [1.0, 2.0, 3.0])
    grads = store.flatten({"b": np.full((2, 2), 5.0)})
    np.testing.assert_array_equal(grads, [0, 0, 0, 5, 5, 5, 5])
    copy = store.copy()
    assert copy == store
    copy.flat[0] = 99.0
    assert store["a"][0] == 1.0
    assert dc.ParamStore.from_dict(store.to_dict()) == store
