import numpy as np
import pytest

from lognn_mec import autodiff as ad
from lognn_mec.errors import InvalidArgumentError, NumericError

from oracles import matmul_loop


def _numeric_grad(fn, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        g[idx] = (fn(up) - fn(down)) / (2 * step)
    return g


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose((ad.Tensor(a) @ ad.Tensor(b)).data, matmul_loop(a.tolist(), b.tolist()), rtol=1e-12)


def test_matmul_rejects_mismatch():
    with pytest.raises(InvalidArgumentError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_product_rule_example():
    tape = ad.Tape()
    x = tape.variable(np.array([[3.0]]))
    y = tape.variable(np.array([[4.0]]))
    g = ad.backward(tape, ad.sum(x * y + x), [x, y])
    assert g[x].item() == 5.0 and g[y].item() == 3.0


def test_softmax_gradient_of_sum_vanishes(rng):
    tape = ad.Tape()
    z = tape.variable(rng.normal(size=(3, 4)))
    g = ad.backward(tape, ad.sum(ad.row_softmax(z)), [z])
    np.testing.assert_allclose(g[z], 0.0, atol=1e-12)


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        ad.backward(tape, x * 2.0)


def test_unused_variable_gets_zero_gradient():
    tape = ad.Tape()
    x, unused = tape.variable(np.ones((2, 2))), tape.variable(np.ones(3))
    g = ad.backward(tape, ad.sum(x))
    np.testing.assert_array_equal(g[unused], 0.0)
    np.testing.assert_array_equal(g[x], 1.0)


def test_non_finite_results_name_the_op():
    with pytest.raises(NumericError, match="log"):
        ad.log(ad.Tensor(np.array([-1.0])))
    with pytest.raises(NumericError, match="div"):
        ad.div(ad.Tensor(np.ones(2)), ad.Tensor(np.array([1.0, 0.0])))


def test_broadcast_gradients_are_summed(rng):
    tape = ad.Tape()
    a = tape.variable(rng.normal(size=(4, 3)))
    bias = tape.variable(rng.normal(size=(1, 3)))
    w = rng.normal(size=(4, 3))
    g = ad.backward(tape, ad.sum((a + bias) * w), [bias])
    np.testing.assert_allclose(g[bias], w.sum(axis=0, keepdims=True), rtol=1e-12)


def test_every_op_reverse_rule_matches_finite_differences():
    errors = ad.op_gradcheck()
    assert max(errors.values()) < 1e-6, errors


@pytest.mark.parametrize("ids", [[0, 0, 1, 2, 2, 2], [2, 1, 0, 1, 2, 0]])
def test_segment_softmax_against_dense(rng, ids):
    seg = ad.Segments(np.array(ids), 3)
    x = rng.normal(size=(len(ids), 2))
    out = ad.segment_softmax(ad.Tensor(x), seg).data
    for s in range(3):
        rows = np.array(ids) == s
        e = np.exp(x[rows] - x[rows].max(axis=0))
        np.testing.assert_allclose(out[rows], e / e.sum(axis=0), rtol=1e-12)


def test_segment_reductions(rng):
    seg = ad.Segments(np.array([1, 0, 1, 1]), 3)
    x = rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.segment_sum(ad.Tensor(x), seg).data, [x[1], x[0] + x[2] + x[3], [0, 0]])
    mean = ad.segment_mean(ad.Tensor(x), seg).data
    np.testing.assert_allclose(mean[1], (x[0] + x[2] + x[3]) / 3)
    np.testing.assert_allclose(ad.row_gather(ad.Tensor(np.arange(6.0).reshape(3, 2)), seg).data,
                               [[2, 3], [0, 1], [2, 3], [2, 3]])


def test_composite_gradient_against_full_finite_difference(rng):
    w0 = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 3))
    seg = ad.Segments(np.array([0, 1, 0, 1, 1]), 2)

    def build(w):
        h = ad.leaky_relu(ad.Tensor(x) @ w)
        att = ad.segment_softmax(ad.sum(h, axis=1, keepdims=True), seg)
        return ad.sum(ad.log2(1.0 + ad.exp(ad.segment_sum(att * h, seg))))

    tape = ad.Tape()
    wt = tape.variable(w0)
    analytic = ad.backward(tape, build(wt), [wt])[wt]
    numeric = _numeric_grad(lambda w: float(build(ad.Tensor(w)).data), w0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_adam_first_step():
    state = ad.AdamState(lr=1e-4)
    params = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -4.0, 1e-3])
    new = ad.adam_step(state, params, {"w": g})
    # after bias correction the first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"] - params["w"], -1e-4 * g / (np.abs(g) + 1e-8), rtol=1e-10)
    assert state.step == 1


def test_adam_matches_reference_over_steps(rng):
    state = ad.AdamState(lr=0.01)
    w = rng.normal(size=4)
    params = {"w": w.copy()}
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        params = ad.adam_step(state, params, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        ad.adam_step(ad.AdamState(), {"w": np.ones(2)}, {"w": np.array([np.inf, 0.0])})


def test_directional_check_detects_wrong_gradient(rng):
    params = {"a": rng.normal(size=(3, 2))}
    fn = lambda p: float(np.sum(p["a"] ** 3))  # noqa: E731
    good = {"a": 3 * params["a"] ** 2}
    assert ad.directional_check(fn, params, good)["a"] < 1e-6
    bad = {"a": 2 * params["a"] ** 2}
    assert ad.directional_check(fn, params, bad)["a"] > 0.1
    assert ad.directional_check(fn, params, bad, direction="random")["a"] > 0.1


def test_corrupted_rule_is_named_by_op_check(monkeypatch):
    original = ad.sigmoid

    def broken_sigmoid(a):
        out = original(a)
        tape = out.tape
        if tape is not None:
            node = tape.nodes[out.node]
            rule = node.vjp
            node.vjp = lambda g: tuple(2.0 * r for r in rule(g))
        return out

    monkeypatch.setattr(ad, "sigmoid", broken_sigmoid)
    errors = ad.op_gradcheck()
    assert max(errors, key=errors.get) == "sigmoid"
    assert errors["sigmoid"] > 0.1
