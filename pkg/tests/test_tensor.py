import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlora import tensor as tc
from patchlora.exceptions import ContractError, DimensionError, NumericError
from patchlora.tensor import Tensor, backward, parameter

from gradcheck import numeric_grad, rel_error


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tc.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = naive_matmul(a, b)
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(tc.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_annihilator(self):
        a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert not tc.matmul(a, Tensor(np.zeros((4, 2)))).data.any()

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_with_shared_weight(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 5))
        out = tc.matmul(Tensor(a), Tensor(w)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], naive_matmul(a[i], w), rtol=1e-12)


class TestElementwise:
    def test_examples(self):
        np.testing.assert_array_equal(tc.elementwise("add", Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data, [1, 2])
        np.testing.assert_array_equal(tc.elementwise("scale", Tensor([1.0, -2.0]), 0.5).data, [0.5, -1])
        np.testing.assert_array_equal(tc.elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8, 15])

    def test_row_vector_broadcast(self):
        out = tc.add(Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            tc.add(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            tc.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            tc.elementwise("pow", Tensor([1.0]), 2.0)


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(tc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
        out = tc.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)
        # closed form: e^{ln 2} / (e^{ln 2} + 1) = 2/3
        np.testing.assert_allclose(tc.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            tc.softmax_rows(Tensor([[np.nan, 0.0]]))

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(1, 8),
        st.integers(1, 8),
        st.integers(0, 2**32 - 1),
        st.floats(-50, 50),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, m, n, seed, shift):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(m, n))
        s = tc.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        shifted = tc.softmax_rows(Tensor(x + shift)).data
        np.testing.assert_allclose(shifted, s, atol=1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        out = tc.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_already_standardised(self):
        out = tc.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)

    def test_affine_collapse(self):
        x = np.random.default_rng(2).normal(size=(4, 5))
        out = tc.layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(np.full(5, 2.5)), 1e-5)
        np.testing.assert_array_equal(out.data, np.full((4, 5), 2.5))

    def test_gamma_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tc.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestGelu:
    def test_examples(self):
        assert tc.gelu(Tensor([0.0])).data[0] == 0.0
        assert abs(tc.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
        # x * Phi(x) with Phi from math.erf
        phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert abs(tc.gelu(Tensor([1.0])).data[0] - phi1) < 1e-15
        assert abs(phi1 - 0.8413447) < 1e-7
        # 0.84119 is the value of the tanh approximation at 1
        assert abs(tc.gelu(Tensor([1.0]), approximate="tanh").data[0] - 0.84119) < 1e-5

    def test_tanh_form_close_to_exact(self):
        x = np.linspace(-4, 4, 41)
        exact = tc.gelu(Tensor(x)).data
        approx = tc.gelu(Tensor(x), approximate="tanh").data
        assert np.max(np.abs(exact - approx)) < 1e-3


class TestReduce:
    def test_examples(self):
        np.testing.assert_array_equal(tc.reduce("mean", Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [3, 5])
        assert tc.reduce("sum", Tensor(np.zeros((3, 3)))).data == 0
        row = Tensor([[1.5, -2.0, 4.0]])
        np.testing.assert_array_equal(tc.reduce("mean", row, 0).data, row.data[0])

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            tc.reduce("mean", Tensor(np.ones((2, 2))), 2)

    def test_mean_gradient_distributes_evenly(self):
        x = parameter(np.ones((4, 3)))
        backward(tc.reduce("sum", tc.reduce("mean", x, 0)))
        np.testing.assert_array_equal(x.grad, np.full((4, 3), 0.25))


class TestBackward:
    def test_sum_of_squares(self):
        x = parameter([1.0, -2.0])
        backward(tc.reduce("sum", x * x))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_matmul_chain_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a0, b0, c0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        a, b, c = parameter(a0), parameter(b0), parameter(c0)
        backward(tc.reduce("sum", tc.matmul(tc.matmul(a, b), c)))
        for t, arr, f in [
            (a, a0, lambda x: (x @ b0 @ c0).sum()),
            (b, b0, lambda x: (a0 @ x @ c0).sum()),
            (c, c0, lambda x: (a0 @ b0 @ x).sum()),
        ]:
            assert rel_error(t.grad, numeric_grad(f, arr.copy())) < 1e-4

    def test_frozen_tensor_gets_no_gradient(self):
        w = Tensor(np.ones((2, 2)))
        x = parameter(np.ones((1, 2)))
        backward(tc.reduce("sum", tc.matmul(x, w)))
        assert w.grad is None
        assert x.grad is not None

    def test_all_frozen_graph_is_rejected(self):
        w = Tensor(np.ones((2, 2)))
        with pytest.raises(ContractError):
            backward(tc.reduce("sum", w))
        assert w.grad is None

    def test_non_scalar_loss(self):
        x = parameter(np.ones(3))
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_no_grad_records_nothing(self):
        x = parameter(np.ones(3))
        with tc.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_shared_subexpression_accumulates(self):
        x = parameter([3.0])
        y = x * x
        backward(tc.reduce("sum", y + y))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_tape_is_topological_and_visits_once(self):
        x = parameter(np.ones((2, 2)))
        h = tc.gelu(x @ x)
        loss = tc.reduce("sum", h * h + h)
        tape = tc.ComputeTape.record(loss)
        position = {id(t): i for i, t in enumerate(tape.ops)}
        assert len(position) == len(tape.ops)
        for node in tape.ops:
            for inp in node._inputs:
                if not inp.is_leaf:
                    assert position[id(inp)] < position[id(node)]
        assert tape.ops[-1] is loss

    def test_deterministic_repeat(self):
        def run():
            rng = np.random.default_rng(5)
            x = parameter(rng.normal(size=(4, 4)))
            loss = tc.reduce("mean", tc.softmax(tc.gelu(x @ x)) * x)
            backward(loss)
            return loss.data.tobytes(), x.grad.tobytes()

        assert run() == run()

    def test_float32_option(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = tc.reduce("sum", tc.gelu(x @ x) * 0.5)
        backward(y)
        assert y.dtype == np.float32 and x.grad.dtype == np.float32


# -- randomized gradient fuzz -------------------------------------------------

def _shape(rng, ndim=2):
    return tuple(int(v) for v in rng.integers(1, 9, size=ndim))


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 9, size=3))
    return (lambda a, b: tc.matmul(a, b)), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _case_batched_matmul(rng):
    bsz, m, k, n = (int(v) for v in rng.integers(1, 5, size=4))
    return (lambda a, b: tc.matmul(a, b)), [rng.normal(size=(bsz, m, k)), rng.normal(size=(bsz, k, n))]


def _case_shared_matmul(rng):
    bsz, m, k, n = (int(v) for v in rng.integers(1, 5, size=4))
    return (lambda a, b: tc.matmul(a, b)), [rng.normal(size=(bsz, m, k)), rng.normal(size=(k, n))]


def _case_add(rng):
    s = _shape(rng)
    return (lambda a, b: a + b), [rng.normal(size=s), rng.normal(size=s)]


def _case_add_row(rng):
    s = _shape(rng)
    return (lambda a, b: a + b), [rng.normal(size=s), rng.normal(size=s[-1:])]


def _case_sub(rng):
    s = _shape(rng)
    return (lambda a, b: a - b), [rng.normal(size=s), rng.normal(size=s[-1:])]


def _case_mul(rng):
    s = _shape(rng)
    return (lambda a, b: a * b), [rng.normal(size=s), rng.normal(size=s)]


def _case_scale(rng):
    c = float(rng.normal())
    return (lambda a: tc.scale(a, c)), [rng.normal(size=_shape(rng))]


def _case_softmax(rng):
    return (lambda a: tc.softmax_rows(a)), [rng.normal(scale=2.0, size=_shape(rng))]


def _case_layer_norm(rng):
    s = _shape(rng)
    if s[-1] == 1:
        s = (s[0], 2)
    return (lambda a, g, b: tc.layer_norm(a, g, b, 1e-5)), [
        rng.normal(size=s), rng.normal(size=s[-1:]), rng.normal(size=s[-1:])]


def _case_gelu(rng):
    return (lambda a: tc.gelu(a)), [rng.normal(scale=2.0, size=_shape(rng))]


def _case_gelu_tanh(rng):
    return (lambda a: tc.gelu(a, approximate="tanh")), [rng.normal(scale=2.0, size=_shape(rng))]


def _case_mean(rng):
    axis = int(rng.integers(0, 2))
    return (lambda a: tc.reduce("mean", a, axis)), [rng.normal(size=_shape(rng))]


def _case_sum(rng):
    axis = int(rng.integers(0, 2))
    return (lambda a: tc.reduce("sum", a, axis)), [rng.normal(size=_shape(rng))]


def _case_reshape_transpose(rng):
    m, n = _shape(rng)
    return (lambda a: tc.transpose(tc.reshape(a, (n, m)), None)), [rng.normal(size=(m, n))]


def _case_getitem(rng):
    m, n = _shape(rng)
    j = int(rng.integers(0, n))
    return (lambda a: a[:, j:]), [rng.normal(size=(m, n))]


def _case_dropout(rng):
    k = int(rng.integers(0, 1000))
    return (lambda a: tc.dropout(a, 0.3, np.random.default_rng(k))), [rng.normal(size=_shape(rng))]


GRAD_CASES = {
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "shared_matmul": _case_shared_matmul,
    "add": _case_add,
    "add_row": _case_add_row,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "gelu_tanh": _case_gelu_tanh,
    "mean": _case_mean,
    "sum": _case_sum,
    "reshape_transpose": _case_reshape_transpose,
    "getitem": _case_getitem,
    "dropout": _case_dropout,
}


def check_op_gradient(case, seed: int) -> float:
    """Worst relative error over all inputs of one randomized op instance."""
    rng = np.random.default_rng(seed)
    fn, arrays = case(rng)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    params = [parameter(a.copy()) for a in arrays]
    backward(tc.reduce("sum", fn(*params) * Tensor(weights)))

    worst = 0.0
    for i, p in enumerate(params):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            return float((fn(*args).data * weights).sum())

        worst = max(worst, rel_error(p.grad, numeric_grad(f, arrays[i].copy())))
    return worst


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_fuzz(name):
    errors = [check_op_gradient(GRAD_CASES[name], seed) for seed in range(100)]
    assert max(errors) < 1e-4, (name, max(errors))
