import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nodulenet.errors import ContractError, DimensionError, DomainError, NonFiniteError
from nodulenet.gradcheck import gradient_check
from nodulenet.tensor import (
    Tape,
    Tensor,
    backward,
    concat,
    exp,
    forward_op,
    log,
    matmul,
    no_grad,
    reduce_max,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    transpose,
)


def f64(rng, *shape):
    return rng.standard_normal(shape)


class TestForward:
    def test_add(self):
        out = forward_op("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        np.testing.assert_allclose(out.data, [0.0, 1.0])

    def test_concat_channels(self):
        a = Tensor(np.zeros((2, 3, 4, 4, 4)))
        b = Tensor(np.ones((2, 5, 4, 4, 4)))
        assert concat([a, b], axis=1).shape == (2, 8, 4, 4, 4)

    def test_concat_mismatch(self):
        a = Tensor(np.zeros((2, 3, 4)))
        b = Tensor(np.zeros((2, 3, 5)))
        with pytest.raises(DimensionError):
            concat([a, b], axis=1)

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_add_shape_error_is_descriptive(self):
        with pytest.raises(DimensionError, match="add"):
            Tensor(np.zeros(3)) + Tensor(np.zeros(4))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            log(Tensor([1.0, 0.0]))

    def test_sqrt_domain(self):
        with pytest.raises(DomainError):
            sqrt(Tensor([-1.0]))

    def test_overflow_is_an_error(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor([1000.0]))

    def test_non_finite_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            forward_op("convolve", [Tensor(1.0)])

    def test_reduce_max_value(self):
        x = Tensor(np.array([[1.0, 5.0, 2.0], [7.0, 0.0, 7.0]]))
        np.testing.assert_array_equal(reduce_max(x, axis=1).data, [5.0, 7.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = f64(rng, 4, 5)
        a = sigmoid(Tensor(x) @ Tensor(x.T)).data
        b = sigmoid(Tensor(x) @ Tensor(x.T)).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_loss_must_be_on_tape(self):
        with pytest.raises(ContractError):
            backward(Tensor(1.0))

    def test_fan_out_accumulates(self):
        rng = np.random.default_rng(1)
        data = f64(rng, 3, 4)

        def branch_a(x):
            return sigmoid(x).sum()

        def branch_b(x):
            return square(relu(x)).mean()

        both = Tensor(data, requires_grad=True)
        backward(branch_a(both) + branch_b(both))
        ga = Tensor(data, requires_grad=True)
        backward(branch_a(ga))
        gb = Tensor(data, requires_grad=True)
        backward(branch_b(gb))
        np.testing.assert_allclose(both.grad, ga.grad + gb.grad, rtol=1e-12)

    def test_repeated_backward_accumulates_on_leaves(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * 3.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y.is_leaf and not y.requires_grad

    def test_tape_is_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = sigmoid(x @ x) + 1.0
        tape = Tape.from_output(y.sum())
        for node, _ in tape.entries:
            for inp in node.inputs:
                if inp._node is not None:
                    assert inp._node.seq < node.seq
        seqs = [node.seq for node, _ in tape.entries]
        assert seqs == sorted(seqs)
        assert tape.ops()[-1] == "reduce-sum"

    def test_reduce_max_tie_goes_to_first(self):
        x = Tensor(np.array([3.0, 1.0, 3.0]), requires_grad=True)
        backward(reduce_max(x))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_broadcast_gradient(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        backward((x * b).sum())
        np.testing.assert_array_equal(b.grad, [3.0] * 4)


class TestGradientCheck:
    def test_polynomial_exact(self):
        err = gradient_check(lambda x: square(x).sum(), np.array([1.0, 2.0, 3.0]))
        assert err < 1e-8

    def test_sigmoid_of_linear_map(self):
        rng = np.random.default_rng(2)
        w = Tensor(f64(rng, 3, 4))
        err = gradient_check(lambda x: sigmoid(w @ x).sum(), f64(rng, 4, 2))
        assert err < 1e-4

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            gradient_check(lambda x: x * 2.0, np.ones(3))

    def test_epsilon_range(self):
        with pytest.raises(ContractError):
            gradient_check(lambda x: x.sum(), np.ones(3), epsilon=0.1)

    @pytest.mark.parametrize("op", [
        lambda x: exp(x * 0.5).sum(),
        lambda x: log(square(x) + 1.0).mean(),
        lambda x: sqrt(square(x) + 2.0).sum(),
        lambda x: (x / (square(x) + 1.0)).sum(),
        lambda x: (1.0 - x).sum() * 2.0,
        lambda x: reduce_mean(reshape(x, (3, 4)), axis=0).sum(),
        lambda x: (transpose(reshape(x, (3, 4)), (1, 0)) @ reshape(x, (3, 4))).sum(),
        lambda x: reduce_max(reshape(x, (3, 4)), axis=1).sum(),
        lambda x: (-relu(x)).sum(),
    ])
    def test_elementwise_and_structural_ops(self, op):
        rng = np.random.default_rng(3)
        assert gradient_check(op, f64(rng, 12)) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
    def test_sigmoid_sum_property(self, x):
        assert gradient_check(lambda t: sigmoid(t * 1.5).sum(), x) < 1e-4
