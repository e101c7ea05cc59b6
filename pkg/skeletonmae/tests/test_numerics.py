"""
Unit tests for the tensor numerics layer
Tests primitive shape checks, gradient accumulation and the finite-difference oracles
"""

import numpy as np
import pytest
import torch

from skeletonmae.pipeline import numerics
from skeletonmae.pipeline.errors import (
    NonFiniteError,
    NonScalarLossError,
    PrecisionError,
    ShapeMismatchError,
)
from skeletonmae.pipeline.numerics import finite_difference_check, verification_mode


class TestPrimitives:
    """Test suite for the checked primitive operations"""

    def test_matmul_identity(self):
        """Test matmul(I, A) == A"""
        a = torch.randn(3, 3, dtype=torch.float64)
        assert torch.equal(numerics.matmul(torch.eye(3, dtype=torch.float64), a), a)

    def test_matmul_shape_error_names_both_shapes(self):
        """Test mismatched matmul raises with both shapes"""
        with pytest.raises(ShapeMismatchError) as exc:
            numerics.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
        assert "[2, 3]" in str(exc.value)
        assert "[4, 5]" in str(exc.value)

    def test_add_broadcast_error(self):
        """Test incompatible broadcast raises ShapeMismatchError"""
        with pytest.raises(ShapeMismatchError):
            numerics.add(torch.zeros(2, 3), torch.zeros(4))

    def test_relu_and_norm(self):
        """Test relu and l2norm reference values"""
        assert numerics.relu(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
        assert float(numerics.l2norm(torch.tensor([3.0, 4.0]))) == 5.0

    def test_softmax_rows_sum_to_one(self):
        """Test softmax normalizes the last axis"""
        probs = numerics.softmax(torch.randn(5, 7, dtype=torch.float64))
        assert torch.allclose(probs.sum(dim=-1), torch.ones(5, dtype=torch.float64), atol=1e-12)

    def test_log_of_zero_is_rejected(self):
        """Test non-finite results raise"""
        with pytest.raises(NonFiniteError):
            numerics.log(torch.tensor([0.0, 1.0]))

    def test_concat_mismatch(self):
        """Test concat checks the non-concatenated axes"""
        with pytest.raises(ShapeMismatchError):
            numerics.concat([torch.zeros(2, 3), torch.zeros(3, 3)], axis=-1)
        assert numerics.concat([torch.zeros(2, 3), torch.zeros(2, 1)], axis=-1).shape == (2, 4)

    def test_gather_and_scatter_rows(self):
        """Test row gather/scatter by index list"""
        x = torch.arange(12, dtype=torch.float64).reshape(4, 3)
        picked = numerics.gather_rows(x, [2, 0])
        assert picked.tolist() == [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]]

        replaced = numerics.scatter_rows(x, [1], torch.full((1, 3), -1.0, dtype=torch.float64))
        assert replaced[1].tolist() == [-1.0, -1.0, -1.0]
        assert torch.equal(replaced[[0, 2, 3]], x[[0, 2, 3]])

        with pytest.raises(ShapeMismatchError):
            numerics.gather_rows(x, [4])

    @pytest.mark.parametrize("op", [
        lambda big: numerics.matmul(big, big),
        lambda big: numerics.add(big, big),
        lambda big: numerics.sub(big, -big),
        lambda big: numerics.mul(big, big),
        lambda big: numerics.reduce_sum(big, axes=(0, 1)),
        lambda big: numerics.concat([big, big * float("inf")], axis=-1),
        lambda big: numerics.relu(big * float("nan")),
    ])
    def test_overflow_is_rejected(self, op):
        """Test primitives overflowing float32 raise NonFiniteError"""
        with pytest.raises(NonFiniteError):
            op(torch.full((2, 2), 3e38))

    def test_prelu_slope(self):
        """Test PReLU scales negative inputs by the slope"""
        out = numerics.prelu(torch.tensor([-2.0, 3.0]), torch.tensor([0.25]))
        assert out.tolist() == [-0.5, 3.0]


class TestBackward:
    """Test suite for the reverse-mode entry point"""

    def test_square_gradient(self):
        """Test d(sum w^2)/dw = 2w"""
        w = torch.tensor([1.0, 2.0], requires_grad=True)
        numerics.backward((w ** 2).sum())
        assert w.grad.tolist() == [2.0, 4.0]

    def test_linear_gradient(self):
        """Test d(sum w*c)/dw = c"""
        w = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
        c = torch.tensor([0.5, -1.0, 4.0])
        numerics.backward((w * c).sum())
        assert torch.equal(w.grad, c)

    def test_accumulation_doubles(self):
        """Test two backward passes without zeroing give exactly twice the gradient"""
        w = torch.randn(6, dtype=torch.float64, requires_grad=True)

        def loss():
            return (torch.sin(w) * w).sum()

        numerics.backward(loss())
        single = w.grad.clone()
        numerics.backward(loss())
        assert torch.equal(w.grad, 2 * single)

    def test_non_scalar_loss(self):
        """Test a vector loss is rejected"""
        w = torch.ones(3, requires_grad=True)
        with pytest.raises(NonScalarLossError):
            numerics.backward(w * 2)

    def test_non_finite_loss(self):
        """Test a NaN loss is rejected before backward"""
        w = torch.ones(1, requires_grad=True)
        with pytest.raises(NonFiniteError):
            numerics.backward((w * float("nan")).sum())

    def test_determinism(self):
        """Test identical seeds give bit-identical values and gradients"""
        results = []
        for _ in range(2):
            generator = numerics.seed_everything(7)
            w = torch.randn(4, 4, generator=generator, requires_grad=True)
            x = torch.randn(3, 4, generator=generator)
            loss = numerics.softmax(numerics.matmul(x, w)).log().sum()
            numerics.backward(loss)
            results.append((float(loss), w.grad.clone()))
        assert results[0][0] == results[1][0]
        assert torch.equal(results[0][1], results[1][1])


class TestFiniteDifference:
    """Test suite for the finite-difference oracles"""

    def test_sum_of_squares(self):
        """Test the oracle on a closed-form gradient"""
        at = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        assert finite_difference_check(lambda x: (x ** 2).sum(), at) < 1e-8

    def test_constant_function(self):
        """Test a constant function has zero error against a zero gradient"""
        at = torch.randn(4, dtype=torch.float64)
        assert finite_difference_check(lambda x: torch.tensor(3.0, dtype=torch.float64), at) == 0.0

    def test_constant_loss_parameters(self):
        """Test the parameter oracle on a loss independent of the parameters"""
        with verification_mode():
            layer = torch.nn.Linear(2, 2)
        assert numerics.parameter_gradient_check(lambda: torch.tensor(1.5, dtype=torch.float64),
                                                 layer.parameters()) == 0.0

    def test_input_unused_by_part_of_target(self):
        """Test coordinates f ignores get a zero analytic gradient"""
        at = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        assert finite_difference_check(lambda x: x[0] ** 2, at) < 1e-8

    def test_requires_float64(self):
        """Test 32-bit inputs are refused"""
        with pytest.raises(PrecisionError):
            finite_difference_check(lambda x: x.sum(), torch.ones(2, dtype=torch.float32))

    def test_non_finite_evaluation(self):
        """Test a target that is non-finite under perturbation raises"""
        at = torch.zeros(2, dtype=torch.float64)
        with pytest.raises(NonFiniteError):
            finite_difference_check(lambda x: torch.sqrt(-x).sum(), at)

    @pytest.mark.parametrize("seed", range(10))
    def test_composite_primitives(self, seed):
        """Test the oracle over a chain of primitives on random inputs"""
        rng = np.random.default_rng(seed)
        w = torch.as_tensor(rng.normal(size=(4, 3)))
        slope = torch.tensor([0.25], dtype=torch.float64)

        def f(x):
            h = numerics.prelu(numerics.matmul(x, w), slope)
            return numerics.reduce_mean(numerics.power(numerics.l2norm(h) + 1.0, 2.0), axes=(0,))

        at = torch.as_tensor(rng.normal(size=(5, 4)))
        assert finite_difference_check(f, at) < 1e-4

    def test_parameter_check_restores_parameters(self):
        """Test the parameter oracle leaves weights unchanged"""
        with verification_mode():
            layer = torch.nn.Linear(3, 2)
        x = torch.randn(4, 3, dtype=torch.float64)
        before = [p.detach().clone() for p in layer.parameters()]
        error = numerics.parameter_gradient_check(lambda: torch.tanh(layer(x)).sum(), layer.parameters())
        assert error < 1e-4
        for p, b in zip(layer.parameters(), before):
            assert torch.equal(p, b)

    def test_verification_mode_restores_dtype(self):
        """Test the 64-bit context restores the previous default"""
        previous = torch.get_default_dtype()
        with verification_mode():
            assert torch.get_default_dtype() == torch.float64
        assert torch.get_default_dtype() == previous


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
