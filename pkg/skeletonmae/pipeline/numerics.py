"""
Tensor Numerics
Checked dense-tensor primitives over torch autograd, precision modes and gradient oracles
"""

import logging
import random
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    NonFiniteError,
    NonScalarLossError,
    PrecisionError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

TRAINING_DTYPE = torch.float32
VERIFICATION_DTYPE = torch.float64


@contextmanager
def verification_mode() -> Iterator[None]:
    """Run the enclosed block with 64-bit default precision."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(VERIFICATION_DTYPE)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def seed_everything(seed: int) -> torch.Generator:
    """Seed every global stream and return a dedicated generator for parameter init."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def ensure_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    """Reject NaN/Inf values, naming the checked quantity."""
    if not bool(torch.isfinite(tensor).all()):
        bad = int((~torch.isfinite(tensor)).sum())
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in tensor of shape {list(tensor.shape)}")
    return tensor


def broadcast_shape(op: str, left: torch.Tensor, right: torch.Tensor) -> torch.Size:
    """Trailing-axis broadcast of two operands, or a typed error naming both shapes."""
    try:
        return torch.broadcast_shapes(left.shape, right.shape)
    except RuntimeError:
        raise ShapeMismatchError(op, left.shape, right.shape) from None


# Primitive operations
# Every primitive rejects a non-finite result, naming the op.

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        out = torch.matmul(a, b)
    except RuntimeError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    return ensure_finite(out, "matmul")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    broadcast_shape("add", a, b)
    return ensure_finite(a + b, "add")


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    broadcast_shape("sub", a, b)
    return ensure_finite(a - b, "sub")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    broadcast_shape("mul", a, b)
    return ensure_finite(a * b, "mul")


def power(a: torch.Tensor, exponent: float) -> torch.Tensor:
    return ensure_finite(a ** exponent, f"power({exponent})")


def reduce_sum(a: torch.Tensor, axes: Sequence[int], keepdim: bool = False) -> torch.Tensor:
    return ensure_finite(a.sum(dim=tuple(axes), keepdim=keepdim), "reduce_sum")


def reduce_mean(a: torch.Tensor, axes: Sequence[int], keepdim: bool = False) -> torch.Tensor:
    return ensure_finite(a.mean(dim=tuple(axes), keepdim=keepdim), "reduce_mean")


def concat(tensors: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    reference = tensors[0]
    for other in tensors[1:]:
        if other.dim() != reference.dim():
            raise ShapeMismatchError("concat", reference.shape, other.shape)
        for dim in range(reference.dim()):
            if dim != axis % reference.dim() and other.shape[dim] != reference.shape[dim]:
                raise ShapeMismatchError("concat", reference.shape, other.shape)
    return ensure_finite(torch.cat(list(tensors), dim=axis), "concat")


def gather_rows(x: torch.Tensor, index: Sequence[int]) -> torch.Tensor:
    """Select rows (second-to-last axis) by index list."""
    rows = x.shape[-2]
    for i in index:
        if not 0 <= i < rows:
            raise ShapeMismatchError("gather_rows", x.shape, (i,))
    idx = torch.as_tensor(list(index), dtype=torch.long)
    return ensure_finite(x.index_select(-2, idx), "gather_rows")


def scatter_rows(x: torch.Tensor, index: Sequence[int], rows: torch.Tensor) -> torch.Tensor:
    """Functional row replacement: rows at `index` are taken from `rows`."""
    if rows.shape[-2] != len(index) or rows.shape[-1] != x.shape[-1]:
        raise ShapeMismatchError("scatter_rows", x.shape, rows.shape)
    for i in index:
        if not 0 <= i < x.shape[-2]:
            raise ShapeMismatchError("scatter_rows", x.shape, (i,))
    idx = torch.as_tensor(list(index), dtype=torch.long)
    return ensure_finite(x.index_copy(-2, idx, rows), "scatter_rows")


def l2norm(x: torch.Tensor) -> torch.Tensor:
    return ensure_finite(torch.linalg.vector_norm(x, dim=-1), "l2norm")


def relu(x: torch.Tensor) -> torch.Tensor:
    return ensure_finite(F.relu(x), "relu")


def prelu(x: torch.Tensor, slope: torch.Tensor) -> torch.Tensor:
    return ensure_finite(F.prelu(x, slope), "prelu")


def softmax(x: torch.Tensor) -> torch.Tensor:
    return ensure_finite(torch.softmax(x, dim=-1), "softmax")


def log(x: torch.Tensor) -> torch.Tensor:
    return ensure_finite(torch.log(x), "log")


# Reverse-mode entry point

def backward(loss: torch.Tensor) -> None:
    """
    Accumulate d(loss)/d(param) into every reachable parameter's grad.
    Gradients add up across calls until zeroed by the caller.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise NonScalarLossError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    ensure_finite(loss.detach(), "loss")
    loss.reshape(()).backward()


# Finite-difference oracles

def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    return float(((analytic - numeric).abs() / scale).max()) if analytic.numel() else 0.0


def _evaluate(f: Callable[[], torch.Tensor], where: str) -> float:
    value = f()
    if value.numel() != 1:
        raise NonScalarLossError(f"finite-difference target must be scalar, got shape {list(value.shape)}")
    result = float(value)
    if not np.isfinite(result):
        raise NonFiniteError(f"finite-difference target returned {result} {where}")
    return result


def finite_difference_check(f: Callable[[torch.Tensor], torch.Tensor], at: torch.Tensor,
                            step: float = 1e-6) -> float:
    """
    Compare the autograd gradient of scalar f at `at` with central differences.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    """
    if at.dtype != VERIFICATION_DTYPE:
        raise PrecisionError(f"finite-difference check requires float64 input, got {at.dtype}")

    point = at.detach().clone().requires_grad_(True)
    value = f(point)
    if value.numel() != 1:
        raise NonScalarLossError(f"finite-difference target must be scalar, got shape {list(value.shape)}")
    analytic = None
    if value.requires_grad:
        (analytic,) = torch.autograd.grad(value.reshape(()), point, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(point)

    base = at.detach().clone()
    flat = base.view(-1)
    numeric = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + step
            upper = _evaluate(lambda: f(base), f"at coordinate {i} (+step)")
            flat[i] = original - step
            lower = _evaluate(lambda: f(base), f"at coordinate {i} (-step)")
            flat[i] = original
            numeric[i] = (upper - lower) / (2 * step)

    return _relative_error(analytic.reshape(-1), numeric)


def parameter_gradient_check(loss_fn: Callable[[], torch.Tensor],
                             parameters: Iterable[torch.nn.Parameter],
                             step: float = 1e-6) -> float:
    """Finite-difference oracle over module parameters, perturbed in place and restored."""
    params: List[torch.nn.Parameter] = [p for p in parameters if p.requires_grad]
    for p in params:
        if p.dtype != VERIFICATION_DTYPE:
            raise PrecisionError(f"parameter gradient check requires float64 parameters, got {p.dtype}")

    loss = loss_fn()
    if loss.numel() != 1:
        raise NonScalarLossError(f"finite-difference target must be scalar, got shape {list(loss.shape)}")
    grads: Sequence[Optional[torch.Tensor]] = [None] * len(params)
    if loss.requires_grad and params:
        grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                upper = _evaluate(loss_fn, f"at parameter coordinate {i} (+step)")
                flat[i] = original - step
                lower = _evaluate(loss_fn, f"at parameter coordinate {i} (-step)")
                flat[i] = original
                numeric[i] = (upper - lower) / (2 * step)
            worst = max(worst, _relative_error(analytic.reshape(-1), numeric))
    return worst
