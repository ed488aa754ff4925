"""Minimal dense-array substrate for the attention stack.

Arrays are plain numpy ndarrays; float32 is used for training and float64
for every verification suite. This module provides the three primitives
everything else is built from (matmul, masked multiplicity-weighted row
softmax, strided grouped 1D convolution), their hand-written adjoints, a
``Parameter`` container with additive gradient accumulation, and the
deterministic FLOP / byte counters read by the benchmark harness.

Counting conventions (fixed so two identical runs report identical
numbers):

* a multiply-add pair counts as 2 FLOPs, so ``matmul`` adds ``2*r*k*c``;
* ``softmax_row`` adds 5 FLOPs per kept entry, plus 1 per kept entry when
  a multiplicity-weight vector is supplied;
* ``grouped_conv1d`` adds ``2*n*p*d`` (forward) and twice that (backward);
* every primitive adds the byte size of the array it allocates.

Scalar glue (masking, scaling, reshapes) is not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonFiniteError",
    "Counters",
    "counters",
    "Parameter",
    "matmul",
    "matmul_backward",
    "softmax_row",
    "softmax_row_backward",
    "grouped_conv1d",
    "grouped_conv1d_backward",
]


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf (bad inputs or a diverged model)."""


@dataclass
class Counters:
    """Deterministic in-process op counters."""

    flops: int = 0
    bytes_allocated: int = 0

    def add(self, flops: int = 0, nbytes: int = 0) -> None:
        self.flops += int(flops)
        self.bytes_allocated += int(nbytes)

    def reset(self) -> None:
        self.flops = 0
        self.bytes_allocated = 0

    def snapshot(self) -> tuple[int, int]:
        return (self.flops, self.bytes_allocated)


#: Module-level counter instance; callers snapshot/reset around the region
#: they want to measure.
counters = Counters()


def _finite_or_raise(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


class Parameter:
    """Trainable tensor plus an additively accumulated gradient.

    The gradient always has the shape of the value; ``zero_grad`` is the
    explicit reset, and repeated backward passes without a reset sum their
    contributions (this is what lets multi-level attention accumulate into
    shared key/value gradients).
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} != value shape {self.value.shape} "
                f"for parameter {self.name!r}"
            )
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard 2D matrix product, counted at 2*r*k*c FLOPs."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    r, k = a.shape
    c = b.shape[1]
    out = a @ b
    counters.add(flops=2 * r * k * c, nbytes=out.nbytes)
    return _finite_or_raise(out, "matmul")


def matmul_backward(
    upstream: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of ``matmul``: (upstream @ b.T, a.T @ upstream)."""
    r, k = a.shape
    c = b.shape[1]
    if upstream.shape != (r, c):
        raise ValueError(f"upstream shape {upstream.shape} != output shape {(r, c)}")
    da = upstream @ b.T
    db = a.T @ upstream
    counters.add(flops=4 * r * k * c, nbytes=da.nbytes + db.nbytes)
    return _finite_or_raise(da, "matmul_backward"), _finite_or_raise(db, "matmul_backward")


def softmax_row(
    x: np.ndarray,
    keep: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Masked, multiplicity-weighted softmax over the last axis.

    Output entry j of a row is ``w_j * exp(x_j - x*) / sum_k w_k * exp(x_k - x*)``
    over kept entries, with ``x*`` the kept maximum (for stability). Masked
    entries are exactly 0 and the kept entries of every row sum to 1. The
    weight vector is how a score that stands for several identical columns
    enters the normalizer without materializing the repeats; consequently
    the output at a weighted entry is the aggregated coefficient for that
    unique column.

    Accepts any leading batch shape; raises if a row has no kept entry.
    """
    x = np.asarray(x)
    if keep is None:
        keep = np.ones(x.shape, dtype=bool)
    if keep.shape != x.shape:
        raise ValueError(f"keep mask shape {keep.shape} != input shape {x.shape}")
    if not keep.any(axis=-1).all():
        raise ValueError("softmax_row: at least one row is fully masked")
    if weights is not None:
        weights = np.asarray(weights)
        if weights.shape[-1] != x.shape[-1]:
            raise ValueError("weights length does not match row length")
        if np.any(weights <= 0):
            raise ValueError("multiplicity weights must be positive")

    neg_inf = np.array(-np.inf, dtype=x.dtype)
    masked = np.where(keep, x, neg_inf)
    x_star = masked.max(axis=-1, keepdims=True)
    e = np.exp(np.where(keep, x - x_star, neg_inf))  # exp(-inf) == 0, no warning
    if weights is not None:
        e = e * weights
    z = e.sum(axis=-1, keepdims=True)
    out = e / z

    kept = int(keep.sum())
    counters.add(flops=5 * kept + (kept if weights is not None else 0), nbytes=out.nbytes)
    return _finite_or_raise(out, "softmax_row")


def softmax_row_backward(upstream: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Adjoint of ``softmax_row`` in terms of its output probabilities.

    Valid for any keep mask and weight vector: masked entries have zero
    probability and therefore zero input gradient, and multiplicity weights
    are constants that cancel out of the Jacobian.
    """
    if upstream.shape != probs.shape:
        raise ValueError(f"upstream shape {upstream.shape} != probs shape {probs.shape}")
    inner = (upstream * probs).sum(axis=-1, keepdims=True)
    dx = probs * (upstream - inner)
    counters.add(flops=4 * probs.size, nbytes=dx.nbytes)
    return _finite_or_raise(dx, "softmax_row_backward")


def grouped_conv1d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Strided grouped 1D convolution: stride = kernel width, one group per channel.

    ``x`` is (n, d), ``kernels`` is (d, p, w) with w dividing n. Output row
    ``g*p + s``, channel c is ``sum_t kernels[c, s, t] * x[g*w + t, c]``:
    each length-w window of input rows is reduced to p summary rows,
    channelwise.
    """
    if x.ndim != 2 or kernels.ndim != 3:
        raise ValueError(f"grouped_conv1d expects (n,d) x (d,p,w), got {x.shape}, {kernels.shape}")
    n, d = x.shape
    dk, p, w = kernels.shape
    if dk != d:
        raise ValueError(f"kernel channel count {dk} != input channels {d}")
    if w <= 0 or n % w != 0:
        raise ValueError(f"stride/shape mismatch: window {w} does not divide n={n}")
    g = n // w
    xr = x.reshape(g, w, d)
    out = np.einsum("gwd,dpw->gpd", xr, kernels, optimize=True).reshape(g * p, d)
    counters.add(flops=2 * n * p * d, nbytes=out.nbytes)
    return _finite_or_raise(out, "grouped_conv1d")


def grouped_conv1d_backward(
    upstream: np.ndarray, x: np.ndarray, kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoint of ``grouped_conv1d``: gradients for the input and the kernels."""
    n, d = x.shape
    dk, p, w = kernels.shape
    g = n // w
    if upstream.shape != (g * p, d):
        raise ValueError(f"upstream shape {upstream.shape} != output shape {(g * p, d)}")
    ur = upstream.reshape(g, p, d)
    xr = x.reshape(g, w, d)
    dx = np.einsum("gpd,dpw->gwd", ur, kernels, optimize=True).reshape(n, d)
    dkernels = np.einsum("gpd,gwd->dpw", ur, xr, optimize=True)
    counters.add(flops=4 * n * p * d, nbytes=dx.nbytes + dkernels.nbytes)
    return _finite_or_raise(dx, "grouped_conv1d_backward"), _finite_or_raise(
        dkernels, "grouped_conv1d_backward"
    )
