"""Differentiable tensor operations backing the model and loss.

Execution and reverse-mode differentiation are delegated to torch's autograd
engine: tensors are plain ``torch.Tensor`` objects, the operation history is
the tape, and :func:`backward` walks it once in reverse topological order,
accumulating into ``.grad`` on leaf tensors (repeated calls without
:func:`zero_grad` keep accumulating). The wrappers here pin down the exact
semantics the rest of the package relies on, independent of the backend's
looser broadcasting rules:

- elementwise ops require equal shapes (scalar operands excepted),
- row gather/scatter demand distinct in-range indices,
- the fixed-kernel convolution uses replicate edge padding,
- non-finite values are a detectable error, never silent.

Two precisions are used deliberately: float64 where gradients are validated
against finite differences, float32 for training throughput.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class NumericError(RuntimeError):
    """A computation produced NaN or Inf where finite values are required."""


def tensor(data, dtype=torch.float64, requires_grad: bool = False) -> Tensor:
    """Build a tensor from nested lists / numpy arrays."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _check_same_shape(a: Tensor, b) -> None:
    if isinstance(b, (int, float)):
        return
    if b.ndim == 0 or a.ndim == 0:
        return
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return a + b


def sub(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return a - b


def mul(a: Tensor, b) -> Tensor:
    _check_same_shape(a, b)
    return a * b


def scale(a: Tensor, s: float) -> Tensor:
    return a * float(s)


def square(a: Tensor) -> Tensor:
    return a * a


def sqrt(a: Tensor) -> Tensor:
    return torch.sqrt(a)


def atan(a: Tensor) -> Tensor:
    return torch.atan(a)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU, the standard transformer MLP activation."""
    return F.gelu(a)


# ---------------------------------------------------------------------------
# Linear algebra and attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted); rows sum to 1 along ``axis``."""
    return F.softmax(x, dim=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize over the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"affine shape mismatch: x trailing dim {d}, "
            f"gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}"
        )
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return F.layer_norm(x, (d,), gamma, beta, eps)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q kT / sqrt(d_head)) v.

    Shapes [..., n, d_head]. Delegates to the backend's fused kernel; the
    composed matmul/softmax route is the reference it is tested against.
    """
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]) or k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"attention shape mismatch: q {tuple(q.shape)}, "
            f"k {tuple(k.shape)}, v {tuple(v.shape)}"
        )
    return F.scaled_dot_product_attention(q, k, v)


# ---------------------------------------------------------------------------
# Row selection


def _check_indices(indices, n: int) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.int64)
    if idx.ndim != 1:
        raise ValueError(f"indices must be 1-D, got shape {tuple(idx.shape)}")
    if idx.numel() and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for {n} rows")
    if idx.numel() != torch.unique(idx).numel():
        raise ValueError("duplicate indices")
    return idx


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of x [n, d] in index order; gradient flows to those rows only."""
    idx = _check_indices(indices, x.shape[0])
    return x[idx]


def scatter_rows(
    rows: Tensor, indices: Sequence[int], n_rows: int, default_row: Tensor
) -> Tensor:
    """Place rows [k, d] at the given indices of an [n_rows, d] output.

    Rows not addressed by ``indices`` are filled with ``default_row``.
    Gradients route to the scattered rows and, for unfilled positions, to the
    default row.
    """
    idx = _check_indices(indices, n_rows)
    if idx.numel() != rows.shape[0]:
        raise ValueError(f"{rows.shape[0]} rows but {idx.numel()} indices")
    if default_row.shape != rows.shape[1:]:
        raise ValueError(
            f"default row shape {tuple(default_row.shape)} "
            f"!= row shape {tuple(rows.shape[1:])}"
        )
    base = default_row.unsqueeze(0).expand(n_rows, *default_row.shape)
    return base.index_copy(0, idx, rows)


# ---------------------------------------------------------------------------
# Fixed-kernel convolution


def conv2d_fixed(x: Tensor, kernel: Tensor) -> Tensor:
    """Cross-correlate x with a constant 3x3 kernel under replicate padding.

    x may be [H, W] or batched [..., H, W]; the output shape matches x. The
    kernel is treated as a constant: gradients flow through x only.
    """
    if kernel.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {tuple(kernel.shape)}")
    squeeze = x.ndim == 2
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    xb = x.reshape(-1, 1, h, w)
    xb = F.pad(xb, (1, 1, 1, 1), mode="replicate")
    k = kernel.detach().to(x.dtype).reshape(1, 1, 3, 3)
    out = F.conv2d(xb, k)
    return out.reshape(h, w) if squeeze else out.reshape(*lead, h, w)


# ---------------------------------------------------------------------------
# Tape control


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    Gradients add up across calls; use zero_grad between optimization steps.
    """
    if loss.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward(retain_graph=False)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def check_finite(x: Tensor, context: str = "tensor") -> Tensor:
    """Pass x through unchanged, raising NumericError if any value is NaN/Inf."""
    bad = (~torch.isfinite(x)).sum().item()
    if bad:
        raise NumericError(f"{context}: {bad} non-finite value(s) of {x.numel()}")
    return x


def seeded_generator(seed: int) -> torch.Generator:
    """A torch RNG stream isolated from the global one."""
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


def to_numpy(x: Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()


def threads_from_env(default: int = 1) -> int:
    """Honor the TERRA_THREADS environment variable for backend thread count."""
    import os

    raw = os.environ.get("TERRA_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TERRA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"TERRA_THREADS must be >= 1, got {n}")
    return n


def set_threads(n: int) -> None:
    torch.set_num_threads(int(n))


def p_count(params) -> int:
    return sum(p.numel() for p in params)
