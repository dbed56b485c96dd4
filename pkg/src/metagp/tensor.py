"""Dense differentiable linear algebra on top of torch autograd.

Everything in the package computes on float64 torch tensors. This module
adds the few checked primitives the rest of the code relies on: a
matrix product with readable shape errors, a Cholesky factorization with
jitter escalation, and a triangular solve that refuses singular factors.
"""

from __future__ import annotations

import torch

DTYPE = torch.float64
DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


class NotPositiveDefinite(RuntimeError):
    """Raised when a Cholesky pivot is non-positive after jitter was added."""


class SingularMatrix(RuntimeError):
    pass


class NonScalarOutput(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeMismatch(f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def cholesky(a: torch.Tensor, jitter: float = 0.0) -> torch.Tensor:
    """Lower Cholesky factor of ``a + jitter * I`` (batched over leading dims).

    Raises NotPositiveDefinite instead of returning NaNs so the caller can
    decide whether to retry with a larger jitter.
    """
    if a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {tuple(a.shape)}")
    n = a.shape[-1]
    if jitter:
        a = a + jitter * torch.eye(n, dtype=a.dtype)
    factor, info = torch.linalg.cholesky_ex(a)
    if bool((info != 0).any()) or not bool(torch.isfinite(factor).all()):
        raise NotPositiveDefinite(f"matrix of shape {tuple(a.shape)} is not positive definite (jitter={jitter:g})")
    return factor


def robust_cholesky(a: torch.Tensor, jitter: float = DEFAULT_JITTER, max_jitter: float = MAX_JITTER) -> torch.Tensor:
    """Cholesky with jitter escalated x10 per failure up to ``max_jitter``.

    A starting jitter of zero is tried as-is first, then escalation begins
    from DEFAULT_JITTER.
    """
    current = jitter
    while True:
        try:
            return cholesky(a, current)
        except NotPositiveDefinite:
            if current >= max_jitter:
                raise
            current = DEFAULT_JITTER if current == 0 else min(current * 10, max_jitter)


def tri_solve(l: torch.Tensor, b: torch.Tensor, upper: bool = False, left: bool = True) -> torch.Tensor:
    """Solve ``l x = b`` for triangular ``l`` (lower unless ``upper``)."""
    if l.shape[-1] != l.shape[-2]:
        raise ShapeMismatch(f"triangular factor must be square, got {tuple(l.shape)}")
    vector = b.dim() == 1
    if vector:
        b = b.unsqueeze(-1)
    rows = b.shape[-2] if left else b.shape[-1]
    if rows != l.shape[-1]:
        raise ShapeMismatch(f"cannot solve {tuple(l.shape)} against {tuple(b.shape)}")
    if bool((torch.diagonal(l, dim1=-2, dim2=-1) == 0).any()):
        raise SingularMatrix("triangular factor has a zero on its diagonal")
    x = torch.linalg.solve_triangular(l, b, upper=upper, left=left)
    return x.squeeze(-1) if vector else x


def backward(output: torch.Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every leaf's ``.grad``."""
    if output.numel() != 1:
        raise NonScalarOutput(f"backward needs a scalar, got shape {tuple(output.shape)}")
    if output.requires_grad:
        output.reshape(()).backward()


def log_det_from_cholesky(l: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(l, dim1=-2, dim2=-1)).sum(-1)
