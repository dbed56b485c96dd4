"""Covariance functions over weight codes and auxiliary inputs.

All hyperparameters are stored as logs so they can be optimised without
constraints. Kernels are torch modules: calling one on two row sets
returns the Gram matrix, ``diag`` returns k(x, x) per row.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .tensor import DTYPE, ShapeMismatch


def _log_param(value, shape=()) -> nn.Parameter:
    return nn.Parameter(torch.full(shape, math.log(value), dtype=DTYPE))


class Kernel(nn.Module):
    input_dim: int

    def forward(self, x1: torch.Tensor, x2: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    def diag(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def evaluate(self, x1, x2) -> torch.Tensor:
        """Scalar k(x1, x2) for two single vectors."""
        x1 = torch.as_tensor(x1, dtype=DTYPE).reshape(1, -1)
        x2 = torch.as_tensor(x2, dtype=DTYPE).reshape(1, -1)
        return self(x1, x2)[0, 0]

    def _check(self, x1, x2):
        if x2 is None:
            x2 = x1
        if x1.shape[-1] != self.input_dim or x2.shape[-1] != self.input_dim:
            raise ShapeMismatch(
                f"{type(self).__name__} expects {self.input_dim}-dim rows, got {tuple(x1.shape)} and {tuple(x2.shape)}"
            )
        return x1, x2

    def to_config(self) -> dict:
        raise NotImplementedError


class RBFARD(Kernel):
    """Exponentiated quadratic kernel with one lengthscale per input dimension."""

    def __init__(self, input_dim: int, lengthscale: float = 1.0, variance: float = 1.0,
                 learn_variance: bool = True):
        super().__init__()
        self.input_dim = input_dim
        self.log_lengthscales = _log_param(lengthscale, (input_dim,))
        if learn_variance:
            self.log_variance = _log_param(variance)
        else:
            self.register_buffer("log_variance", torch.tensor(math.log(variance), dtype=DTYPE))

    @property
    def lengthscales(self):
        return self.log_lengthscales.exp()

    @property
    def variance(self):
        return self.log_variance.exp()

    def forward(self, x1, x2=None):
        x1, x2 = self._check(x1, x2)
        ls = self.lengthscales
        a = x1 / ls
        b = x2 / ls
        # explicit differences keep the diagonal exactly at variance
        sq = ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)
        return self.variance * torch.exp(-0.5 * sq)

    def diag(self, x):
        return self.variance * torch.ones(x.shape[:-1], dtype=DTYPE)

    def to_config(self):
        return {"kind": "rbf_ard", "input_dim": self.input_dim}


class Periodic(Kernel):
    """MacKay periodic kernel.

    k(x, x') = variance * exp(-2 sum_d sin^2(pi (x_d - x'_d) / period) / lengthscale^2)

    In one dimension this is the usual form on |x - x'|. Summing over
    dimensions (a product of 1-D periodic kernels) keeps it positive
    semi-definite for multi-dimensional inputs, which the Euclidean
    distance form is not.
    """

    def __init__(self, input_dim: int, period: float = 1.0, lengthscale: float = 1.0,
                 variance: float = 1.0, learn_variance: bool = True):
        super().__init__()
        self.input_dim = input_dim
        self.log_period = _log_param(period)
        self.log_lengthscales = _log_param(lengthscale, (1,))
        if learn_variance:
            self.log_variance = _log_param(variance)
        else:
            self.register_buffer("log_variance", torch.tensor(math.log(variance), dtype=DTYPE))

    @property
    def period(self):
        return self.log_period.exp()

    @property
    def lengthscales(self):
        return self.log_lengthscales.exp()

    @property
    def variance(self):
        return self.log_variance.exp()

    def forward(self, x1, x2=None):
        x1, x2 = self._check(x1, x2)
        diff = x1.unsqueeze(-2) - x2.unsqueeze(-3)
        s2 = (torch.sin(math.pi * diff / self.period) ** 2).sum(-1)
        return self.variance * torch.exp(-2.0 * s2 / self.lengthscales[0] ** 2)

    def diag(self, x):
        return self.variance * torch.ones(x.shape[:-1], dtype=DTYPE)

    def to_config(self):
        return {"kind": "periodic", "input_dim": self.input_dim}


class ProductKernel(Kernel):
    """k_w(code part) * k_aux(aux part) on concatenated [code, aux] rows."""

    def __init__(self, code_kernel: Kernel, aux_kernel: Kernel):
        super().__init__()
        self.code_kernel = code_kernel
        self.aux_kernel = aux_kernel
        self.code_dim = code_kernel.input_dim
        self.input_dim = code_kernel.input_dim + aux_kernel.input_dim

    def split(self, x):
        if x.shape[-1] != self.input_dim:
            raise ShapeMismatch(
                f"product kernel expects {self.code_dim}+{self.aux_kernel.input_dim} columns, got {x.shape[-1]}"
            )
        return x[..., : self.code_dim], x[..., self.code_dim:]

    def forward(self, x1, x2=None):
        if x2 is None:
            x2 = x1
        c1, a1 = self.split(x1)
        c2, a2 = self.split(x2)
        return self.code_kernel(c1, c2) * self.aux_kernel(a1, a2)

    def diag(self, x):
        c, a = self.split(x)
        return self.code_kernel.diag(c) * self.aux_kernel.diag(a)

    def to_config(self):
        return {"kind": "product", "code": self.code_kernel.to_config(), "aux": self.aux_kernel.to_config()}


def make_kernel(kind: str, input_dim: int, learn_variance: bool = True, **init) -> Kernel:
    if kind in ("rbf", "rbf_ard"):
        return RBFARD(input_dim, learn_variance=learn_variance, **init)
    if kind == "periodic":
        return Periodic(input_dim, learn_variance=learn_variance, **init)
    raise ValueError(f"unknown kernel kind {kind!r}")


def eval_rbf_ard(x1, x2, kernel: RBFARD) -> torch.Tensor:
    return kernel.evaluate(x1, x2)


def eval_periodic(x1, x2, kernel: Periodic) -> torch.Tensor:
    return kernel.evaluate(x1, x2)


def eval_product(c1, c2, kernel: ProductKernel) -> torch.Tensor:
    return kernel.evaluate(c1, c2)


def gram(x1: torch.Tensor, x2: torch.Tensor, kernel: Kernel) -> torch.Tensor:
    return kernel(torch.as_tensor(x1, dtype=DTYPE), torch.as_tensor(x2, dtype=DTYPE))
