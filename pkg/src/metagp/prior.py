"""Unit latent variables, weight codes and prior sampling.

Every unit of the network owns a small latent vector. A weight from unit
``i`` of layer ``l`` to unit ``j`` of layer ``l+1`` is indexed by the code
``[z_{l,i}, z_{l+1,j}]``; a Gaussian process over that code space is the
prior over weights. Biases are weights leaving a per-layer constant unit
that has a latent of its own (the last unit index of each non-output
layer).

Weights are enumerated layer-major, then by input unit, then by output
unit. ``bnn.split_layers`` relies on the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from .kernels import Kernel
from .tensor import DTYPE, ShapeMismatch, robust_cholesky

MAX_DENSE_WEIGHTS = 2000


@dataclass(frozen=True)
class Architecture:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(h) for h in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least an input and an output layer")
        if min(self.layer_widths) < 1:
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_weight_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def units(self, layer: int) -> int:
        """Units of a layer that own a latent, the bias unit included."""
        extra = 1 if self.bias and layer < self.n_weight_layers else 0
        return self.layer_widths[layer] + extra

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((self.units(l), self.layer_widths[l + 1]) for l in range(self.n_weight_layers))

    @cached_property
    def layer_offsets(self) -> tuple[int, ...]:
        sizes = [a * b for a, b in self.layer_shapes]
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)]))

    @property
    def weight_count(self) -> int:
        return self.layer_offsets[-1]

    def layer_slice(self, layer: int) -> slice:
        return slice(self.layer_offsets[layer], self.layer_offsets[layer + 1])

    @cached_property
    def latent_offsets(self) -> tuple[int, ...]:
        counts = [self.units(l) for l in range(len(self.layer_widths))]
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(counts)]))

    @property
    def latent_count(self) -> int:
        return self.latent_offsets[-1]

    @cached_property
    def code_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Latent row indices (source, destination) for every weight."""
        src, dst = [], []
        for l, (n_in, n_out) in enumerate(self.layer_shapes):
            i, j = np.meshgrid(np.arange(n_in), np.arange(n_out), indexing="ij")
            src.append(self.latent_offsets[l] + i.ravel())
            dst.append(self.latent_offsets[l + 1] + j.ravel())
        return np.concatenate(src), np.concatenate(dst)

    def weight_index(self, layer: int, i: int, j: int) -> int:
        n_in, n_out = self.layer_shapes[layer]
        if not (0 <= i < n_in and 0 <= j < n_out):
            raise IndexError(f"no weight ({layer}, {i}, {j})")
        return self.layer_offsets[layer] + i * n_out + j

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation, "bias": self.bias}


@dataclass
class UnitLatents:
    """Latent vectors for all units, stacked in layer order: (latent_count, D_z)."""

    arch: Architecture
    values: torch.Tensor

    def __post_init__(self):
        if self.values.shape[-2] != self.arch.latent_count:
            raise ShapeMismatch(
                f"expected {self.arch.latent_count} unit latents for {self.arch.layer_widths}, "
                f"got {self.values.shape[-2]}"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def unit(self, layer: int, i: int) -> torch.Tensor:
        return self.values[..., self.arch.latent_offsets[layer] + i, :]

    @classmethod
    def sample(cls, arch: Architecture, dim: int, generator: torch.Generator | None = None) -> "UnitLatents":
        return cls(arch, torch.randn(arch.latent_count, dim, generator=generator, dtype=DTYPE))


def build_codes(arch: Architecture, z) -> torch.Tensor:
    """Weight code table, one row ``[z_{l,i}, z_{l+1,j}]`` per weight."""
    values = z.values if isinstance(z, UnitLatents) else z
    if values.shape[-2] != arch.latent_count:
        raise ShapeMismatch(f"expected {arch.latent_count} unit latents, got {values.shape[-2]}")
    src, dst = arch.code_index
    return torch.cat([values[..., src, :], values[..., dst, :]], dim=-1)


@dataclass
class AuxTransform:
    """eps = g(V x). ``identity`` passes inputs through unchanged."""

    kind: str = "identity"          # identity | linear
    nonlinearity: str = "identity"  # identity | tanh
    matrix: torch.Tensor | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "linear"):
            raise ValueError(f"unknown aux transform {self.kind!r}")
        if self.nonlinearity not in ("identity", "tanh"):
            raise ValueError(f"unknown aux nonlinearity {self.nonlinearity!r}")
        if self.kind == "linear" and self.matrix is None:
            raise ValueError("linear aux transform needs a matrix")

    def __call__(self, x: torch.Tensor, matrix: torch.Tensor | None = None) -> torch.Tensor:
        if self.kind == "identity":
            out = x
        else:
            v = self.matrix if matrix is None else matrix
            if x.shape[-1] != v.shape[-1]:
                raise ShapeMismatch(f"aux matrix {tuple(v.shape)} cannot map inputs of width {x.shape[-1]}")
            out = x @ v.transpose(-1, -2)
        return torch.tanh(out) if self.nonlinearity == "tanh" else out


def build_local_codes(codes: torch.Tensor, x, aux: AuxTransform) -> torch.Tensor:
    """Append the transformed input ``g(V x)`` to every code row."""
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1)
    eps = aux(x.unsqueeze(0))[0]
    return torch.cat([codes, eps.expand(codes.shape[0], -1)], dim=-1)


def weight_prior_covariance(codes: torch.Tensor, kernel: Kernel, weight_noise: float,
                            arch: Architecture | None = None, per_layer: bool = False) -> torch.Tensor:
    """K_w + sigma_w^2 I; with ``per_layer`` cross-layer blocks are zeroed."""
    cov = kernel(codes, codes)
    if per_layer:
        mask = torch.zeros_like(cov)
        for l in range(arch.n_weight_layers):
            s = arch.layer_slice(l)
            mask[s, s] = 1.0
        cov = cov * mask
    return cov + weight_noise * torch.eye(codes.shape[0], dtype=DTYPE)


def _psd_factor(k: torch.Tensor) -> torch.Tensor:
    # noise-free Gram matrices are often numerically rank deficient
    vals, vecs = torch.linalg.eigh(k)
    return vecs * vals.clamp(min=0).sqrt()


@dataclass
class PriorSamples:
    z: UnitLatents
    codes: torch.Tensor
    covariance: torch.Tensor          # over weights (code kernel part, noise included)
    weights: torch.Tensor             # (n, W) or (n, N, W) for local kernels
    aux_inputs: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def sample_prior_weights(arch: Architecture, kernel: Kernel, weight_noise: float, seed: int,
                         n_function_samples: int, latent_dim: int = 2, aux_kernel: Kernel | None = None,
                         aux_inputs: torch.Tensor | None = None, per_layer: bool = False,
                         z: UnitLatents | None = None) -> PriorSamples:
    """Draw one z from p(z), then weight vectors from N(0, K_w + sigma_w^2 I).

    With ``aux_kernel`` the weights depend on the input: the covariance of
    weight ``a`` at input ``n`` and weight ``b`` at input ``m`` is
    K_w[a, b] * K_aux[n, m] (+ sigma_w^2 when a == b and n == m), and the
    returned array holds one weight vector per input in ``aux_inputs``.
    """
    if arch.weight_count > MAX_DENSE_WEIGHTS:
        raise ValueError(f"dense prior sampling supports at most {MAX_DENSE_WEIGHTS} weights")
    gen = torch.Generator().manual_seed(int(seed))
    if z is None:
        z = UnitLatents.sample(arch, latent_dim, gen)
    codes = build_codes(arch, z)
    with torch.no_grad():
        if aux_kernel is None:
            cov = weight_prior_covariance(codes, kernel, weight_noise, arch, per_layer)
            chol = robust_cholesky(cov)
            eps = torch.randn(n_function_samples, codes.shape[0], generator=gen, dtype=DTYPE)
            return PriorSamples(z, codes, cov, eps @ chol.T)
        if aux_inputs is None:
            raise ValueError("local prior sampling needs aux_inputs")
        kw = weight_prior_covariance(codes, kernel, 0.0, arch, per_layer)
        ka = aux_kernel(aux_inputs, aux_inputs)
        lw = _psd_factor(kw)
        la = _psd_factor(ka)
        n = aux_inputs.shape[0]
        eps = torch.randn(n_function_samples, codes.shape[0], n, generator=gen, dtype=DTYPE)
        noise = torch.randn(n_function_samples, codes.shape[0], n, generator=gen, dtype=DTYPE)
        # Kronecker-structured draw: L_w E L_aux^T has covariance K_w (x) K_aux
        w = lw @ eps @ la.T + weight_noise ** 0.5 * noise
        return PriorSamples(z, codes, kw + weight_noise * torch.eye(codes.shape[0], dtype=DTYPE),
                            w.transpose(-1, -2), aux_inputs)
