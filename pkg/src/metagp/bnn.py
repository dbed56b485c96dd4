"""Feedforward networks under sampled weights, likelihoods and predictives.

Weights travel as flat vectors in the enumeration order of
``prior.Architecture``. Layer ``l`` is a ``(H_l [+1], H_{l+1})`` block; the
extra row, when present, holds the biases. Leading batch dimensions are
allowed: ``(K, W)`` means K weight samples shared by all inputs and
``(K, N, W)`` one weight vector per input (local priors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .prior import Architecture
from .tensor import DTYPE, ShapeMismatch

LOG_2PI = math.log(2 * math.pi)


def split_layers(w: torch.Tensor, arch: Architecture) -> list[torch.Tensor]:
    if w.shape[-1] != arch.weight_count:
        raise ShapeMismatch(f"expected {arch.weight_count} weights, got {w.shape[-1]}")
    return [w[..., arch.layer_slice(l)].reshape(*w.shape[:-1], *shape)
            for l, shape in enumerate(arch.layer_shapes)]


def join_layers(layers: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat([m.reshape(*m.shape[:-2], -1) for m in layers], dim=-1)


@dataclass
class WeightSample:
    """One network's weights as per-layer matrices and bias vectors."""

    arch: Architecture
    weights: list[torch.Tensor]
    biases: list[torch.Tensor | None]

    @classmethod
    def from_flat(cls, w: torch.Tensor, arch: Architecture) -> "WeightSample":
        weights, biases = [], []
        for block in split_layers(torch.as_tensor(w, dtype=DTYPE), arch):
            if arch.bias:
                weights.append(block[:-1])
                biases.append(block[-1])
            else:
                weights.append(block)
                biases.append(None)
        return cls(arch, weights, biases)

    def flatten(self) -> torch.Tensor:
        blocks = [torch.cat([w, b.unsqueeze(0)]) if b is not None else w
                  for w, b in zip(self.weights, self.biases)]
        return join_layers(blocks)


def _activation(arch: Architecture):
    return torch.relu if arch.activation == "relu" else torch.tanh


def _with_bias(h: torch.Tensor) -> torch.Tensor:
    return torch.cat([h, torch.ones(*h.shape[:-1], 1, dtype=h.dtype)], dim=-1)


def _affine(h: torch.Tensor, block: torch.Tensor, per_input: bool) -> torch.Tensor:
    if not per_input:
        return h @ block
    return (h.unsqueeze(-2) @ block).squeeze(-2)


def forward(x, w, arch: Architecture) -> torch.Tensor:
    """Network outputs; affine output layer, activations in between.

    ``w`` is a flat weight tensor (see module docstring), a list of
    per-layer blocks, or a WeightSample.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != arch.input_dim:
        raise ShapeMismatch(f"network expects {arch.input_dim} inputs, got {x.shape[-1]}")
    if isinstance(w, WeightSample):
        w = w.flatten()
    layers = w if isinstance(w, (list, tuple)) else split_layers(w, arch)
    act = _activation(arch)
    h = x
    for l, block in enumerate(layers):
        if arch.bias:
            h = _with_bias(h)
        h = _affine(h, block, per_input=block.dim() == 4)
        if l < len(layers) - 1:
            h = act(h)
    return h


def forward_local_reparam(x, means: list[torch.Tensor], variances: list[torch.Tensor], arch: Architecture,
                          n_samples: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample pre-activations instead of weights for factorised Gaussian weights.

    ``means``/``variances`` hold one block per layer, either shared
    ``(in, out)`` or per input ``(N, in, out)``. Returns (n_samples, N, D_out).
    """
    act = _activation(arch)
    h = torch.as_tensor(x, dtype=DTYPE)
    n_layers = len(means)
    for l, (m, v) in enumerate(zip(means, variances)):
        if arch.bias:
            h = _with_bias(h)
        per_input = m.dim() == 3
        mu = _affine(h, m, per_input)
        var = _affine(h ** 2, v, per_input)
        if l == 0:
            mu = mu.expand(n_samples, *mu.shape[-2:])
            var = var.expand(n_samples, *var.shape[-2:])
        eps = torch.randn(mu.shape, generator=generator, dtype=DTYPE)
        h = mu + var.clamp(min=0).sqrt() * eps
        if l < n_layers - 1:
            h = act(h)
    return h


class GaussianLikelihood(nn.Module):
    kind = "gaussian"

    def __init__(self, noise_variance: float = 0.1, learn: bool = True):
        super().__init__()
        value = torch.tensor(math.log(noise_variance), dtype=DTYPE)
        if learn:
            self.log_noise_variance = nn.Parameter(value)
        else:
            self.register_buffer("log_noise_variance", value)

    @property
    def noise_variance(self):
        return self.log_noise_variance.exp()

    def log_prob(self, y, f_out):
        var = self.noise_variance
        return (-0.5 * (LOG_2PI + torch.log(var)) - 0.5 * (y - f_out) ** 2 / var).sum(-1)


class CategoricalLikelihood(nn.Module):
    kind = "categorical"

    def log_prob(self, y, f_out):
        y = torch.as_tensor(y, dtype=torch.long)
        n_classes = f_out.shape[-1]
        if bool(((y < 0) | (y >= n_classes)).any()):
            raise ValueError(f"class index out of range for {n_classes} classes")
        logp = torch.log_softmax(f_out, dim=-1)
        index = y.reshape(*([1] * (logp.dim() - 2)), -1, 1).expand(*logp.shape[:-1], 1)
        return logp.gather(-1, index).squeeze(-1)


def log_likelihood(y, f_out, lik) -> torch.Tensor:
    """Per-datapoint log p(y | f); gaussian targets are (N, D_out), classes (N,)."""
    f_out = torch.as_tensor(f_out, dtype=DTYPE)
    if lik.kind == "gaussian":
        y = torch.as_tensor(y, dtype=DTYPE)
        if y.shape[-1] != f_out.shape[-1]:
            raise ShapeMismatch(f"targets {tuple(y.shape)} do not match outputs {tuple(f_out.shape)}")
    return lik.log_prob(y, f_out)


def categorical_entropy(probs: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(probs, probs).sum(-1)


def gaussian_entropy(variance: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.log(2 * math.pi * math.e * variance).sum(-1)


@dataclass
class Predictive:
    entropy: torch.Tensor
    mean: torch.Tensor | None = None
    variance: torch.Tensor | None = None
    probs: torch.Tensor | None = None


def summarize_samples(outputs: torch.Tensor, lik) -> Predictive:
    """Monte Carlo predictive from sampled network outputs (K, N, D_out)."""
    if lik.kind == "categorical":
        probs = torch.softmax(outputs, dim=-1).mean(0)
        return Predictive(entropy=categorical_entropy(probs), probs=probs)
    mean = outputs.mean(0)
    variance = outputs.var(0, unbiased=False) + lik.noise_variance.detach()
    return Predictive(entropy=gaussian_entropy(variance), mean=mean, variance=variance)


@torch.no_grad()
def predictive(x, model, n_samples: int = 100, generator: torch.Generator | None = None) -> Predictive:
    """Average ``n_samples`` draws of ``model.sample_outputs`` into a predictive."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    outputs = model.sample_outputs(torch.as_tensor(x, dtype=DTYPE), n_samples, generator=generator)
    return summarize_samples(outputs, model.likelihood)
