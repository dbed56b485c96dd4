import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from metagp import bnn
from metagp.baselines import BNNConfig, MFVIModel
from metagp.prior import Architecture
from metagp.tensor import DTYPE, ShapeMismatch


def test_zero_weights_give_final_bias():
    arch = Architecture((2, 4, 3))
    w = torch.zeros(arch.weight_count, dtype=DTYPE)
    sample = bnn.WeightSample.from_flat(w, arch)
    sample.biases[-1] = torch.tensor([0.5, -1.0, 2.0], dtype=DTYPE)
    out = bnn.forward(torch.randn(5, 2, dtype=DTYPE), sample, arch)
    assert torch.equal(out, torch.tensor([[0.5, -1.0, 2.0]], dtype=DTYPE).expand(5, 3))


def test_relu_hand_example():
    arch = Architecture((1, 1, 1))
    # blocks are [w; b] per layer
    w = torch.tensor([1.0, 0.0, 2.0, 0.0], dtype=DTYPE)
    out = bnn.forward(torch.tensor([[3.0], [-3.0]], dtype=DTYPE), w, arch)
    assert out[:, 0].tolist() == [6.0, 0.0]


def test_tanh_zero_input_zero_bias():
    arch = Architecture((2, 5, 5, 1), activation="tanh", bias=False)
    w = torch.randn(arch.weight_count, dtype=DTYPE)
    assert torch.equal(bnn.forward(torch.zeros(1, 2, dtype=DTYPE), w, arch), torch.zeros(1, 1, dtype=DTYPE))


def test_forward_dimension_mismatch():
    arch = Architecture((2, 3, 1))
    with pytest.raises(ShapeMismatch):
        bnn.forward(torch.zeros(4, 3, dtype=DTYPE), torch.zeros(arch.weight_count, dtype=DTYPE), arch)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.booleans(), st.integers(0, 1000))
def test_flatten_roundtrip(layers, bias, seed):
    arch = Architecture(layers, bias=bias)
    w = torch.randn(arch.weight_count, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    assert torch.equal(bnn.WeightSample.from_flat(w, arch).flatten(), w)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 100.0))
def test_relu_positive_homogeneity(seed, c):
    arch = Architecture((3, 8, 4, 2), bias=False)
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(arch.weight_count, generator=gen, dtype=DTYPE)
    x = torch.randn(6, 3, generator=gen, dtype=DTYPE)
    torch.testing.assert_close(bnn.forward(c * x, w, arch), c * bnn.forward(x, w, arch), rtol=1e-12, atol=1e-12)


def test_batched_and_per_input_weights_agree():
    arch = Architecture((2, 3, 1))
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(4, arch.weight_count, generator=gen, dtype=DTYPE)
    x = torch.randn(5, 2, generator=gen, dtype=DTYPE)
    shared = bnn.forward(x, w, arch)
    per_input = bnn.forward(x, w.unsqueeze(1).expand(4, 5, -1), arch)
    torch.testing.assert_close(shared, per_input, rtol=1e-14, atol=1e-14)


def test_categorical_uniform_logits():
    lp = bnn.log_likelihood(torch.tensor([2]), torch.zeros(1, 4, dtype=DTYPE), bnn.CategoricalLikelihood())
    assert lp.item() == pytest.approx(-1.386294, abs=1e-6)


def test_gaussian_zero_and_unit_residual():
    lik = bnn.GaussianLikelihood(1.0)
    f = torch.tensor([[0.3, -0.2]], dtype=DTYPE)
    assert bnn.log_likelihood(f, f, lik).item() == pytest.approx(-math.log(2 * math.pi), rel=1e-14)
    one = bnn.log_likelihood(torch.tensor([[1.0]], dtype=DTYPE), torch.tensor([[0.0]], dtype=DTYPE), lik)
    assert one.item() == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, rel=1e-14)


def test_invalid_class_index():
    with pytest.raises(ValueError):
        bnn.log_likelihood(torch.tensor([4]), torch.zeros(1, 4, dtype=DTYPE), bnn.CategoricalLikelihood())


def test_noise_variance_positive():
    assert bnn.GaussianLikelihood(1e-8).noise_variance.item() > 0


class _Fixed(torch.nn.Module):
    def __init__(self, outputs, likelihood):
        super().__init__()
        self.outputs = outputs
        self.likelihood = likelihood

    def sample_outputs(self, x, n, generator=None):
        return self.outputs[:n]


def test_entropy_examples():
    cat = bnn.CategoricalLikelihood()
    uniform = bnn.predictive(torch.zeros(1, 1), _Fixed(torch.zeros(1, 1, 4, dtype=DTYPE), cat), 1)
    assert uniform.entropy.item() == pytest.approx(math.log(4), abs=1e-6)
    assert bnn.categorical_entropy(torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE)).item() == 0.0
    logits = torch.tensor([[[800.0, 0.0]], [[0.0, 800.0]]], dtype=DTYPE)
    pair = bnn.predictive(torch.zeros(1, 1), _Fixed(logits, cat), 2)
    torch.testing.assert_close(pair.probs, torch.tensor([[0.5, 0.5]], dtype=DTYPE))
    assert pair.entropy.item() == pytest.approx(math.log(2), abs=1e-12)


def test_n_samples_must_be_positive():
    with pytest.raises(ValueError):
        bnn.predictive(torch.zeros(1, 1), _Fixed(torch.zeros(1, 1, 4), bnn.CategoricalLikelihood()), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 50))
def test_probabilities_sum_to_one(seed, k):
    logits = 5 * torch.randn(k, 7, 3, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)
    pred = bnn.summarize_samples(logits, bnn.CategoricalLikelihood())
    assert (pred.probs.sum(-1) - 1).abs().max().item() < 1e-12
    assert (pred.entropy >= 0).all()


def test_regression_predictive_moments():
    lik = bnn.GaussianLikelihood(0.1)
    outputs = torch.tensor([[[1.0]], [[3.0]]], dtype=DTYPE)
    pred = bnn.summarize_samples(outputs, lik)
    assert pred.mean.item() == 2.0
    assert pred.variance.item() == pytest.approx(1.1, rel=1e-12)
    assert pred.entropy.item() == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 1.1), rel=1e-12)


def test_monte_carlo_predictive_converges():
    model = MFVIModel(BNNConfig((1, 20, 1), init_log_std=-1.0), seed=0)
    x = torch.linspace(-2, 2, 9, dtype=DTYPE).unsqueeze(-1)
    with torch.no_grad():
        small = model.sample_outputs(x, 500, torch.Generator().manual_seed(1))
        large = model.sample_outputs(x, 1000, torch.Generator().manual_seed(2))
    se = torch.sqrt(small.var(0) / 500 + large.var(0) / 1000)
    assert ((small.mean(0) - large.mean(0)).abs() / se).max().item() < 3.0


def test_local_reparam_matches_weight_sampling_moments():
    arch = Architecture((1, 1))
    means = [torch.tensor([[0.5], [1.0]], dtype=DTYPE)]
    variances = [torch.tensor([[0.2], [0.1]], dtype=DTYPE)]
    x = torch.tensor([[2.0]], dtype=DTYPE)
    out = bnn.forward_local_reparam(x, means, variances, arch, 200_000, torch.Generator().manual_seed(0))
    assert out.mean().item() == pytest.approx(2.0, abs=0.01)
    assert out.var().item() == pytest.approx(0.2 * 4 + 0.1, rel=0.02)
