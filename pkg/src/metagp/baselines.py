"""Comparator models: mean-field VI and MAP networks, exact GP regression."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import bnn
from .kernels import Kernel, make_kernel
from .prior import Architecture
from .svi import NonFiniteObjective, TrainConfig, TrainResult, fit, kl_gaussian_diag
from .tensor import DTYPE, NotPositiveDefinite, robust_cholesky, tri_solve

MAX_GP_POINTS = 2000


@dataclass
class BNNConfig:
    layer_widths: tuple[int, ...] = (1, 50, 1)
    activation: str = "relu"
    bias: bool = True
    likelihood: str = "gaussian"
    noise_variance: float = 0.1
    learn_noise: bool = True
    init_log_std: float = -5.0

    @property
    def arch(self) -> Architecture:
        return Architecture(tuple(self.layer_widths), self.activation, self.bias)

    def to_dict(self):
        d = asdict(self)
        d["layer_widths"] = list(d["layer_widths"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layer_widths"] = tuple(d["layer_widths"])
        return cls(**d)


def _init_weights(arch: Architecture, gen) -> torch.Tensor:
    # uniform fan-in init for weights and biases alike (torch.nn.Linear's default)
    blocks = []
    for n_in, n_out in arch.layer_shapes:
        fan_in = n_in - 1 if arch.bias else n_in
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        blocks.append((2 * torch.rand(n_in, n_out, generator=gen, dtype=DTYPE) - 1) * bound)
    return bnn.join_layers(blocks)


def _likelihood(cfg: BNNConfig):
    if cfg.likelihood == "gaussian":
        return bnn.GaussianLikelihood(cfg.noise_variance, cfg.learn_noise)
    return bnn.CategoricalLikelihood()


class MFVIModel(nn.Module):
    """Independent N(0, 1) prior over weights, factorised Gaussian posterior."""

    def __init__(self, config: BNNConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.arch = config.arch
        gen = torch.Generator().manual_seed(int(seed))
        self.likelihood = _likelihood(config)
        self.w_mean = nn.Parameter(_init_weights(self.arch, gen))
        self.w_log_std = nn.Parameter(torch.full((self.arch.weight_count,), config.init_log_std, dtype=DTYPE))

    def sample_weights(self, n, generator=None):
        eps = torch.randn(n, self.arch.weight_count, generator=generator, dtype=DTYPE)
        return self.w_mean + self.w_log_std.exp() * eps

    def sample_outputs(self, x, n_samples, generator=None):
        return bnn.forward(x, self.sample_weights(n_samples, generator), self.arch)

    def predictive(self, x, n_samples=100, generator=None):
        return bnn.predictive(x, self, n_samples, generator)


def mfvi_elbo(model: MFVIModel, x, y, n_data: int | None = None, K: int = 1, generator=None,
              return_terms: bool = False):
    x = torch.as_tensor(x, dtype=DTYPE)
    scale = (n_data or x.shape[0]) / x.shape[0] if x.shape[0] else 0.0
    out = model.sample_outputs(x, K, generator)
    terms = {
        "kl_w": kl_gaussian_diag(model.w_mean, model.w_log_std.exp()),
        "expected_log_lik": scale * bnn.log_likelihood(y, out, model.likelihood).sum(-1).mean(0),
    }
    value = terms["expected_log_lik"] - terms["kl_w"]
    return (value, terms) if return_terms else value


def train_mfvi(model: MFVIModel, x, y, config: TrainConfig, freeze_std: bool = False) -> TrainResult:
    def objective(m, xb, yb, n, gen):
        return mfvi_elbo(m, xb, yb, n, config.J, gen, return_terms=True)

    params = [p for name, p in model.named_parameters() if not (freeze_std and name == "w_log_std")]
    return fit(model, objective, x, y, config, params=params)


class MAPModel(nn.Module):
    """Point-estimate network under the same N(0, 1) weight prior."""

    def __init__(self, config: BNNConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.arch = config.arch
        gen = torch.Generator().manual_seed(int(seed))
        self.likelihood = _likelihood(config)
        self.weights = nn.Parameter(_init_weights(self.arch, gen))

    def sample_outputs(self, x, n_samples, generator=None):
        out = bnn.forward(x, self.weights, self.arch)
        return out.expand(n_samples, *out.shape)

    def predictive(self, x, n_samples=1, generator=None):
        return bnn.predictive(x, self, n_samples, generator)


def map_objective(model: MAPModel, x, y, n_data: int | None = None, return_terms: bool = False):
    """Scaled log-likelihood plus standard-normal log prior (no constants)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    scale = (n_data or x.shape[0]) / x.shape[0] if x.shape[0] else 0.0
    out = bnn.forward(x, model.weights, model.arch)
    terms = {
        "log_lik": scale * bnn.log_likelihood(y, out, model.likelihood).sum(),
        "log_prior": -0.5 * (model.weights ** 2).sum(),
    }
    value = terms["log_lik"] + terms["log_prior"]
    return (value, terms) if return_terms else value


def map_fit(model: MAPModel, x, y, config: TrainConfig) -> TrainResult:
    def objective(m, xb, yb, n, gen):
        return map_objective(m, xb, yb, n, return_terms=True)

    return fit(model, objective, x, y, config)


class GPRegressor(nn.Module):
    """Exact GP regression with a learned kernel and Gaussian noise."""

    # the noise term already regularises the diagonal, so jitter only enters on failure
    def __init__(self, kernel: Kernel, noise_variance: float = 0.1, jitter: float = 0.0):
        super().__init__()
        self.kernel = kernel
        self.log_noise_variance = nn.Parameter(torch.tensor(math.log(noise_variance), dtype=DTYPE))
        self.jitter = jitter
        self.x = None
        self.y = None
        self._chol = None
        self._alpha = None

    @property
    def noise_variance(self):
        return self.log_noise_variance.exp()

    def set_data(self, x, y):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[0] > MAX_GP_POINTS:
            raise ValueError(f"dense GP regression supports at most {MAX_GP_POINTS} points")
        self.x = x
        self.y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
        self._chol = None

    def _factor(self):
        k = self.kernel(self.x, self.x) + self.noise_variance * torch.eye(self.x.shape[0], dtype=DTYPE)
        return robust_cholesky(k, self.jitter)

    def log_marginal_likelihood(self) -> torch.Tensor:
        chol = self._factor()
        alpha = tri_solve(chol, self.y)
        n = self.y.shape[0]
        return (-0.5 * (alpha ** 2).sum() - torch.log(torch.diagonal(chol)).sum()
                - 0.5 * n * math.log(2 * math.pi))

    def refresh(self):
        """Recompute the cached factor after hyperparameters change."""
        with torch.no_grad():
            self._chol = self._factor()
            self._alpha = torch.linalg.solve_triangular(self._chol.T, tri_solve(self._chol, self.y).unsqueeze(-1),
                                                        upper=True).squeeze(-1)

    @torch.no_grad()
    def predict(self, x_test, include_noise: bool = True):
        if self._chol is None:
            self.refresh()
        xt = torch.as_tensor(x_test, dtype=DTYPE)
        ks = self.kernel(xt, self.x)
        mean = ks @ self._alpha
        v = tri_solve(self._chol, ks.T)
        var = self.kernel.diag(xt) - (v ** 2).sum(0)
        var = var.clamp(min=0.0)
        if include_noise:
            var = var + self.noise_variance
        return mean, var

    def optimize(self, steps: int = 500, lr: float = 1e-2, min_lr: float = 1e-6) -> list[float]:
        """Adam on the log marginal likelihood with a backtracking safeguard.

        A step that lowers the objective is undone and the step size
        halved, so the returned trace never decreases.
        """
        params = [p for p in self.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=lr)
        lml = self.log_marginal_likelihood()
        trace = [lml.item()]
        for _ in range(steps):
            saved = [p.detach().clone() for p in params]
            saved_opt = copy.deepcopy(opt.state_dict())
            opt.zero_grad()
            (-lml).backward()
            opt.step()
            try:
                new = self.log_marginal_likelihood()
                ok = bool(torch.isfinite(new)) and new.item() >= trace[-1]
            except NotPositiveDefinite:
                ok = False
            if ok:
                lml = new
                trace.append(new.item())
                continue
            with torch.no_grad():
                for p, s in zip(params, saved):
                    p.copy_(s)
            lr *= 0.5
            opt.load_state_dict(saved_opt)
            for group in opt.param_groups:
                group["lr"] = lr
            lml = self.log_marginal_likelihood()
            trace.append(trace[-1])
            if lr < min_lr:
                break
        self.refresh()
        return trace


def gp_fit_predict(x_train, y_train, x_test, kernel: str | Kernel = "rbf", steps: int = 500,
                   noise_variance: float = 0.1, restarts: list[dict] | None = None, **kernel_init):
    """Fit hyperparameters by marginal likelihood and predict at ``x_test``.

    ``restarts`` lists alternative kernel initialisations; the fit with the
    highest final marginal likelihood is kept. Returns (mean, var, lml, model).
    """
    x_train = torch.as_tensor(x_train, dtype=DTYPE)
    if x_train.dim() == 1:
        x_train = x_train.unsqueeze(-1)
    inits = restarts or [kernel_init]
    best = None
    for init in inits:
        k = make_kernel(kernel, x_train.shape[-1], **init) if isinstance(kernel, str) else kernel
        gp = GPRegressor(k, noise_variance)
        gp.set_data(x_train, y_train)
        trace = gp.optimize(steps) if steps > 0 else [gp.log_marginal_likelihood().item()]
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], gp)
    lml, gp = best
    gp.refresh()
    x_test = torch.as_tensor(x_test, dtype=DTYPE)
    if x_test.dim() == 1:
        x_test = x_test.unsqueeze(-1)
    mean, var = gp.predict(x_test)
    return mean, var, lml, gp


__all__ = [
    "BNNConfig", "MFVIModel", "MAPModel", "GPRegressor", "NonFiniteObjective",
    "mfvi_elbo", "train_mfvi", "map_objective", "map_fit", "gp_fit_predict",
]
