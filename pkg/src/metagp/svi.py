"""Structured stochastic variational inference for GP meta-priors.

The approximate posterior is q(z) q(u) [q(V)] with the GP values away from
the inducing inputs and the weights themselves kept at their conditional
prior, so conditioned on a latent sample the weights are Gaussian:

    A = K_wu K_uu^{-1}
    B = K_ww - K_wu K_uu^{-1} K_uw + sigma_w^2 I

With u marginalised the weights are N(A mu_u, B + A Sigma_u A^T); with u
sampled they are N(A u, B). ``exact`` keeps the full covariance, ``fitc``
keeps only diag(B) plus the low-rank term, ``diag`` keeps only the
marginal variances.

For local (input-dependent) priors the code kernel is multiplied by an
auxiliary kernel over transformed inputs, so every datapoint gets its own
A and B. Inducing inputs then carry an auxiliary block paired row-by-row
with the code block.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import torch
from torch import nn

from . import bnn
from .kernels import Kernel, ProductKernel, RBFARD, make_kernel
from .prior import MAX_DENSE_WEIGHTS, Architecture, AuxTransform, build_codes
from .tensor import DEFAULT_JITTER, DTYPE, ShapeMismatch, log_det_from_cholesky, robust_cholesky, tri_solve

log = logging.getLogger(__name__)

COV_MODES = ("exact", "fitc", "diag")
U_HANDLING = ("sample", "marginalize")


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass(frozen=True)
class ApproxMode:
    cov: str = "diag"
    u_handling: str = "marginalize"
    local_reparam: bool = False

    def __post_init__(self):
        if self.cov not in COV_MODES:
            raise ValueError(f"cov must be one of {COV_MODES}, got {self.cov!r}")
        if self.u_handling not in U_HANDLING:
            raise ValueError(f"u_handling must be one of {U_HANDLING}, got {self.u_handling!r}")
        if self.local_reparam and self.cov != "diag":
            raise ValueError("local reparameterization is only available in diag mode")

    @property
    def sample_u(self) -> bool:
        return self.u_handling == "sample"


class InducingState(nn.Module):
    """Inducing inputs C_u (M x d) and q(u) = N(mean, chol chol^T).

    With ``whiten`` the stored ``mean``/``chol`` describe v, where
    u = L_uu v and L_uu is the Cholesky factor of K_uu. The variational
    family is the same; only the optimisation geometry changes.
    """

    def __init__(self, inputs: torch.Tensor, scale: float = 0.1, whiten: bool = False):
        super().__init__()
        m = inputs.shape[0]
        if m < 1:
            raise ValueError("need at least one inducing point")
        self.whiten = bool(whiten)
        self.inputs = nn.Parameter(torch.as_tensor(inputs, dtype=DTYPE).clone())
        self.mean = nn.Parameter(torch.zeros(m, dtype=DTYPE))
        # strictly lower part is free, the diagonal is stored as a log
        self.raw_chol = nn.Parameter(torch.diag(torch.full((m,), math.log(scale), dtype=DTYPE)))

    @property
    def num_inducing(self) -> int:
        return self.inputs.shape[0]

    @property
    def chol(self) -> torch.Tensor:
        raw = self.raw_chol
        return torch.tril(raw, -1) + torch.diag_embed(torch.diagonal(raw).exp())

    @property
    def covariance(self) -> torch.Tensor:
        l = self.chol
        return l @ l.T

    @torch.no_grad()
    def set_chol(self, chol: torch.Tensor) -> None:
        self.raw_chol.copy_(torch.tril(chol, -1) + torch.diag_embed(torch.diagonal(chol).log()))

    def moments(self, kuu_chol: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and Cholesky factor of q(u) in u-space."""
        if not self.whiten:
            return self.mean, self.chol
        if kuu_chol is None:
            raise ValueError("whitened inducing state needs chol(K_uu)")
        return kuu_chol @ self.mean, kuu_chol @ self.chol

    def kl(self, kuu_chol: torch.Tensor) -> torch.Tensor:
        """KL[q(u) || N(0, K_uu)]."""
        if self.whiten:
            eye = torch.eye(self.num_inducing, dtype=DTYPE)
            return kl_gaussian_full(self.mean, self.chol, kuu_chol=eye)
        return kl_gaussian_full(self.mean, self.chol, kuu_chol=kuu_chol)

    def sample(self, generator=None, kuu_chol: torch.Tensor | None = None) -> torch.Tensor:
        eps = torch.randn(self.num_inducing, generator=generator, dtype=DTYPE)
        v = self.mean + self.chol @ eps
        if self.whiten:
            if kuu_chol is None:
                raise ValueError("whitened inducing state needs chol(K_uu)")
            return kuu_chol @ v
        return v


def _zero_diagonal(m: torch.Tensor) -> torch.Tensor:
    return m - torch.diag_embed(torch.diagonal(m, dim1=-2, dim2=-1))


@dataclass
class WeightConditional:
    """Gaussian over weights; leading dims index datapoints for local priors.

    ``var`` always holds the marginal variances of the mode. ``var_b`` is
    diag(B). ``factor`` (fitc with u marginalised) is A L_u, ``cov`` (exact)
    the dense covariance.
    """

    mode: ApproxMode
    mean: torch.Tensor
    var: torch.Tensor
    var_b: torch.Tensor
    factor: torch.Tensor | None = None
    cov: torch.Tensor | None = None

    def covariance(self) -> torch.Tensor:
        if self.cov is not None:
            return self.cov
        if self.factor is not None:
            off = _zero_diagonal(self.factor @ self.factor.transpose(-1, -2))
            return off + torch.diag_embed(self.var)
        return torch.diag_embed(self.var)

    def sample(self, n: int, generator=None) -> torch.Tensor:
        shape = (n, *self.mean.shape)
        eps = torch.randn(shape, generator=generator, dtype=DTYPE)
        if self.cov is not None:
            chol = robust_cholesky(self.cov, jitter=0.0)
            return self.mean + (chol @ eps.unsqueeze(-1)).squeeze(-1)
        if self.factor is not None:
            eps_u = torch.randn((n, *self.factor.shape[:-2], self.factor.shape[-1]),
                                generator=generator, dtype=DTYPE)
            low_rank = (self.factor @ eps_u.unsqueeze(-1)).squeeze(-1)
            return self.mean + self.var_b.sqrt() * eps + low_rank
        return self.mean + self.var.sqrt() * eps


def _condition(kwu, kdiag, kww, kuu_chol, state: InducingState, weight_noise, mode: ApproxMode,
               u_sample=None) -> WeightConditional:
    """Shared algebra; kwu is (..., W, M), kdiag (..., W), kww (..., W, W) or None."""
    q = tri_solve(kuu_chol, kwu.transpose(-1, -2))                  # L^-1 K_uw
    a_t = None
    if mode.sample_u or not state.whiten:
        a_t = torch.linalg.solve_triangular(kuu_chol.transpose(-1, -2), q, upper=True)  # K_uu^-1 K_uw
    # the Nystrom residual is non-negative in exact arithmetic
    var_b = torch.clamp(kdiag - (q ** 2).sum(-2), min=0.0) + weight_noise
    factor = None
    if mode.sample_u:
        if u_sample is None:
            raise ValueError("u_sample is required when u is sampled")
        mean = (a_t * u_sample.unsqueeze(-1)).sum(-2)
        var = var_b
    else:
        if state.whiten:
            # A L_uu = K_wu L_uu^-T, i.e. q^T
            mean = (q * state.mean.unsqueeze(-1)).sum(-2)
            factor = q.transpose(-1, -2) @ state.chol
        else:
            mean = (a_t * state.mean.unsqueeze(-1)).sum(-2)
            factor = a_t.transpose(-1, -2) @ state.chol
        var = var_b + (factor ** 2).sum(-1)
    cov = None
    if mode.cov == "exact":
        if kww is None:
            raise ValueError("exact mode needs the full code Gram matrix")
        off = kww - q.transpose(-1, -2) @ q
        if factor is not None:
            off = off + factor @ factor.transpose(-1, -2)
        cov = _zero_diagonal(off) + torch.diag_embed(var)
        factor = None
    elif mode.cov == "diag":
        factor = None
    return WeightConditional(mode, mean, var, var_b, factor, cov)


def kuu_cholesky(state: InducingState, kernel: Kernel, jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    return robust_cholesky(kernel(state.inputs, state.inputs), jitter)


def conditional_qw(codes: torch.Tensor, state: InducingState, kernel: Kernel, weight_noise, mode: ApproxMode,
                   u_sample: torch.Tensor | None = None, jitter: float = DEFAULT_JITTER,
                   kuu_chol: torch.Tensor | None = None) -> WeightConditional:
    """q(w | z) for a global meta-prior given the code table of one z sample."""
    if codes.shape[-1] != state.inputs.shape[-1]:
        raise ShapeMismatch(f"codes have {codes.shape[-1]} columns, inducing inputs {state.inputs.shape[-1]}")
    if mode.cov == "exact" and codes.shape[0] > MAX_DENSE_WEIGHTS:
        raise ValueError(f"exact mode supports at most {MAX_DENSE_WEIGHTS} weights")
    if kuu_chol is None:
        kuu_chol = kuu_cholesky(state, kernel, jitter)
    kwu = kernel(codes, state.inputs)
    kww = kernel(codes, codes) if mode.cov == "exact" else None
    return _condition(kwu, kernel.diag(codes), kww, kuu_chol, state, weight_noise, mode, u_sample)


def local_conditional_qw(codes: torch.Tensor, aux_inputs: torch.Tensor, state: InducingState,
                         kernel: ProductKernel, weight_noise, mode: ApproxMode,
                         u_sample: torch.Tensor | None = None, jitter: float = DEFAULT_JITTER,
                         kuu_chol: torch.Tensor | None = None) -> WeightConditional:
    """Per-datapoint q(w_n | z) for a local meta-prior.

    ``aux_inputs`` is (N, D_aux); the result has a leading datapoint axis.
    Cross-covariances are products of a code factor and an aux factor, so
    the (N, W, M) tensor is formed by broadcasting instead of N kernel calls.
    """
    if not isinstance(kernel, ProductKernel):
        raise TypeError("local conditionals need a product kernel")
    if mode.cov == "exact" and codes.shape[0] > MAX_DENSE_WEIGHTS:
        raise ValueError(f"exact mode supports at most {MAX_DENSE_WEIGHTS} weights")
    cu_code, cu_aux = kernel.split(state.inputs)
    if kuu_chol is None:
        kuu_chol = kuu_cholesky(state, kernel, jitter)
    k_code = kernel.code_kernel(codes, cu_code)                     # (W, M)
    k_aux = kernel.aux_kernel(aux_inputs, cu_aux)                   # (N, M)
    kwu = k_code.unsqueeze(0) * k_aux.unsqueeze(1)                  # (N, W, M)
    aux_diag = kernel.aux_kernel.diag(aux_inputs)                   # (N,)
    kdiag = kernel.code_kernel.diag(codes).unsqueeze(0) * aux_diag.unsqueeze(1)
    kww = None
    if mode.cov == "exact":
        kww = kernel.code_kernel(codes, codes).unsqueeze(0) * aux_diag.reshape(-1, 1, 1)
    return _condition(kwu, kdiag, kww, kuu_chol, state, weight_noise, mode, u_sample)


def kl_gaussian_diag(mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    """KL[N(mean, diag(std^2)) || N(0, I)]."""
    var = std ** 2
    return 0.5 * (var + mean ** 2 - 1.0 - torch.log(var)).sum()


def kl_gaussian_full(mean: torch.Tensor, chol: torch.Tensor, kuu: torch.Tensor | None = None,
                     kuu_chol: torch.Tensor | None = None) -> torch.Tensor:
    """KL[N(mean, chol chol^T) || N(0, K_uu)]."""
    if kuu_chol is None:
        kuu_chol = robust_cholesky(kuu, jitter=0.0)
    m = mean.shape[-1]
    a = tri_solve(kuu_chol, chol)
    b = tri_solve(kuu_chol, mean)
    return 0.5 * ((a ** 2).sum() + (b ** 2).sum() - m
                  + log_det_from_cholesky(kuu_chol) - log_det_from_cholesky(chol))


class GPGroup(nn.Module):
    """One GP meta-mapping shared by a set of weight layers."""

    def __init__(self, layers: tuple[int, ...], latent_dim: int, inducing_inputs: torch.Tensor,
                 aux_kernel: Kernel | None = None, lengthscale: float = 1.0, variance: float = 1.0,
                 weight_noise: float = 0.01, u_scale: float = 0.1, whiten: bool = False):
        super().__init__()
        self.layers = tuple(layers)
        code_kernel = RBFARD(2 * latent_dim, lengthscale=lengthscale, variance=variance)
        self.kernel = code_kernel if aux_kernel is None else ProductKernel(code_kernel, aux_kernel)
        self.log_weight_noise = nn.Parameter(torch.tensor(math.log(weight_noise), dtype=DTYPE))
        self.inducing = InducingState(inducing_inputs, scale=u_scale, whiten=whiten)

    @property
    def local(self) -> bool:
        return isinstance(self.kernel, ProductKernel)

    @property
    def weight_noise(self):
        return self.log_weight_noise.exp()


@dataclass
class ModelConfig:
    """Everything needed to rebuild a MetaGPModel (stored in checkpoints)."""

    layer_widths: tuple[int, ...] = (1, 50, 1)
    activation: str = "relu"
    bias: bool = True
    likelihood: str = "gaussian"            # gaussian | categorical
    noise_variance: float = 0.1
    learn_noise: bool = True
    latent_dim: int = 2
    inducing_points: int = 50
    cov_mode: str = "diag"
    u_handling: str = "marginalize"
    local_reparam: bool = False
    local_kernel: str | None = None         # None (global) | rbf | periodic
    local_layers: tuple[int, ...] | None = None
    per_layer_gp: bool = False
    aux_transform: str = "identity"         # identity | linear
    aux_nonlinearity: str = "identity"
    aux_dim: int | None = None
    lengthscale: float = 1.0
    kernel_variance: float = 1.0
    weight_noise: float = 0.01
    aux_lengthscale: float = 1.0
    aux_period: float = 1.0
    z_init_std: float = 1.0
    inducing_init: str = "codes"            # codes (rows of the initial code table) | prior (N(0, I))
    z_std: float = 0.1
    u_scale: float = 0.1
    # std of the random initial q(u) mean (whitened coordinates); zero mean weights are a saddle
    u_mean_std: float = 0.0
    u_init: str = "identity"                # identity | prior (L_u = u_scale * chol(K_uu))
    whiten: bool = True
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        choices = {
            "likelihood": ("gaussian", "categorical"),
            "local_kernel": (None, "rbf", "periodic"),
            "inducing_init": ("codes", "prior"),
            "u_init": ("identity", "prior"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.inducing_points < 1:
            raise ValueError("inducing_points must be positive")
        self.mode  # validates cov_mode / u_handling / local_reparam

    @property
    def arch(self) -> Architecture:
        return Architecture(tuple(self.layer_widths), self.activation, self.bias)

    @property
    def mode(self) -> ApproxMode:
        return ApproxMode(self.cov_mode, self.u_handling, self.local_reparam)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("layer_widths", "local_layers"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("layer_widths", "local_layers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _layer_groups(cfg: ModelConfig) -> list[tuple[tuple[int, ...], bool]]:
    n = cfg.arch.n_weight_layers
    local = set()
    if cfg.local_kernel is not None:
        local = set(range(n)) if cfg.local_layers is None else {l % n for l in cfg.local_layers}
    if cfg.per_layer_gp:
        return [((l,), l in local) for l in range(n)]
    groups = []
    plain = tuple(l for l in range(n) if l not in local)
    if plain:
        groups.append((plain, False))
    if local:
        groups.append((tuple(sorted(local)), True))
    return groups


class MetaGPModel(nn.Module):
    """BNN whose weights carry a (local) GP meta-prior, with its variational posterior."""

    def __init__(self, config: ModelConfig, seed: int = 0, init_inputs: torch.Tensor | None = None):
        super().__init__()
        self.config = config
        self.arch = config.arch
        self.mode = config.mode
        arch = self.arch
        gen = torch.Generator().manual_seed(int(seed))
        dz = config.latent_dim
        self.likelihood = (bnn.GaussianLikelihood(config.noise_variance, config.learn_noise)
                           if config.likelihood == "gaussian" else bnn.CategoricalLikelihood())

        self.z_mean = nn.Parameter(config.z_init_std * torch.randn(arch.latent_count, dz, generator=gen, dtype=DTYPE))
        self.z_log_std = nn.Parameter(torch.full((arch.latent_count, dz), math.log(config.z_std), dtype=DTYPE))

        self.aux = None
        self.aux_dim = 0
        if config.local_kernel is not None:
            if config.aux_transform == "linear":
                self.aux_dim = config.aux_dim or 2
                self.V_mean = nn.Parameter(torch.randn(self.aux_dim, arch.input_dim, generator=gen, dtype=DTYPE)
                                           / math.sqrt(arch.input_dim))
                self.V_log_std = nn.Parameter(torch.full((self.aux_dim, arch.input_dim), math.log(0.01), dtype=DTYPE))
                self.aux = AuxTransform("linear", config.aux_nonlinearity, self.V_mean)
            else:
                self.aux_dim = arch.input_dim
                self.aux = AuxTransform("identity", config.aux_nonlinearity)

        self.groups = nn.ModuleList()
        init_codes = build_codes(arch, self.z_mean.detach())
        for layers, local in _layer_groups(config):
            if config.inducing_init == "codes":
                idx = torch.cat([torch.arange(arch.layer_offsets[l], arch.layer_offsets[l + 1]) for l in layers])
                pick = idx[torch.randperm(len(idx), generator=gen)[:config.inducing_points]]
                if len(pick) < config.inducing_points:
                    pick = idx[torch.randint(0, len(idx), (config.inducing_points,), generator=gen)]
                inducing = init_codes[pick].clone()
            else:
                inducing = torch.randn(config.inducing_points, 2 * dz, generator=gen, dtype=DTYPE)
            aux_kernel = None
            if local:
                aux_kernel = make_kernel(config.local_kernel, self.aux_dim, learn_variance=False,
                                         lengthscale=config.aux_lengthscale,
                                         **({"period": config.aux_period} if config.local_kernel == "periodic" else {}))
                inducing = torch.cat([inducing, self._init_aux_inducing(init_inputs, gen)], dim=-1)
            self.groups.append(GPGroup(layers, dz, inducing, aux_kernel, config.lengthscale,
                                       config.kernel_variance, config.weight_noise, config.u_scale,
                                       config.whiten))
        if config.u_mean_std > 0:
            with torch.no_grad():
                for g in self.groups:
                    v = config.u_mean_std * torch.randn(g.inducing.num_inducing, generator=gen, dtype=DTYPE)
                    if not g.inducing.whiten:
                        v = kuu_cholesky(g.inducing, g.kernel, config.jitter) @ v
                    g.inducing.mean.copy_(v)
        if config.u_init == "prior" and not config.whiten:
            with torch.no_grad():
                for g in self.groups:
                    g.inducing.set_chol(config.u_scale * kuu_cholesky(g.inducing, g.kernel, config.jitter))
        self._group_weight_index = [
            torch.cat([torch.arange(arch.layer_offsets[l], arch.layer_offsets[l + 1]) for l in g.layers])
            for g in self.groups
        ]

    def _init_aux_inducing(self, init_inputs, gen):
        m = self.config.inducing_points
        if init_inputs is None:
            return torch.randn(m, self.aux_dim, generator=gen, dtype=DTYPE)
        x = torch.as_tensor(init_inputs, dtype=DTYPE).reshape(-1, self.arch.input_dim)
        idx = torch.randint(0, x.shape[0], (m,), generator=gen) if x.shape[0] < m else \
            torch.randperm(x.shape[0], generator=gen)[:m]
        with torch.no_grad():
            return self.aux(x[idx]).clone()

    # -- variational pieces -------------------------------------------------

    @property
    def is_local(self) -> bool:
        return any(g.local for g in self.groups)

    @property
    def learns_transform(self) -> bool:
        return self.aux is not None and self.aux.kind == "linear"

    def z_std(self):
        return self.z_log_std.exp()

    def sample_z(self, generator=None) -> torch.Tensor:
        eps = torch.randn(self.z_mean.shape, generator=generator, dtype=DTYPE)
        return self.z_mean + self.z_std() * eps

    def aux_inputs(self, x, generator=None, sample: bool = True):
        if self.aux is None:
            return None
        if self.learns_transform:
            v = self.V_mean
            if sample:
                v = v + self.V_log_std.exp() * torch.randn(v.shape, generator=generator, dtype=DTYPE)
            return self.aux(x, v)
        return self.aux(x)

    def kl_terms(self, kuu_chols) -> dict:
        terms = {"kl_z": kl_gaussian_diag(self.z_mean, self.z_std())}
        terms["kl_u"] = sum(g.inducing.kl(c)
                            for g, c in zip(self.groups, kuu_chols))
        if self.learns_transform:
            terms["kl_V"] = kl_gaussian_diag(self.V_mean, self.V_log_std.exp())
        return terms

    def kuu_chols(self):
        return [kuu_cholesky(g.inducing, g.kernel, self.config.jitter) for g in self.groups]

    def weight_conditionals(self, z, eps_aux, kuu_chols, generator=None) -> list[WeightConditional]:
        codes = build_codes(self.arch, z)
        out = []
        for g, idx, chol in zip(self.groups, self._group_weight_index, kuu_chols):
            u = g.inducing.sample(generator, chol) if self.mode.sample_u else None
            c = codes[idx]
            if g.local:
                cond = local_conditional_qw(c, eps_aux, g.inducing, g.kernel, g.weight_noise, self.mode, u,
                                            kuu_chol=chol)
            else:
                cond = conditional_qw(c, g.inducing, g.kernel, g.weight_noise, self.mode, u, kuu_chol=chol)
            out.append(cond)
        return out

    def _layer_blocks(self, group_tensors):
        """Reassemble per-group flat tensors into per-layer weight blocks."""
        blocks = [None] * self.arch.n_weight_layers
        for g, t in zip(self.groups, group_tensors):
            start = 0
            for l in g.layers:
                size = self.arch.layer_offsets[l + 1] - self.arch.layer_offsets[l]
                flat = t[..., start:start + size]
                blocks[l] = flat.reshape(*flat.shape[:-1], *self.arch.layer_shapes[l])
                start += size
        return blocks

    def _outputs_given_z(self, x, z, eps_aux, kuu_chols, n_weights: int, generator=None):
        conds = self.weight_conditionals(z, eps_aux, kuu_chols, generator)
        if self.mode.local_reparam:
            means = self._layer_blocks([c.mean for c in conds])
            variances = self._layer_blocks([c.var for c in conds])
            return bnn.forward_local_reparam(x, means, variances, self.arch, n_weights, generator)
        samples = [c.sample(n_weights, generator) for c in conds]
        return bnn.forward(x, self._layer_blocks(samples), self.arch)

    def sample_outputs(self, x, n_samples: int, generator=None, weights_per_z: int = 10,
                       chunk: int = 512) -> torch.Tensor:
        """Network outputs under posterior samples: (n_samples, N, D_out)."""
        x = torch.as_tensor(x, dtype=DTYPE)
        chols = self.kuu_chols()
        j = max(1, min(weights_per_z, n_samples))
        outs = []
        drawn = 0
        while drawn < n_samples:
            k = min(j, n_samples - drawn)
            z = self.sample_z(generator)
            v = None
            if self.learns_transform:
                v = self.V_mean + self.V_log_std.exp() * torch.randn(self.V_mean.shape, generator=generator,
                                                                      dtype=DTYPE)
            # local priors materialise (N, W, M) tensors, so go in chunks
            step = chunk if self.is_local else x.shape[0]
            pieces = []
            for start in range(0, x.shape[0], max(step, 1)):
                xb = x[start:start + step]
                eps = None if self.aux is None else self.aux(xb, v)
                pieces.append(self._outputs_given_z(xb, z, eps, chols, k, generator))
            outs.append(torch.cat(pieces, dim=1))
            drawn += k
        return torch.cat(outs, dim=0)

    def predictive(self, x, n_samples: int = 100, generator=None) -> bnn.Predictive:
        return bnn.predictive(x, self, n_samples, generator)


def elbo(model: MetaGPModel, x, y, n_data: int | None = None, S: int = 1, J: int = 1,
         generator=None, return_terms: bool = False):
    """Monte Carlo estimate of the evidence lower bound on a minibatch.

    The data term is rescaled by n_data / batch size.
    """
    if S < 1 or J < 1:
        raise ValueError("S and J must be at least 1")
    x = torch.as_tensor(x, dtype=DTYPE)
    n_batch = x.shape[0]
    scale = (n_data or n_batch) / n_batch if n_batch else 0.0
    chols = model.kuu_chols()
    terms = model.kl_terms(chols)
    ll = 0.0
    for _ in range(S):
        z = model.sample_z(generator)
        eps = model.aux_inputs(x, generator)
        out = model._outputs_given_z(x, z, eps, chols, J, generator)
        ll = ll + bnn.log_likelihood(y, out, model.likelihood).sum(-1).mean(0)
    terms["expected_log_lik"] = scale * ll / S
    value = terms["expected_log_lik"] - sum(v for k, v in terms.items() if k.startswith("kl_"))
    if return_terms:
        return value, terms
    return value


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 100
    lr: float = 1e-2
    lr_decay: float = 0.3
    decay_at: float = 2.0 / 3.0
    S: int = 1
    J: int = 1
    seed: int = 0
    # fraction of epochs over which KL terms are ramped in linearly (0 = off)
    kl_warmup: float = 0.0


@dataclass
class TrainResult:
    model: nn.Module
    step_trace: list[float] = field(default_factory=list)
    epoch_trace: list[float] = field(default_factory=list)
    seconds: float = 0.0


def fit(model: nn.Module, objective, x, y, config: TrainConfig, params=None) -> TrainResult:
    """Maximise ``objective(model, xb, yb, n_data, generator) -> (value, terms)`` with Adam.

    Shared by every trainable model in the package; the step size is
    multiplied by ``lr_decay`` once, after ``decay_at`` of the epochs.
    With ``kl_warmup`` the ``kl_*`` terms are down-weighted early on; the
    recorded trace is always the unweighted objective.
    """
    import time

    x = torch.as_tensor(x, dtype=DTYPE)
    n = x.shape[0]
    result = TrainResult(model)
    if config.epochs <= 0:
        return result
    gen = torch.Generator().manual_seed(int(config.seed))
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    # an empty dataset still takes one (prior-only) step per epoch
    batch = max(min(config.batch_size, n), 1)
    steps_per_epoch = max(math.ceil(n / batch), 1)
    decay_step = int(config.decay_at * config.epochs) * steps_per_epoch
    warmup_steps = config.kl_warmup * config.epochs * steps_per_epoch
    step = 0
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [decay_step], gamma=config.lr_decay)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen) if batch < n else torch.arange(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * batch:(b + 1) * batch]
            opt.zero_grad()
            value, terms = objective(model, x[idx], y[idx], n, gen)
            if not torch.isfinite(value):
                bad = [k for k, v in terms.items() if not torch.isfinite(torch.as_tensor(v))] or ["objective"]
                raise NonFiniteObjective(f"non-finite objective at epoch {epoch}: offending term(s) {bad}")
            loss = -value
            if step < warmup_steps:
                beta = step / warmup_steps
                loss = loss - (1.0 - beta) * sum(v for k, v in terms.items() if k.startswith("kl_"))
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            result.step_trace.append(value.item())
            total += value.item() * idx.shape[0] / n if n else value.item()
        result.epoch_trace.append(total)
    result.seconds = time.perf_counter() - start
    return result


def train(model: MetaGPModel, x, y, config: TrainConfig) -> TrainResult:
    """Fit all variational parameters, hyperparameters and inducing inputs."""

    def objective(m, xb, yb, n, gen):
        return elbo(m, xb, yb, n, config.S, config.J, gen, return_terms=True)

    return fit(model, objective, x, y, config)


CHECKPOINT_FORMAT = "metagp-checkpoint/1"


def save_checkpoint(path, model: nn.Module, extra: dict | None = None) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "model_class": type(model).__name__,
        "config": model.config.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path):
    """Rebuild a model saved by ``save_checkpoint``; returns (model, extra)."""
    from . import baselines

    blob = torch.load(path, weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    classes = {"MetaGPModel": (MetaGPModel, ModelConfig),
               "MFVIModel": (baselines.MFVIModel, baselines.BNNConfig),
               "MAPModel": (baselines.MAPModel, baselines.BNNConfig)}
    cls, cfg_cls = classes[blob["model_class"]]
    model = cls(cfg_cls.from_dict(blob["config"]))
    model.load_state_dict(blob["state"])
    return model, blob["extra"]
