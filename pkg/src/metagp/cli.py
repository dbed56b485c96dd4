"""Command-line entry point: ``metagp <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Configs are flat YAML mappings; every key has a default and unknown keys
are rejected. ``--override key=value`` (repeatable) is applied after the
file. Log verbosity comes from ``METAGP_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import baselines, bnn, datasets, experiments, svi
from .experiments import derive_seed
from .kernels import make_kernel
from .prior import Architecture, sample_prior_weights
from .tensor import DTYPE

log = logging.getLogger("metagp")

SUBCOMMANDS = ("train", "eval", "sample-prior", "sinusoid-bench", "entropy-grid", "ood-eval", "active-learn")
LOG_ENV = "METAGP_LOG_LEVEL"


class UnknownKey(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unknown config key {self.name!r}"


@dataclass
class RunConfig:
    # model
    model: str = "metagp"                    # metagp | mfvi | map
    layer_widths: list[int] = field(default_factory=lambda: [1, 50, 1])
    activation: str = "relu"
    bias: bool = True
    likelihood: str = "gaussian"
    noise_variance: float = 0.01
    learn_noise: bool = False
    latent_dim: int = 2
    inducing_points: int = 50
    lengthscale: float = 1.0
    kernel_variance: float = 1.0
    weight_noise: float = 0.01
    per_layer_gp: bool = False
    local_kernel: str | None = None          # null (global) | rbf | periodic
    local_layers: list[int] | None = None
    aux_transform: str = "identity"
    aux_dim: int | None = None
    aux_lengthscale: float = 1.0
    aux_period: float = 1.0
    cov_mode: str = "diag"
    u_handling: str = "marginalize"
    local_reparam: bool = False
    # optimisation
    epochs: int = 1000
    batch_size: int = 100
    lr: float = 1e-2
    lr_decay: float = 0.3
    decay_at: float = 2.0 / 3.0
    S: int = 1
    J: int = 1
    kl_warmup: float = 0.0
    # data
    data: str = "sinusoid"                   # sinusoid | four-class | csv | idx
    data_path: str | None = None
    labels_path: str | None = None
    n_train: int = 100
    n_test: int = 100
    limit: int = 5000
    # runs
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"
    checkpoint: str | None = None
    n_samples: int = 100
    # sample-prior
    prior_samples: int = 40
    prior_x_min: float = -3.0
    prior_x_max: float = 3.0
    prior_points: int = 200
    # benchmarks
    methods: list[str] = field(default_factory=lambda: list(experiments.SINUSOID_METHODS))
    grid_min: float = -5.0
    grid_max: float = 5.0
    grid_resolution: int = 50
    n_queries: int = 20
    update_epochs: int = 300
    ood_low: float = -10.0
    ood_high: float = 10.0

    def model_config(self, n_in: int | None = None, n_out: int | None = None) -> svi.ModelConfig:
        return svi.ModelConfig(
            layer_widths=tuple(self._widths(n_in, n_out)), activation=self.activation, bias=self.bias,
            likelihood=self.likelihood, noise_variance=self.noise_variance, learn_noise=self.learn_noise,
            latent_dim=self.latent_dim, inducing_points=self.inducing_points, cov_mode=self.cov_mode,
            u_handling=self.u_handling, local_reparam=self.local_reparam, local_kernel=self.local_kernel,
            local_layers=None if self.local_layers is None else tuple(self.local_layers),
            per_layer_gp=self.per_layer_gp, aux_transform=self.aux_transform, aux_dim=self.aux_dim,
            lengthscale=self.lengthscale, kernel_variance=self.kernel_variance, weight_noise=self.weight_noise,
            aux_lengthscale=self.aux_lengthscale, aux_period=self.aux_period,
        )

    def bnn_config(self, n_in: int | None = None, n_out: int | None = None) -> baselines.BNNConfig:
        return baselines.BNNConfig(tuple(self._widths(n_in, n_out)), self.activation, self.bias, self.likelihood,
                                   self.noise_variance, self.learn_noise)

    def train_config(self, seed: int) -> svi.TrainConfig:
        return svi.TrainConfig(self.epochs, self.batch_size, self.lr, self.lr_decay, self.decay_at, self.S, self.J,
                               seed, self.kl_warmup)

    def _widths(self, n_in, n_out):
        # input and output widths follow the data when given
        widths = list(self.layer_widths)
        if n_in is not None:
            widths[0] = n_in
        if n_out is not None:
            widths[-1] = n_out
        return widths


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (inner,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, hint)


_HINTS = typing.get_type_hints(RunConfig)


def _check(key: str, value):
    if key not in _HINTS:
        raise UnknownKey(key)
    hint = _HINTS[key]
    if not _type_ok(value, hint):
        raise TypeError(f"config key {key!r}: expected {hint}, got {value!r}")
    return float(value) if hint is float else value


def parse_config(text: str, overrides: list[str] | tuple = ()) -> RunConfig:
    """Strictly parse a YAML mapping into a RunConfig, then apply ``key=value`` overrides."""
    raw = yaml.safe_load(text) if text and text.strip() else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise TypeError("config document must be a mapping")
    values = {k: _check(k, v) for k, v in raw.items()}
    for item in overrides:
        key, sep, text_value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        key = key.strip()
        values[key] = _check(key, yaml.safe_load(text_value))
    return RunConfig(**values)


# -- data ------------------------------------------------------------------


def load_data(cfg: RunConfig, seed: int):
    """Training set and named test sets for the configured data source."""
    if cfg.data == "sinusoid":
        train, interp, extrap = datasets.gen_sinusoid(cfg.n_train, derive_seed(seed, "data"))
        return train, {"interpolation": interp, "extrapolation": extrap}
    if cfg.data == "four-class":
        train = datasets.gen_four_class(cfg.n_train, derive_seed(seed, "data"))
        test = datasets.gen_four_class(cfg.n_test, derive_seed(seed, "test-data"))
        return train, {"test": test}
    if cfg.data in ("csv", "idx"):
        if cfg.data_path is None:
            raise ValueError(f"data source {cfg.data!r} needs data_path")
        if cfg.data == "csv":
            full = datasets.load_delimited(cfg.data_path)
        else:
            full = datasets.load_idx_dataset(cfg.data_path, cfg.labels_path, cfg.limit + cfg.n_test,
                                             derive_seed(seed, "subset"))
        idx = np.random.default_rng(derive_seed(seed, "split")).permutation(len(full))
        n_test = min(cfg.n_test, len(full) // 5)
        train, test = full.subset(idx[n_test:]), full.subset(idx[:n_test])
        if not train.is_classification:
            test, train = test.normalized(train), train.normalized()
        return train, {"test": test}
    raise ValueError(f"unknown data source {cfg.data!r}")


def _tensors(ds: datasets.Dataset):
    x = torch.as_tensor(ds.x, dtype=DTYPE)
    if ds.is_classification:
        return x, torch.as_tensor(ds.y)
    return x, torch.as_tensor(np.asarray(ds.y, dtype=np.float64).reshape(len(ds), -1), dtype=DTYPE)


def build_model(cfg: RunConfig, train: datasets.Dataset, seed: int):
    n_in = train.x.shape[1]
    n_out = int(np.max(train.y)) + 1 if train.is_classification else np.asarray(train.y).reshape(len(train), -1).shape[1]
    if train.is_classification != (cfg.likelihood == "categorical"):
        raise ValueError(f"likelihood {cfg.likelihood!r} does not match the {cfg.data!r} targets")
    init_seed = derive_seed(seed, "init")
    if cfg.model == "metagp":
        return svi.MetaGPModel(cfg.model_config(n_in, n_out), init_seed, init_inputs=torch.as_tensor(train.x, dtype=DTYPE))
    if cfg.model == "mfvi":
        return baselines.MFVIModel(cfg.bnn_config(n_in, n_out), init_seed)
    if cfg.model == "map":
        return baselines.MAPModel(cfg.bnn_config(n_in, n_out), init_seed)
    raise ValueError(f"unknown model {cfg.model!r}")


def train_model(model, cfg: RunConfig, x, y, seed: int, epochs: int | None = None) -> svi.TrainResult:
    tcfg = cfg.train_config(derive_seed(seed, "train"))
    if epochs is not None:
        tcfg.epochs = epochs
    if isinstance(model, svi.MetaGPModel):
        return svi.train(model, x, y, tcfg)
    if isinstance(model, baselines.MFVIModel):
        return baselines.train_mfvi(model, x, y, tcfg)
    return baselines.map_fit(model, x, y, tcfg)


def evaluate(model, test_sets: dict, n_samples: int, seed: int, method: str) -> list[tuple]:
    rows = []
    gen = torch.Generator().manual_seed(derive_seed(seed, "eval"))
    for split, ds in test_sets.items():
        x, y = _tensors(ds)
        p = model.predictive(x, n_samples, gen)
        rows.append((method, split, seed, "entropy", float(p.entropy.mean())))
        if ds.is_classification:
            probs = p.probs.clamp_min(1e-300)
            rows.append((method, split, seed, "accuracy", float((probs.argmax(-1) == y).double().mean())))
            rows.append((method, split, seed, "nll", float(-torch.log(probs[torch.arange(len(y)), y]).mean())))
        else:
            rows.append((method, split, seed, "rmse", experiments.rmse(p.mean.numpy(), y.numpy())))
            rows.append((method, split, seed, "nll",
                         experiments.gaussian_nll(p.mean.numpy(), p.variance.numpy(), y.numpy())))
    return rows


# -- subcommands -----------------------------------------------------------


def _manifest(out: Path, cfg: RunConfig, subcommand: str, artifacts: list[str], **extra):
    experiments.write_manifest(out / "manifest.json", asdict(cfg), cfg.seeds, subcommand=subcommand,
                               seed=cfg.seed, artifacts=artifacts, **extra)


def cmd_train(cfg: RunConfig, out: Path) -> list[str]:
    train, _ = load_data(cfg, cfg.seed)
    model = build_model(cfg, train, cfg.seed)
    x, y = _tensors(train)
    result = train_model(model, cfg, x, y, cfg.seed)
    svi.save_checkpoint(out / "checkpoint.pt", model, {"run_config": asdict(cfg)})
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "objective"])
        w.writerows(enumerate(result.epoch_trace))
    log.info("trained %s in %.1fs", cfg.model, result.seconds)
    return ["checkpoint.pt", "trace.csv"]


def cmd_eval(cfg: RunConfig, out: Path) -> list[str]:
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.pt"
    model, extra = svi.load_checkpoint(path)
    saved = extra.get("run_config")
    data_cfg = RunConfig(**saved) if saved else cfg
    _, tests = load_data(data_cfg, data_cfg.seed)
    rows = evaluate(model, tests, cfg.n_samples, cfg.seed, data_cfg.model)
    if not all(math.isfinite(r[4]) for r in rows):
        raise FloatingPointError(f"non-finite evaluation metrics: {rows}")
    experiments.write_records_csv(out / "metrics.csv", rows)
    return ["metrics.csv"]


def cmd_sample_prior(cfg: RunConfig, out: Path) -> list[str]:
    arch = Architecture(tuple(cfg.layer_widths), cfg.activation, cfg.bias)
    if arch.input_dim != 1:
        raise ValueError("sample-prior draws functions of a scalar input")
    kernel = make_kernel("rbf", 2 * cfg.latent_dim, lengthscale=cfg.lengthscale, variance=cfg.kernel_variance)
    xs = torch.linspace(cfg.prior_x_min, cfg.prior_x_max, cfg.prior_points, dtype=DTYPE).unsqueeze(-1)
    aux_kernel = None
    if cfg.local_kernel is not None:
        init = {"lengthscale": cfg.aux_lengthscale}
        if cfg.local_kernel == "periodic":
            init["period"] = cfg.aux_period
        aux_kernel = make_kernel(cfg.local_kernel, 1, **init)
    with torch.no_grad():
        draws = sample_prior_weights(arch, kernel, cfg.weight_noise, derive_seed(cfg.seed, "prior"),
                                     cfg.prior_samples, cfg.latent_dim, aux_kernel,
                                     xs if aux_kernel is not None else None, cfg.per_layer_gp)
        # local draws carry one weight vector per grid point: (n, N, W)
        f = bnn.forward(xs, draws.weights, arch)
    # long format, one row per (sample, x); y_noisy adds output noise
    f = f[..., 0].numpy()
    n, n_x = f.shape
    noise_gen = np.random.default_rng(derive_seed(cfg.seed, "prior-noise"))
    noisy = f + math.sqrt(cfg.noise_variance) * noise_gen.standard_normal(f.shape)
    table = np.column_stack([np.tile(xs.numpy()[:, 0], n), np.repeat(np.arange(n), n_x),
                             f.reshape(-1), noisy.reshape(-1)])
    np.savetxt(out / "prior_samples.csv", table, delimiter=",", header="x,sample_id,y,y_noisy",
               comments="", fmt=["%.10g", "%d", "%.10g", "%.10g"])
    return ["prior_samples.csv"]


def _sinusoid_config(cfg: RunConfig) -> experiments.SinusoidConfig:
    return experiments.SinusoidConfig(n_train=cfg.n_train, hidden=cfg.layer_widths[1], activation=cfg.activation,
                                      steps=cfg.epochs, lr=cfg.lr, noise_variance=cfg.noise_variance,
                                      learn_noise=cfg.learn_noise, inducing_points=cfg.inducing_points,
                                      latent_dim=cfg.latent_dim, pred_samples=cfg.n_samples)


def cmd_sinusoid_bench(cfg: RunConfig, out: Path) -> list[str]:
    records = experiments.run_sinusoid(cfg.methods, cfg.seeds, _sinusoid_config(cfg))
    experiments.write_records_csv(out / "sinusoid.csv", records)
    failures = {f"{r.method}/{r.seed}": r.error for r in records if r.error}
    summary = {f"{m}/{s}": v for (m, s), v in experiments.summarize(records).items()}
    (out / "summary.json").write_text(json.dumps({"mean": summary, "failures": failures}, indent=2))
    return ["sinusoid.csv", "summary.json"]


def cmd_entropy_grid(cfg: RunConfig, out: Path) -> list[str]:
    if cfg.data != "four-class":
        raise ValueError("entropy-grid runs on the four-class toy data")
    train, _ = load_data(cfg, cfg.seed)
    model = build_model(cfg, train, cfg.seed)
    x, y = _tensors(train)
    train_model(model, cfg, x, y, cfg.seed)
    bounds = ((cfg.grid_min, cfg.grid_max), (cfg.grid_min, cfg.grid_max))
    grid = experiments.run_entropy_grid(model, bounds, cfg.grid_resolution, cfg.n_samples,
                                        derive_seed(cfg.seed, "grid"))
    grid.to_csv(out / "entropy_grid.csv")
    return ["entropy_grid.csv"]


def cmd_ood_eval(cfg: RunConfig, out: Path) -> list[str]:
    ocfg = experiments.OODConfig(n_train=cfg.n_train, n_test=cfg.n_test, hidden=cfg.layer_widths[1],
                                 steps=cfg.epochs, lr=cfg.lr, latent_dim=cfg.latent_dim,
                                 inducing_points=cfg.inducing_points, noise_low=cfg.ood_low, noise_high=cfg.ood_high,
                                 limit=cfg.limit, pred_samples=cfg.n_samples)
    if cfg.data == "idx":
        ocfg.images, ocfg.labels = cfg.data_path, cfg.labels_path
    result = experiments.run_ood_benchmark(ocfg, cfg.seed)
    experiments.write_records_csv(out / "ood.csv", list(result.records(cfg.seed)))
    with open(out / "ood_cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "set", "entropy", "cdf"])
        for method, sets in result.cdfs.items():
            for name, cdf in sets.items():
                w.writerows((method, name, h, c) for h, c in cdf.rows())
    return ["ood.csv", "ood_cdf.csv"]


def cmd_active_learn(cfg: RunConfig, out: Path) -> list[str]:
    method = "metagp-local" if cfg.model == "metagp" and cfg.local_kernel else cfg.model
    acfg = experiments.ActiveConfig(n_queries=cfg.n_queries, method=method, hidden=cfg.layer_widths[1],
                                    initial_steps=cfg.epochs, update_steps=cfg.update_epochs, lr=cfg.lr,
                                    noise_variance=cfg.noise_variance, learn_noise=cfg.learn_noise,
                                    pred_samples=cfg.n_samples)
    data = experiments.sinusoid_pool(acfg, cfg.seed)
    rows = []
    for acq in ("entropy", "random"):
        rows += list(experiments.active_learn(data, acfg, cfg.n_queries, acq, cfg.seeds).records())
    experiments.write_records_csv(out / "active.csv", rows)
    return ["active.csv"]


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample-prior": cmd_sample_prior,
    "sinusoid-bench": cmd_sinusoid_bench,
    "entropy-grid": cmd_entropy_grid,
    "ood-eval": cmd_ood_eval,
    "active-learn": cmd_active_learn,
}


def dispatch(subcommand: str, cfg: RunConfig, config_text: str = "", overrides=()) -> int:
    """Run a subcommand; 0 only when every artifact and the manifest were written.

    ``config_text`` and ``overrides`` are echoed verbatim into the manifest.
    """
    if subcommand not in COMMANDS:
        print(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(derive_seed(cfg.seed, "torch-global"))
        artifacts = COMMANDS[subcommand](cfg, out)
        missing = [a for a in artifacts if not (out / a).exists()]
        if missing:
            raise FileNotFoundError(f"artifacts not written: {missing}")
        _manifest(out, cfg, subcommand, artifacts, config_text=config_text, overrides=list(overrides))
    except Exception as exc:
        log.error("%s failed: %s", subcommand, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metagp", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="YAML run config")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config key; repeatable")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text() if args.config else ""
        overrides = list(args.override)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out={json.dumps(args.out)}")
        cfg = parse_config(text, overrides)
    except (UnknownKey, TypeError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return dispatch(args.subcommand, cfg, text, overrides)


if __name__ == "__main__":
    sys.exit(main())
