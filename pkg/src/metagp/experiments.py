"""Benchmark drivers: sinusoid table, entropy grids, OOD entropy CDFs, active learning.

Every driver is a pure function of its config and seed. Output tables use
the long format ``method,split,seed,metric,value``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
import torch

from . import __version__, baselines, bnn, datasets, svi
from .kernels import make_kernel
from .tensor import DTYPE

log = logging.getLogger(__name__)

SINUSOID_METHODS = ("mfvi", "gp-rbf", "gp-periodic", "metagp", "metagp-local-rbf", "metagp-local-periodic", "map")
CSV_HEADER = ("method", "split", "seed", "metric", "value")


def derive_seed(seed: int, *names: str) -> int:
    """Independent 31-bit seed for a named stream under a global seed."""
    key = tuple(zlib.crc32(n.encode()) for n in names)
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0] & 0x7FFFFFFF)


def _generator(seed: int, *names: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *names))


# -- metrics ---------------------------------------------------------------


def rmse(mean, y) -> float:
    mean = np.asarray(mean, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    return float(np.sqrt(np.mean((mean - y) ** 2)))


def gaussian_nll(mean, var, y) -> float:
    """Mean over points of -log N(y | mean, var), summed over output dims."""
    mean = np.asarray(mean, dtype=np.float64).reshape(len(y), -1)
    var = np.asarray(var, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    per_point = 0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var)
    return float(per_point.sum(-1).mean())


@dataclass
class MetricRecord:
    method: str
    split: str
    seed: int
    rmse: float
    nll: float
    entropy: float
    seconds: float
    error: str | None = None

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("RMSE cannot be negative")

    def rows(self):
        for metric in ("rmse", "nll", "entropy", "seconds"):
            yield self.method, self.split, self.seed, metric, getattr(self, metric)


def write_records_csv(path, records) -> None:
    """``records`` are MetricRecords or plain (method, split, seed, metric, value) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            rows = r.rows() if isinstance(r, MetricRecord) else [r]
            for row in rows:
                w.writerow([*row[:4], repr(float(row[4]))])


def read_records_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(m, s, int(seed), metric, float(v)) for m, s, seed, metric, v in rows[1:]]


def write_manifest(path, config: dict, seeds, **extra) -> None:
    manifest = {
        "config": config,
        "seeds": list(seeds),
        "versions": {
            "metagp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def summarize(records) -> dict:
    """Seed-averaged metrics keyed by (method, split) -> {metric: mean}."""
    table: dict = {}
    for r in records:
        if r.error is not None:
            continue
        slot = table.setdefault((r.method, r.split), {"rmse": [], "nll": [], "entropy": []})
        for k in slot:
            slot[k].append(getattr(r, k))
    return {key: {k: float(np.mean(v)) for k, v in d.items()} for key, d in table.items()}


# -- sinusoid benchmark ----------------------------------------------------


@dataclass
class SinusoidConfig:
    n_train: int = 100
    n_test: int = 50
    hidden: int = 50
    activation: str = "relu"
    steps: int = 3000
    lr: float = 1e-2
    # fixed at the generator's noise level for every network model
    noise_variance: float = datasets.SINUSOID_NOISE ** 2
    learn_noise: bool = False
    inducing_points: int = 50
    latent_dim: int = 2
    local_layers: tuple[int, ...] = (-1,)
    gp_steps: int = 300
    pred_samples: int = 100
    period_grid: int = 40


def estimate_period(x, y, noise_variance: float = 0.01, n_grid: int = 40, harmonic_margin: float = 5.0) -> float:
    """Period maximising the periodic-GP marginal likelihood.

    A log grid from 1/20 of the input span to the full span is scanned, the
    best peaks are refined by a bounded 1-D search, and a divisor p/k that
    scores within ``harmonic_margin`` nats of the best is preferred, since
    every multiple of the true period fits the data as well.
    """
    x = torch.as_tensor(x, dtype=DTYPE).reshape(len(x), -1)
    y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    span = float((x.max(0).values - x.min(0).values).norm())
    variance = float(y.var())

    @torch.no_grad()
    def score(log_p: float) -> float:
        k = make_kernel("periodic", x.shape[1], period=math.exp(log_p), lengthscale=1.0, variance=variance)
        gp = baselines.GPRegressor(k, noise_variance)
        gp.set_data(x, y)
        return gp.log_marginal_likelihood().item()

    def refine(lo: float, hi: float) -> tuple[float, float]:
        res = optimize.minimize_scalar(lambda v: -score(v), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-4})
        return float(res.x), -float(res.fun)

    grid = np.linspace(np.log(span / 20), np.log(span), n_grid)
    scores = np.array([score(v) for v in grid])
    step = grid[1] - grid[0]
    peaks = [refine(grid[i] - step, grid[i] + step) for i in np.argsort(scores)[::-1][:3]]
    best_log_p, best = max(peaks, key=lambda t: t[1])
    for k in (3, 2):
        log_q, value = refine(best_log_p - math.log(k) - step, best_log_p - math.log(k) + step)
        if value >= best - harmonic_margin:
            return math.exp(log_q)
    return math.exp(best_log_p)


class _Predictor:
    """Uniform (mean, variance) interface over the benchmark's models."""

    def __init__(self, model=None, gp=None, n_samples: int = 100, seed: int = 0):
        self.model = model
        self.gp = gp
        self.n_samples = n_samples
        self.seed = seed

    def predict(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if self.gp is not None:
            mean, var = self.gp.predict(x)
            return mean.numpy()[:, None], var.numpy()[:, None]
        p = self.model.predictive(x, self.n_samples, torch.Generator().manual_seed(self.seed))
        return p.mean.numpy(), p.variance.numpy()


def _bnn_config(cfg: SinusoidConfig) -> baselines.BNNConfig:
    return baselines.BNNConfig((1, cfg.hidden, 1), cfg.activation, True, "gaussian",
                               cfg.noise_variance, cfg.learn_noise)


def _metagp_config(cfg: SinusoidConfig, local: str | None, period: float | None = None) -> svi.ModelConfig:
    extra = {}
    if local is not None:
        extra = {"local_kernel": local, "local_layers": tuple(cfg.local_layers)}
        if period is not None:
            extra["aux_period"] = period
    return svi.ModelConfig(layer_widths=(1, cfg.hidden, 1), activation=cfg.activation,
                           noise_variance=cfg.noise_variance, learn_noise=cfg.learn_noise,
                           latent_dim=cfg.latent_dim, inducing_points=cfg.inducing_points, **extra)


def fit_sinusoid_method(method: str, train: datasets.Dataset, cfg: SinusoidConfig, seed: int) -> _Predictor:
    x = torch.as_tensor(train.x, dtype=DTYPE)
    y = torch.as_tensor(train.y, dtype=DTYPE)
    init_seed = derive_seed(seed, method, "init")
    tcfg = svi.TrainConfig(epochs=cfg.steps, batch_size=len(x), lr=cfg.lr, seed=derive_seed(seed, method, "train"))
    pred_seed = derive_seed(seed, method, "predict")
    if method in ("gp-rbf", "gp-periodic"):
        init = {"lengthscale": 1.0, "variance": float(y.var())}
        if method == "gp-periodic":
            init["period"] = estimate_period(x, y, cfg.noise_variance, cfg.period_grid)
        _, _, _, gp = baselines.gp_fit_predict(x, y, x[:1], method[3:], cfg.gp_steps, cfg.noise_variance, **init)
        return _Predictor(gp=gp)
    if method == "mfvi":
        model = baselines.MFVIModel(_bnn_config(cfg), init_seed)
        baselines.train_mfvi(model, x, y, tcfg)
    elif method == "map":
        model = baselines.MAPModel(_bnn_config(cfg), init_seed)
        baselines.map_fit(model, x, y, tcfg)
    elif method == "metagp":
        model = svi.MetaGPModel(_metagp_config(cfg, None), init_seed, init_inputs=x)
        svi.train(model, x, y, tcfg)
    elif method in ("metagp-local-rbf", "metagp-local-periodic"):
        kind = method.rsplit("-", 1)[1]
        period = estimate_period(x, y, cfg.noise_variance, cfg.period_grid) if kind == "periodic" else None
        model = svi.MetaGPModel(_metagp_config(cfg, kind, period), init_seed, init_inputs=x)
        svi.train(model, x, y, tcfg)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {SINUSOID_METHODS}")
    return _Predictor(model, n_samples=cfg.pred_samples, seed=pred_seed)


def run_sinusoid(methods=SINUSOID_METHODS, seeds=range(5), config: SinusoidConfig | None = None) -> list[MetricRecord]:
    """Train every method on each seed's sinusoid and score both test splits.

    A method that fails on a seed yields NaN records carrying the error
    message; the remaining methods and seeds still run.
    """
    cfg = config or SinusoidConfig()
    unknown = set(methods) - set(SINUSOID_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    records = []
    for seed in seeds:
        train, interp, extrap = datasets.gen_sinusoid(cfg.n_train, derive_seed(seed, "sinusoid-data"), cfg.n_test)
        for method in methods:
            start = time.perf_counter()
            try:
                predictor = fit_sinusoid_method(method, train, cfg, seed)
            except Exception as exc:  # recorded, not raised: one bad method must not sink the table
                log.warning("%s failed on seed %s: %s", method, seed, exc)
                for split in ("interpolation", "extrapolation"):
                    records.append(MetricRecord(method, split, seed, math.nan, math.nan, math.nan,
                                                time.perf_counter() - start, error=str(exc)))
                continue
            elapsed = time.perf_counter() - start
            for split, data in (("interpolation", interp), ("extrapolation", extrap)):
                mean, var = predictor.predict(data.x)
                ent = float(bnn.gaussian_entropy(torch.as_tensor(var)).mean())
                records.append(MetricRecord(method, split, seed, rmse(mean, data.y),
                                            gaussian_nll(mean, var, data.y), ent, elapsed))
            log.info("seed %s %s done in %.1fs", seed, method, elapsed)
    return records


# -- classification: entropy grids and OOD ---------------------------------


@dataclass
class EntropyGrid:
    x1: np.ndarray
    x2: np.ndarray
    entropy: np.ndarray
    max_prob: np.ndarray
    resolution: int

    def to_csv(self, path) -> None:
        table = np.column_stack([self.x1, self.x2, self.entropy, self.max_prob])
        np.savetxt(path, table, delimiter=",", header="x1,x2,entropy,max_class_prob", comments="")


def grid_inputs(bounds=((-5.0, 5.0), (-5.0, 5.0)), resolution: int = 50) -> np.ndarray:
    (a0, b0), (a1, b1) = bounds
    g1, g2 = np.meshgrid(np.linspace(a0, b0, resolution), np.linspace(a1, b1, resolution), indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def ring_inputs(radius: float, n: int = 200) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return radius * np.column_stack([np.cos(t), np.sin(t)])


def predict_classes(model, x, n_samples: int = 100, seed: int = 0) -> bnn.Predictive:
    if model.likelihood.kind != "categorical":
        raise ValueError("entropy maps need a classification model")
    return model.predictive(torch.as_tensor(x, dtype=DTYPE), n_samples, torch.Generator().manual_seed(seed))


def run_entropy_grid(model, grid_bounds=((-5.0, 5.0), (-5.0, 5.0)), resolution: int = 50,
                     n_samples: int = 100, seed: int = 0) -> EntropyGrid:
    """Predictive entropy and top-class probability on a regular 2-D grid.

    The 0.7 equiprobability contours are the 0.7 level set of ``max_prob``.
    """
    if model.arch.input_dim != 2:
        raise ValueError("entropy grids need a model with 2-D inputs")
    x = grid_inputs(grid_bounds, resolution)
    p = predict_classes(model, x, n_samples, seed)
    return EntropyGrid(x[:, 0], x[:, 1], p.entropy.numpy(), p.probs.max(-1).values.numpy(), resolution)


@dataclass
class EntropyCdf:
    name: str
    values: np.ndarray
    ordinates: np.ndarray

    @classmethod
    def from_entropies(cls, name: str, entropies) -> "EntropyCdf":
        v = np.sort(np.asarray(entropies, dtype=np.float64).ravel())
        return cls(name, v, np.arange(1, len(v) + 1) / len(v))

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    def area(self, upper: float) -> float:
        """Area under the empirical CDF on [0, upper]; lower means more uncertain."""
        return float(upper - np.minimum(self.values, upper).mean())

    def rows(self):
        return zip(self.values.tolist(), self.ordinates.tolist())


def run_ood(model, in_x, ood_sets: dict, n_samples: int = 100, seed: int = 0) -> dict[str, EntropyCdf]:
    """Predictive-entropy CDFs for held-in inputs (key ``in``) and each OOD set."""
    sets = {"in": in_x, **ood_sets}
    return {name: EntropyCdf.from_entropies(name, predict_classes(model, x, n_samples, seed).entropy.numpy())
            for name, x in sets.items()}


@dataclass
class OODConfig:
    n_train: int = 100
    n_test: int = 200
    n_noise: int = 500
    hidden: int = 50
    steps: int = 2000
    lr: float = 1e-2
    latent_dim: int = 2
    aux_dim: int = 2
    inducing_points: int = 50
    # uniform noise box for the four-class toy; IDX images use [0, 1]
    noise_low: float = -10.0
    noise_high: float = 10.0
    images: str | None = None
    labels: str | None = None
    limit: int = 5000
    pred_samples: int = 100
    methods: tuple[str, ...] = ("metagp-local", "map")


def _ood_data(cfg: OODConfig, seed: int):
    if cfg.images:
        full = datasets.load_idx_dataset(cfg.images, cfg.labels, cfg.limit + cfg.n_test, derive_seed(seed, "subset"))
        idx = np.random.default_rng(derive_seed(seed, "split")).permutation(len(full))
        train, test = full.subset(idx[:cfg.limit]), full.subset(idx[cfg.limit:])
        side = int(round(math.sqrt(train.x.shape[1])))
        noise = {kind: datasets.gen_noise_ood(kind, cfg.n_noise, (side * side,), derive_seed(seed, kind))
                 for kind in ("uniform", "gaussian")}
        return train, test, noise
    train = datasets.gen_four_class(cfg.n_train, derive_seed(seed, "toy-train"))
    test = datasets.gen_four_class(cfg.n_test, derive_seed(seed, "toy-test"))
    noise = {"uniform": datasets.gen_noise_ood("uniform", cfg.n_noise, (2,), derive_seed(seed, "uniform"),
                                               cfg.noise_low, cfg.noise_high)}
    return train, test, noise


def fit_classifier(method: str, train: datasets.Dataset, cfg: OODConfig, seed: int):
    x = torch.as_tensor(train.x, dtype=DTYPE)
    y = torch.as_tensor(train.y)
    n_classes = int(y.max()) + 1
    widths = (x.shape[1], cfg.hidden, n_classes)
    tcfg = svi.TrainConfig(epochs=cfg.steps, batch_size=min(len(x), 100), lr=cfg.lr,
                           seed=derive_seed(seed, method, "train"))
    init_seed = derive_seed(seed, method, "init")
    if method == "map":
        model = baselines.MAPModel(baselines.BNNConfig(widths, likelihood="categorical"), init_seed)
        baselines.map_fit(model, x, y, tcfg)
    elif method == "mfvi":
        model = baselines.MFVIModel(baselines.BNNConfig(widths, likelihood="categorical"), init_seed)
        baselines.train_mfvi(model, x, y, tcfg)
    elif method in ("metagp", "metagp-local"):
        local = {}
        if method == "metagp-local":
            local = {"local_kernel": "rbf", "local_layers": (-1,), "aux_transform": "linear", "aux_dim": cfg.aux_dim}
        mcfg = svi.ModelConfig(layer_widths=widths, likelihood="categorical", latent_dim=cfg.latent_dim,
                               inducing_points=cfg.inducing_points, **local)
        model = svi.MetaGPModel(mcfg, init_seed, init_inputs=x)
        svi.train(model, x, y, tcfg)
    else:
        raise ValueError(f"unknown classifier {method!r}")
    return model


@dataclass
class OODResult:
    cdfs: dict                       # method -> {set name -> EntropyCdf}
    accuracy: dict                   # method -> held-in accuracy
    upper: float                     # maximum possible entropy, ln(classes)

    def records(self, seed: int):
        for method, sets in self.cdfs.items():
            yield method, "in", seed, "accuracy", self.accuracy[method]
            for name, cdf in sets.items():
                yield method, name, seed, "mean_entropy", cdf.mean
                yield method, name, seed, "cdf_area", cdf.area(self.upper)

    def ratio(self, method: str, ood: str = "uniform") -> float:
        return self.cdfs[method][ood].mean / max(self.cdfs[method]["in"].mean, 1e-12)


def run_ood_benchmark(config: OODConfig | None = None, seed: int = 0) -> OODResult:
    cfg = config or OODConfig()
    train, test, noise = _ood_data(cfg, seed)
    upper = math.log(int(np.max(train.y)) + 1)
    cdfs, acc = {}, {}
    for method in cfg.methods:
        model = fit_classifier(method, train, cfg, seed)
        pred_seed = derive_seed(seed, method, "predict")
        cdfs[method] = run_ood(model, test.x, noise, cfg.pred_samples, pred_seed)
        probs = predict_classes(model, test.x, cfg.pred_samples, pred_seed).probs
        acc[method] = float((probs.argmax(-1).numpy() == test.y).mean())
        log.info("%s: held-in accuracy %.3f", method, acc[method])
    return OODResult(cdfs, acc, upper)


# -- active learning -------------------------------------------------------


@dataclass
class ActiveConfig:
    n_data: int = 220
    n_train: int = 20
    n_test: int = 100
    n_queries: int = 20
    method: str = "metagp-local"     # metagp | metagp-local | mfvi
    hidden: int = 50
    initial_steps: int = 1500
    update_steps: int = 300
    lr: float = 1e-2
    noise_variance: float = 0.02
    learn_noise: bool = False
    pred_samples: int = 50
    pool_low: float = -2.0
    pool_high: float = 2.0


@dataclass
class ActiveResult:
    acquisition: str
    seeds: list[int]
    traces: np.ndarray               # (seeds, n_queries + 1)
    queried: list[list[int]] = field(default_factory=list)

    @property
    def mean_trace(self) -> np.ndarray:
        return self.traces.mean(0)

    def records(self):
        for seed, trace in zip(self.seeds, self.traces):
            for q, value in enumerate(trace):
                yield self.acquisition, f"query-{q}", seed, "rmse", value


def _new_regressor(cfg: ActiveConfig, seed: int, x):
    if cfg.method in ("metagp", "metagp-local"):
        local = {"local_kernel": "rbf", "local_layers": (-1,)} if cfg.method == "metagp-local" else {}
        mcfg = svi.ModelConfig(layer_widths=(x.shape[1], cfg.hidden, 1), noise_variance=cfg.noise_variance,
                               learn_noise=cfg.learn_noise, **local)
        return svi.MetaGPModel(mcfg, seed, init_inputs=x), svi.train
    if cfg.method == "mfvi":
        bcfg = baselines.BNNConfig((x.shape[1], cfg.hidden, 1), noise_variance=cfg.noise_variance,
                                   learn_noise=cfg.learn_noise)
        return baselines.MFVIModel(bcfg, seed), baselines.train_mfvi
    raise ValueError(f"unknown active-learning model {cfg.method!r}")


def active_learn(dataset: datasets.Dataset, model_cfg: ActiveConfig, n_queries: int | None = None,
                 acquisition: str = "entropy", seeds=range(10)) -> ActiveResult:
    """Pool-based active learning; test RMSE is recorded before and after each query.

    Inputs and targets are standardised on the whole dataset. The model is
    warm-started between queries. Entropy ties go to the lowest pool index.
    """
    if acquisition not in ("entropy", "random"):
        raise ValueError(f"acquisition must be entropy or random, got {acquisition!r}")
    cfg = model_cfg
    n_queries = cfg.n_queries if n_queries is None else n_queries
    data = dataset.normalized()
    x_all = torch.as_tensor(data.x, dtype=DTYPE)
    y_all = torch.as_tensor(np.asarray(data.y, dtype=np.float64).reshape(len(data), -1), dtype=DTYPE)
    traces, queried = [], []
    for seed in seeds:
        split = datasets.make_pool_split(len(data), cfg.n_train, cfg.n_test, derive_seed(seed, "pool-split"))
        rng = np.random.default_rng(derive_seed(seed, "random-acquisition"))
        gen = torch.Generator().manual_seed(derive_seed(seed, "predict"))
        x_tr = x_all[split.train]
        model, trainer = _new_regressor(cfg, derive_seed(seed, "init"), x_tr)
        steps = cfg.initial_steps
        trace, picks = [], []
        for q in range(n_queries + 1):
            x_tr, y_tr = x_all[split.train], y_all[split.train]
            tcfg = svi.TrainConfig(epochs=steps, batch_size=len(x_tr), lr=cfg.lr,
                                   seed=derive_seed(seed, "train", str(q)))
            trainer(model, x_tr, y_tr, tcfg)
            steps = cfg.update_steps
            test_pred = model.predictive(x_all[split.test], cfg.pred_samples, gen)
            trace.append(rmse(test_pred.mean.numpy(), y_all[split.test].numpy()))
            if q == n_queries or len(split.pool) == 0:
                break
            if acquisition == "entropy":
                scores = model.predictive(x_all[split.pool], cfg.pred_samples, gen).entropy.numpy()
                pos = int(np.argmax(scores))
            else:
                pos = int(rng.integers(len(split.pool)))
            picks.append(int(split.pool[pos]))
            split = split.acquire(pos)
        trace += [trace[-1]] * (n_queries + 1 - len(trace))
        traces.append(trace)
        queried.append(picks)
    return ActiveResult(acquisition, list(seeds), np.array(traces), queried)


def sinusoid_pool(cfg: ActiveConfig, seed: int = 0) -> datasets.Dataset:
    return datasets.gen_sinusoid_pool(cfg.n_data, derive_seed(seed, "pool-data"), cfg.pool_low, cfg.pool_high)


__all__ = [
    "MetricRecord", "EntropyCdf", "EntropyGrid", "SinusoidConfig", "OODConfig", "ActiveConfig",
    "run_sinusoid", "run_entropy_grid", "run_ood", "run_ood_benchmark", "active_learn",
    "estimate_period", "derive_seed", "rmse", "gaussian_nll", "summarize",
    "write_records_csv", "read_records_csv", "write_manifest",
]
