"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary). The long reproductions are marked ``slow``.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from metagp import datasets, experiments as ex
from metagp.svi import ApproxMode, MetaGPModel, ModelConfig, TrainConfig, conditional_qw, elbo, train
from metagp.tensor import DTYPE

from svi_oracle import joint_conditional, rbf
from test_svi import _fd_check, _instance, _model, _q_u

ROOT = Path(__file__).resolve().parent


def test_1_oracle_equivalence(criterion):
    with criterion("1. exact conditional q(w|z) vs dense Gaussian conditioning (50 instances)") as note:
        start = time.perf_counter()
        cases = np.random.default_rng(2024)
        worst = 0.0
        for i in range(50):
            m, n_w = int(cases.integers(1, 4)), int(cases.integers(1, 7))
            rng, kernel, codes, state, ls, var = _instance(int(cases.integers(2 ** 31)), m, n_w, whiten=bool(i % 2))
            noise = 0.05
            rows = np.vstack([codes.numpy(), state.inputs.detach().numpy()])
            mu_u, sigma_u = _q_u(state, kernel, ls, var)
            mean, cov, a, b = joint_conditional(rbf(rows, rows, ls, var), n_w, noise, mu_u, sigma_u)
            u = torch.as_tensor(rng.standard_normal(m))
            with torch.no_grad():
                marg = conditional_qw(codes, state, kernel, noise, ApproxMode("exact", "marginalize"), jitter=0.0)
                samp = conditional_qw(codes, state, kernel, noise, ApproxMode("exact", "sample"), u_sample=u,
                                      jitter=0.0)
            pairs = [(marg.mean.numpy(), mean), (marg.covariance().numpy(), cov),
                     (samp.mean.numpy(), a @ u.numpy()), (samp.covariance().numpy(), b)]
            for got, want in pairs:
                err = np.abs(got - want) / np.maximum(np.abs(want), 1e-12)
                worst = max(worst, float(err.max()))
        elapsed = time.perf_counter() - start
        note(f"max entrywise rel. err {worst:.2e}")
        note(f"{elapsed:.1f}s")
        assert worst < 1e-8
        assert elapsed < 10


def test_2_gradient_suite(criterion):
    with criterion("2. ELBO gradients vs central differences, [1,5,1], global+local, all modes") as note:
        start = time.perf_counter()
        x = torch.linspace(-1, 1, 4, dtype=DTYPE).unsqueeze(-1)
        y = torch.sin(3 * x)
        worst = {}
        for local in (None, "rbf"):
            for cov in ("exact", "fitc", "diag"):
                for handling in ("marginalize", "sample"):
                    worst[(local or "global", cov, handling)] = _fd_check(_model(local, (cov, handling)), x, y)
        elapsed = time.perf_counter() - start
        top = max(worst, key=worst.get)
        note(f"worst rel. err {worst[top]:.2e} at {top}")
        note(f"{elapsed:.1f}s")
        assert worst[top] < 1e-3
        assert elapsed < 60


@pytest.fixture(scope="module")
def sinusoid_table():
    start = time.perf_counter()
    records = ex.run_sinusoid(ex.SINUSOID_METHODS, range(5))
    return records, ex.summarize(records), time.perf_counter() - start


@pytest.mark.slow
def test_3_sinusoid_directional_reproduction(criterion, sinusoid_table):
    with criterion("3. sinusoid benchmark over 5 seeds: (a) periodic < 0.5 x rbf local, (b) mfvi > 5 x periodic, "
                   "(c) all interpolation RMSE < 0.25") as note:
        records, table, elapsed = sinusoid_table
        failed = sorted({f"{r.method}/{r.seed}" for r in records if r.error})
        ext = {m: table[(m, "extrapolation")]["rmse"] for m in ex.SINUSOID_METHODS if (m, "extrapolation") in table}
        interp = {m: table[(m, "interpolation")]["rmse"] for m in ex.SINUSOID_METHODS
                  if (m, "interpolation") in table}
        note("extrapolation " + ", ".join(f"{m} {v:.3f}" for m, v in ext.items()))
        note("interpolation " + ", ".join(f"{m} {v:.3f}" for m, v in interp.items()))
        note(f"{elapsed / 60:.1f} min")
        a = ext["metagp-local-periodic"] < 0.5 * ext["metagp-local-rbf"]
        b = ext["mfvi"] > 5 * ext["metagp-local-periodic"]
        over = [m for m, v in interp.items() if not v < 0.25]
        note(f"(a) {a} (b) {b} (c) {not over}" + (f" [over 0.25: {', '.join(over)}]" if over else ""))
        assert not failed, failed
        assert all(np.isfinite(r.nll) for r in records)
        assert a and b and not over
        assert elapsed < 30 * 60


@pytest.mark.slow
def test_sinusoid_ranking_property(criterion, sinusoid_table):
    with criterion("   extrapolation ranking local-periodic < local-rbf < mfvi") as note:
        _, table, _ = sinusoid_table
        order = [table[(m, "extrapolation")]["rmse"] for m in ("metagp-local-periodic", "metagp-local-rbf", "mfvi")]
        note(" < ".join(f"{v:.3f}" for v in order))
        assert order[0] < order[1] < order[2]


def test_4_gp_periodic_extrapolates(criterion):
    with criterion("4. exact GP-periodic extrapolation RMSE within 1.5x of interpolation RMSE") as note:
        start = time.perf_counter()
        records = ex.run_sinusoid(("gp-periodic",), range(5))
        table = ex.summarize(records)
        elapsed = time.perf_counter() - start
        ext = table[("gp-periodic", "extrapolation")]
        interp = table[("gp-periodic", "interpolation")]
        note(f"extrapolation RMSE {ext['rmse']:.3f} (NLL {ext['nll']:.3f}), interpolation RMSE {interp['rmse']:.3f}")
        note(f"{elapsed:.1f}s")
        assert ext["rmse"] <= 1.5 * interp["rmse"]
        assert elapsed < 120


@pytest.mark.slow
def test_5_ood_entropy(criterion):
    with criterion("5. OOD entropy: metagp-local uniform/in ratio >= 2, MAP below 2") as note:
        start = time.perf_counter()
        result = ex.run_ood_benchmark(ex.OODConfig(), seed=0)
        elapsed = time.perf_counter() - start
        local, map_ = result.ratio("metagp-local"), result.ratio("map")
        note("four-class toy (no image data in the workspace)")
        note(f"ratio metagp-local {local:.2f}, map {map_:.2f}")
        note("accuracy " + ", ".join(f"{m} {a:.3f}" for m, a in result.accuracy.items()))
        note(f"{elapsed / 60:.1f} min")
        assert local >= 2.0
        assert map_ < 2.0
        assert elapsed < 20 * 60


@pytest.mark.slow
def test_6_active_learning(criterion):
    with criterion("6. active learning, 10 seeds: entropy matches random within 70% of queries or +0.05 RMSE") \
            as note:
        start = time.perf_counter()
        cfg = ex.ActiveConfig()
        data = ex.sinusoid_pool(cfg, seed=0)
        ent = ex.active_learn(data, cfg, cfg.n_queries, "entropy", range(10)).mean_trace
        rnd = ex.active_learn(data, cfg, cfg.n_queries, "random", range(10)).mean_trace
        elapsed = time.perf_counter() - start
        target = rnd[-1]
        reached = np.nonzero(ent <= target)[0]
        first = int(reached[0]) if len(reached) else None
        early = first is not None and first <= 0.7 * cfg.n_queries
        close = ent[-1] <= target + 0.05
        note(f"final RMSE entropy {ent[-1]:.3f}, random {target:.3f}; entropy reaches it at query {first}")
        note(f"{elapsed / 60:.1f} min")
        assert early or close
        assert elapsed < 30 * 60


MODE_EPOCHS = 20000      # exact mode converges more slowly, so compare near convergence


def _mode_run(cov, x, y):
    # sinusoid benchmark settings: relu, noise fixed at the generator's level
    cfg = ModelConfig(layer_widths=(1, 50, 1), activation="relu", cov_mode=cov, noise_variance=0.01,
                      learn_noise=False)
    model = MetaGPModel(cfg, seed=0, init_inputs=x)
    result = train(model, x, y, TrainConfig(epochs=MODE_EPOCHS, batch_size=len(x), seed=0))
    with torch.no_grad():
        final = np.mean([elbo(model, x, y, S=10, J=10, generator=torch.Generator().manual_seed(s)).item()
                         for s in range(5)])
        fit = ex.rmse(model.predictive(x, 50, torch.Generator().manual_seed(0)).mean.numpy(), y.numpy())
    return final, result.seconds / MODE_EPOCHS, model.arch.weight_count, fit


@pytest.mark.slow
def test_7_approximation_modes(criterion):
    with criterion("7. diag vs exact mode at ~150 weights: final ELBO within 5%, >= 3x faster per epoch") as note:
        train_set = datasets.gen_sinusoid(100, seed=0)[0]
        x, y = torch.as_tensor(train_set.x), torch.as_tensor(train_set.y)
        diag, t_diag, weights, fit_diag = _mode_run("diag", x, y)
        exact, t_exact, _, fit_exact = _mode_run("exact", x, y)
        gap = abs(diag - exact) / abs(exact)
        note(f"{weights} weights; final ELBO diag {diag:.2f}, exact {exact:.2f} (gap {100 * gap:.1f}%)")
        note(f"train RMSE diag {fit_diag:.3f}, exact {fit_exact:.3f}")
        note(f"per epoch diag {1e3 * t_diag:.1f} ms, exact {1e3 * t_exact:.1f} ms ({t_exact / t_diag:.1f}x)")
        assert gap <= 0.05
        assert t_exact >= 3 * t_diag


PROPERTY_SUITES = ["test_tensor.py", "test_kernels.py", "test_prior.py", "test_bnn.py", "test_svi.py",
                   "test_baselines.py", "test_datasets.py"]


def test_8_property_suites(criterion):
    with criterion("8. module property suites (PSD/jitter, KL, variance floor, determinism, IDX, codes, prior cov)") \
            as note:
        start = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               *[str(ROOT / s) for s in PROPERTY_SUITES]],
                              capture_output=True, text=True, cwd=ROOT.parent)
        elapsed = time.perf_counter() - start
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
        note(summary)
        note(f"{elapsed:.1f}s")
        assert proc.returncode == 0
        assert elapsed < 300
