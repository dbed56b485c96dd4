import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from metagp import datasets, experiments as ex
from metagp.baselines import BNNConfig, MAPModel
from metagp.svi import ModelConfig, MetaGPModel, TrainConfig, train
from metagp.tensor import DTYPE

TINY = ex.SinusoidConfig(n_train=30, n_test=10, hidden=8, steps=20, gp_steps=10, pred_samples=10,
                         inducing_points=5, period_grid=10)


def test_rmse_and_nll():
    y = np.array([[0.5], [-1.0], [2.0]])
    assert ex.rmse(y, y) == 0.0
    assert ex.rmse(y + 1.0, y) == pytest.approx(1.0)
    assert ex.gaussian_nll(y, np.ones_like(y), y) == pytest.approx(0.5 * math.log(2 * math.pi))


def test_derive_seed_streams():
    assert ex.derive_seed(3, "a", "b") == ex.derive_seed(3, "a", "b")
    seeds = {ex.derive_seed(s, name) for s in range(20) for name in ("data", "init", "train")}
    assert len(seeds) == 60


def test_record_counts_and_csv(tmp_path):
    methods = ("gp-rbf", "map")
    records = ex.run_sinusoid(methods, range(5), TINY)
    assert len(records) == 5 * len(methods) * 2
    assert all(r.error is None and r.rmse >= 0 and math.isfinite(r.nll) for r in records)
    path = tmp_path / "out.csv"
    ex.write_records_csv(path, records)
    rows = ex.read_records_csv(path)
    assert len(rows) == 4 * len(records)
    assert open(path).readline().strip() == ",".join(ex.CSV_HEADER)
    table = ex.summarize(records)
    assert set(table) == {(m, s) for m in methods for s in ("interpolation", "extrapolation")}


def _metric_rows(path):
    return [r for r in ex.read_records_csv(path) if r[3] != "seconds"]


def test_reruns_give_identical_csv(tmp_path):
    for name in ("a.csv", "b.csv"):
        ex.write_records_csv(tmp_path / name, ex.run_sinusoid(("mfvi", "metagp"), [0], TINY))
    assert _metric_rows(tmp_path / "a.csv") == _metric_rows(tmp_path / "b.csv")


def test_failures_are_recorded(monkeypatch):
    real = ex.fit_sinusoid_method

    def flaky(method, *args):
        if method == "map":
            raise RuntimeError("diverged")
        return real(method, *args)

    monkeypatch.setattr(ex, "fit_sinusoid_method", flaky)
    records = ex.run_sinusoid(("map", "gp-rbf"), [0], TINY)
    bad = [r for r in records if r.method == "map"]
    assert len(bad) == 2 and all(r.error == "diverged" and math.isnan(r.rmse) for r in bad)
    assert all(r.error is None for r in records if r.method == "gp-rbf")
    with pytest.raises(ValueError):
        ex.run_sinusoid(("hmc",), [0], TINY)


def test_estimate_period():
    x = np.linspace(-2, 2, 80)
    y = np.sin(2 * np.pi * x / 2.0)
    assert ex.estimate_period(x, y, n_grid=60) == pytest.approx(2.0, rel=0.05)
    for seed in range(3):
        train = datasets.gen_sinusoid(100, seed=seed)[0]
        for grid in (25, 40, 60):
            assert ex.estimate_period(train.x, train.y, n_grid=grid) == pytest.approx(2.0, rel=0.02)


def test_entropy_grid_symmetric_init(tmp_path):
    model = MAPModel(BNNConfig((2, 6, 4), likelihood="categorical"))
    with torch.no_grad():
        model.weights.zero_()
    grid = ex.run_entropy_grid(model, resolution=7, n_samples=2)
    assert len(grid.entropy) == 49
    np.testing.assert_allclose(grid.entropy, math.log(4), rtol=1e-12)
    grid.to_csv(tmp_path / "grid.csv")
    assert open(tmp_path / "grid.csv").readline().strip() == "x1,x2,entropy,max_class_prob"


def test_local_model_more_uncertain_far_away():
    data = datasets.gen_four_class(100, seed=0)
    x, y = torch.as_tensor(data.x), torch.as_tensor(data.y)
    cfg = ModelConfig(layer_widths=(2, 20, 4), likelihood="categorical", inducing_points=20, local_kernel="rbf",
                      local_layers=(-1,), aux_transform="linear", aux_dim=2)
    model = MetaGPModel(cfg, seed=0, init_inputs=x)
    train(model, x, y, TrainConfig(epochs=400, batch_size=100))
    radius = np.linalg.norm(data.x, axis=1).max()
    far = ex.predict_classes(model, ex.ring_inputs(10 * radius), 50).entropy.mean().item()
    hull = ex.predict_classes(model, data.x, 50).entropy.mean().item()
    assert far > hull


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=1, max_size=100))
def test_entropy_cdf_properties(values):
    cdf = ex.EntropyCdf.from_entropies("x", values)
    assert np.all(np.diff(cdf.ordinates) >= 0)
    assert cdf.ordinates[-1] == 1.0 and np.all(cdf.ordinates > 0)
    assert np.all(np.diff(cdf.values) >= 0)
    assert 0 <= cdf.area(3.0) <= 3.0


def test_run_ood_identical_sets():
    model = MAPModel(BNNConfig((2, 6, 4), likelihood="categorical"), seed=1)
    x = np.random.default_rng(0).uniform(-3, 3, (30, 2))
    cdfs = ex.run_ood(model, x, {"copy": x.copy()}, n_samples=3)
    assert np.array_equal(cdfs["in"].values, cdfs["copy"].values)


def test_manifest(tmp_path):
    ex.write_manifest(tmp_path / "m.json", {"lr": 0.01}, [0, 1], command="x")
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["config"] == {"lr": 0.01} and m["seeds"] == [0, 1]
    assert {"metagp", "torch", "numpy", "python"} <= set(m["versions"])


ACTIVE = ex.ActiveConfig(n_data=60, n_train=10, n_test=20, hidden=8, initial_steps=30, update_steps=5,
                         pred_samples=10, method="mfvi")


def test_active_learning_traces():
    data = ex.sinusoid_pool(ACTIVE, seed=0)
    a = ex.active_learn(data, ACTIVE, 4, "random", seeds=[0, 1])
    b = ex.active_learn(data, ACTIVE, 4, "random", seeds=[0, 1])
    assert a.traces.shape == (2, 5)
    assert np.array_equal(a.traces, b.traces) and a.queried == b.queried
    e = ex.active_learn(data, ACTIVE, 4, "entropy", seeds=[0])
    assert e.traces.shape == (1, 5) and len(set(e.queried[0])) == 4
    with pytest.raises(ValueError):
        ex.active_learn(data, ACTIVE, 1, "margin", seeds=[0])


def test_active_learning_empty_pool_stops():
    data = ex.sinusoid_pool(ACTIVE, seed=0).subset(np.arange(33))
    result = ex.active_learn(data, ACTIVE, 6, "entropy", seeds=[0])
    assert result.traces.shape == (1, 7)
    assert len(result.queried[0]) == 3
    assert np.all(result.traces[0, 3:] == result.traces[0, 3])


def test_entropy_ties_pick_lowest_index(monkeypatch):
    data = ex.sinusoid_pool(ACTIVE, seed=0)
    pool = datasets.make_pool_split(len(data), ACTIVE.n_train, ACTIVE.n_test, ex.derive_seed(0, "pool-split")).pool
    import metagp.bnn as bnn

    real = bnn.predictive

    def flat(x, model, n, gen=None):
        p = real(x, model, n, gen)
        p.entropy = torch.zeros_like(p.entropy)
        return p

    monkeypatch.setattr(MetaGPModel, "predictive", lambda self, x, n=100, g=None: flat(x, self, n, g))
    monkeypatch.setattr("metagp.baselines.MFVIModel.predictive", lambda self, x, n=100, g=None: flat(x, self, n, g))
    result = ex.active_learn(data, ACTIVE, 2, "entropy", seeds=[0])
    assert result.queried[0] == sorted(pool.tolist())[:2]
