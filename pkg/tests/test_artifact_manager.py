import csv
import json

import numpy as np
import pytest

from artifact_manager import SWEEP_HEADER, ArtifactStore, fmt
from measures import closed_form_1d, closed_form_2d, sample
from models import OODResult, RateFit, SampleSet, SweepRow, TrainHistory
from neural_map import forward, init_net
from seed_manager import content_digest


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(str(tmp_path / "run"))


def data_rows(path):
    with open(path) as f:
        return [row for row in csv.reader(line for line in f if not line.startswith("#"))]


def test_fmt():
    assert fmt(None) == ""
    assert fmt(True) == "1"
    assert fmt(np.int64(7)) == "7"
    assert float(fmt(0.1)) == 0.1
    assert float(fmt(1 / 3)) == 1 / 3


def test_samples_survive_the_csv(store):
    draw = sample(closed_form_2d(), 25, seed=3)
    store.write_samples(draw, "ys.csv")
    loaded = store.read_samples("ys.csv")
    np.testing.assert_array_equal(loaded.points, draw.points)
    assert loaded.measure_id == "closed_form_2d"
    assert loaded.seed == 3


def test_sample_count_mismatch(store):
    with open(store.path("bad.csv"), "w") as f:
        f.write("# measure_id=a,seed=0,N=3\nx1\n0.1\n0.2\n")
    with pytest.raises(ValueError, match="N=3"):
        store.read_samples("bad.csv")


def test_density_tables(store):
    rows = data_rows(store.write_density(closed_form_1d(n_grid=11), "d1.csv"))
    assert rows[0] == ["x", "value", "cdf"]
    assert len(rows) == 12
    rows = data_rows(store.write_density(closed_form_2d(n_r=5, n_theta=8), "d2.csv"))
    assert rows[0] == ["x1", "x2", "value"]
    assert len(rows) == 41


def test_history_table(store):
    history = TrainHistory(losses=[1.0, 0.5], lrs=[0.01, 0.01], is_best=[True, True])
    rows = data_rows(store.write_history(history))
    assert rows == [["iter", "loss", "lr", "is_best"], ["0", "1", "0.01", "1"], ["1", "0.5", "0.01", "1"]]


@pytest.mark.parametrize("seed", [11, None])
def test_checkpoint(store, seed):
    net = init_net((2, 8, 2), seed=11)
    net.seed = seed
    path = store.save_checkpoint(net, step=42)
    loaded, step = ArtifactStore.load_checkpoint(path)
    assert step == 42
    assert loaded.layer_dims == (2, 8, 2)
    assert loaded.seed == seed
    x = np.random.default_rng(0).random((5, 2))
    np.testing.assert_array_equal(forward(loaded, x), forward(net, x))


def test_sweep_csv(store, tmp_path):
    rows = [SweepRow(10, 0, 0.2, 0.1, 5, 9, False, 123),
            SweepRow(10, 1, float("nan"), float("nan"), -1, 0, True, 456),
            SweepRow(20, 0, 0.15, 0.05, 7, 9, False, 789)]
    fit = RateFit(-0.4, -0.3, [10, 20], [0.2, 0.15], [0.0, 0.0], 2, predicted_slope=-0.25, excluded_runs=1)
    path = store.write_sweep(rows, fit, example="2d", name="sweep_2d.csv")

    loaded, example = ArtifactStore.read_sweep(path)
    assert example == "2d"
    assert [r.seed for r in loaded] == [123, 456, 789]
    assert loaded[1].diverged and np.isnan(loaded[1].val_w2)
    with open(path) as f:
        assert f.read().rstrip().splitlines()[-1].startswith("# summary slope=-0.4")

    nested = ArtifactStore(str(tmp_path / "run" / "older"))
    nested.write_sweep(rows[:1], name="sweep_1d.csv")
    assert [p.rsplit("/", 1)[-1] for p in store.find_sweeps()] == ["sweep_1d.csv", "sweep_2d.csv"]


def test_read_sweep_rejects_other_tables(store):
    path = store.write_history(TrainHistory(losses=[1.0], lrs=[0.1], is_best=[True]))
    with pytest.raises(ValueError, match="not a sweep"):
        ArtifactStore.read_sweep(path)
    assert SWEEP_HEADER[0] == "N"


def test_rate_table_and_ood(store):
    fit = RateFit(-0.5, 0.1, [10, 100], [0.3, 0.1], [0.01, 0.01], 3, residuals=[0.0, 0.0])
    rows = data_rows(store.write_rate_table(fit))
    assert rows[0] == ["N", "mean_w2", "stderr", "residual"]
    assert len(rows) == 3

    result = OODResult(lhs=0.1, rhs=0.2, slack=0.1, tolerance=0.01, w2_shift=0.05)
    rows = data_rows(store.write_ood([("no_shift", result)]))
    assert rows[1][0] == "no_shift"
    assert float(rows[1][3]) == 0.1


def test_manifest(store):
    out = store.write_samples(SampleSet(np.zeros((2, 1)), "zeros", 0))
    path = store.write_manifest("sample", {"experiment": {"seed": "0"}}, {"N": 2}, [out])
    with open(path) as f:
        manifest = json.load(f)
    assert manifest["status"] == "ok"
    assert manifest["versions"]["deepparticle"] == "0.1.0"
    assert manifest["input_hashes"]["N"] == content_digest(2)
    with open(out, "rb") as f:
        assert manifest["outputs"]["samples.csv"] == content_digest(f.read())
    assert "error" not in manifest


def test_failed_manifest(store):
    path = store.write_manifest("train", {}, status="failed", error="diverged")
    with open(path) as f:
        manifest = json.load(f)
    assert (manifest["status"], manifest["error"]) == ("failed", "diverged")


def test_rate_plot(store):
    fit = RateFit(-0.5, 0.0, [10, 100, 1000], [0.3, 0.1, 0.03], [0.01, 0.005, 0.001], 3)
    path = store.plot_rate(fit, title="1d example")
    with open(path) as f:
        text = f.read()
    assert "<svg" in text
    assert "dc:date" not in text
