import math

import numpy as np
import pytest

from sdcnet import net
from sdcnet.datamodel import RunConfig, make_synthetic_dataset
from sdcnet.evaluation import (RunReport, ablation_configs, binned_mutual_information,
                               detect_negative_transfer, evaluate, export_embeddings, loso_run,
                               mi_topography, save_mi_csv)
from sdcnet.trainer import confusion_matrix


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    assert cm.sum() == 6


def test_evaluate_matches_confusion_trace():
    table = make_synthetic_dataset(2, 2, 5, 4, 2, 0.3, 0.2, seed=0)
    params = net.init_params(4, (5, 5), 2, np.random.default_rng(0))
    acc, cm = evaluate(params, table)
    assert acc == pytest.approx(np.trace(cm) / len(table))
    with pytest.raises(ValueError):
        evaluate(params, table.without_labels())


def test_negative_transfer_threshold():
    assert detect_negative_transfer(0.30, 3)
    assert not detect_negative_transfer(0.25, 4)
    assert not detect_negative_transfer(0.3334, 3)


def test_mi_independent_uniform_is_small():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=10_000), rng.uniform(size=10_000)
    assert binned_mutual_information(x, y) < 0.02


def test_mi_symmetric_and_self():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(500)
    y = x + 0.5 * rng.standard_normal(500)
    assert binned_mutual_information(x, y) == pytest.approx(binned_mutual_information(y, x), abs=1e-12)
    # a uniform variable against itself recovers the bin entropy
    u = (np.arange(1000) + 0.5) / 1000
    assert binned_mutual_information(u, u) == pytest.approx(math.log(10), abs=1e-12)


def test_mi_topography_layout():
    rng = np.random.default_rng(2)
    bands, channels, n = 5, 4, 2000
    x = rng.standard_normal((n, bands * channels))
    probs = np.zeros((n, 3))
    probs[:, 0] = 1 / (1 + np.exp(-x[:, 2 * bands + 3]))  # channel 2, band 3
    probs[:, 1] = rng.uniform(size=n)
    probs[:, 2] = 1 - probs[:, 0]
    mi = mi_topography(x, probs, bands, channels)
    assert mi.shape == (3, bands, channels)
    assert mi.min() == 0.0 and mi.max() == 1.0
    assert np.unravel_index(np.argmax(mi[0]), mi[0].shape) == (3, 2)


def test_mi_shuffled_features():
    rng = np.random.default_rng(3)
    n = 10_000
    x = rng.standard_normal((n, 10))
    probs = np.stack([1 / (1 + np.exp(-x[:, 0])), 1 - 1 / (1 + np.exp(-x[:, 0]))], 1)
    mi = mi_topography(x, probs, 5, 2)
    shuffled = mi_topography(x[rng.permutation(n)], probs, 5, 2)
    assert mi[0, 0, 0] == 1.0
    raw = max(binned_mutual_information(x[rng.permutation(n), k], probs[:, 0]) for k in range(10))
    assert raw < 0.05
    assert shuffled.shape == (2, 5, 2)


def test_mi_csv(tmp_path):
    mi = np.arange(12, dtype=float).reshape(2, 3, 2) / 11
    save_mi_csv(mi, tmp_path / "mi.csv")
    lines = (tmp_path / "mi.csv").read_text().splitlines()
    assert lines[0] == "class,band,channel,value"
    assert len(lines) == 13
    c, b, ch, v = lines[-1].split(",")
    assert (int(c), int(b), int(ch), float(v)) == (1, 2, 1, 1.0)


def test_export_embeddings(tmp_path):
    table = make_synthetic_dataset(2, 2, 3, 4, 2, 0.3, 0.2, seed=0)
    params = net.init_params(4, (64, 64), 2, np.random.default_rng(0))
    export_embeddings(params, table, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(["subject", "trial", "window", "label"] + [f"e{k}" for k in range(64)])
    assert len(lines) == len(table) + 1
    first = np.array(lines[1].split(",")[4:], dtype=float)
    assert np.array_equal(first, net.embed(params, table.features)[0])


@pytest.fixture(scope="module")
def tiny_table():
    return make_synthetic_dataset(3, 3, 6, 10, 3, 0.5, 0.2, seed=4)


def test_loso_structure(tiny_table):
    rep = loso_run(tiny_table, RunConfig(epochs=2, batch_size=8))
    assert rep.subjects == [0, 1, 2]
    assert len(rep.fold_accuracies) == 3 and len(rep.confusions) == 3
    assert all(c.sum() == 18 for c in rep.confusions)
    assert rep.std == pytest.approx(float(np.std(rep.fold_accuracies)))
    assert rep.mi.shape == (3, 5, 2)
    back = RunReport.from_dict(rep.to_dict())
    assert back.fold_accuracies == rep.fold_accuracies and back.mean == rep.mean


def test_loso_parallel_equals_serial(tiny_table):
    cfg = RunConfig(epochs=2, batch_size=8)
    a = loso_run(tiny_table, cfg, jobs=1).to_dict()
    b = loso_run(tiny_table, cfg, jobs=2).to_dict()
    assert a == b


def test_ablation_configs_cover_each_flag():
    rows = ablation_configs(RunConfig(no_mmd=True))
    assert len(rows) == 7 and rows[-1][0] == "full-model"
    full = rows[-1][1]
    assert not any(getattr(full, f) for f in ("no_mmd", "no_cmmd", "no_ss_mix"))
    assert sum(getattr(c, "no_mmd") for _, c in rows) == 1
