import csv
import warnings

import numpy as np
import pytest
import torch
from sklearn.metrics import accuracy_score, cohen_kappa_score, f1_score

from muleeg.data import LeakageError
from muleeg.evaluate import (DEFAULT_FRACTIONS, DEFAULT_SWEEP, EvalConfig, EvalReport, Protocol, aggregate,
                             compute_metrics, export_embeddings, fine_tune, kfold_evaluate, linear_evaluate,
                             parameter_digest, semi_rows, semi_supervised_curve, sensitivity_sweep,
                             stratified_subset, subject_folds)
from muleeg.pretrain import PretrainConfig, pretrain


def scalar_metrics(y_true, y_pred, k=5):
    """Loop-based accuracy / kappa / macro-F1 straight from the definitions."""
    n = len(y_true)
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    p_o = sum(cm[i][i] for i in range(k)) / n
    p_e = sum(sum(cm[i]) * sum(cm[r][i] for r in range(k)) for i in range(k)) / (n * n)
    kappa = (p_o - p_e) / (1 - p_e)
    f1s = []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return p_o, kappa, sum(f1s) / k


def test_metrics_match_oracles_on_random_vectors():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        n = int(gen.integers(5, 200))
        y, p = gen.integers(0, 5, n), gen.integers(0, 5, n)
        if len(set(y) | set(p)) < 2:
            continue
        m = compute_metrics(y, p)
        acc, kappa, mf1 = scalar_metrics(list(y), list(p))
        assert abs(m.accuracy - acc) < 1e-9 and abs(m.kappa - kappa) < 1e-9 and abs(m.macro_f1 - mf1) < 1e-9
        assert abs(m.kappa - cohen_kappa_score(y, p)) < 1e-9
        assert abs(m.accuracy - accuracy_score(y, p)) < 1e-9
        sk = f1_score(y, p, labels=range(5), average="macro", zero_division=0)
        assert abs(m.macro_f1 - sk) < 1e-9


def test_metric_edge_cases():
    y = np.arange(5).repeat(20)
    perfect = compute_metrics(y, y)
    assert (perfect.accuracy, perfect.kappa, perfect.macro_f1) == (1.0, 1.0, 1.0)
    const = compute_metrics(y, np.full_like(y, 2))
    assert const.accuracy == pytest.approx(0.2) and const.kappa == pytest.approx(0.0, abs=1e-12)
    same = compute_metrics([1, 1, 1], [1, 1, 1])
    assert same.kappa == 1.0 and same.macro_f1 == pytest.approx(0.2)  # absent classes count as 0
    assert compute_metrics([1, 1], [2, 2]).kappa == 0.0
    m = compute_metrics([0, 1, 2], [0, 1, 1])
    assert np.trace(m.confusion) / np.sum(m.confusion) == m.accuracy
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0])
    with pytest.raises(ValueError):
        compute_metrics([0, 7], [0, 1])


def test_aggregate_std():
    a = compute_metrics([0, 1, 2, 3], [0, 1, 2, 3])
    b = compute_metrics([0, 1, 2, 3], [0, 1, 2, 2])
    mean, std = aggregate([a, b])
    assert mean.accuracy == pytest.approx(0.875)
    assert std["accuracy"] == pytest.approx(np.std([1.0, 0.75], ddof=1))
    assert aggregate([a]) == (a, None)


@pytest.fixture(scope="module")
def groups(tiny_cohort):
    return tiny_cohort[:2], tiny_cohort[2:4], tiny_cohort[4:]


@pytest.fixture(scope="module")
def ckpt(groups):
    return pretrain("muleeg", groups[0], PretrainConfig.for_preset("desk", "muleeg", epochs=1, batch_size=16))


FAST = EvalConfig(linear_epochs=5, finetune_epochs=1, batch_size=16, n_seeds=2)


def test_linear_eval_frozen_and_reported(ckpt, groups):
    before = parameter_digest(ckpt.model.time_encoder)
    report = linear_evaluate(ckpt, groups[1], groups[2], FAST)
    assert parameter_digest(ckpt.model.time_encoder) == before
    assert report.protocol is Protocol.LINEAR and report.std is None and report.n_folds == 1
    assert report.extra["view"] == "time"
    assert report.checkpoint == ckpt.config.config_hash()
    assert linear_evaluate(ckpt, groups[1], groups[2], FAST).to_json() == report.to_json()


def test_leakage_guard(ckpt, groups):
    with pytest.raises(LeakageError):
        linear_evaluate(ckpt, groups[1], [groups[0][0]], FAST)  # pretext subject in test
    with pytest.raises(LeakageError):
        linear_evaluate(ckpt, groups[1], [groups[1][0]], FAST)  # train subject in test
    with pytest.raises(LeakageError):
        fine_tune(ckpt, groups[1], [groups[0][1]], FAST)


def test_fine_tune_moves_a_copy(ckpt, groups):
    before = parameter_digest(ckpt.model.time_encoder)
    report = fine_tune(ckpt, groups[1], groups[2], FAST)
    assert report.protocol is Protocol.FINETUNE
    assert parameter_digest(ckpt.model.time_encoder) == before


def test_semi_full_fraction_equals_fine_tune(ckpt, groups):
    cfg = EvalConfig(finetune_epochs=1, batch_size=16, n_seeds=1)
    full = semi_supervised_curve(ckpt, groups[1], groups[2], cfg, fractions=[1.0])[0]
    ft = fine_tune(ckpt, groups[1], groups[2], cfg)
    assert full.metrics == ft.metrics


def test_semi_skips_tiny_fractions(ckpt, groups):
    with pytest.warns(UserWarning, match="skipping fraction 0.01"):
        reports = semi_supervised_curve(ckpt, groups[1], groups[2], FAST, fractions=[0.01, 0.5])
    assert [r.extra["fraction"] for r in reports] == [0.5]
    assert reports[0].n_folds == 2 and reports[0].std is not None
    assert list(semi_rows(reports)[0])[:2] == ["fraction", "n_samples"]
    assert DEFAULT_FRACTIONS == (0.01, 0.05, 0.10, 0.25, 0.50, 1.00)


def test_stratified_subset():
    labels = np.repeat(np.arange(5), [100, 10, 50, 30, 2])
    idx = stratified_subset(labels, 0.1, np.random.default_rng(0))
    counts = np.bincount(labels[idx], minlength=5)
    assert list(counts) == [10, 1, 5, 3, 1]
    assert len(np.unique(idx)) == len(idx)


def test_subject_folds():
    ids = [f"s{i}" for i in range(10)]
    folds = subject_folds(ids, 5, seed=3)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(sum(folds, [])) == sorted(ids)
    assert folds == subject_folds(ids, 5, seed=3)
    with pytest.raises(ValueError):
        subject_folds(ids, 11, 0)


def test_kfold(ckpt, groups):
    report = kfold_evaluate(ckpt, list(groups[1]) + list(groups[2]), k=2, cfg=FAST)
    assert report.n_folds == 2 and len(report.folds) == 2 and report.std is not None
    folds = report.extra["folds"]
    assert not set(folds[0]) & set(folds[1])
    with pytest.raises(LeakageError):
        kfold_evaluate(ckpt, list(groups[0]) + list(groups[1]), k=2, cfg=FAST)


def test_report_roundtrip(ckpt, groups):
    report = kfold_evaluate(ckpt, list(groups[1]) + list(groups[2]), k=2, cfg=FAST)
    assert EvalReport.from_json(report.to_json()) == report


def test_export_embeddings(tmp_path, ckpt, groups):
    path = tmp_path / "emb.csv"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        feats, labels = export_embeddings(ckpt, groups[2], n_per_class=3, seed=1, csv_path=path)
        again, _ = export_embeddings(ckpt, groups[2], n_per_class=3, seed=1)
    assert feats.shape[1] == 256 and np.isfinite(feats).all()
    assert np.array_equal(feats, again)
    assert all(c <= 3 for c in np.bincount(labels))
    rows = list(csv.reader(open(path)))
    assert len(rows[0]) == 257 and rows[0][-1] == "label" and len(rows) == len(labels) + 1


def test_export_warns_on_small_class(ckpt, groups):
    with pytest.warns(UserWarning, match="taking all"):
        export_embeddings(ckpt, groups[2], n_per_class=1000)


def test_sweep_rows(tmp_path, groups):
    base = PretrainConfig.for_preset("desk", "muleeg", epochs=1, batch_size=16)
    grid = {"tau_d": [1.0, 10.0], "lambda2": [0.5]}
    rows = sensitivity_sweep(groups[0], groups[1], groups[2], base, grid, FAST, tmp_path / "s.csv")
    assert len(rows) == 3 and [r["param"] for r in rows] == ["tau_d", "tau_d", "lambda2"]
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 4
    assert DEFAULT_SWEEP["tau_d"] == (0.1, 1.0, 5.0, 10.0)
    with pytest.raises(ValueError):
        sensitivity_sweep(groups[0], groups[1], groups[2], base, {"tau": [1.0]}, FAST)


@pytest.mark.slow
def test_semi_curve_full_beats_one_percent():
    from muleeg.data import synth_generate

    records = synth_generate(7, 200, seed=6)
    ckpt = pretrain("random_init", records[:1], PretrainConfig.for_preset("desk", "random_init", seed=6))
    cfg = EvalConfig(finetune_epochs=10, n_seeds=1, seed=6)
    low, full = semi_supervised_curve(ckpt, records[1:5], records[5:], cfg, fractions=[0.01, 1.0])
    assert low.extra["n_samples"] < 20 and full.extra["n_samples"] == 800
    assert full.metrics.macro_f1 >= low.metrics.macro_f1
