import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from estimator.dataset import SimulationSettings, generate_dataset, normalize, raw_channel
from estimator.errors import ConfigurationError, LengthMismatchError, NormalizationError, UndefinedCorrelationError
from estimator.inference_eval import (EvalReport, classify_vehicle, correlation_histogram, encode_latents,
                                      estimate_tire_input, evaluate, export_latents, pearson, perturbation_sweep,
                                      probe_accuracy, write_report)
from estimator.neural import build_model
from estimator.training import TrainConfig, fit, history_to_frame
from estimator.vehicle_dynamics import STANDARD_VEHICLES


@pytest.fixture
def mini_weights(mini_arch):
    return build_model(mini_arch, seed=21)


def _oracle_pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = len(a)
    cov = (np.sum(a * b) - n * a.mean() * b.mean()) / (n - 1)
    return cov / (np.std(a, ddof=1) * np.std(b, ddof=1))


def test_pearson_identity_and_anticorrelation():
    a = np.random.default_rng(0).standard_normal(50)
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -2 * a + 3) == pytest.approx(-1.0)


def test_pearson_small_example():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(_oracle_pearson([1, 2, 3, 4], [1, 2, 3, 5]), abs=1e-12)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(100), rng.standard_normal(100)
    assert pearson(a, 3.5 * b + 7.0) == pytest.approx(pearson(a, b), abs=1e-10)


def test_pearson_undefined_cases():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        pearson([1], [2])
    with pytest.raises(LengthMismatchError):
        pearson([1, 2, 3], [1, 2])


def test_estimate_keeps_length(mini_weights, mini_dataset):
    cabin = raw_channel(mini_dataset, "cabin")
    estimate = estimate_tire_input(mini_weights, cabin, mini_dataset.stats)
    assert estimate.shape == cabin.shape
    np.testing.assert_allclose(estimate_tire_input(mini_weights, cabin[3], mini_dataset.stats), estimate[3],
                               rtol=1e-5, atol=1e-9)


def test_estimate_rejects_wrong_length(mini_weights, mini_dataset):
    with pytest.raises(LengthMismatchError):
        estimate_tire_input(mini_weights, np.zeros(31), mini_dataset.stats)
    with pytest.raises(LengthMismatchError):
        classify_vehicle(mini_weights, np.zeros((2, 40)), mini_dataset.stats)


def test_estimate_requires_stats(mini_weights):
    with pytest.raises(NormalizationError):
        estimate_tire_input(mini_weights, np.zeros(32), None)


def test_classify_probabilities(mini_weights, mini_dataset):
    cabin = raw_channel(mini_dataset, "cabin")
    probs = classify_vehicle(mini_weights, cabin, mini_dataset.stats)
    assert probs.shape == (len(cabin), 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    duplicated = classify_vehicle(mini_weights, np.stack([cabin[0], cabin[0]]), mini_dataset.stats)
    assert np.array_equal(duplicated[0], duplicated[1])


def test_threads_do_not_change_results(mini_weights, mini_dataset):
    cabin = np.repeat(raw_channel(mini_dataset, "cabin"), 40, axis=0)
    one = estimate_tire_input(mini_weights, cabin, mini_dataset.stats, threads=1)
    four = estimate_tire_input(mini_weights, cabin, mini_dataset.stats, threads=4)
    assert np.array_equal(one, four)


def test_evaluate_bookkeeping(mini_weights, mini_dataset):
    report = evaluate(mini_weights, mini_dataset)
    test_counts = mini_dataset.class_counts("test")
    assert report.classes == [1, 2]
    assert {k: len(v) for k, v in report.correlations.items()} == test_counts
    assert report.n_test == sum(test_counts.values())
    assert [sum(row) for row in report.confusion] == [test_counts[1], test_counts[2]]
    assert all(-1.0 <= r <= 1.0 for r in report.all_correlations())
    assert 0.0 <= report.accuracy <= 1.0
    assert report.adversarial_probe_accuracy is not None and 0.0 <= report.adversarial_probe_accuracy <= 1.0
    assert report.vlf_probe_accuracy is not None


def test_evaluate_is_reproducible(tmp_path, mini_weights, mini_dataset):
    a = write_report(evaluate(mini_weights, mini_dataset), tmp_path / "a.json")
    b = write_report(evaluate(mini_weights, mini_dataset), tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    data = json.loads(a.read_text(encoding="utf-8"))
    assert {"medianCorrelation", "confusionMatrix", "classifierAccuracy", "adversarialProbeAccuracy",
            "reliabilityRanking", "reliableClasses"} <= set(data)


def test_reliability_ranking():
    report = EvalReport(classes=[1, 2, 3], correlations={1: [0.2, 0.4, 0.3], 2: [0.9, 0.8], 3: [0.6, 0.5, 0.7]},
                        confusion=[[0] * 3] * 3, accuracy=1.0)
    assert report.medians == {1: pytest.approx(0.3), 2: pytest.approx(0.85), 3: pytest.approx(0.6)}
    assert report.reliability_ranking == [2, 3, 1]
    assert report.reliable_classes == [2, 3]
    assert report.minima[2] == 0.8 and report.maxima[3] == 0.7


def test_correlation_histogram():
    frame = correlation_histogram([-1.0, -0.5, 0.0, 0.99, 1.0])
    assert list(frame.columns) == ["bin_left", "bin_right", "count"]
    assert len(frame) == 30
    assert frame["count"].sum() == 5
    assert frame["bin_left"].iloc[0] == -1.0 and frame["bin_right"].iloc[-1] == 1.0


def test_latent_accuracy_needs_two_classes():
    x = np.random.default_rng(0).standard_normal((10, 3))
    assert probe_accuracy(x, np.ones(10), x, np.ones(10)) is None
    y = np.array([1, 2] * 5)
    assert probe_accuracy(x + y[:, None] * 10, y, x + y[:, None] * 10, y) == 1.0


def test_export_latents(tmp_path, mini_weights, mini_dataset, mini_arch):
    path = tmp_path / "latents.csv"
    frame = export_latents(mini_weights, mini_dataset, path)
    assert len(frame) == len(mini_dataset)
    assert path.exists()
    vlf_cols = [f"vlf_{i}" for i in range(mini_arch.d_v)]
    rlf_cols = [f"rlf_{i}" for i in range(mini_arch.d_r)]
    assert set(vlf_cols + rlf_cols + ["class_id", "split", "source", "pc1", "pc2"]) <= set(frame.columns)
    assert frame["pc1"].var() >= frame["pc2"].var()
    rlf, vlf = encode_latents(mini_weights, raw_channel(mini_dataset, "cabin"), mini_dataset.stats)
    np.testing.assert_allclose(frame[vlf_cols].to_numpy(), vlf)


def test_export_latents_appends_perturbed_rows(mini_weights, mini_dataset):
    cabin = raw_channel(mini_dataset, "cabin")[:3]
    frame = export_latents(mini_weights, mini_dataset, perturbed=(cabin, np.array([1, 1, 2])))
    assert len(frame) == len(mini_dataset) + 3
    assert list(frame["source"].iloc[-3:]) == ["perturbed"] * 3


def test_sweep_requires_sorted_fractions(mini_weights, mini_dataset):
    with pytest.raises(ConfigurationError):
        perturbation_sweep(mini_weights, STANDARD_VEHICLES[:2], [0.2, 0.1], 2, 0, mini_dataset.stats)


def test_sweep_small(mini_weights, mini_dataset, mini_settings):
    result = perturbation_sweep(mini_weights, STANDARD_VEHICLES[:2], [0.0, 0.2], n_per_cell=3, seed=5,
                                stats=mini_dataset.stats, settings=mini_settings, reference=mini_dataset,
                                vehicles_per_cell=2)
    assert result.fractions == [0.0, 0.2]
    assert result.n_samples == [6, 6]
    assert all(0.0 <= a <= 1.0 for a in result.accuracy)
    assert all(0.0 <= a <= 1.0 for a in result.centroid_agreement)
    again = perturbation_sweep(mini_weights, STANDARD_VEHICLES[:2], [0.0, 0.2], n_per_cell=3, seed=5,
                               stats=mini_dataset.stats, settings=mini_settings, vehicles_per_cell=2)
    assert again.accuracy == result.accuracy
    assert again.centroid_agreement == [None, None]
    assert list(result.to_frame().columns) == ["fraction", "accuracy", "centroid_agreement", "n_samples"]


def test_sweep_rejects_signal_length_mismatch(mini_weights, mini_dataset):
    with pytest.raises(LengthMismatchError):
        perturbation_sweep(mini_weights, STANDARD_VEHICLES[:2], [0.1], 2, 0, mini_dataset.stats,
                           settings=SimulationSettings(signal_length=64))


def test_untrained_model_has_no_skill(mini_dataset):
    weights = build_model(TrainConfig(n_classes=2).architecture(mini_dataset.signal_length), seed=2)
    report = evaluate(weights, mini_dataset, with_probes=False)
    assert abs(float(np.median(report.all_correlations()))) < 0.2


@pytest.fixture(scope="module")
def desk_scale():
    settings = SimulationSettings(signal_length=1024)
    dataset = normalize(generate_dataset(STANDARD_VEHICLES, n_per_class=200, seed=2024, settings=settings,
                                         test_fraction=0.3, threads=4))
    weights, history = fit(dataset, TrainConfig(epochs=100, seed=7, patience=None))
    return dataset, weights, history


@pytest.mark.slow
def test_desk_scale_cross_inference(desk_scale):
    dataset, weights, _ = desk_scale
    report = evaluate(weights, dataset, threads=4)
    medians = report.medians
    assert report.accuracy >= 0.90
    assert report.adversarial_probe_accuracy <= 0.30
    assert medians[2] >= 0.75
    for good in (2, 3):
        assert all(medians[good] > medians[weak] for weak in (1, 4, 5))
    frame = export_latents(weights, dataset)
    labels = frame["class_id"].to_numpy()
    train = frame["split"].to_numpy() == "train"
    vlf = frame[[c for c in frame.columns if c.startswith("vlf_")]].to_numpy()
    assert probe_accuracy(vlf[train], labels[train], vlf[~train], labels[~train]) >= 0.90


@pytest.mark.slow
def test_desk_scale_perturbation_trend(desk_scale):
    dataset, weights, _ = desk_scale
    fractions = [0.01, 0.05, 0.10, 0.15, 0.20, 0.30, 0.40]
    result = perturbation_sweep(weights, STANDARD_VEHICLES, fractions, n_per_cell=100, seed=99, stats=dataset.stats,
                                reference=dataset, threads=4)
    assert result.accuracy[-1] < result.accuracy[0]
    assert spearmanr(fractions, result.accuracy).correlation <= 0


@pytest.mark.slow
def test_desk_scale_validation_loss_trends_down(desk_scale):
    _, _, history = desk_scale
    totals = history_to_frame(history)["total"].to_numpy()
    assert np.median(totals[-10:]) < np.median(totals[:10])


@pytest.mark.slow
def test_desk_scale_unperturbed_sweep_matches_test_accuracy(desk_scale):
    dataset, weights, _ = desk_scale
    report = evaluate(weights, dataset, threads=4, with_probes=False)
    result = perturbation_sweep(weights, STANDARD_VEHICLES, [0.0], n_per_cell=200, seed=31, stats=dataset.stats,
                                threads=4)
    assert abs(result.accuracy[0] - report.accuracy) <= 0.03
