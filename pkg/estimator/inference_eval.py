"""
Cross-Inference Evaluation

Estimates tire-level (road) acceleration from cabin acceleration by chaining
the cabin-side road encoder into the road decoder, classifies vehicles from
the vehicle latent, and builds the evaluation artifacts: per-class Pearson
correlations and histograms, the classifier confusion matrix, latent probe
accuracies, the parameter-perturbation sweep and the latent export.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .dataset import (Dataset, NormalizationStats, SimulationSettings, derive_seed, generate_samples,
                      normalize_series, perturb_vehicle, raw_channel)
from .errors import ConfigurationError, LengthMismatchError, NormalizationError, UndefinedCorrelationError
from .neural import ModelWeights, softmax
from .road_profile import RoadPsdParams
from .tracing import span
from .vehicle_dynamics import VehicleParams

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 30
RELIABILITY_THRESHOLD = 0.5
EVAL_CHUNK = 256

PathLike = Union[str, Path]


def _as_batch(cabin: np.ndarray, signal_length: int) -> Tuple[np.ndarray, bool]:
    cabin = np.asarray(cabin, dtype=np.float64)
    single = cabin.ndim == 1
    if single:
        cabin = cabin[None, :]
    if cabin.ndim != 2 or cabin.shape[1] != signal_length:
        raise LengthMismatchError(f"cabin signal has length {cabin.shape[-1]}, the model expects {signal_length}")
    return cabin, single


def _map_chunks(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, threads: int = 1) -> np.ndarray:
    chunks = [x[i:i + EVAL_CHUNK] for i in range(0, len(x), EVAL_CHUNK)]
    if not chunks:
        return fn(x)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return np.concatenate(list(pool.map(fn, chunks)))


def _require_stats(stats: Optional[NormalizationStats]) -> NormalizationStats:
    if stats is None:
        raise NormalizationError("normalisation statistics from training are required")
    return stats


def estimate_tire_input(weights: ModelWeights, cabin: np.ndarray, stats: NormalizationStats,
                        threads: int = 1) -> np.ndarray:
    """
    Road acceleration estimated from cabin acceleration.

    Args:
        weights: trained model
        cabin: raw cabin acceleration, (L,) or (n, L)
        stats: training-split normalisation statistics

    Returns:
        raw road acceleration with the same shape as `cabin`
    """
    stats = _require_stats(stats)
    batch, single = _as_batch(cabin, weights.architecture.signal_length)
    x = normalize_series(batch, stats, "cabin").astype(weights.dtype)

    def run(chunk: np.ndarray) -> np.ndarray:
        return weights["dc_r"].predict(weights["r_ec_v"].predict(chunk))

    road = denormalize_road(_map_chunks(run, x, threads), stats)
    return road[0] if single else road


def denormalize_road(series: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(series, dtype=np.float64) * stats.std["road"] + stats.mean["road"]


def classify_vehicle(weights: ModelWeights, cabin: np.ndarray, stats: NormalizationStats,
                     threads: int = 1) -> np.ndarray:
    """Class probabilities (column k is class k + 1)"""
    stats = _require_stats(stats)
    batch, single = _as_batch(cabin, weights.architecture.signal_length)
    x = normalize_series(batch, stats, "cabin").astype(weights.dtype)

    def run(chunk: np.ndarray) -> np.ndarray:
        return weights["cl"].predict(weights["v_ec_v"].predict(chunk))

    probs = softmax(_map_chunks(run, x, threads).astype(np.float64))
    return probs[0] if single else probs


def encode_latents(weights: ModelWeights, cabin: np.ndarray, stats: NormalizationStats,
                   threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """(RLF, VLF) of raw cabin signals, both taken from the cabin-side encoders"""
    stats = _require_stats(stats)
    batch, _ = _as_batch(cabin, weights.architecture.signal_length)
    x = normalize_series(batch, stats, "cabin").astype(weights.dtype)
    d_r = weights.architecture.d_r

    def run(chunk: np.ndarray) -> np.ndarray:
        return np.concatenate([weights["r_ec_v"].predict(chunk), weights["v_ec_v"].predict(chunk)], axis=1)

    joint = _map_chunks(run, x, threads).astype(np.float64)
    return joint[:, :d_r], joint[:, d_r:]


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Sample Pearson correlation, computed with the two-pass formula"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatchError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise UndefinedCorrelationError(f"correlation needs at least 2 points, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance series")
    r = float(np.dot(da, db)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def correlation_histogram(values: Sequence[float], bins: int = HISTOGRAM_BINS) -> pd.DataFrame:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(-1.0, 1.0))
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts.astype(np.int64)})


def probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> Optional[float]:
    """
    Test accuracy of a logistic-regression probe fit on standardised train latents.

    Returns None when the probe cannot be fit (fewer than two classes or an
    empty split).
    """
    if len(test_y) == 0 or len(np.unique(train_y)) < 2:
        return None
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    probe.fit(train_x, train_y)
    return float(probe.score(test_x, test_y))


@dataclass
class SweepResult:
    fractions: List[float]
    accuracy: List[float]
    centroid_agreement: List[Optional[float]]
    n_samples: List[int]
    rank_correlation: Optional[float] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "fraction": self.fractions,
            "accuracy": self.accuracy,
            "centroid_agreement": [np.nan if v is None else v for v in self.centroid_agreement],
            "n_samples": self.n_samples,
        })

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fractions": list(self.fractions),
            "accuracy": list(self.accuracy),
            "centroidAgreement": list(self.centroid_agreement),
            "nSamples": list(self.n_samples),
            "rankCorrelation": self.rank_correlation,
        }


@dataclass
class EvalReport:
    """Aggregated cross-inference and classification results over the test split"""

    classes: List[int]
    correlations: Dict[int, List[float]]
    confusion: List[List[int]]
    accuracy: float
    adversarial_probe_accuracy: Optional[float] = None
    vlf_probe_accuracy: Optional[float] = None
    reliability_threshold: float = RELIABILITY_THRESHOLD
    sweep: Optional[SweepResult] = None
    n_test: int = 0
    split: str = "test"

    @property
    def medians(self) -> Dict[int, float]:
        return {k: float(np.median(v)) for k, v in self.correlations.items() if v}

    @property
    def minima(self) -> Dict[int, float]:
        return {k: float(np.min(v)) for k, v in self.correlations.items() if v}

    @property
    def maxima(self) -> Dict[int, float]:
        return {k: float(np.max(v)) for k, v in self.correlations.items() if v}

    @property
    def reliability_ranking(self) -> List[int]:
        """Classes ordered by descending median correlation (ties by class id)"""
        medians = self.medians
        return sorted(medians, key=lambda k: (-medians[k], k))

    @property
    def reliable_classes(self) -> List[int]:
        medians = self.medians
        return [k for k in self.reliability_ranking if medians[k] >= self.reliability_threshold]

    def all_correlations(self) -> np.ndarray:
        values = [v for k in sorted(self.correlations) for v in self.correlations[k]]
        return np.asarray(values, dtype=np.float64)

    def histogram(self, class_id: int) -> pd.DataFrame:
        return correlation_histogram(self.correlations[class_id])

    def to_dict(self) -> Dict[str, Any]:
        def keyed(d: Dict[int, Any]) -> Dict[str, Any]:
            return {str(k): v for k, v in d.items()}

        overall = self.all_correlations()
        return {
            "split": self.split,
            "nTest": self.n_test,
            "classes": list(self.classes),
            "correlations": keyed({k: list(v) for k, v in self.correlations.items()}),
            "medianCorrelation": keyed(self.medians),
            "minCorrelation": keyed(self.minima),
            "maxCorrelation": keyed(self.maxima),
            "overallCorrelation": {
                "median": float(np.median(overall)) if overall.size else None,
                "min": float(overall.min()) if overall.size else None,
                "max": float(overall.max()) if overall.size else None,
            },
            "confusionMatrix": [list(row) for row in self.confusion],
            "classifierAccuracy": self.accuracy,
            "adversarialProbeAccuracy": self.adversarial_probe_accuracy,
            "vlfProbeAccuracy": self.vlf_probe_accuracy,
            "reliabilityThreshold": self.reliability_threshold,
            "reliabilityRanking": self.reliability_ranking,
            "reliableClasses": self.reliable_classes,
            "perturbationSweep": self.sweep.to_dict() if self.sweep else None,
        }


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return None if not math.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_report(report: EvalReport, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(report.to_dict()), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_histograms(report: EvalReport, output_dir: PathLike) -> List[Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for class_id in sorted(report.correlations):
        path = output_dir / f"corr_hist_class{class_id}.csv"
        report.histogram(class_id).to_csv(path, index=False)
        written.append(path)
    return written


def _split_latents(weights: ModelWeights, dataset: Dataset, stats: NormalizationStats, threads: int):
    rlf, vlf = encode_latents(weights, raw_channel(dataset, "cabin"), stats, threads)
    return rlf, vlf, dataset.split_mask("train"), dataset.split_mask("test")


def evaluate(weights: ModelWeights, dataset: Dataset, stats: Optional[NormalizationStats] = None,
             reliability_threshold: float = RELIABILITY_THRESHOLD, threads: int = 1,
             with_probes: bool = True) -> EvalReport:
    """
    Cross-inference over the test split.

    For every test sample the road acceleration is estimated from the cabin
    signal and correlated with the true road acceleration; the vehicle class
    is predicted from the same cabin signal. Probes are fit on train-split
    latents and scored on test-split latents.
    """
    stats = _require_stats(stats or dataset.stats)
    n_classes = weights.architecture.n_classes
    split = "test" if dataset.split_mask("test").any() else "train"
    if split == "train":
        logger.warning("dataset has no test split, evaluating on the training split")

    with span("evaluate", n_samples=len(dataset), split=split):
        cabin = raw_channel(dataset, "cabin", split)
        road = raw_channel(dataset, "road", split)
        class_ids = dataset.class_ids[dataset.split_mask(split)]

        estimate = estimate_tire_input(weights, cabin, stats, threads)
        probs = classify_vehicle(weights, cabin, stats, threads)
        predicted = np.argmax(probs, axis=1) + 1

        correlations: Dict[int, List[float]] = {}
        for class_id in sorted(int(c) for c in np.unique(class_ids)):
            rows = np.flatnonzero(class_ids == class_id)
            correlations[class_id] = [pearson(estimate[i], road[i]) for i in rows]

        confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(confusion, (class_ids - 1, predicted - 1), 1)

        report = EvalReport(
            classes=sorted(correlations),
            correlations=correlations,
            confusion=confusion.tolist(),
            accuracy=float(np.mean(predicted == class_ids)) if len(class_ids) else float("nan"),
            reliability_threshold=reliability_threshold,
            n_test=int(len(class_ids)),
            split=split,
        )

        if with_probes:
            rlf, vlf, train, test = _split_latents(weights, dataset, stats, threads)
            if split == "train":
                test = train
            labels = dataset.class_ids
            report.adversarial_probe_accuracy = probe_accuracy(rlf[train], labels[train], rlf[test], labels[test])
            report.vlf_probe_accuracy = probe_accuracy(vlf[train], labels[train], vlf[test], labels[test])

    logger.info("evaluated %d %s samples: accuracy %.3f, medians %s", report.n_test, split, report.accuracy,
                {k: round(v, 3) for k, v in report.medians.items()})
    return report


def class_centroids(weights: ModelWeights, dataset: Dataset, stats: Optional[NormalizationStats] = None,
                    threads: int = 1) -> Dict[int, np.ndarray]:
    """Mean VLF per class over the training split"""
    stats = _require_stats(stats or dataset.stats)
    train = dataset.split_mask("train")
    _, vlf = encode_latents(weights, raw_channel(dataset, "cabin", "train"), stats, threads)
    labels = dataset.class_ids[train]
    return {int(c): vlf[labels == c].mean(axis=0) for c in np.unique(labels)}


def _nearest_centroid(vlf: np.ndarray, centroids: Dict[int, np.ndarray]) -> np.ndarray:
    ids = np.array(sorted(centroids))
    centres = np.stack([centroids[k] for k in ids])
    distances = ((vlf[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return ids[np.argmin(distances, axis=1)]


def perturbed_samples(base: VehicleParams, fraction: float, n_samples: int, seed: int, psd: RoadPsdParams,
                      settings: SimulationSettings, vehicles_per_cell: int = 10,
                      gamma_range: Tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """
    Raw cabin accelerations of `n_samples` fresh roads driven by perturbed copies of `base`.

    The samples are spread over `vehicles_per_cell` independently perturbed
    vehicles so each simulation batch shares one parameter set.
    """
    n_vehicles = max(1, min(vehicles_per_cell, n_samples))
    counts = np.full(n_vehicles, n_samples // n_vehicles)
    counts[:n_samples % n_vehicles] += 1
    cabin = []
    for j, count in enumerate(counts):
        vehicle = perturb_vehicle(base, fraction, derive_seed(seed, j, 0))
        seeds = [derive_seed(seed, j, 1, i) for i in range(int(count))]
        cabin.append(generate_samples(vehicle, seeds, psd, settings, gamma_range)["cabin"])
    return np.concatenate(cabin)


def perturbation_sweep(weights: ModelWeights, base_classes: Sequence[VehicleParams], fractions: Sequence[float],
                       n_per_cell: int, seed: int, stats: NormalizationStats, psd: Optional[RoadPsdParams] = None,
                       settings: Optional[SimulationSettings] = None, reference: Optional[Dataset] = None,
                       vehicles_per_cell: int = 10, gamma_range: Tuple[float, float] = (0.0, 1.0),
                       threads: int = 1) -> SweepResult:
    """
    Classification accuracy on fresh samples from parameter-perturbed vehicles.

    Each perturbed sample is labelled with its parent class. When a reference
    dataset is given, the share of samples whose VLF is nearest to the parent
    class's training centroid is reported as well.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ConfigurationError("no perturbation fractions given")
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ConfigurationError(f"perturbation fractions must be sorted ascending, got {fractions}")
    if n_per_cell < 1:
        raise ConfigurationError(f"n_per_cell must be >= 1, got {n_per_cell}")
    stats = _require_stats(stats)
    psd = (psd or RoadPsdParams()).validate()
    settings = settings or SimulationSettings(signal_length=weights.architecture.signal_length)
    if settings.signal_length != weights.architecture.signal_length:
        raise LengthMismatchError(
            f"sweep signal_length {settings.signal_length} differs from the model's {weights.architecture.signal_length}"
        )
    for vehicle in base_classes:
        if vehicle.class_id is None:
            raise ConfigurationError("every base vehicle needs a class_id")
    centroids = class_centroids(weights, reference, stats, threads) if reference is not None else None

    result = SweepResult(fractions=fractions, accuracy=[], centroid_agreement=[], n_samples=[])
    with span("perturbation_sweep", fractions=len(fractions), n_per_cell=n_per_cell, seed=seed):
        for fi, fraction in enumerate(fractions):
            cabin, labels = [], []
            for vehicle in base_classes:
                cell_seed = derive_seed(seed, fi, vehicle.class_id)
                cabin.append(perturbed_samples(vehicle, fraction, n_per_cell, cell_seed, psd, settings,
                                               vehicles_per_cell, gamma_range))
                labels.append(np.full(n_per_cell, vehicle.class_id, dtype=np.int64))
            cabin = np.concatenate(cabin)
            labels = np.concatenate(labels)

            predicted = np.argmax(classify_vehicle(weights, cabin, stats, threads), axis=1) + 1
            result.accuracy.append(float(np.mean(predicted == labels)))
            result.n_samples.append(int(len(labels)))
            if centroids is not None:
                _, vlf = encode_latents(weights, cabin, stats, threads)
                result.centroid_agreement.append(float(np.mean(_nearest_centroid(vlf, centroids) == labels)))
            else:
                result.centroid_agreement.append(None)
            logger.info("perturbation %.0f%%: accuracy %.3f over %d samples", 100 * fraction,
                        result.accuracy[-1], len(labels))

    if len(fractions) > 1 and len(set(result.accuracy)) > 1:
        result.rank_correlation = float(spearmanr(fractions, result.accuracy).correlation)
    return result


def export_latents(weights: ModelWeights, dataset: Dataset, path: Optional[PathLike] = None,
                   stats: Optional[NormalizationStats] = None,
                   perturbed: Optional[Tuple[np.ndarray, np.ndarray]] = None, threads: int = 1) -> pd.DataFrame:
    """
    VLF and RLF of every sample plus the top-2 principal components of VLF.

    The projection is fit on the dataset's VLF only. `perturbed` is an
    optional (raw cabin, class_ids) pair whose rows are appended with
    source "perturbed" and projected with the same components.
    """
    stats = _require_stats(stats or dataset.stats)
    rlf, vlf = encode_latents(weights, raw_channel(dataset, "cabin"), stats, threads)
    frame = _latent_frame(rlf, vlf, dataset.class_ids, np.where(dataset.is_test, "test", "train"), "dataset")

    n_components = min(2, vlf.shape[1], len(vlf))
    pca = PCA(n_components=n_components, svd_solver="full").fit(vlf)
    projections = [pca.transform(vlf)]

    if perturbed is not None:
        p_cabin, p_labels = perturbed
        p_rlf, p_vlf = encode_latents(weights, p_cabin, stats, threads)
        p_labels = np.asarray(p_labels, dtype=np.int64)
        frame = pd.concat([frame, _latent_frame(p_rlf, p_vlf, p_labels, np.full(len(p_labels), "none"), "perturbed")],
                          ignore_index=True)
        projections.append(pca.transform(p_vlf))

    projection = np.concatenate(projections)
    for k in range(2):
        frame[f"pc{k + 1}"] = projection[:, k] if k < n_components else 0.0

    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    return frame


def _latent_frame(rlf: np.ndarray, vlf: np.ndarray, class_ids: np.ndarray, split: np.ndarray,
                  source: str) -> pd.DataFrame:
    columns: Dict[str, Any] = {"class_id": class_ids, "split": split, "source": source}
    columns.update({f"vlf_{i}": vlf[:, i] for i in range(vlf.shape[1])})
    columns.update({f"rlf_{i}": rlf[:, i] for i in range(rlf.shape[1])})
    return pd.DataFrame(columns)
