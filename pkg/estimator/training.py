"""
Adversarial Dual-Autoencoder Training

Assembles the joint objective

    total = L1 + L2 + L3 - L4 + L5

(road reconstruction, cabin reconstruction, road-latent alignment,
adversarial vehicle classification on the road latent, vehicle
classification on the vehicle latent) and runs the alternating schedule:
K main-phase epochs with the adversary frozen, then adversarial epochs that
train only the adversary.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .dataset import Dataset, derive_seed, iter_batches
from .errors import ConfigurationError, TrainingDivergedError
from .neural import (Architecture, ModelWeights, Params, accuracy, adam_step, build_model,
                     cross_entropy, save_checkpoint)
from .tracing import span

logger = logging.getLogger(__name__)

PHASE_MAIN = "main"
PHASE_ADVERSARIAL = "adversarial"
PHASE_ALL = "all"
LOSS_NAMES = ("L1", "L2", "L3", "L4", "L5")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    adversarial_lr: Optional[float] = None
    K: int = 5
    adversarial_epochs_per_phase: int = 1
    seed: int = 0
    loss_weights: Tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    d_r: int = 32
    d_v: int = 16
    encoder_hidden: Tuple[int, ...] = (512, 128)
    decoder_hidden: Tuple[int, ...] = (128, 512)
    classifier_hidden: Tuple[int, ...] = (64,)
    n_classes: int = 5
    patience: Optional[int] = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if self.adversarial_epochs_per_phase < 0:
            raise ConfigurationError("adversarial_epochs_per_phase must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.loss_weights) != 5 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(f"loss_weights must be five non-negative numbers, got {self.loss_weights}")
        if self.patience is not None and self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1 or null, got {self.patience}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    def architecture(self, signal_length: int) -> Architecture:
        return Architecture(
            signal_length=signal_length,
            encoder_hidden=tuple(self.encoder_hidden),
            decoder_hidden=tuple(self.decoder_hidden),
            d_r=self.d_r,
            d_v=self.d_v,
            classifier_hidden=tuple(self.classifier_hidden),
            n_classes=self.n_classes,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train key(s): {sorted(unknown)}")
        data = dict(data)
        for key in ("loss_weights", "encoder_hidden", "decoder_hidden", "classifier_hidden"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


@dataclass(frozen=True)
class LossValues:
    L1: float
    L2: float
    L3: float
    L4: float
    L5: float
    total: float
    cl_acc: float
    cladv_acc: float

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return self.L1, self.L2, self.L3, self.L4, self.L5


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    L1: float
    L2: float
    L3: float
    L4: float
    L5: float
    total: float
    cl_acc: float
    cladv_acc: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", *LOSS_NAMES, "total", "cl_acc", "cladv_acc", "phase"]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)


def make_batch(ds: Dataset, indices: np.ndarray, dtype=np.float32) -> Dict[str, np.ndarray]:
    return {
        "road": ds.road_accel[indices].astype(dtype),
        "cabin": ds.cabin_accel[indices].astype(dtype),
        "labels": ds.class_ids[indices] - 1,
    }


def phase_for_epoch(epoch: int, K: int, adversarial_epochs_per_phase: int) -> str:
    cycle = K + adversarial_epochs_per_phase
    return PHASE_MAIN if epoch % cycle < K else PHASE_ADVERSARIAL


def _forward(weights: ModelWeights, batch: Dict[str, np.ndarray]) -> Dict[str, Any]:
    road, cabin, labels = batch["road"], batch["cabin"], batch["labels"]
    d_r = weights.architecture.d_r
    out = {}
    out["z_r"], out["c_ec_r"] = weights["ec_r"].forward(road)
    out["road_hat"], out["c_dc_r"] = weights["dc_r"].forward(out["z_r"])
    out["z_rv"], out["c_r_ec_v"] = weights["r_ec_v"].forward(cabin)
    out["z_v"], out["c_v_ec_v"] = weights["v_ec_v"].forward(cabin)
    joint = np.concatenate([out["z_rv"], out["z_v"]], axis=1)
    out["cabin_hat"], out["c_dc_v"] = weights["dc_v"].forward(joint)
    out["logits_adv"], out["c_cl_adv"] = weights["cl_adv"].forward(out["z_rv"])
    out["logits_cl"], out["c_cl"] = weights["cl"].forward(out["z_v"])

    out["r_road"] = out["road_hat"] - road
    out["r_cabin"] = out["cabin_hat"] - cabin
    out["r_latent"] = out["z_r"] - out["z_rv"]
    out["L1"] = float(np.mean(np.square(out["r_road"], dtype=np.float64)))
    out["L2"] = float(np.mean(np.square(out["r_cabin"], dtype=np.float64)))
    out["L3"] = float(np.mean(np.square(out["r_latent"], dtype=np.float64)))
    out["L4"], out["g_logits_adv"] = cross_entropy(out["logits_adv"], labels)
    out["L5"], out["g_logits_cl"] = cross_entropy(out["logits_cl"], labels)
    out["d_r"] = d_r
    return out


def _loss_values(out: Dict[str, Any], labels: np.ndarray, loss_weights) -> LossValues:
    w1, w2, w3, w4, w5 = loss_weights
    total = w1 * out["L1"] + w2 * out["L2"] + w3 * out["L3"] - w4 * out["L4"] + w5 * out["L5"]
    return LossValues(
        L1=out["L1"], L2=out["L2"], L3=out["L3"], L4=out["L4"], L5=out["L5"], total=total,
        cl_acc=accuracy(out["logits_cl"], labels), cladv_acc=accuracy(out["logits_adv"], labels),
    )


def batch_losses(weights: ModelWeights, batch: Dict[str, np.ndarray]) -> Tuple[float, float, float, float, float]:
    """(L1, L2, L3, L4, L5) for one batch"""
    out = _forward(weights, batch)
    return out["L1"], out["L2"], out["L3"], out["L4"], out["L5"]


def evaluate_losses(weights: ModelWeights, batch: Dict[str, np.ndarray],
                    loss_weights=(1.0, 1.0, 1.0, 1.0, 1.0)) -> LossValues:
    return _loss_values(_forward(weights, batch), batch["labels"], loss_weights)


def loss_and_grads(weights: ModelWeights, batch: Dict[str, np.ndarray], loss_weights=(1.0, 1.0, 1.0, 1.0, 1.0),
                   phase: str = PHASE_MAIN) -> Tuple[LossValues, Dict[str, Params]]:
    """
    Losses and gradients for one batch.

    phase "main": gradients of the weighted total for every network except
    cl_adv. phase "adversarial": gradient of +L4 for cl_adv only. phase
    "all": gradients of the weighted total for all seven networks.
    """
    if phase not in (PHASE_MAIN, PHASE_ADVERSARIAL, PHASE_ALL):
        raise ConfigurationError(f"unknown phase {phase!r}")
    out = _forward(weights, batch)
    values = _loss_values(out, batch["labels"], loss_weights)
    w1, w2, w3, w4, w5 = loss_weights
    grads: Dict[str, Params] = {}

    if phase == PHASE_ADVERSARIAL:
        grads["cl_adv"], _ = weights["cl_adv"].backward(out["c_cl_adv"], out["g_logits_adv"])
        return values, grads

    g_road_hat = w1 * 2.0 * out["r_road"] / out["r_road"].size
    g_cabin_hat = w2 * 2.0 * out["r_cabin"] / out["r_cabin"].size
    g_latent = w3 * 2.0 * out["r_latent"] / out["r_latent"].size

    grads["dc_r"], dz_r = weights["dc_r"].backward(out["c_dc_r"], g_road_hat)
    grads["ec_r"], _ = weights["ec_r"].backward(out["c_ec_r"], dz_r + g_latent)

    grads["dc_v"], d_joint = weights["dc_v"].backward(out["c_dc_v"], g_cabin_hat)
    adv_grads, dz_rv_adv = weights["cl_adv"].backward(out["c_cl_adv"], -w4 * out["g_logits_adv"])
    grads["cl"], dz_v_cl = weights["cl"].backward(out["c_cl"], w5 * out["g_logits_cl"])

    d_r = out["d_r"]
    dz_rv = d_joint[:, :d_r] - g_latent + dz_rv_adv
    dz_v = d_joint[:, d_r:] + dz_v_cl
    grads["r_ec_v"], _ = weights["r_ec_v"].backward(out["c_r_ec_v"], dz_rv)
    grads["v_ec_v"], _ = weights["v_ec_v"].backward(out["c_v_ec_v"], dz_v)

    if phase == PHASE_ALL:
        grads["cl_adv"] = adv_grads
    return values, grads


def _check_finite(values: LossValues, epoch: int, phase: str, weights: Optional[ModelWeights]) -> None:
    if not all(math.isfinite(v) for v in (*values.as_tuple(), values.total)):
        raise TrainingDivergedError(
            f"non-finite loss in {phase} phase at epoch {epoch}",
            epoch=epoch, best_weights=weights, diagnostics=asdict(values),
        )


def main_phase_step(weights: ModelWeights, batch: Dict[str, np.ndarray], cfg: TrainConfig,
                    epoch: int = -1) -> LossValues:
    """One Adam step on every network except cl_adv, minimising the weighted total"""
    values, grads = loss_and_grads(weights, batch, cfg.loss_weights, PHASE_MAIN)
    _check_finite(values, epoch, PHASE_MAIN, None)
    for name, g in grads.items():
        adam_step(weights[name], g, weights.optimizer[name], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return values


def adversarial_phase_step(weights: ModelWeights, batch: Dict[str, np.ndarray], cfg: TrainConfig,
                           epoch: int = -1) -> LossValues:
    """One Adam step on cl_adv only, minimising L4"""
    values, grads = loss_and_grads(weights, batch, cfg.loss_weights, PHASE_ADVERSARIAL)
    _check_finite(values, epoch, PHASE_ADVERSARIAL, None)
    lr = cfg.lr if cfg.adversarial_lr is None else cfg.adversarial_lr
    adam_step(weights["cl_adv"], grads["cl_adv"], weights.optimizer["cl_adv"], lr, cfg.beta1, cfg.beta2, cfg.eps)
    return values


def fit(dataset: Dataset, cfg: TrainConfig, checkpoint_path: Optional[Union[str, Path]] = None,
        manifest: Optional[Dict[str, Any]] = None,
        weights: Optional[ModelWeights] = None) -> Tuple[ModelWeights, TrainHistory]:
    """
    Train on the training split with the alternating adversarial schedule.

    Validation is the test split (the training split when it is empty). The
    weights with the lowest validation total are kept, written to
    `checkpoint_path` when given, and returned.
    """
    cfg.validate()
    if not dataset.normalized:
        raise ConfigurationError("fit expects a normalised dataset")
    if not dataset.split_mask("train").any():
        raise ConfigurationError("training split is empty")
    if max(dataset.classes) > cfg.n_classes:
        raise ConfigurationError(f"dataset has class {max(dataset.classes)} but n_classes={cfg.n_classes}")

    dtype = np.dtype(cfg.dtype)
    if weights is None:
        weights = build_model(cfg.architecture(dataset.signal_length), seed=derive_seed(cfg.seed, 1), dtype=dtype)
    val_split = "test" if dataset.split_mask("test").any() else "train"
    val_batch = make_batch(dataset, np.flatnonzero(dataset.split_mask(val_split)), dtype)
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))

    history = TrainHistory()
    best: Optional[ModelWeights] = None
    best_total = math.inf
    since_best = 0

    with span("fit", epochs=cfg.epochs, K=cfg.K, n_train=int(dataset.split_mask("train").sum())):
        for epoch in range(cfg.epochs):
            phase = phase_for_epoch(epoch, cfg.K, cfg.adversarial_epochs_per_phase)
            step = main_phase_step if phase == PHASE_MAIN else adversarial_phase_step
            try:
                for indices in iter_batches(dataset, "train", cfg.batch_size, rng):
                    step(weights, make_batch(dataset, indices, dtype), cfg, epoch)
                values = evaluate_losses(weights, val_batch, cfg.loss_weights)
                _check_finite(values, epoch, phase, best)
            except TrainingDivergedError as e:
                e.best_weights = best
                logger.error("training diverged at epoch %d: %s", epoch, e)
                raise

            history.records.append(EpochRecord(epoch=epoch, phase=phase, **asdict(values)))
            logger.info(
                "epoch %3d %-11s L1=%.4f L2=%.4f L3=%.4f L4=%.4f L5=%.4f total=%.4f cl=%.3f cl_adv=%.3f",
                epoch, phase, values.L1, values.L2, values.L3, values.L4, values.L5, values.total,
                values.cl_acc, values.cladv_acc,
            )

            if values.total < best_total:
                best_total = values.total
                best = weights.copy()
                history.best_epoch = epoch
                since_best = 0
                if checkpoint_path is not None:
                    save_checkpoint(best, checkpoint_path, manifest)
            else:
                since_best += 1
                if cfg.patience is not None and since_best >= cfg.patience:
                    logger.info("no validation improvement for %d epochs, stopping", cfg.patience)
                    history.stopped_early = True
                    break

    return best, history


def history_to_frame(history: TrainHistory) -> pd.DataFrame:
    return history.to_frame()
