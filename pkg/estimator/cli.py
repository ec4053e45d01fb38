"""
Command Line Interface

Subcommands generate, train, evaluate, infer, transfer-fn and sweep. Each
reads the run config (JSON, `--config`), applies flag overrides, writes its
artifacts under the output directory and returns a process exit code.
Failures print one machine-readable JSON line on stderr.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import dataset as ds_io
from .config import RunConfig, config_keys, load_run_config, write_config_snapshot
from .dataset import derive_seed, generate_dataset, normalize
from .errors import EstimatorError, FormatError, MissingFileError
from .inference_eval import (classify_vehicle, estimate_tire_input, evaluate, export_latents, perturbation_sweep,
                             perturbed_samples, write_histograms, write_report)
from .neural import load_checkpoint
from .road_profile import estimate_psd, psd_value, synthesize_profile
from .tracing import span
from .training import fit, history_to_frame
from .vehicle_dynamics import (VehicleParams, linear_limit, peaks_against_modes, transfer_function,
                               transfer_function_to_frame, vehicle_for_class)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CABIN_COLUMNS = ("cabin_accel", "x_s_ddot", "cabin")

GENERATE_KEYS = ["seed", "output_dir", "dataset_path", "n_per_class", "test_fraction", "threads", "psd",
                 "simulation", "vehicles"]
TRAIN_KEYS = ["seed", "output_dir", "dataset_path", "checkpoint_path", "train"]
EVALUATE_KEYS = ["seed", "output_dir", "dataset_path", "checkpoint_path", "threads", "psd", "vehicles", "simulation",
                 "sweep_fractions", "sweep_n_per_cell", "tf_amplitudes", "tf_n_freq"]
INFER_KEYS = ["seed", "output_dir", "checkpoint_path", "simulation"]
TRANSFER_KEYS = ["seed", "output_dir", "vehicles", "simulation", "tf_amplitudes", "tf_n_freq"]
SWEEP_KEYS = ["seed", "output_dir", "dataset_path", "checkpoint_path", "threads", "psd", "simulation", "vehicles",
              "sweep_fractions", "sweep_n_per_cell"]


def _epilog(keys: List[str]) -> str:
    return "config keys read:\n  " + "\n  ".join(config_keys(keys))


def _write_json(data: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"✅ written {path}")
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    print(f"✅ written {path}")
    return path


def _load_dataset(config: RunConfig) -> ds_io.Dataset:
    dataset = ds_io.load(config.resolved_dataset_path)
    return dataset if dataset.normalized else normalize(dataset)


def _load_model(config: RunConfig):
    weights, manifest = load_checkpoint(config.resolved_checkpoint_path)
    if not manifest.get("stats"):
        raise FormatError(f"checkpoint manifest {config.resolved_checkpoint_path} has no normalisation stats")
    return weights, manifest, ds_io.NormalizationStats.from_dict(manifest["stats"])


def _transfer_curves(vehicles: Sequence[VehicleParams], config: RunConfig, output_dir: Path,
                     linear: bool = False) -> List[Path]:
    written, tables = [], []
    for vehicle in vehicles:
        params = linear_limit(vehicle) if linear else vehicle
        tf = transfer_function(params, config.tf_amplitudes, n_freq=config.tf_n_freq,
                               sample_rate=config.simulation.sample_rate, dt_internal=config.simulation.dt_internal)
        table = peaks_against_modes(params, tf)
        logger.info("class %s: peaks %s Hz, linearised modes %s Hz", vehicle.class_id,
                    [round(float(p), 3) for p in table["peak_hz"]], [round(float(m), 3) for m in table["mode_hz"]])
        tables.append(table)
        written.append(_write_csv(transfer_function_to_frame(tf), output_dir / f"transfer_fn_class{vehicle.class_id}.csv"))
    written.append(_write_csv(pd.concat(tables, ignore_index=True), output_dir / "transfer_fn_peaks.csv"))
    return written


def cmd_generate(config: RunConfig, psd_check: bool = False) -> Path:
    print(f"📦 generating {config.n_per_class} samples x {len(config.vehicles)} classes (seed {config.seed})")
    with span("cmd_generate", seed=config.seed, n_per_class=config.n_per_class):
        raw = generate_dataset(config.vehicles, config.n_per_class, config.seed, psd=config.psd.params(),
                               settings=config.simulation, gamma_range=config.psd.gamma_range,
                               test_fraction=config.test_fraction, threads=config.threads)
        dataset = normalize(raw)
        path = ds_io.save(dataset, config.resolved_dataset_path)
    print(f"✅ dataset written to {path} ({len(dataset)} samples, {int(dataset.is_test.sum())} test, "
          f"{dataset.regenerated} regenerated)")

    if psd_check:
        params = config.psd.params().with_gamma(0.5 * sum(config.psd.gamma_range))
        profile = synthesize_profile(params, 100.0 * config.simulation.profile_length,
                                     config.simulation.profile_spacing, seed=derive_seed(config.seed, 0xC0DE))
        lam, g = estimate_psd(profile)
        band = (lam >= 2 * params.lambda_min) & (lam <= 0.5 * params.lambda_max)
        deviation = 10.0 * np.log10(g[band] / psd_value(params, lam[band]))
        print(f"📊 PSD check: median deviation {np.median(deviation):+.2f} dB over {int(band.sum())} bins")
    return path


def cmd_train(config: RunConfig) -> Path:
    output_dir = Path(config.output_dir)
    dataset = _load_dataset(config)
    train_cfg = replace(config.train, seed=derive_seed(config.seed, config.train.seed))
    manifest = {
        "train": train_cfg.to_dict(),
        "stats": dataset.stats.to_dict(),
        "classes": dataset.classes,
        "sample_rate": dataset.sample_rate,
        "seed": config.seed,
    }
    checkpoint = config.resolved_checkpoint_path
    print(f"🧠 training on {int(dataset.split_mask('train').sum())} samples for up to {train_cfg.epochs} epochs")
    with span("cmd_train", seed=config.seed, epochs=train_cfg.epochs):
        _, history = fit(dataset, train_cfg, checkpoint_path=checkpoint, manifest=manifest)
    print(f"✅ best epoch {history.best_epoch}, checkpoint written to {checkpoint}")
    _write_csv(history_to_frame(history), output_dir / "history.csv")
    return checkpoint


def cmd_evaluate(config: RunConfig, with_sweep: bool = False) -> Path:
    output_dir = Path(config.output_dir)
    weights, _, stats = _load_model(config)
    dataset = _load_dataset(config)
    vehicles = dataset.vehicles or config.vehicles
    print(f"📊 evaluating {int(dataset.is_test.sum())} test samples")
    with span("cmd_evaluate", seed=config.seed):
        report = evaluate(weights, dataset, stats=stats, threads=config.threads)
        if with_sweep:
            report.sweep = perturbation_sweep(
                weights, vehicles, config.sweep_fractions, config.sweep_n_per_cell, config.seed, stats,
                psd=config.psd.params(), settings=config.simulation, reference=dataset,
                gamma_range=config.psd.gamma_range, threads=config.threads,
            )
        report_path = write_report(report, output_dir / "eval_report.json")
        print(f"✅ written {report_path}")
        for path in write_histograms(report, output_dir):
            print(f"✅ written {path}")

        perturbed = None
        if config.sweep_fractions:
            fraction = config.sweep_fractions[-1]
            cabin = [perturbed_samples(v, fraction, 10, derive_seed(config.seed, 0xA7, v.class_id),
                                       config.psd.params(), config.simulation, gamma_range=config.psd.gamma_range)
                     for v in vehicles]
            labels = [np.full(len(c), v.class_id) for c, v in zip(cabin, vehicles)]
            perturbed = (np.concatenate(cabin), np.concatenate(labels))
        latents = export_latents(weights, dataset, stats=stats, perturbed=perturbed, threads=config.threads)
        _write_csv(latents, output_dir / "latents.csv")
        _transfer_curves(vehicles, config, output_dir)

    medians = {k: round(v, 3) for k, v in report.medians.items()}
    print(f"📊 classifier accuracy {report.accuracy:.3f}, median correlation per class {medians}")
    return report_path


def _read_cabin(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"cabin CSV not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"{path} is not a readable CSV: {e}") from e
    for column in CABIN_COLUMNS:
        if column in frame.columns:
            return frame[column].to_numpy(dtype=np.float64)
    if len(frame.columns) == 1:
        return frame.iloc[:, 0].to_numpy(dtype=np.float64)
    raise FormatError(f"{path} needs one of the columns {list(CABIN_COLUMNS)}")


def cmd_infer(config: RunConfig, cabin_csv: Path) -> Path:
    output_dir = Path(config.output_dir)
    weights, manifest, stats = _load_model(config)
    cabin = _read_cabin(cabin_csv)
    sample_rate = float(manifest.get("sample_rate", config.simulation.sample_rate))
    with span("cmd_infer", n_samples=len(cabin)):
        estimate = estimate_tire_input(weights, cabin, stats)
        probs = classify_vehicle(weights, cabin, stats)
    _write_csv(pd.DataFrame({"t": np.arange(len(estimate)) / sample_rate, "r_ddot_est": estimate}),
               output_dir / "estimate.csv")
    predicted = int(np.argmax(probs)) + 1
    _write_json({"predictedClass": predicted, "probabilities": {str(k + 1): float(p) for k, p in enumerate(probs)}},
                output_dir / "prediction.json")
    print(f"🚗 predicted vehicle class {predicted} (p={probs[predicted - 1]:.3f})")
    return output_dir / "estimate.csv"


def cmd_transfer_fn(config: RunConfig, class_ids: Optional[Sequence[int]] = None,
                    params_path: Optional[Path] = None, linear: bool = False) -> List[Path]:
    if params_path is not None:
        if not params_path.exists():
            raise MissingFileError(f"vehicle parameter file not found: {params_path}")
        with open(params_path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError(f"{params_path} is not valid JSON: {e}") from e
        vehicles = [VehicleParams.from_dict(data)]
    elif class_ids:
        by_id = {v.class_id: v for v in config.vehicles}
        vehicles = [by_id.get(k) or vehicle_for_class(k) for k in class_ids]
    else:
        vehicles = list(config.vehicles)
    print(f"📈 transfer functions for {len(vehicles)} vehicle(s), amplitudes {list(config.tf_amplitudes)}")
    with span("cmd_transfer_fn", n_vehicles=len(vehicles), linear=linear):
        return _transfer_curves(vehicles, config, Path(config.output_dir), linear=linear)


def cmd_sweep(config: RunConfig) -> Path:
    output_dir = Path(config.output_dir)
    weights, _, stats = _load_model(config)
    reference = _load_dataset(config) if config.resolved_dataset_path.exists() else None
    vehicles = (reference.vehicles if reference is not None and reference.vehicles else config.vehicles)
    print(f"🔧 perturbation sweep over {list(config.sweep_fractions)}, {config.sweep_n_per_cell} samples per cell")
    with span("cmd_sweep", seed=config.seed):
        result = perturbation_sweep(weights, vehicles, config.sweep_fractions, config.sweep_n_per_cell, config.seed,
                                    stats, psd=config.psd.params(), settings=config.simulation, reference=reference,
                                    gamma_range=config.psd.gamma_range, threads=config.threads)
    path = _write_csv(result.to_frame(), output_dir / "sweep.csv")
    _write_json(result.to_dict(), output_dir / "sweep.json")
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON")
    common.add_argument("--output-dir", help="output directory (default: $CABIN2TIRE_OUTPUT_DIR or output_runs)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker cap")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    parser = argparse.ArgumentParser("cabin2tire", description="Tire-level road input estimation from cabin acceleration")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, keys: List[str]) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, epilog=_epilog(keys),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("generate", "simulate the multi-vehicle corpus", GENERATE_KEYS)
    p.add_argument("--dataset", help="dataset output path")
    p.add_argument("--n-per-class", type=int, help="samples per vehicle class")
    p.add_argument("--psd-check", action="store_true", help="report Welch PSD against the target spectrum")

    p = add("train", "train the dual adversarial autoencoders", TRAIN_KEYS)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--epochs", type=int, help="maximum epochs")

    p = add("evaluate", "cross-inference report, histograms, latents and transfer curves", EVALUATE_KEYS)
    p.add_argument("--dataset", help="dataset path")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--with-sweep", action="store_true", help="include the perturbation sweep in the report")

    p = add("infer", "estimate road acceleration and vehicle class from a cabin CSV", INFER_KEYS)
    p.add_argument("cabin_csv", type=Path, help="CSV with one cabin acceleration column")
    p.add_argument("--checkpoint", help="checkpoint path")

    p = add("transfer-fn", "impulse-averaged transfer function per vehicle", TRANSFER_KEYS)
    p.add_argument("--class", dest="class_ids", type=int, action="append", help="vehicle class id (repeatable)")
    p.add_argument("--params", type=Path, help="vehicle parameter JSON instead of a class")
    p.add_argument("--linear", action="store_true", help="use the linear limit of each vehicle")

    p = add("sweep", "classification accuracy under parameter perturbation", SWEEP_KEYS)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--dataset", help="reference dataset for latent centroids")
    p.add_argument("--fractions", help="comma-separated perturbation fractions")
    p.add_argument("--n-per-cell", type=int, help="samples per class and fraction")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    fractions = getattr(args, "fractions", None)
    return {
        "output_dir": args.output_dir,
        "threads": args.threads,
        "dataset_path": getattr(args, "dataset", None),
        "checkpoint_path": getattr(args, "checkpoint", None),
        "n_per_class": getattr(args, "n_per_class", None),
        "train.epochs": getattr(args, "epochs", None),
        "sweep_n_per_cell": getattr(args, "n_per_cell", None),
        "sweep_fractions": [float(x) for x in fractions.split(",")] if fractions else None,
    }


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def run(args: argparse.Namespace) -> None:
    config = load_run_config(args.config, seed=args.seed).with_overrides(_overrides(args))
    if args.command == "generate":
        cmd_generate(config, psd_check=args.psd_check)
    elif args.command == "train":
        cmd_train(config)
    elif args.command == "evaluate":
        cmd_evaluate(config, with_sweep=args.with_sweep)
    elif args.command == "infer":
        cmd_infer(config, args.cabin_csv)
    elif args.command == "transfer-fn":
        cmd_transfer_fn(config, args.class_ids, args.params, args.linear)
    elif args.command == "sweep":
        cmd_sweep(config)
    write_config_snapshot(config, Path(config.output_dir) / "run_config.json")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        run(args)
    except EstimatorError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        print(json.dumps(e.to_record(), sort_keys=True), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"❌ Error: {e}", file=sys.stderr)
        print(json.dumps({"error": type(e).__name__, "code": 1, "message": str(e)}, sort_keys=True), file=sys.stderr)
        return 1
    return 0
