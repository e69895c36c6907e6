#!/usr/bin/env python3
"""AHP-Net Low-Dose CT Toolkit - command-line entry point.

Subcommands: simulate, train, reconstruct, eval, baseline, gradcheck and
export-png. Each run resolves its configuration from defaults, the
environment, `--config`, `--set key=value` overrides and finally the
subcommand's own flags, and writes the resolved config next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 validation,
convergence or numerical failure. Failures print one line
`error category=<category> reason=<message>` to standard error.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from models.ahp_net import AhpNet, ForwardTrace, ModelConfig
from models.predictor import heuristic_betas
from models.trainer import TrainConfig, Trainer
from tools.baseline_tools import APODIZATIONS, TvSettings, fbp_reconstruct, tv_lambda_for_dose, tv_reconstruct
from tools.file_tools import export_png, read_raster, write_csv, write_raster
from tools.geometry_tools import FanBeamGeometry, SystemMatrix, build_system_matrix
from tools.gradcheck_tools import format_table, run_all
from tools.metrics_tools import MetricReport, aggregate_reports, evaluate
from tools.simulation_tools import PRESETS, load_dataset, simulate_dataset, write_dataset
from utils.config import ConfigurationManager, GeometryConfig, RunConfig, load_run_config, read_config_echo
from utils.constants import HU_WINDOW, TV_ITERS, TV_MU, VARIANTS
from utils.error_handling import (
    ConfigurationError,
    ConvergenceError,
    ErrorCategory,
    ExitCode,
    FileFormatError,
    ReconstructionError,
    ValidationError,
    exit_code_for,
    format_reason,
    log_error_context,
)
from utils.monitoring import get_performance_monitor, setup_logging

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config.json"
BETA_HEADER = ("sample_id", "dose", "stage", "channel", "beta", "heuristic_beta")
METRIC_HEADER = ("method", "sample_id", "dose", "psnr", "rmse", "ssim")
SUMMARY_HEADER = (
    "method", "dose", "count",
    "psnr_mean", "psnr_std", "rmse_mean", "rmse_std", "ssim_mean", "ssim_std",
)

# (sample id, dose, sinogram); dose is NaN for loose sinogram files
Job = Tuple[str, float, np.ndarray]


@dataclass(frozen=True)
class ConfigFlag:
    """A subcommand flag that sets one dotted config key."""
    flag: str
    key: str
    type: Callable[[str], Any]
    help: str
    choices: Optional[Tuple[str, ...]] = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


COMMAND_FLAGS: Dict[str, List[ConfigFlag]] = {
    "simulate": [
        ConfigFlag("--dose", "noise.dose", float, "incident photons per ray"),
        ConfigFlag("--dose-set", "noise.dose_set", str, "per-sample dose levels", ("standard", "universal")),
        ConfigFlag("--count", "noise.count", int, "number of samples"),
        ConfigFlag("--seed", "noise.seed", int, "run seed"),
        ConfigFlag("--phantom", "noise.phantom", str, "phantom family", ("random",) + PRESETS),
        ConfigFlag("--out", "paths.dataset_dir", str, "dataset directory to write"),
    ],
    "train": [
        ConfigFlag("--dataset", "paths.dataset_dir", str, "training dataset directory"),
        ConfigFlag("--checkpoint-dir", "paths.checkpoint_dir", str, "where checkpoints and the report go"),
        ConfigFlag("--epochs", "train.epochs", int, "total epochs"),
        ConfigFlag("--batch-size", "train.batch_size", int, "mini-batch size"),
        ConfigFlag("--lr", "train.lr", float, "Adam learning rate"),
        ConfigFlag("--precision", "train.precision", str, "tensor precision", ("float32", "float64")),
        ConfigFlag("--seed", "train.seed", int, "initialization and shuffling seed"),
        ConfigFlag("--stages", "model.stages", int, "learnable stages after stage 0"),
        ConfigFlag("--variant", "model.variant", str, "ablation variant", VARIANTS),
    ],
    "reconstruct": [
        ConfigFlag("--dataset", "paths.dataset_dir", str, "dataset directory to reconstruct"),
        ConfigFlag("--out", "paths.output_dir", str, "directory for reconstructions"),
    ],
    "eval": [
        ConfigFlag("--dataset", "paths.dataset_dir", str, "dataset directory holding the ground truth"),
        ConfigFlag("--out", "paths.output_dir", str, "directory for the metric CSVs"),
    ],
    "baseline": [
        ConfigFlag("--dataset", "paths.dataset_dir", str, "dataset directory to reconstruct"),
        ConfigFlag("--out", "paths.output_dir", str, "directory for reconstructions"),
    ],
    "gradcheck": [],
    "export-png": [],
}

# `paths` fields each subcommand reads and writes, checked before dispatch
COMMAND_PATHS: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "simulate": ((), ("dataset_dir",)),
    "train": (("dataset_dir",), ("checkpoint_dir",)),
    "reconstruct": (("dataset_dir",), ("output_dir",)),
    "eval": (("dataset_dir",), ("output_dir",)),
    "baseline": (("dataset_dir",), ("output_dir",)),
}


class ToolkitArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions instead of exiting."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config field, e.g. model.stages=3",
    )
    common.add_argument("--environment", choices=("development", "testing", "production"))
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = ToolkitArgumentParser(prog="ahp-ldct", description="AHP-Net low-dose CT reconstruction toolkit")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        for flag in COMMAND_FLAGS[name]:
            sub.add_argument(flag.flag, dest=flag.dest, type=flag.type, choices=flag.choices, help=flag.help)
        return sub

    simulate = add("simulate", "simulate a phantom/sinogram dataset")
    simulate.add_argument("--workers", type=int, default=1, help="worker threads")

    train = add("train", "train AHP-Net on a dataset")
    train.add_argument("--resume", help="checkpoint to resume from")

    reconstruct = add("reconstruct", "reconstruct sinograms with a trained checkpoint")
    reconstruct.add_argument("--checkpoint", required=True, help="AHPC checkpoint")
    reconstruct.add_argument("--input", help="single .f32r sinogram instead of a dataset")
    reconstruct.add_argument("--report-betas", help="CSV of predicted hyper-parameters")
    reconstruct.add_argument("--strict", action="store_true", help="fail when any CG solve misses its tolerance")

    evaluate_cmd = add("eval", "score reconstructions against the ground truth")
    evaluate_cmd.add_argument(
        "--recon", action="append", required=True, metavar="[NAME=]DIR",
        help="directory of <id>_<suffix>.f32r reconstructions; repeatable",
    )
    evaluate_cmd.add_argument("--suffix", default="recon", help="file suffix of the reconstructions")
    evaluate_cmd.add_argument("--name", default="metrics", help="stem of the CSV files")

    baseline = add("baseline", "classical reconstruction (fbp or tv)")
    baseline.add_argument("method", choices=("fbp", "tv"))
    baseline.add_argument("--apodization", choices=APODIZATIONS, default="ramlak")
    baseline.add_argument("--lam", type=float, help="TV weight; chosen by dose when omitted")
    baseline.add_argument("--mu", type=float, default=TV_MU, help="ADMM penalty")
    baseline.add_argument("--iters", type=int, default=TV_ITERS, help="ADMM iterations")
    baseline.add_argument("--strict", action="store_true", help="fail when any CG x-update misses its tolerance")

    gradcheck = add("gradcheck", "finite-difference gradient suites")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--skip-model", action="store_true", help="skip the end-to-end model suites")

    png = add("export-png", "window an .f32r image to an 8-bit PNG")
    png.add_argument("input", help=".f32r attenuation image")
    png.add_argument("output", help="PNG path")
    png.add_argument("--window", type=float, nargs=2, default=list(HU_WINDOW), metavar=("LOW", "HIGH"))
    return parser


def flag_overrides(args: argparse.Namespace, flags: Sequence[ConfigFlag]) -> List[str]:
    """Turn the config flags that were given into `key=value` overrides."""
    overrides = []
    for flag in flags:
        value = getattr(args, flag.dest, None)
        if value is not None:
            overrides.append(f"{flag.key}={json.dumps(value)}")
    return overrides


def resolve_config(args: argparse.Namespace) -> ConfigurationManager:
    overrides = list(args.overrides) + flag_overrides(args, COMMAND_FLAGS[args.command])
    manager = load_run_config(args.config, overrides, args.environment)
    setup_logging(manager.get_config().logging)
    logger.debug(f"Resolved configuration: {manager.get_all_config()}")
    return manager


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def system_matrix_for(geometry: GeometryConfig) -> SystemMatrix:
    return build_system_matrix(FanBeamGeometry.from_config(geometry))


def load_samples(path: str):
    if not (Path(path) / "manifest.json").exists():
        raise ConfigurationError(f"Dataset directory {path} has no manifest.json", context={"path": path})
    return load_dataset(path)


def dataset_geometry(manifest: Dict[str, Any], config: RunConfig) -> GeometryConfig:
    """The geometry a dataset was simulated with, falling back to the run's."""
    stored = manifest.get("config", {}).get("geometry")
    if stored is None:
        return config.geometry
    geometry = GeometryConfig.model_validate(stored)
    if geometry != config.geometry:
        logger.info("Using the scan geometry stored with the dataset")
    return geometry


def dataset_jobs(samples) -> List[Job]:
    return [(s.sample_id, s.dose, s.sinogram) for s in samples]


def format_value(value: float) -> str:
    return f"{value:.6g}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    config = manager.get_config()
    noise = config.noise
    A = system_matrix_for(config.geometry)
    samples = simulate_dataset(
        A,
        noise.count,
        noise.seed,
        dose=noise.dose,
        dose_set=noise.dose_set,
        kind=noise.phantom,
        electronic_variance=noise.electronic_variance,
        workers=args.workers,
        progress=args.progress,
    )
    # Paths stay out of the echo so the directory depends only on the inputs
    echo = {
        "geometry": config.geometry.model_dump(mode="json"),
        "noise": noise.model_dump(mode="json"),
    }
    root = write_dataset(config.paths.dataset_dir, samples, meta={"config": echo})
    clamped = sum(s.metadata.get("below_floor", 0) for s in samples)
    if clamped:
        logger.warning(f"{clamped} counts were clamped to the count floor")
    print(f"✅ Simulated {len(samples)} samples into {root}")
    return ExitCode.SUCCESS


def cmd_train(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    config = manager.get_config()
    samples, manifest = load_samples(config.paths.dataset_dir)
    config.geometry = dataset_geometry(manifest, config)
    train_config = TrainConfig.from_section(config.train)
    model = AhpNet(
        ModelConfig.from_section(config.model),
        system_matrix_for(config.geometry),
        seed=train_config.seed,
        dtype=train_config.dtype,
    )
    checkpoint_dir = Path(config.paths.checkpoint_dir)
    manager.save_config(str(checkpoint_dir / CONFIG_ECHO))

    start_epoch = 0
    if args.resume:
        tensors = model.load_checkpoint(args.resume)
        if "train.epoch" in tensors:
            start_epoch = int(tensors["train.epoch"][0])
        logger.info(f"Resuming after epoch {start_epoch}")

    report = Trainer(model, train_config, checkpoint_dir, progress=args.progress).train(samples, start_epoch)
    if report.epochs:
        last = report.epochs[-1]
        print(f"✅ Trained {last.epoch} epochs: loss {last.loss:.6g}, val PSNR {last.val_psnr:.3f} dB")
    print(f"Checkpoints in {checkpoint_dir}")
    return ExitCode.SUCCESS


def checkpoint_config(checkpoint: str, config: RunConfig) -> RunConfig:
    """Adopt the architecture and geometry recorded next to a checkpoint."""
    echo = Path(checkpoint).parent / CONFIG_ECHO
    if not echo.exists():
        logger.info(f"No {CONFIG_ECHO} next to {checkpoint}; using the run configuration for the model")
        return config
    trained = read_config_echo(str(echo))
    config.model = trained.model.model_copy(
        update={"cg_max_iters": config.model.cg_max_iters, "cg_rel_tolerance": config.model.cg_rel_tolerance}
    )
    config.geometry = trained.geometry
    config.train = config.train.model_copy(update={"precision": trained.train.precision})
    return config


def beta_rows(sample_id: str, dose: float, trace: ForwardTrace, geometry: FanBeamGeometry) -> List[Tuple[object, ...]]:
    """Predicted and closed-form beta of every learnable stage and channel."""
    rows = []
    for k, stage in enumerate(trace.stages[1:], start=1):
        heuristic = heuristic_betas(stage.norms[0], geometry.n_rays, geometry.n_pixels)
        for i, beta in enumerate(stage.betas[0]):
            rows.append((sample_id, format_value(dose), k, i, format_value(beta), format_value(heuristic[i])))
    return rows


def cmd_reconstruct(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    config = checkpoint_config(args.checkpoint, manager.get_config())
    if args.input:
        sinogram = read_raster(args.input).astype(np.float64)
        jobs: List[Job] = [(Path(args.input).stem, float("nan"), sinogram)]
    else:
        samples, manifest = load_samples(config.paths.dataset_dir)
        config.geometry = dataset_geometry(manifest, config)
        jobs = dataset_jobs(samples)

    A = system_matrix_for(config.geometry)
    model = AhpNet(
        ModelConfig.from_section(config.model),
        A,
        seed=config.train.seed,
        dtype=TrainConfig.from_section(config.train).dtype,
    )
    model.load_checkpoint(args.checkpoint)

    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manager.save_config(str(out / CONFIG_ECHO))
    rows: List[Tuple[object, ...]] = []
    failures = 0
    for sample_id, dose, sinogram in tqdm(jobs, desc="reconstruct", disable=not args.progress):
        trace = model.forward(sinogram, training=False)
        failures += trace.cg_failures
        write_raster(out / f"{sample_id}_recon.f32r", trace.final[0])
        if args.report_betas and model.config.stages > 0:
            rows += beta_rows(sample_id, dose, trace, A.geometry)
    if args.report_betas:
        write_csv(args.report_betas, BETA_HEADER, rows)
        logger.info(f"Hyper-parameter report written to {args.report_betas}")

    print(f"✅ Reconstructed {len(jobs)} sinograms into {out}")
    if failures and args.strict:
        raise ConvergenceError(f"{failures} inversions missed the CG tolerance", context={"failures": failures})
    return ExitCode.SUCCESS


def parse_recon_arg(text: str) -> Tuple[str, Path]:
    if "=" in text:
        name, path = text.split("=", 1)
        return name, Path(path)
    return Path(text).name, Path(text)


def summary_rows(method: str, doses: Sequence[float], reports: Sequence[MetricReport]) -> List[Tuple[object, ...]]:
    """Mean and std per dose level (descending) plus one row over all doses."""
    groups: List[Tuple[str, List[MetricReport]]] = []
    for dose in sorted({d for d in doses if not np.isnan(d)}, reverse=True):
        groups.append((format_value(dose), [r for d, r in zip(doses, reports) if d == dose]))
    groups.append(("all", list(reports)))
    rows = []
    for label, group in groups:
        stats = aggregate_reports(group)
        row: List[object] = [method, label, len(group)]
        for metric in ("psnr", "rmse", "ssim"):
            row += [format_value(stats[metric]["mean"]), format_value(stats[metric]["std"])]
        rows.append(tuple(row))
    return rows


def cmd_eval(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    config = manager.get_config()
    samples, _ = load_samples(config.paths.dataset_dir)
    out = Path(config.paths.output_dir)
    per_image: List[Tuple[object, ...]] = []
    summary: List[Tuple[object, ...]] = []
    for method, directory in map(parse_recon_arg, args.recon):
        reports, doses = [], []
        for sample in samples:
            path = directory / f"{sample.sample_id}_{args.suffix}.f32r"
            if not path.exists():
                raise FileFormatError(f"Missing reconstruction {path}", path=str(path))
            report = evaluate(sample.phantom, read_raster(path).astype(np.float64))
            reports.append(report)
            doses.append(sample.dose)
            per_image.append(
                (method, sample.sample_id, format_value(sample.dose))
                + tuple(format_value(v) for v in (report.psnr, report.rmse, report.ssim))
            )
        summary += summary_rows(method, doses, reports)

    write_csv(out / f"{args.name}.csv", METRIC_HEADER, per_image)
    write_csv(out / f"{args.name}_summary.csv", SUMMARY_HEADER, summary)
    manager.save_config(str(out / CONFIG_ECHO))
    for row in summary:
        print(f"{row[0]:<16} dose {row[1]:>8}  PSNR {row[3]} ± {row[4]}  SSIM {row[7]} ± {row[8]}")
    return ExitCode.SUCCESS


def cmd_baseline(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    config = manager.get_config()
    samples, manifest = load_samples(config.paths.dataset_dir)
    config.geometry = dataset_geometry(manifest, config)
    A = system_matrix_for(config.geometry)
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manager.save_config(str(out / CONFIG_ECHO))

    failures = 0
    monitor = get_performance_monitor()
    for sample in tqdm(samples, desc=args.method, disable=not args.progress):
        with monitor.track_operation(f"baseline_{args.method}"):
            if args.method == "fbp":
                image = fbp_reconstruct(A.geometry, sample.sinogram, args.apodization)
            else:
                lam = args.lam if args.lam is not None else tv_lambda_for_dose(sample.dose)
                image, report = tv_reconstruct(A, sample.sinogram, TvSettings(lam=lam, mu=args.mu, iters=args.iters))
                failures += report.cg_failures
                logger.debug(
                    f"TV {sample.sample_id}: primal residual {report.primal_residuals[0]:.3e} -> "
                    f"{report.primal_residuals[-1]:.3e}"
                )
        write_raster(out / f"{sample.sample_id}_recon.f32r", image)

    print(f"✅ {args.method.upper()} reconstructed {len(samples)} samples into {out}")
    if failures and args.strict:
        raise ConvergenceError(f"{failures} TV x-updates missed the CG tolerance", context={"failures": failures})
    return ExitCode.SUCCESS


def cmd_gradcheck(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    results = run_all(seed=args.seed, include_model=not args.skip_model)
    print(format_table(results))
    failed = [r.suite for r in results if not r.passed]
    if failed:
        raise ValidationError(f"gradient suites above threshold: {','.join(failed)}", context={"failed": failed})
    return ExitCode.SUCCESS


def cmd_export_png(args: argparse.Namespace, manager: ConfigurationManager) -> int:
    low, high = args.window
    if not high > low:
        raise ConfigurationError(f"Window upper bound {high} must exceed lower bound {low}")
    path = export_png(args.output, read_raster(args.input), (low, high))
    print(f"✅ Wrote {path}")
    return ExitCode.SUCCESS


COMMANDS: Dict[str, Callable[[argparse.Namespace, ConfigurationManager], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "export-png": cmd_export_png,
}


def validate_launch_paths(args: argparse.Namespace, manager: ConfigurationManager):
    """Fail with a configuration error before a subcommand touches a bad path."""
    inputs, outputs = COMMAND_PATHS.get(args.command, ((), ()))
    if args.command == "reconstruct" and args.input:
        inputs = ()
    manager.validate_paths(inputs=inputs, outputs=outputs)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        manager = resolve_config(args)
        validate_launch_paths(args, manager)
        monitor = get_performance_monitor()
        with monitor.track_operation(command.replace("-", "_")):
            code = COMMANDS[command](args, manager)
        monitor.log_summary(logger)
        return int(code)
    except ReconstructionError as e:
        error = e
    except OSError as e:
        error = ReconstructionError(str(e), category=ErrorCategory.IO, original_error=e)
    except ValueError as e:
        error = ValidationError(str(e), original_error=e)
    log_error_context(error, {"command": command})
    print(format_reason(error), file=sys.stderr)
    return int(exit_code_for(error))


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
