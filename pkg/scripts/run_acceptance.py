"""Desk-scale acceptance run.

Simulates a training set and a held-out set, trains the network and its
learnable-constant ablation, and checks the training trend, the ordering
against FBP and TV-ADMM, and the dose trend of the predicted
hyper-parameters. `--quick` shrinks everything for a smoke run.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Sequence

import numpy as np
from tqdm import tqdm

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from models.ahp_net import AhpNet, ModelConfig, apply_variant
from models.trainer import Trainer, TrainConfig, smoothed
from tools.baseline_tools import TvSettings, fbp_reconstruct, tv_reconstruct
from tools.geometry_tools import FanBeamGeometry, build_system_matrix
from tools.metrics_tools import psnr
from tools.simulation_tools import DatasetSample, simulate_dataset
from utils.config import ConfigurationManager
from utils.monitoring import get_performance_monitor, setup_logging

logger = logging.getLogger("acceptance")

TREND_DOSES = (1e5, 1e4, 5e3)


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true", help="small smoke-test sizes")
    parser.add_argument("--out", default="acceptance_run", help="checkpoint root")
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser.parse_args(argv)


def build_config(args: argparse.Namespace):
    overrides = [
        "model.cnn_depth=5",
        "model.cnn_channels=32",
        "train.lr=1e-4",
        "train.batch_size=4",
        "train.epochs=30",
    ]
    if args.quick:
        overrides += [
            "geometry.image_size=[32, 32]",
            "geometry.n_views=60",
            "geometry.n_bins=96",
            "model.cnn_channels=8",
            "train.epochs=6",
        ]
    return ConfigurationManager(environment="production", overrides=overrides + args.overrides).get_config()


def mean_psnr(samples: Sequence[DatasetSample], images: Sequence[np.ndarray]) -> float:
    return float(np.mean([psnr(s.phantom, x) for s, x in zip(samples, images)]))


def network_images(model: AhpNet, samples: Sequence[DatasetSample]) -> List[np.ndarray]:
    return [model.forward(s.sinogram).final[0] for s in samples]


def train_model(name: str, model_config: ModelConfig, A, train_config: TrainConfig, samples, out: str):
    model = AhpNet(model_config, A, seed=train_config.seed, dtype=train_config.dtype)
    report = Trainer(model, train_config, os.path.join(out, name), progress=True).train(samples)
    return model, report


def check(results: Dict[str, bool], name: str, passed: bool, detail: str):
    results[name] = passed
    print(f"{'✅' if passed else '❌'} {name}: {detail}")


def run(argv=None) -> int:
    args = parse_args(argv)
    config = build_config(args)
    setup_logging(config.logging)
    n_train, n_test = (24, 6) if args.quick else (200, 20)

    A = build_system_matrix(FanBeamGeometry.from_config(config.geometry))
    train_config = TrainConfig.from_section(config.train)
    base = ModelConfig.from_section(config.model)
    dose = config.noise.dose
    train_set = simulate_dataset(A, n_train, args.seed, dose=dose, progress=True)
    test_set = simulate_dataset(A, n_test, args.seed + 1, dose=dose, progress=True)
    results: Dict[str, bool] = {}

    model, report = train_model("ahp", base, A, train_config, train_set, args.out)
    window = smoothed(report.losses)[:20]
    decreasing = all(b < a for a, b in zip(window, window[1:]))
    check(results, "smoothed loss decreases", decreasing, " ".join(f"{v:.4g}" for v in window))

    ahp = mean_psnr(test_set, network_images(model, test_set))
    fbp = mean_psnr(test_set, [fbp_reconstruct(A.geometry, s.sinogram) for s in test_set])
    tv_settings = TvSettings(lam=0.02, mu=10.0, iters=200)
    tv_images = [tv_reconstruct(A, s.sinogram, tv_settings)[0] for s in tqdm(test_set, desc="tv")]
    tv = mean_psnr(test_set, tv_images)
    check(results, "beats FBP by 3 dB", ahp >= fbp + 3.0, f"ahp {ahp:.2f} dB, fbp {fbp:.2f} dB")
    check(results, "matches TV-ADMM", ahp >= tv - 0.2, f"ahp {ahp:.2f} dB, tv {tv:.2f} dB")

    constant, constant_report = train_model(
        "learnable_constant", apply_variant(base, "learnable-hp"), A, train_config, train_set, args.out
    )
    constant_psnr = mean_psnr(test_set, network_images(constant, test_set))
    finite = all(np.isfinite(report.losses)) and all(np.isfinite(constant_report.losses))
    check(
        results,
        "predicted beats constant hyper-parameters",
        finite and ahp >= constant_psnr - 0.2,
        f"mlp {ahp:.2f} dB, constant {constant_psnr:.2f} dB",
    )

    mixed_set = simulate_dataset(A, n_train, args.seed + 2, dose_set="universal", progress=True)
    mixed, _ = train_model("universal", base, A, train_config, mixed_set, args.out)
    trend = []
    for level in TREND_DOSES:
        # same seed, same phantoms; only the dose changes
        probe = simulate_dataset(A, n_test, args.seed + 3, dose=level)
        betas = [mixed.forward(s.sinogram).stages[-1].betas for s in probe]
        trend.append(float(np.mean(betas)))
    drops = sum(b < a for a, b in zip(trend, trend[1:]))
    ties = sum(b == a for a, b in zip(trend, trend[1:]))
    check(
        results,
        "beta grows as dose falls",
        drops == 0 and ties <= 1,
        ", ".join(f"{level:g}: {value:.4g}" for level, value in zip(TREND_DOSES, trend)),
    )

    get_performance_monitor().log_summary(logger)
    failed = [name for name, passed in results.items() if not passed]
    print(f"{len(results) - len(failed)}/{len(results)} acceptance checks passed")
    return 1 if failed else 0


if __name__ == '__main__':
    sys.exit(run())
