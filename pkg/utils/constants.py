"""
Configuration constants for the AHP-Net low-dose CT toolkit.
"""
import math
import os
from typing import Dict, Tuple

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Application Configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("AHP_OUTPUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("AHP_SEED", "0"))

# Desk-scale fan-beam geometry (magnification 2, like the clinical setup)
DESK_GEOMETRY: Dict[str, object] = {
    "n_views": 120,
    "n_bins": 128,
    "image_size": (64, 64),
    "pixel_size": 4.0,
    "detector_pixel": 4.0,
    "source_to_detector": 1000.0,
    "source_to_isocenter": 500.0,
    "angular_span": 2.0 * math.pi,
}

# Attenuation (mm^-1)
WATER_ATTENUATION = 0.02
MAX_ATTENUATION = 0.1
RANDOM_ELLIPSE_RANGE: Tuple[float, float] = (0.005, 0.04)
RANDOM_ELLIPSE_COUNT: Tuple[int, int] = (3, 8)
MIN_PHANTOM_SIZE = 16

# Measurement model
ELECTRONIC_VARIANCE = 10.0
COUNT_FLOOR = 1.0
EXPECTED_COUNT_FLOOR = 1e-12
POISSON_NORMAL_SWITCH = 30.0
DOSE_LEVELS: Tuple[float, ...] = (1e5, 5e4, 1e4, 5e3)
UNIVERSAL_DOSE_LEVELS: Tuple[float, ...] = (1e5, 7.5e4, 5e4, 2.5e4, 1e4, 7.5e3, 5e3)

# Inversion block
BETA_FLOOR = 1e-6
BETA_INIT = 0.005
CG_TRAIN: Dict[str, float] = {"max_iters": 100, "rel_tolerance": 1e-6}
CG_VERIFY: Dict[str, float] = {"max_iters": 2000, "rel_tolerance": 1e-10}

# Network
STAGES = 3
CNN_DEPTH = 17
CNN_CHANNELS = 64
DESK_CNN_DEPTH = 5
DESK_CNN_CHANNELS = 32
MLP_HIDDEN: Tuple[int, int] = (16, 16)
BANK_KINDS: Tuple[str, ...] = ("bspline-linear", "gradient", "learnable", "none")
HP_MODES: Tuple[str, ...] = ("mlp", "learnable-constant")
VARIANTS: Tuple[str, ...] = ("no-filter", "gradient", "learnable-filters", "learnable-hp")
INTERMEDIATE_LOSS_WEIGHT = 0.8
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

# Optimizer
ADAM_DEFAULTS: Dict[str, float] = {
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
}
BATCH_SIZE = 4
EPOCHS = 50

# TV-ADMM regularization per dose level, penalty fixed
TV_LAMBDA_BY_DOSE: Dict[float, float] = {1e5: 0.01, 5e4: 0.01, 1e4: 0.02, 5e3: 0.03}
TV_MU = 10.0
TV_ITERS = 200

# Display
HU_WINDOW: Tuple[float, float] = (-150.0, 150.0)

# File formats
RASTER_MAGIC = b"F32R"
CHECKPOINT_MAGIC = b"AHPC"
CHECKPOINT_VERSION = 1
