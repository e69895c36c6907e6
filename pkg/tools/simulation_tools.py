"""
Phantom generation and low-dose measurement simulation tools.

Counts follow ybar_i ~ Poisson(I * exp(-[Ax]_i)) + Normal(0, sigma_e^2).
Random draws come from Philox streams keyed by the seed with one counter
block per fixed-size chunk of rays, so sharding the work never changes
the output.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.draw import ellipse as draw_ellipse
from tqdm import tqdm

from utils.constants import (
    COUNT_FLOOR,
    DOSE_LEVELS,
    ELECTRONIC_VARIANCE,
    EXPECTED_COUNT_FLOOR,
    MAX_ATTENUATION,
    MIN_PHANTOM_SIZE,
    POISSON_NORMAL_SWITCH,
    RANDOM_ELLIPSE_COUNT,
    RANDOM_ELLIPSE_RANGE,
    UNIVERSAL_DOSE_LEVELS,
    WATER_ATTENUATION,
)
from utils.error_handling import ValidationError
from utils.validation import require_positive, require_size

from .file_tools import read_raster, write_raster
from .geometry_tools import SystemMatrix, forward_project

logger = logging.getLogger(__name__)

RNG_CHUNK = 4096

# (attenuation, semi-axis x, semi-axis y, center x, center y, angle in degrees)
# in normalized [-1, 1] coordinates; attenuations scaled so the interior sits
# near water and the skull is the brightest ellipse.
SHEPP_LOGAN_ELLIPSES: Tuple[Tuple[float, ...], ...] = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)
SHEPP_LOGAN_SCALE = 0.02
DISK_RADIUS = 0.8
PRESETS = ("shepp-logan", "disk")


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates ([-1, 1] across the image)."""
    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float
    attenuation: float


@dataclass
class Phantom:
    """Attenuation image (mm^-1) with the description it was drawn from."""
    image: np.ndarray
    descriptor: Union[str, List[Ellipse]]


@dataclass(frozen=True)
class NoiseModel:
    """Poisson photon statistics plus additive electronic noise."""
    dose: float
    electronic_variance: float = ELECTRONIC_VARIANCE
    rng_seed: int = 0

    def __post_init__(self):
        require_positive("dose", self.dose)
        require_positive("electronic_variance", self.electronic_variance, strict=False)


@dataclass
class RawCounts:
    """Noisy photon counts per ray, shaped like the sinogram."""
    counts: np.ndarray
    dose: float
    underflow_count: int = 0

    @property
    def below_floor(self) -> int:
        return int(np.sum(self.counts < COUNT_FLOOR))


@dataclass
class DatasetSample:
    """One simulated (phantom, sinogram) pair."""
    sample_id: str
    phantom: np.ndarray
    sinogram: np.ndarray
    dose: float
    seed: int
    metadata: Dict[str, Any] = field(default_factory=dict)


def _rasterize(ellipses: Sequence[Ellipse], size: Tuple[int, int], additive: bool) -> np.ndarray:
    rows, cols = size
    image = np.zeros(size, dtype=np.float64)
    for e in ellipses:
        r0 = (1.0 - e.center[1]) * 0.5 * rows - 0.5
        c0 = (1.0 + e.center[0]) * 0.5 * cols - 0.5
        rr, cc = draw_ellipse(
            r0,
            c0,
            e.axes[1] * 0.5 * rows,
            e.axes[0] * 0.5 * cols,
            shape=size,
            rotation=math.radians(e.angle),
        )
        if additive:
            image[rr, cc] += e.attenuation
        else:
            image[rr, cc] = e.attenuation
    return image


def shepp_logan_ellipses(scale: float = SHEPP_LOGAN_SCALE) -> List[Ellipse]:
    return [
        Ellipse(center=(x0, y0), axes=(a, b), angle=phi, attenuation=scale * value)
        for value, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES
    ]


def random_ellipses(rng: np.random.Generator) -> List[Ellipse]:
    """Water disk overlaid with 3-8 random soft-tissue/bone ellipses."""
    ellipses = [Ellipse((0.0, 0.0), (DISK_RADIUS, DISK_RADIUS), 0.0, WATER_ATTENUATION)]
    low, high = RANDOM_ELLIPSE_COUNT
    for _ in range(int(rng.integers(low, high + 1))):
        radius = 0.5 * math.sqrt(rng.random())
        theta = 2.0 * math.pi * rng.random()
        ellipses.append(
            Ellipse(
                center=(radius * math.cos(theta), radius * math.sin(theta)),
                axes=(float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.05, 0.3))),
                angle=float(rng.uniform(-90.0, 90.0)),
                attenuation=float(rng.uniform(*RANDOM_ELLIPSE_RANGE)),
            )
        )
    return ellipses


def generate_phantom(kind: str, size: Tuple[int, int], seed: int = 0) -> Phantom:
    """
    Build a preset or a seeded random phantom.

    Args:
        kind: "shepp-logan", "disk" or "random"
        size: (rows, cols), each at least the minimum phantom size
        seed: Generator seed; only "random" uses it

    Returns:
        Phantom with an attenuation image (mm^-1) clipped to [0, max attenuation]

    Raises:
        ValidationError: If the size is too small or the kind is unknown
    """
    size = (int(size[0]), int(size[1]))
    if min(size) < MIN_PHANTOM_SIZE:
        raise ValidationError(
            f"Phantom size {size} is below the {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE} minimum",
            context={"size": size},
        )
    if kind == "shepp-logan":
        ellipses = shepp_logan_ellipses()
        image = _rasterize(ellipses, size, additive=True)
        descriptor: Union[str, List[Ellipse]] = kind
    elif kind == "disk":
        ellipses = [Ellipse((0.0, 0.0), (DISK_RADIUS, DISK_RADIUS), 0.0, WATER_ATTENUATION)]
        image = _rasterize(ellipses, size, additive=False)
        descriptor = kind
    elif kind == "random":
        rng = np.random.default_rng(seed)
        ellipses = random_ellipses(rng)
        image = _rasterize(ellipses, size, additive=False)
        descriptor = ellipses
    else:
        raise ValidationError(
            f"Unknown phantom preset '{kind}', expected one of {list(PRESETS) + ['random']}",
            context={"kind": kind},
        )
    np.clip(image, 0.0, MAX_ATTENUATION, out=image)
    return Phantom(image=image, descriptor=descriptor)


def _chunk_generator(seed: int, chunk: int) -> np.random.Generator:
    counter = np.array([0, 0, chunk, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1), counter=counter))


def sample_counts(expected: np.ndarray, nm: NoiseModel) -> np.ndarray:
    """Draw Poisson(expected) + Normal(0, sigma_e^2) per entry.

    Poisson draws use CDF inversion below a mean of 30 and the rounded
    normal approximation above it. Every chunk consumes the same number of
    uniforms and normals whatever branch its entries take.
    """
    expected = np.asarray(expected, dtype=np.float64)
    flat = expected.reshape(-1)
    counts = np.empty_like(flat)
    sigma_e = math.sqrt(nm.electronic_variance)
    for chunk, start in enumerate(range(0, flat.size, RNG_CHUNK)):
        mean = flat[start:start + RNG_CHUNK]
        rng = _chunk_generator(nm.rng_seed, chunk)
        u = rng.random(mean.size)
        z = rng.standard_normal(mean.size)
        e = rng.standard_normal(mean.size)

        draw = np.maximum(np.rint(mean + np.sqrt(mean) * z), 0.0)
        small = mean < POISSON_NORMAL_SWITCH
        if np.any(small):
            draw[small] = _poisson_inversion(mean[small], u[small])
        counts[start:start + mean.size] = draw + sigma_e * e
    return counts.reshape(expected.shape)


def _poisson_inversion(mean: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = np.zeros_like(mean)
    prob = np.exp(-mean)
    cdf = prob.copy()
    active = u > cdf
    limit = int(POISSON_NORMAL_SWITCH + 20.0 * math.sqrt(POISSON_NORMAL_SWITCH)) + 1
    step = 0
    while np.any(active) and step < limit:
        step += 1
        prob = np.where(active, prob * mean / step, prob)
        cdf = np.where(active, cdf + prob, cdf)
        k = np.where(active, k + 1.0, k)
        active = active & (u > cdf)
    return k


def simulate_counts(A: SystemMatrix, x: np.ndarray, nm: NoiseModel) -> RawCounts:
    """
    Noisy transmitted photon counts for image x at the model's dose.

    Args:
        A: System matrix of the scan
        x: Attenuation image (mm^-1)
        nm: Dose, electronic noise variance and seed

    Returns:
        RawCounts with the sampled counts and the number of clamped rays
    """
    line_integrals = forward_project(A, np.asarray(x, dtype=np.float64))
    expected = nm.dose * np.exp(-line_integrals)
    underflow = expected < EXPECTED_COUNT_FLOOR
    n_underflow = int(np.sum(underflow))
    if n_underflow:
        logger.warning(f"{n_underflow} rays had expected counts below {EXPECTED_COUNT_FLOOR}; clamped")
        expected = np.maximum(expected, EXPECTED_COUNT_FLOOR)
    counts = sample_counts(expected, nm)
    return RawCounts(counts=counts, dose=nm.dose, underflow_count=n_underflow)


def counts_to_sinogram(counts: RawCounts, nm: NoiseModel, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Log transform y_i = ln(I / max(ybar_i, 1))."""
    values = np.asarray(counts.counts, dtype=np.float64)
    if shape is not None:
        values = require_size("counts", values, shape[0] * shape[1]).reshape(shape)
    floored = int(np.sum(values < COUNT_FLOOR))
    if floored:
        logger.debug(f"{floored} counts floored at {COUNT_FLOOR} before the log transform")
    return np.log(nm.dose / np.maximum(values, COUNT_FLOOR))


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed derived from (run seed, sample index)."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def dose_schedule(count: int, seed: int, dose: Optional[float] = None, dose_set: Optional[str] = None) -> List[float]:
    """Per-sample doses: fixed, cycled over the standard levels, or drawn from the universal set."""
    if dose_set is None:
        if dose is None:
            raise ValidationError("Either a dose or a dose_set is required")
        return [float(dose)] * count
    if dose_set == "standard":
        return [DOSE_LEVELS[i % len(DOSE_LEVELS)] for i in range(count)]
    if dose_set == "universal":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        return [float(d) for d in rng.choice(UNIVERSAL_DOSE_LEVELS, size=count)]
    raise ValidationError(f"Unknown dose_set '{dose_set}'", context={"dose_set": dose_set})


def simulate_sample(
    A: SystemMatrix,
    index: int,
    seed: int,
    dose: float,
    kind: str = "random",
    electronic_variance: float = ELECTRONIC_VARIANCE
) -> DatasetSample:
    s = sample_seed(seed, index)
    phantom = generate_phantom(kind, A.geometry.image_size, seed=s)
    nm = NoiseModel(dose=dose, electronic_variance=electronic_variance, rng_seed=s)
    raw = simulate_counts(A, phantom.image, nm)
    sinogram = counts_to_sinogram(raw, nm)
    return DatasetSample(
        sample_id=f"{index:05d}",
        phantom=phantom.image,
        sinogram=sinogram,
        dose=dose,
        seed=s,
        metadata={"below_floor": raw.below_floor, "underflow": raw.underflow_count},
    )


def simulate_dataset(
    A: SystemMatrix,
    count: int,
    seed: int,
    dose: Optional[float] = None,
    dose_set: Optional[str] = None,
    kind: str = "random",
    electronic_variance: float = ELECTRONIC_VARIANCE,
    workers: int = 1,
    progress: bool = False
) -> List[DatasetSample]:
    """
    Simulate `count` phantom/sinogram pairs.

    Args:
        A: System matrix of the scan
        count: Number of samples
        seed: Run seed; sample i uses a seed derived from (seed, i)
        dose: Fixed dose for every sample, used when dose_set is None
        dose_set: "standard" or "universal" dose schedule
        kind: Phantom kind passed to generate_phantom
        electronic_variance: Variance of the additive electronic noise
        workers: Thread count; the result does not depend on it
        progress: Show a tqdm progress bar

    Returns:
        Samples in index order
    """
    doses = dose_schedule(count, seed, dose=dose, dose_set=dose_set)

    def job(index: int) -> DatasetSample:
        return simulate_sample(A, index, seed, doses[index], kind, electronic_variance)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(job, range(count))
        if progress:
            results = tqdm(results, total=count, desc="simulate")
        samples = list(results)
    logger.info(f"Simulated {count} samples (seed={seed}, kind={kind})")
    return samples


def write_dataset(path: Union[str, Path], samples: Sequence[DatasetSample], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write `<id>_phantom.f32r`, `<id>_sino.f32r` pairs and manifest.json."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in samples:
        write_raster(root / f"{sample.sample_id}_phantom.f32r", sample.phantom)
        write_raster(root / f"{sample.sample_id}_sino.f32r", sample.sinogram)
        entries.append({"id": sample.sample_id, "dose": sample.dose, "seed": sample.seed})
    manifest = {"samples": entries}
    manifest.update(meta or {})
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(entries)} samples to {root}")
    return root


def load_dataset(path: Union[str, Path]) -> Tuple[List[DatasetSample], Dict[str, Any]]:
    """Read a dataset directory written by write_dataset."""
    root = Path(path)
    with open(root / "manifest.json", "r") as f:
        manifest = json.load(f)
    samples = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        samples.append(
            DatasetSample(
                sample_id=sid,
                phantom=read_raster(root / f"{sid}_phantom.f32r").astype(np.float64),
                sinogram=read_raster(root / f"{sid}_sino.f32r").astype(np.float64),
                dose=float(entry["dose"]),
                seed=int(entry["seed"]),
            )
        )
    return samples, manifest
