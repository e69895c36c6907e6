"""
Image quality metrics: PSNR, RMSE and SSIM.

PSNR follows the total-squared-error form
    -10 log10(||x - x*||^2 / max|x|^2)
with the peak from the ground truth x. It differs from the usual
mean-normalized PSNR by exactly 10 log10(N) for an N-pixel image.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from utils.error_handling import ValidationError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    rmse: float
    ssim: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _pair(x: np.ndarray, xs: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if x.shape != xs.shape:
        raise ValidationError(
            f"Image shapes differ: {x.shape} vs {xs.shape}",
            context={"truth": x.shape, "reconstruction": xs.shape},
        )
    return x, xs


def psnr(x: np.ndarray, xs: np.ndarray) -> float:
    """PSNR in dB of reconstruction xs against ground truth x; +inf if identical."""
    x, xs = _pair(x, xs)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        raise ValidationError("PSNR is undefined for an all-zero ground truth")
    error = float(np.sum((x - xs) ** 2))
    if error == 0.0:
        return math.inf
    return -10.0 * math.log10(error / peak ** 2)


def rmse(x: np.ndarray, xs: np.ndarray) -> float:
    x, xs = _pair(x, xs)
    return float(np.sqrt(np.mean((x - xs) ** 2)))


def ssim(
    x: np.ndarray,
    xs: np.ndarray,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    data_range: Optional[float] = None
) -> float:
    """
    Mean SSIM with a Gaussian window (sigma 1.5).

    Args:
        x: Ground truth image
        xs: Reconstruction of the same shape
        window: Odd window size, no larger than the image
        k1: Luminance stabilizer constant
        k2: Contrast stabilizer constant
        data_range: Dynamic range; defaults to max(x) - min(x)

    Returns:
        SSIM averaged over the image

    Raises:
        ValidationError: If the images differ in shape, are not 2D or are
            smaller than the window
    """
    x, xs = _pair(x, xs)
    if x.ndim != 2:
        raise ValidationError(f"SSIM needs 2D images, got {x.ndim} axes")
    if window > min(x.shape):
        raise ValidationError(
            f"SSIM window {window} is larger than the image {x.shape}",
            context={"window": window, "shape": x.shape},
        )
    if data_range is None:
        data_range = float(x.max() - x.min())
    if data_range <= 0.0:
        logger.debug("Ground truth is constant; using unit SSIM dynamic range")
        data_range = 1.0
    return float(
        structural_similarity(
            x,
            xs,
            win_size=window,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=k1,
            K2=k2,
            data_range=data_range,
        )
    )


def evaluate(x: np.ndarray, xs: np.ndarray) -> MetricReport:
    """All three metrics of reconstruction xs against ground truth x."""
    return MetricReport(psnr=psnr(x, xs), rmse=rmse(x, xs), ssim=ssim(x, xs))


def aggregate(values: Sequence[float]) -> Dict[str, float]:
    """Mean and population standard deviation; +inf entries propagate."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    if np.any(np.isinf(arr)):
        return {"mean": float(np.mean(arr)), "std": math.nan, "count": int(arr.size)}
    return {"mean": float(np.mean(arr)), "std": float(np.std(arr)), "count": int(arr.size)}


def aggregate_reports(reports: List[MetricReport]) -> Dict[str, Dict[str, float]]:
    return {
        name: aggregate([getattr(r, name) for r in reports])
        for name in ("psnr", "rmse", "ssim")
    }
