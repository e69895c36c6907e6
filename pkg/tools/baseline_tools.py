"""
Reference reconstructions: fan-beam FBP and anisotropic TV by ADMM.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import fft

from utils.constants import TV_ITERS, TV_LAMBDA_BY_DOSE, TV_MU
from utils.error_handling import ValidationError
from utils.validation import require_choice, require_shape

from .geometry_tools import FanBeamGeometry, SystemMatrix, back_project, forward_project
from .inversion_tools import CgSettings, conjugate_gradient

logger = logging.getLogger(__name__)

APODIZATIONS = ("ramlak", "hann")


# ---------------------------------------------------------------------------
# Filtered back-projection
# ---------------------------------------------------------------------------

def ramp_filter(n_bins: int, spacing: float, apodization: str = "ramlak") -> np.ndarray:
    """Frequency response of the band-limited ramp on the padded grid.

    The grid length is the next power of two >= 2 n_bins. The response is
    the FFT of the sampled spatial Ram-Lak kernel, scaled by the sample
    spacing so that the product with a projection's FFT is a discrete
    convolution integral.
    """
    require_choice("apodization", apodization, APODIZATIONS)
    size = 1 << max(1, math.ceil(math.log2(2 * n_bins)))
    offsets = np.concatenate([np.arange(0, size // 2), np.arange(-size // 2, 0)])
    kernel = np.zeros(size)
    kernel[0] = 1.0 / (4.0 * spacing ** 2)
    odd = offsets % 2 == 1
    kernel[odd] = -1.0 / (math.pi * offsets[odd] * spacing) ** 2
    response = np.real(fft.fft(kernel)) * spacing
    if apodization == "hann":
        response *= 0.5 * (1.0 + np.cos(2.0 * math.pi * fft.fftfreq(size)))
    return response


def fbp_reconstruct(geom: FanBeamGeometry, y: np.ndarray, apodization: str = "ramlak") -> np.ndarray:
    """Fan-beam FBP for an equispaced flat detector.

    Detector coordinates are rescaled to a virtual detector through the
    isocenter. Each view is cosine weighted, ramp filtered and
    back-projected with the 1/U^2 distance weight, interpolating linearly in
    the detector coordinate. The angular sum uses span / (2 n_views), the
    full-orbit normalization.

    Args:
        geom: Scan geometry the sinogram was acquired with
        y: Sinogram of shape (n_views, n_bins)
        apodization: "ramlak" or "hann"

    Returns:
        Attenuation image of shape geom.image_size (float64)
    """
    y = require_shape("sinogram", y, geom.sinogram_shape).astype(np.float64)
    d = geom.source_to_isocenter
    s = geom.bin_offsets() / geom.magnification
    ds = geom.detector_pixel / geom.magnification

    weighted = y * (d / np.sqrt(d ** 2 + s ** 2))[None, :]
    response = ramp_filter(geom.n_bins, ds, apodization)
    spectrum = fft.fft(weighted, n=response.size, axis=1)
    filtered = np.real(fft.ifft(spectrum * response[None, :], axis=1))[:, : geom.n_bins]

    rows, cols = geom.image_size
    xmin, _, _, ymax = geom.image_bounds()
    px = xmin + (np.arange(cols) + 0.5) * geom.pixel_size
    py = ymax - (np.arange(rows) + 0.5) * geom.pixel_size
    gx, gy = np.meshgrid(px, py)

    image = np.zeros((rows, cols))
    for angle, q in zip(geom.view_angles(), filtered):
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        depth = d - (gx * cos_a + gy * sin_a)
        u = depth / d
        s_hit = d * (-gx * sin_a + gy * cos_a) / depth
        image += np.interp(s_hit, s, q, left=0.0, right=0.0) / u ** 2
    image *= geom.angular_span / (2.0 * geom.n_views)
    return image


# ---------------------------------------------------------------------------
# TV-ADMM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TvSettings:
    lam: float
    mu: float = TV_MU
    iters: int = TV_ITERS
    cg: CgSettings = field(default_factory=lambda: CgSettings(max_iters=100, rel_tolerance=1e-8))

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError(f"TV lambda must be > 0, got {self.lam}")
        if not self.mu > 0:
            raise ValidationError(f"ADMM penalty mu must be > 0, got {self.mu}")
        if self.iters < 1:
            raise ValidationError(f"TV iteration count must be >= 1, got {self.iters}")


def tv_lambda_for_dose(dose: float) -> float:
    """
    Regularization weight tuned per dose level.

    Args:
        dose: Incident photons per ray

    Returns:
        The weight of the nearest tuned level in log dose
    """
    levels = sorted(TV_LAMBDA_BY_DOSE)
    nearest = min(levels, key=lambda level: abs(math.log(level) - math.log(dose)))
    if not math.isclose(nearest, dose):
        logger.info(f"No TV lambda tuned for dose {dose:g}; using the value for {nearest:g}")
    return TV_LAMBDA_BY_DOSE[nearest]


@dataclass
class TvReport:
    primal_residuals: List[float] = field(default_factory=list)
    dual_residuals: List[float] = field(default_factory=list)
    cg_failures: int = 0


def gradient(x: np.ndarray) -> np.ndarray:
    """Periodic forward differences, shape (2, rows, cols): columns then rows."""
    return np.stack([np.roll(x, -1, axis=1) - x, np.roll(x, -1, axis=0) - x])


def gradient_adjoint(g: np.ndarray) -> np.ndarray:
    return (np.roll(g[0], 1, axis=1) - g[0]) + (np.roll(g[1], 1, axis=0) - g[1])


def soft_threshold(v, threshold: float):
    """sign(v) max(|v| - t, 0)."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def tv_reconstruct(
    A: SystemMatrix,
    y: np.ndarray,
    settings: TvSettings,
    x0: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, TvReport]:
    """Minimize 0.5 ||Ax - y||^2 + lam ||grad x||_1 by ADMM.

    x-update: (A^T A + mu grad^T grad) x = A^T y + mu grad^T (z - p/mu), by CG
    z-update: soft threshold of grad x + p/mu at lam/mu
    p-update: p + mu (grad x - z)

    Args:
        A: System matrix of the scan
        y: Sinogram of shape (n_views, n_bins)
        settings: lam, mu, outer iterations and the inner CG rule
        x0: Optional starting image; zero otherwise

    Returns:
        (image, TvReport with per-iteration primal and dual residuals and the
        number of x-updates that missed the CG tolerance)
    """
    geom = A.geometry
    y = require_shape("sinogram", y, geom.sinogram_shape).astype(np.float64)
    shape = tuple(geom.image_size)
    mu, lam = settings.mu, settings.lam

    def normal(v):
        return back_project(A, forward_project(A, v)) + mu * gradient_adjoint(gradient(v))

    aty = back_project(A, y)
    x = np.zeros(shape) if x0 is None else require_shape("warm start", x0, shape).astype(np.float64)
    z = gradient(x)
    p = np.zeros_like(z)
    report = TvReport()
    for k in range(settings.iters):
        rhs = aty + mu * gradient_adjoint(z - p / mu)
        x, cg_report = conjugate_gradient(normal, rhs, x, settings.cg)
        if not cg_report.converged:
            report.cg_failures += 1
        gx = gradient(x)
        z_prev = z
        z = soft_threshold(gx + p / mu, lam / mu)
        p = p + mu * (gx - z)
        report.primal_residuals.append(float(np.linalg.norm(gx - z)))
        report.dual_residuals.append(float(mu * np.linalg.norm(gradient_adjoint(z - z_prev))))
        logger.debug(
            f"TV-ADMM iteration {k + 1}: primal {report.primal_residuals[-1]:.3e}, "
            f"dual {report.dual_residuals[-1]:.3e}"
        )
    if report.cg_failures:
        logger.warning(f"TV-ADMM: {report.cg_failures} of {settings.iters} x-updates missed the CG tolerance")
    return x, report
