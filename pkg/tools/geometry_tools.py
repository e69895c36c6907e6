"""
Fan-beam geometry and sparse system matrix tools.

The system matrix stores exact ray/pixel intersection lengths (mm) computed
by Siddon ray tracing from the source to every detector bin center of an
equispaced flat panel. Forward and back projection share the same CSR
entries, so the pair is matched to rounding.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator

from utils.constants import DESK_GEOMETRY
from utils.error_handling import GeometryError
from utils.validation import require_size

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FanBeamGeometry:
    """Circular-orbit fan-beam scan with an equispaced flat detector.

    The isocenter is the image center. View v places the source at angle
    v * angular_span / n_views; the detector is on the opposite side,
    perpendicular to the central ray.
    """
    n_views: int
    n_bins: int
    image_size: Tuple[int, int]
    pixel_size: float
    detector_pixel: float
    source_to_detector: float
    source_to_isocenter: float
    angular_span: float = 2.0 * math.pi

    def __post_init__(self):
        if self.n_views < 1:
            raise GeometryError("n_views must be >= 1", dimension="n_views")
        if self.n_bins < 1:
            raise GeometryError("n_bins must be >= 1", dimension="n_bins")
        rows, cols = self.image_size
        if rows < 1 or cols < 1:
            raise GeometryError(f"image_size {self.image_size} must be positive", dimension="image_size")
        for name in ("pixel_size", "detector_pixel", "source_to_detector", "source_to_isocenter", "angular_span"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be strictly positive", dimension=name)
        if not self.source_to_detector > self.source_to_isocenter:
            raise GeometryError(
                "source_to_detector must exceed source_to_isocenter",
                dimension="source_to_detector",
            )

    @classmethod
    def from_config(cls, config) -> "FanBeamGeometry":
        """Build from a GeometryConfig (or any object with matching fields)."""
        return cls(
            n_views=config.n_views,
            n_bins=config.n_bins,
            image_size=tuple(config.image_size),
            pixel_size=config.pixel_size,
            detector_pixel=config.detector_pixel,
            source_to_detector=config.source_to_detector,
            source_to_isocenter=config.source_to_isocenter,
            angular_span=config.angular_span,
        )

    @classmethod
    def desk(cls, **overrides) -> "FanBeamGeometry":
        values = dict(DESK_GEOMETRY)
        values.update(overrides)
        return cls(**values)

    @property
    def n_pixels(self) -> int:
        return self.image_size[0] * self.image_size[1]

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_bins

    @property
    def sinogram_shape(self) -> Tuple[int, int]:
        return (self.n_views, self.n_bins)

    @property
    def magnification(self) -> float:
        return self.source_to_detector / self.source_to_isocenter

    @property
    def field_of_view_radius(self) -> float:
        """Detector half-width demagnified to the isocenter (mm)."""
        return 0.5 * self.n_bins * self.detector_pixel / self.magnification

    def view_angles(self) -> np.ndarray:
        return np.arange(self.n_views, dtype=np.float64) * (self.angular_span / self.n_views)

    def bin_offsets(self) -> np.ndarray:
        """Signed detector coordinate of every bin center (mm)."""
        return (np.arange(self.n_bins, dtype=np.float64) - 0.5 * (self.n_bins - 1)) * self.detector_pixel

    def source_position(self, angle: float) -> np.ndarray:
        return self.source_to_isocenter * np.array([math.cos(angle), math.sin(angle)])

    def detector_points(self, angle: float) -> np.ndarray:
        """(n_bins, 2) coordinates of the bin centers for one view."""
        direction = np.array([math.cos(angle), math.sin(angle)])
        axis = np.array([-math.sin(angle), math.cos(angle)])
        center = -(self.source_to_detector - self.source_to_isocenter) * direction
        return center[None, :] + self.bin_offsets()[:, None] * axis[None, :]

    def image_bounds(self) -> Tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the image bounding box (mm)."""
        rows, cols = self.image_size
        half_w = 0.5 * cols * self.pixel_size
        half_h = 0.5 * rows * self.pixel_size
        return (-half_w, half_w, -half_h, half_h)

    def check_field_of_view(self):
        """Raise if the image extends beyond the scanned field of view."""
        rows, cols = self.image_size
        radius = self.field_of_view_radius
        slack = 1e-9 * max(radius, 1.0)
        for name, count in (("image width", cols), ("image height", rows)):
            half_extent = 0.5 * count * self.pixel_size
            if half_extent > radius + slack:
                raise GeometryError(
                    f"{name} half-extent {half_extent:.3f} mm exceeds the field of view radius {radius:.3f} mm",
                    dimension=name,
                    context={"half_extent": half_extent, "fov_radius": radius},
                )
        half_diagonal = 0.5 * self.pixel_size * math.hypot(rows, cols)
        if half_diagonal >= self.source_to_isocenter:
            raise GeometryError(
                "source orbit intersects the image",
                dimension="source_to_isocenter",
            )

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_views": self.n_views,
            "n_bins": self.n_bins,
            "image_size": list(self.image_size),
            "pixel_size": self.pixel_size,
            "detector_pixel": self.detector_pixel,
            "source_to_detector": self.source_to_detector,
            "source_to_isocenter": self.source_to_isocenter,
            "angular_span": self.angular_span,
        }


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """Sparse N_d x N_p projector with nonnegative intersection-length weights."""
    geometry: FanBeamGeometry
    matrix: sparse.csr_matrix
    _views: Dict[str, sparse.csr_matrix] = field(default_factory=dict, repr=False, compare=False)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def as_dtype(self, dtype) -> sparse.csr_matrix:
        """CSR matrix in the requested precision, cached per dtype."""
        key = np.dtype(dtype).name
        if key == self.matrix.dtype.name:
            return self.matrix
        if key not in self._views:
            self._views[key] = self.matrix.astype(dtype)
        return self._views[key]

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(
            self.matrix.shape,
            matvec=lambda v: self.matrix @ v,
            rmatvec=lambda v: self.matrix.T @ v,
            dtype=self.matrix.dtype,
        )


def trace_ray(
    source: np.ndarray,
    target: np.ndarray,
    image_size: Tuple[int, int],
    pixel_size: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Siddon ray tracing of the segment source -> target.

    Pixel (r, c) covers x in [xmin + c*ps, xmin + (c+1)*ps] and
    y in [ymax - (r+1)*ps, ymax - r*ps], so row 0 is the top of the image.
    A line crosses at most rows + cols - 1 cells.

    Args:
        source: (x, y) of the ray start in mm
        target: (x, y) of the ray end in mm
        image_size: (rows, cols) of the pixel grid centered on the origin
        pixel_size: Pixel edge length in mm

    Returns:
        (flat pixel indices, intersection lengths in mm), ordered along the
        ray; both empty when the segment misses the image
    """
    rows, cols = image_size
    xmin = -0.5 * cols * pixel_size
    ymin = -0.5 * rows * pixel_size
    xmax = -xmin
    ymax = -ymin
    delta = target - source
    length = float(np.hypot(delta[0], delta[1]))
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    if length == 0.0:
        return empty

    alpha_lo, alpha_hi = 0.0, 1.0
    crossings = []
    for axis, lo, hi, count in ((0, xmin, xmax, cols), (1, ymin, ymax, rows)):
        if delta[axis] == 0.0:
            if not lo < source[axis] < hi:
                return empty
            continue
        planes = lo + np.arange(count + 1, dtype=np.float64) * pixel_size
        alphas = (planes - source[axis]) / delta[axis]
        alpha_lo = max(alpha_lo, min(alphas[0], alphas[-1]))
        alpha_hi = min(alpha_hi, max(alphas[0], alphas[-1]))
        crossings.append(alphas)

    if alpha_hi <= alpha_lo:
        return empty

    merged = [np.array([alpha_lo, alpha_hi])]
    for alphas in crossings:
        merged.append(alphas[(alphas > alpha_lo) & (alphas < alpha_hi)])
    alpha = np.unique(np.concatenate(merged))

    seg = np.diff(alpha) * length
    mid = 0.5 * (alpha[1:] + alpha[:-1])
    x_mid = source[0] + mid * delta[0]
    y_mid = source[1] + mid * delta[1]
    col = np.clip(np.floor((x_mid - xmin) / pixel_size).astype(np.int64), 0, cols - 1)
    row = np.clip(np.floor((ymax - y_mid) / pixel_size).astype(np.int64), 0, rows - 1)
    keep = seg > 0.0
    return (row * cols + col)[keep], seg[keep]


def build_system_matrix(geom: FanBeamGeometry) -> SystemMatrix:
    """
    Trace every ray of the geometry and assemble the CSR projector.

    Ray i = view * n_bins + bin runs from the source at its view angle to
    the bin center. Entries are exact intersection lengths (mm).

    Args:
        geom: Scan geometry; its field of view must cover the image

    Returns:
        SystemMatrix of shape (n_views * n_bins, rows * cols)

    Raises:
        GeometryError: If the image is wider or taller than the field of view
    """
    geom.check_field_of_view()
    indptr = np.zeros(geom.n_rays + 1, dtype=np.int64)
    index_chunks = []
    weight_chunks = []
    ray = 0
    for angle in geom.view_angles():
        source = geom.source_position(angle)
        for target in geom.detector_points(angle):
            indices, weights = trace_ray(source, target, geom.image_size, geom.pixel_size)
            index_chunks.append(indices)
            weight_chunks.append(weights)
            indptr[ray + 1] = indptr[ray] + indices.size
            ray += 1

    indices = np.concatenate(index_chunks) if index_chunks else np.empty(0, dtype=np.int64)
    weights = np.concatenate(weight_chunks) if weight_chunks else np.empty(0, dtype=np.float64)
    matrix = sparse.csr_matrix(
        (weights, indices, indptr),
        shape=(geom.n_rays, geom.n_pixels),
        dtype=np.float64,
    )
    logger.info(
        f"Built system matrix {matrix.shape[0]}x{matrix.shape[1]} with {matrix.nnz} entries "
        f"({geom.n_views} views, {geom.n_bins} bins)"
    )
    return SystemMatrix(geometry=geom, matrix=matrix)


def forward_project(A: SystemMatrix, x: np.ndarray) -> np.ndarray:
    """
    Line integrals y = A x.

    Args:
        A: System matrix of the scan
        x: Attenuation image (mm^-1) with A.cols entries, any shape

    Returns:
        (n_views, n_bins) sinogram in the wider of x's dtype and float32
    """
    x = require_size("image", x, A.cols)
    dtype = np.result_type(x.dtype, np.float32)
    y = A.as_dtype(dtype) @ x.reshape(-1).astype(dtype, copy=False)
    return y.reshape(A.geometry.sinogram_shape)


def back_project(A: SystemMatrix, y: np.ndarray) -> np.ndarray:
    """
    Adjoint A^T y with the same weights as forward_project.

    Args:
        A: System matrix of the scan
        y: Sinogram with A.rows entries, any shape

    Returns:
        Image of shape geometry.image_size
    """
    y = require_size("sinogram", y, A.rows)
    dtype = np.result_type(y.dtype, np.float32)
    x = A.as_dtype(dtype).T @ y.reshape(-1).astype(dtype, copy=False)
    return x.reshape(A.geometry.image_size)
