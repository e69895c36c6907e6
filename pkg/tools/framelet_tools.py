"""
Framelet filter bank tools.

Kernels act by true 2D convolution with periodic boundaries:
(f ⊗ x)[p] = sum_m f[m] x[p - m], m measured from the kernel center. The
adjoint is the matching periodic correlation, so analysis/adjoint pairs are
exact and the linear B-spline bank is a tight frame:
H0^T H0 + sum_i F_i^T F_i = I.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils.constants import BANK_KINDS
from utils.error_handling import ValidationError
from utils.validation import require_choice, require_ndim

logger = logging.getLogger(__name__)

# A stack of L subband images of shape (L, rows, cols).
SubbandStack = np.ndarray

_SQ2 = math.sqrt(2.0) / 4.0
BSPLINE_1D: Tuple[np.ndarray, ...] = (
    np.array([0.25, 0.5, 0.25]),
    np.array([_SQ2, 0.0, -_SQ2]),
    np.array([-0.25, 0.5, -0.25]),
)


@dataclass
class FilterBank:
    """High-pass kernels f_i (odd support) plus the optional low-pass h0 h0^T.

    Kind `none` carries no high-pass kernels; its coupling channel is the
    identity so that z = x.
    """
    kind: str
    highpass: List[np.ndarray]
    lowpass: Optional[np.ndarray] = None
    _identity: np.ndarray = field(default_factory=lambda: np.ones((1, 1)), repr=False)

    @property
    def L(self) -> int:
        return len(self.highpass)

    @property
    def channels(self) -> int:
        """Number of coupling channels used by the inversion block."""
        return max(self.L, 1)

    @property
    def learnable(self) -> bool:
        return self.kind == "learnable"

    def coupling_kernels(self) -> List[np.ndarray]:
        return self.highpass if self.highpass else [self._identity]

    def kernel_array(self) -> np.ndarray:
        """High-pass kernels stacked as (L, kh, kw)."""
        return np.stack(self.highpass) if self.highpass else np.zeros((0, 1, 1))

    def set_kernels(self, kernels: np.ndarray):
        if not self.learnable:
            raise ValidationError(f"Kernels of a '{self.kind}' bank are fixed")
        kernels = require_ndim("kernels", kernels, 3)
        if kernels.shape[0] != self.L:
            raise ValidationError(f"Expected {self.L} kernels, got {kernels.shape[0]}")
        self.highpass = [np.array(k, dtype=np.float64) for k in kernels]


def bspline_kernels() -> List[np.ndarray]:
    """The 8 tensor products h_k1 h_k2^T excluding h0 h0^T."""
    return [
        np.outer(BSPLINE_1D[k1], BSPLINE_1D[k2])
        for k1 in range(3)
        for k2 in range(3)
        if (k1, k2) != (0, 0)
    ]


def gradient_kernels() -> List[np.ndarray]:
    """Backward differences along columns and rows, embedded in 3x3."""
    dx = np.zeros((3, 3))
    dx[1, 1], dx[1, 2] = 1.0, -1.0
    dy = np.zeros((3, 3))
    dy[1, 1], dy[2, 1] = 1.0, -1.0
    return [dx, dy]


def build_filter_bank(kind: str, kernels: Optional[Sequence[np.ndarray]] = None) -> FilterBank:
    """
    Build a bank of the given kind.

    Args:
        kind: "bspline-linear", "gradient", "learnable" or "none"
        kernels: Initial odd-support kernels; required for "learnable"
            (usually bspline_kernels()) and ignored otherwise

    Returns:
        FilterBank whose coupling channels follow the kernel order

    Raises:
        ValidationError: If the kind is unknown or a learnable kernel is
            missing, not 2D or of even support
    """
    require_choice("bank kind", kind, BANK_KINDS)
    if kind == "bspline-linear":
        return FilterBank(kind, bspline_kernels(), lowpass=np.outer(BSPLINE_1D[0], BSPLINE_1D[0]))
    if kind == "gradient":
        return FilterBank(kind, gradient_kernels())
    if kind == "none":
        return FilterBank(kind, [])

    if kernels is None:
        raise ValidationError("A learnable filter bank needs initial kernels")
    highpass = []
    for i, kernel in enumerate(kernels):
        kernel = require_ndim(f"kernel {i}", np.array(kernel, dtype=np.float64), 2)
        if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValidationError(f"Kernel {i} has even support {kernel.shape}")
        highpass.append(kernel)
    return FilterBank(kind, highpass)


def _taps(kernel: np.ndarray) -> Iterator[Tuple[float, int, int]]:
    cr, cc = kernel.shape[0] // 2, kernel.shape[1] // 2
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            if kernel[a, b] != 0.0:
                yield kernel[a, b], a - cr, b - cc


def convolve(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Periodic convolution f ⊗ x."""
    out = np.zeros_like(x)
    for value, dr, dc in _taps(kernel):
        out += value * np.roll(x, (dr, dc), axis=(0, 1))
    return out


def correlate(kernel: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Adjoint of `convolve` for the same kernel."""
    out = np.zeros_like(z)
    for value, dr, dc in _taps(kernel):
        out += value * np.roll(z, (-dr, -dc), axis=(0, 1))
    return out


def _check_image(bank: FilterBank, x: np.ndarray) -> np.ndarray:
    x = require_ndim("image", x, 2)
    for kernel in bank.coupling_kernels():
        if x.shape[0] < kernel.shape[0] or x.shape[1] < kernel.shape[1]:
            raise ValidationError(f"Image {x.shape} is smaller than kernel support {kernel.shape}")
    return x


def analyze(bank: FilterBank, x: np.ndarray) -> SubbandStack:
    """z_i = f_i ⊗ x for every coupling channel, shape (channels, rows, cols)."""
    x = _check_image(bank, np.asarray(x))
    return np.stack([convolve(k, x) for k in bank.coupling_kernels()])


def _check_stack(bank: FilterBank, z: SubbandStack) -> SubbandStack:
    z = require_ndim("subband stack", z, 3)
    if z.shape[0] != bank.channels:
        raise ValidationError(
            f"Subband stack has {z.shape[0]} channels, bank '{bank.kind}' has {bank.channels}",
            context={"channels": z.shape[0], "expected": bank.channels},
        )
    return z


def adjoint_channels(bank: FilterBank, z: SubbandStack) -> SubbandStack:
    """Per-channel F_i^T z_i, shape (channels, rows, cols)."""
    z = _check_stack(bank, np.asarray(z))
    return np.stack([correlate(k, z[i]) for i, k in enumerate(bank.coupling_kernels())])


def adjoint(bank: FilterBank, z: SubbandStack, channel: Optional[int] = None, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """sum_i w_i F_i^T z_i, or the single term of `channel` when given."""
    z = _check_stack(bank, np.asarray(z))
    kernels = bank.coupling_kernels()
    if channel is not None:
        if not 0 <= channel < len(kernels):
            raise ValidationError(f"Channel {channel} out of range for {len(kernels)} channels")
        return correlate(kernels[channel], z[channel])
    out = np.zeros(z.shape[1:], dtype=z.dtype)
    for i, kernel in enumerate(kernels):
        w = 1.0 if weights is None else weights[i]
        out += w * correlate(kernel, z[i])
    return out


def gram(bank: FilterBank, x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """sum_i w_i F_i^T F_i x."""
    return adjoint(bank, analyze(bank, x), weights=weights)


def lowpass_gram(bank: FilterBank, x: np.ndarray) -> np.ndarray:
    """H0^T H0 x; zero for banks without a low-pass kernel."""
    if bank.lowpass is None:
        return np.zeros_like(x)
    return correlate(bank.lowpass, convolve(bank.lowpass, x))


def kernel_gradient(a: np.ndarray, c: np.ndarray, kernel_shape: Tuple[int, int]) -> np.ndarray:
    """d<c, f ⊗ a>/df for a kernel of the given (odd) shape."""
    cr, cc = kernel_shape[0] // 2, kernel_shape[1] // 2
    grad = np.empty(kernel_shape)
    for i in range(kernel_shape[0]):
        for j in range(kernel_shape[1]):
            grad[i, j] = np.vdot(c, np.roll(a, (i - cr, j - cc), axis=(0, 1)))
    return grad


def autocorrelation_sum(filters: Sequence[np.ndarray] = BSPLINE_1D) -> np.ndarray:
    """sum_k h_k ⋆ h_k over the 1D filters (the tight-frame check: a delta)."""
    return sum(np.convolve(h, h[::-1]) for h in filters)
