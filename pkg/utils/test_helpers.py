"""
Test helper utilities for the AHP-Net toolkit.

Factories for tiny, fully valid problem instances and finite-difference
helpers. Shared by the unit tests and the `gradcheck` command.
"""

from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from tools.framelet_tools import FilterBank, analyze, build_filter_bank
from tools.geometry_tools import FanBeamGeometry, SystemMatrix, build_system_matrix, forward_project
from tools.inversion_tools import CgSettings, InversionProblem
from tools.nn_tools import LayerParams


class InstanceFactory:
    """Seeded factory for small geometries, images and inversion problems."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._matrices: Dict[Tuple[int, int], SystemMatrix] = {}

    @staticmethod
    def geometry(size: int = 8, n_views: Optional[int] = None) -> FanBeamGeometry:
        """Square image of 1 mm pixels, magnification 2, detector wide enough for the image."""
        return FanBeamGeometry(
            n_views=n_views or 2 * size,
            n_bins=3 * size,
            image_size=(size, size),
            pixel_size=1.0,
            detector_pixel=1.0,
            source_to_detector=20.0 * size,
            source_to_isocenter=10.0 * size,
        )

    def system_matrix(self, size: int = 8, n_views: Optional[int] = None) -> SystemMatrix:
        key = (size, n_views or 2 * size)
        if key not in self._matrices:
            self._matrices[key] = build_system_matrix(self.geometry(size, n_views))
        return self._matrices[key]

    def image(self, size: int = 8, scale: float = 0.02) -> np.ndarray:
        return scale * self.rng.random((size, size))

    def stack(self, bank: FilterBank, size: int = 8, scale: float = 0.01) -> np.ndarray:
        return scale * self.rng.standard_normal((bank.channels, size, size))

    def problem(
        self,
        size: int = 8,
        bank_kind: str = "bspline-linear",
        consistent: bool = False,
        betas: Optional[np.ndarray] = None,
        cg: Optional[CgSettings] = None
    ) -> Tuple[InversionProblem, np.ndarray]:
        """(problem, x_true). Consistent problems use y = A x and z = F x."""
        A = self.system_matrix(size)
        bank = build_filter_bank(bank_kind)
        x_true = self.image(size)
        y = forward_project(A, x_true)
        if consistent:
            z = analyze(bank, x_true)
        else:
            y = y + 0.01 * self.rng.standard_normal(y.shape)
            z = analyze(bank, x_true) + self.stack(bank, size, scale=1e-3)
        if betas is None:
            betas = 0.5 + self.rng.random(bank.channels)
        return InversionProblem(A, bank, y, z, betas, cg or CgSettings.verification()), x_true


def relative_error(a, b, floor: float = 1e-12) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise maximum over arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def central_difference(func: Callable[[], float], array: np.ndarray, index, step: float) -> float:
    """d func / d array[index] by central differences; the array is restored."""
    original = array[index]
    array[index] = original + step
    plus = func()
    array[index] = original - step
    minus = func()
    array[index] = original
    return (plus - minus) / (2.0 * step)


def finite_difference(func: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Full central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        grad[index] = central_difference(lambda: func(x), x, index, step)
    return grad


def random_directions(params: LayerParams, rng: np.random.Generator, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Unit-norm random direction over the selected parameter tensors."""
    names = list(names) if names is not None else [name for name, _ in params.items()]
    directions = {name: rng.standard_normal(params[name].shape) for name in names}
    norm = np.sqrt(sum(float(np.sum(d ** 2)) for d in directions.values()))
    return {name: d / norm for name, d in directions.items()}


def directional_difference(
    func: Callable[[], float],
    params: LayerParams,
    directions: Dict[str, np.ndarray],
    step: float
) -> float:
    """Central difference of func along a direction in parameter space."""
    originals = {name: params.params[name].value.copy() for name in directions}

    def shifted(sign: float) -> float:
        for name, d in directions.items():
            params.params[name].value = originals[name] + sign * step * d
        return func()

    try:
        plus = shifted(1.0)
        minus = shifted(-1.0)
    finally:
        for name, value in originals.items():
            params.params[name].value = value
    return (plus - minus) / (2.0 * step)


def directional_gradient(grads: Dict[str, np.ndarray], directions: Dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(grads[name] * d) for name, d in directions.items()))
