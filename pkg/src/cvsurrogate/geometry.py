"""Cubic periodic box, coordinate wrapping and minimum-image displacements.

The wrap is computed exactly: ``fmod`` is exact in IEEE arithmetic and the
single correction by ``L`` falls in Sterbenz range, so ``wrap(x)`` equals
``x - n*L`` with no rounding. Shifting an input by a whole box therefore
produces a bit-identical wrapped value whenever the shifted input itself is
representable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BOX_LENGTH = 2.7  # nm


@dataclass(frozen=True)
class SimBox:
    """Cubic simulation box with edge length in nm."""

    edge_length: float = DEFAULT_BOX_LENGTH

    def __post_init__(self):
        L = float(self.edge_length)
        if not np.isfinite(L) or L <= 0.0:
            raise ValueError(f"box edge length must be positive and finite, got {self.edge_length!r}")
        object.__setattr__(self, "edge_length", L)

    @property
    def half(self) -> float:
        return 0.5 * self.edge_length

    @property
    def max_distance(self) -> float:
        """Largest possible minimum-image distance, half the body diagonal."""
        return 0.5 * np.sqrt(3.0) * self.edge_length


@dataclass(frozen=True)
class Configuration:
    """Flat Cartesian coordinate vector (nm) together with its box.

    Coordinates may lie outside the primary box; consumers wrap them.
    """

    coords: np.ndarray
    box: SimBox = field(default_factory=SimBox)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1)
        if coords.size == 0 or coords.size % 3:
            raise ValueError(f"coordinate vector length must be a positive multiple of 3, got {coords.size}")
        object.__setattr__(self, "coords", coords)

    @property
    def n_atoms(self) -> int:
        return self.coords.size // 3

    def positions(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite coordinate")


def wrap_coordinate(x, box: SimBox):
    """Map coordinates into the primary cell ``[-L/2, L/2)``.

    Equivalent to ``remainder(x + L/2, L) - L/2`` with a floored remainder,
    but evaluated without rounding. A value landing exactly on ``+L/2`` is
    mapped to ``-L/2``.

    Accepts scalars or arrays; returns the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    L = box.edge_length
    half = 0.5 * L
    r = np.fmod(x, L)
    r = np.where(r >= half, r - L, r)
    r = np.where(r < -half, r + L, r)
    return r if r.ndim else float(r)


def seam_mask(x, box: SimBox) -> np.ndarray:
    """True where a coordinate sits exactly on the wrap discontinuity."""
    return np.asarray(wrap_coordinate(x, box)) == -box.half


def min_image_displacement(a, b, box: SimBox):
    """Minimum-image displacement ``a - b``; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_finite(a)
    _check_finite(b)
    return wrap_coordinate(a - b, box)


def min_image_distance(a, b, box: SimBox):
    return np.linalg.norm(min_image_displacement(a, b, box), axis=-1)
