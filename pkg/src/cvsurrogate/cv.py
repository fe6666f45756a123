"""Analytical collective variables and their closed-form Jacobians.

Both CVs read a flat coordinate vector whose first three entries are the
Mg position. Every evaluator accepts a single vector of shape ``(D,)`` or a
batch of shape ``(n, D)`` and returns matching shapes.
"""

from __future__ import annotations

import abc

import numpy as np
from scipy.special import expit

from .geometry import Configuration, SimBox, min_image_displacement

# Standard atomic weights, amu
ATOMIC_MASSES = {"Mg": 24.305, "Cl": 35.453, "O": 15.999, "H": 1.008}


class SingularConfigurationError(ValueError):
    """Raised when a Jacobian is requested where it is undefined (zero distance)."""


def as_coords(x, input_dim: int) -> np.ndarray:
    if isinstance(x, Configuration):
        x = x.coords
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (input_dim,) or x.ndim > 2:
        raise ValueError(f"expected coordinates of shape ({input_dim},) or (n, {input_dim}), got {x.shape}")
    return x


class CVFunction(abc.ABC):
    """A scalar CV of Cartesian coordinates that can report its Jacobian."""

    name: str
    input_dim: int

    @abc.abstractmethod
    def value(self, x) -> np.ndarray | float:
        ...

    @abc.abstractmethod
    def jacobian(self, x) -> np.ndarray:
        ...

    def atoms(self) -> list[str]:
        """Element symbol of each atom the CV reads, in input order."""
        raise NotImplementedError


class DistanceCV(CVFunction):
    """Minimum-image Mg–Cl distance; input ``[x_Mg, y_Mg, z_Mg, x_Cl, y_Cl, z_Cl]``."""

    name = "distance"
    input_dim = 6

    def __init__(self, box: SimBox | None = None):
        self.box = box or SimBox()

    def __repr__(self):
        return f"DistanceCV(box={self.box})"

    def _displacement(self, x):
        x = as_coords(x, self.input_dim)
        return x, min_image_displacement(x[..., 0:3], x[..., 3:6], self.box)

    def value(self, x):
        _, delta = self._displacement(x)
        d = np.linalg.norm(delta, axis=-1)
        return d if d.ndim else float(d)

    def jacobian(self, x):
        _, delta = self._displacement(x)
        d = np.linalg.norm(delta, axis=-1, keepdims=True)
        if np.any(d == 0.0):
            raise SingularConfigurationError("Mg and Cl coincide; distance gradient is undefined")
        unit = delta / d
        return np.concatenate([unit, -unit], axis=-1)

    def atoms(self):
        return ["Mg", "Cl"]


class CoordinationCV(CVFunction):
    """Smooth count of oxygens around Mg with a tanh switch.

    Each oxygen contributes ``0.5 * (1 + tanh(k * (r0 - d)))``, evaluated as
    ``expit(2 k (r0 - d))`` which is the same function without the loss of
    precision in the tails.
    """

    name = "coordination"

    def __init__(self, box: SimBox | None = None, r0: float = 0.265, k: float = 30.0, n_oxygens: int = 20):
        if r0 <= 0 or k <= 0:
            raise ValueError("r0 and k must be positive")
        if n_oxygens < 1:
            raise ValueError("need at least one oxygen")
        self.box = box or SimBox()
        self.r0 = float(r0)
        self.k = float(k)
        self.n_oxygens = int(n_oxygens)
        self.input_dim = 3 + 3 * self.n_oxygens

    def __repr__(self):
        return f"CoordinationCV(box={self.box}, r0={self.r0}, k={self.k}, n_oxygens={self.n_oxygens})"

    def _geometry(self, x):
        x = as_coords(x, self.input_dim)
        mg = x[..., None, 0:3]
        oxygens = x[..., 3:].reshape(x.shape[:-1] + (self.n_oxygens, 3))
        delta = min_image_displacement(oxygens, mg, self.box)  # O_i - Mg
        return delta, np.linalg.norm(delta, axis=-1)

    def switch(self, d):
        return expit(2.0 * self.k * (self.r0 - np.asarray(d, dtype=np.float64)))

    def switch_derivative(self, d):
        """d(switch)/dd = -(k/2) sech^2(k (r0 - d))."""
        z2 = 2.0 * self.k * (self.r0 - np.asarray(d, dtype=np.float64))
        # sech^2(z) = 4 expit(2z) expit(-2z); no overflow for any z
        return -2.0 * self.k * expit(z2) * expit(-z2)

    def value(self, x):
        _, d = self._geometry(x)
        c = self.switch(d).sum(axis=-1)
        return c if c.ndim else float(c)

    def jacobian(self, x):
        delta, d = self._geometry(x)
        if np.any(d == 0.0):
            raise SingularConfigurationError("an oxygen coincides with Mg; coordination gradient is undefined")
        blocks = (self.switch_derivative(d) / d)[..., None] * delta
        mg_block = -blocks.sum(axis=-2)
        out = np.concatenate([mg_block[..., None, :], blocks], axis=-2)
        return out.reshape(out.shape[:-2] + (self.input_dim,))

    def atoms(self):
        return ["Mg"] + ["O"] * self.n_oxygens


def make_cv(name: str, box: SimBox | None = None) -> CVFunction:
    if name == "distance":
        return DistanceCV(box)
    if name == "coordination":
        return CoordinationCV(box)
    raise ValueError(f"unknown CV {name!r}; expected 'distance' or 'coordination'")


def mass_vector(cv: CVFunction, masses: dict[str, float] | None = None) -> np.ndarray:
    """Per-coordinate mass vector (each atomic mass repeated three times)."""
    table = dict(ATOMIC_MASSES)
    if masses:
        table.update(masses)
    return np.repeat([table[a] for a in cv.atoms()], 3).astype(np.float64)
