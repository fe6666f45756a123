"""Metadynamics bias, metric tensor and instantaneous collective force.

Units follow the usual MD convention (nm, ps, amu, kJ/mol): with masses in
amu and time in ps, ``d/dt(Z^-1 dxi/dt)`` comes out in kJ/mol per CV unit,
the same unit as the bias force.

File formats (text)::

    hills:       # time,center[,center2...],height,sigma     then one hill per row
    trajectory:  # cvsurrogate-trajectory v1 cv=<name> D=<int> L=<float> dt=<ps> t0=<ps>
                 then one frame per row, D coordinates (commas or whitespace)
    icf output:  # frame,time,xi,Z,f,endpoint_flag
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cv import CVFunction
from .geometry import SimBox

MIN_FRAMES = 5
COND_WARN = 1e12

_TRAJ_RE = re.compile(
    r"^# cvsurrogate-trajectory v1 cv=(?P<cv>\w+) D=(?P<D>\d+) L=(?P<L>\S+) dt=(?P<dt>\S+) t0=(?P<t0>\S+)$"
)


class SingularMetricError(np.linalg.LinAlgError):
    def __init__(self, frame: int, detail: str = ""):
        super().__init__(f"metric tensor is singular at frame {frame}{': ' + detail if detail else ''}")
        self.frame = frame


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class BiasHills:
    """Deposited Gaussian hills. ``centers`` is ``(n,)`` for one CV or ``(n, k)``."""

    times: np.ndarray
    centers: np.ndarray
    heights: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.heights = np.asarray(self.heights, dtype=np.float64).reshape(-1)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        n = self.times.size
        if self.centers.ndim == 2 and self.centers.shape[1] == 1:
            self.centers = self.centers[:, 0]
        if self.heights.size != n or self.sigmas.size != n or self.centers.shape[:1] != (n,):
            raise ValueError("hill arrays disagree in length")
        if np.any(self.heights < 0):
            raise ValueError("hill heights must be non-negative")
        if np.any(self.sigmas <= 0):
            raise ValueError("hill widths must be positive")

    @classmethod
    def empty(cls, n_cv: int = 1) -> "BiasHills":
        shape = (0,) if n_cv == 1 else (0, n_cv)
        return cls(np.zeros(0), np.zeros(shape), np.zeros(0), np.zeros(0))

    def __len__(self):
        return self.times.size

    @property
    def n_cv(self) -> int:
        return 1 if self.centers.ndim == 1 else self.centers.shape[1]


def _gaussians(hills: BiasHills, xi, t):
    """Per-hill Gaussian weights ``w exp(-|xi - c|^2 / 2 sigma^2)`` and offsets ``xi - c``."""
    xi = np.asarray(xi, dtype=np.float64)
    active = np.ones(len(hills), dtype=bool) if t is None else hills.times < t
    c, w, s = hills.centers[active], hills.heights[active], hills.sigmas[active]
    if hills.n_cv == 1:
        diff = xi[..., None] - c
        sq = diff ** 2
    else:
        diff = xi[..., None, :] - c
        sq = np.sum(diff ** 2, axis=-1)
    return w * np.exp(-sq / (2.0 * s ** 2)), diff, s


def bias_potential(hills: BiasHills, xi, t: float | None = None):
    """Sum of hills deposited strictly before ``t`` (all hills if ``t`` is None)."""
    g, _, _ = _gaussians(hills, xi, t)
    v = g.sum(axis=-1)
    return v if np.ndim(v) else float(v)


def bias_force(hills: BiasHills, xi, t: float | None = None):
    """Negative CV gradient of :func:`bias_potential`."""
    g, diff, s = _gaussians(hills, xi, t)
    if hills.n_cv == 1:
        f = np.sum(g * diff / s ** 2, axis=-1)
        return f if np.ndim(f) else float(f)
    return np.sum((g / s ** 2)[..., None] * diff, axis=-2)


def metric_tensor(jacobians, masses) -> np.ndarray:
    """``Z = J M^-1 J^T`` for CV Jacobians ``J`` of shape ``(..., n_cv, D)``.

    A bare ``(D,)`` Jacobian is treated as a single CV and gives a 1x1 matrix;
    ``masses`` is the per-coordinate mass vector of length ``D``.
    """
    jac = np.asarray(jacobians, dtype=np.float64)
    m = np.asarray(masses, dtype=np.float64).reshape(-1)
    if jac.ndim == 1:
        jac = jac[None, :]
    if jac.shape[-1] != m.size:
        raise ValueError(f"Jacobian has {jac.shape[-1]} coordinates but {m.size} masses were given")
    if np.any(m <= 0):
        raise ValueError("masses must be positive")
    z = np.einsum("...ad,...bd->...ab", jac / m, jac)
    return 0.5 * (z + np.swapaxes(z, -1, -2))  # exact symmetry despite rounding order


@dataclass
class ICFResult:
    times: np.ndarray
    xi: np.ndarray
    f: np.ndarray
    endpoint: np.ndarray  # True where a one-sided stencil entered the estimate


def icf(xi_series, z_series, dt: float, hills: BiasHills | None = None, t0: float = 0.0) -> ICFResult:
    """Instantaneous collective force ``f = d/dt(Z^-1 dxi/dt) - F_bias(xi)``.

    ``Z^-1`` sits inside the outer time derivative. Both time derivatives use
    the 3-point central stencil, with second-order one-sided stencils at the
    ends; frames whose value touches a one-sided stencil (the first two and
    last two) are flagged.

    ``xi_series`` is ``(n,)`` or ``(n, k)``; ``z_series`` is ``(n,)``, ``(n, 1, 1)``
    or ``(n, k, k)``. Bias forces at frame time ``t`` use hills with time < t.
    """
    xi = np.asarray(xi_series, dtype=np.float64)
    z = np.asarray(z_series, dtype=np.float64)
    n = xi.shape[0]
    if n < MIN_FRAMES:
        raise ValueError(f"ICF stencils need at least {MIN_FRAMES} frames, got {n}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    scalar = xi.ndim == 1
    k = 1 if scalar else xi.shape[1]
    z = z.reshape(n, k, k)
    times = t0 + dt * np.arange(n)

    vel = np.gradient(xi.reshape(n, k), dt, axis=0, edge_order=2)
    mom = np.empty_like(vel)
    for i in range(n):
        if k == 1:
            if not z[i, 0, 0] > 0.0:
                raise SingularMetricError(i, f"Z = {z[i, 0, 0]!r}")
            mom[i] = vel[i] / z[i, 0, 0]
            continue
        cond = np.linalg.cond(z[i])
        if not cond < 1.0 / np.finfo(np.float64).eps:
            raise SingularMetricError(i, f"cond = {cond:.3g}")
        if cond > COND_WARN:
            warnings.warn(f"metric tensor at frame {i} is ill-conditioned (cond={cond:.3g})", RuntimeWarning)
        try:
            mom[i] = np.linalg.solve(z[i], vel[i])
        except np.linalg.LinAlgError:
            raise SingularMetricError(i) from None
    f = np.gradient(mom, dt, axis=0, edge_order=2)

    if hills is not None and len(hills):
        if hills.n_cv != k:
            raise ValueError(f"hills are over {hills.n_cv} CVs, trajectory over {k}")
        for i in range(n):
            f[i] -= np.reshape(bias_force(hills, xi[i], times[i]), k)

    endpoint = np.zeros(n, dtype=bool)
    endpoint[[0, 1, -2, -1]] = True
    return ICFResult(times, xi, f[:, 0] if scalar else f, endpoint)


@dataclass
class Trajectory:
    coords: np.ndarray  # (n_frames, D), nm
    dt: float  # ps
    cv_name: str
    box: SimBox = field(default_factory=SimBox)
    t0: float = 0.0

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class PipelineResult:
    times: np.ndarray
    xi: np.ndarray
    z: np.ndarray
    f: np.ndarray
    endpoint: np.ndarray


def run_pipeline(traj: Trajectory, value_cv: CVFunction, jacobian_cv: CVFunction, masses,
                 hills: BiasHills | None = None) -> PipelineResult:
    """CV values from ``value_cv``, Jacobians (hence Z) from ``jacobian_cv``."""
    if len(traj) < MIN_FRAMES:
        raise ValueError(f"ICF stencils need at least {MIN_FRAMES} frames, got {len(traj)}")
    xi = np.asarray(value_cv.value(traj.coords), dtype=np.float64).reshape(-1)
    z = metric_tensor(jacobian_cv.jacobian(traj.coords)[:, None, :], masses)[:, 0, 0]
    res = icf(xi, z, traj.dt, hills, traj.t0)
    return PipelineResult(res.times, xi, z, res.f, res.endpoint)


def _read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                rows.append((lineno, [float(v) for v in text.replace(",", " ").split()]))
            except ValueError as exc:
                raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def load_hills(path) -> BiasHills:
    rows = _read_rows(path)
    if not rows:
        return BiasHills.empty()
    width = len(rows[0][1])
    for lineno, r in rows:
        if len(r) != width or width < 4:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected time, center(s), height, sigma")
    a = np.array([r for _, r in rows])
    return BiasHills(a[:, 0], a[:, 1:-2], a[:, -2], a[:, -1])


def save_hills(hills: BiasHills, path) -> None:
    centers = hills.centers.reshape(len(hills), hills.n_cv)
    names = ["center"] if hills.n_cv == 1 else [f"center{i + 1}" for i in range(hills.n_cv)]
    np.savetxt(path, np.column_stack([hills.times, centers, hills.heights, hills.sigmas]), fmt="%.17g",
               delimiter=",", header=",".join(["time", *names, "height", "sigma"]), comments="# ")


def load_trajectory(path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    m = _TRAJ_RE.match(first)
    if not m:
        raise TrajectoryFormatError(f"{path}: bad trajectory header")
    dim = int(m["D"])
    rows = _read_rows(path)
    for lineno, r in rows:
        if len(r) != dim:
            raise TrajectoryFormatError(f"{path}:{lineno}: expected {dim} coordinates, got {len(r)}")
    coords = np.array([r for _, r in rows], dtype=np.float64).reshape(-1, dim)
    return Trajectory(coords, float(m["dt"]), m["cv"], SimBox(float(m["L"])), float(m["t0"]))


def save_trajectory(traj: Trajectory, path) -> None:
    header = (f"cvsurrogate-trajectory v1 cv={traj.cv_name} D={traj.coords.shape[1]} "
              f"L={traj.box.edge_length!r} dt={traj.dt!r} t0={traj.t0!r}")
    np.savetxt(path, traj.coords, fmt="%.17g", delimiter=",", header=header, comments="# ")


def save_icf(result: PipelineResult, path) -> None:
    n = len(result.times)
    table = np.column_stack([np.arange(n), result.times, result.xi, result.z, result.f, result.endpoint.astype(int)])
    np.savetxt(path, table, fmt=["%d", "%.17g", "%.17g", "%.17g", "%.17g", "%d"], delimiter=",",
               header="frame,time,xi,Z,f,endpoint_flag", comments="# ")
