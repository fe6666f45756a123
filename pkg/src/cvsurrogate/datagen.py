"""Labeled CV datasets: uniform-random, structured (ion-pair/hydration-shell
stand-in for an MD trajectory), and externally supplied frames.

Dataset file format (text, UTF-8, ``\\n`` line endings)::

    # cvsurrogate-dataset v1 cv=<name> D=<int> L=<float> seed=<int|none> provenance=<tag> n=<int>
    # params=<compact JSON object, sorted keys>
    # columns=x0,...,x{D-1},value,j0,...,j{D-1}
    <D coordinates>,<value>,<D Jacobian entries>      (one row per frame, %.17g)

Floats are written with 17 significant digits so a load/save cycle is exact.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cv import CoordinationCV, CVFunction, DistanceCV, make_cv
from .geometry import SimBox, min_image_displacement

log = logging.getLogger(__name__)

FORMAT_TAG = "cvsurrogate-dataset"
FORMAT_VERSION = 1
PROVENANCES = ("uniform", "structured", "external")
CHUNK_ROWS = 1024
SINGULAR_DISTANCE = 1e-4  # nm, uniform rows closer than this are redrawn
OVERLAP_DISTANCE = 1e-3  # nm, structured rows closer than this are redrawn

_HEADER_RE = re.compile(
    r"^# cvsurrogate-dataset v(?P<v>\d+) cv=(?P<cv>\w+) D=(?P<D>\d+) L=(?P<L>\S+) "
    r"seed=(?P<seed>-?\d+|none) provenance=(?P<prov>\w+) n=(?P<n>\d+)$"
)


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (n, D), nm
    values: np.ndarray  # (n,)
    jacobians: np.ndarray  # (n, D)
    cv_name: str
    box: SimBox = field(default_factory=SimBox)
    provenance: str = "uniform"
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n, dim = self.inputs.shape
        if self.values.shape != (n,) or self.jacobians.shape != (n, dim):
            raise ValueError("inputs, values and jacobians disagree in shape")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def split(self, train_fraction: float = 0.8, seed: int = 0):
        """Seeded shuffle, then first ``train_fraction`` rows train, rest test."""
        if not 0.0 < train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        n_train = int(round(train_fraction * n))
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
        return perm[:n_train], perm[n_train:]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.inputs[idx], self.values[idx], self.jacobians[idx], self.cv_name,
                              self.box, self.provenance, self.seed, dict(self.params))


def label(cv: CVFunction, inputs: np.ndarray):
    return np.asarray(cv.value(inputs), dtype=np.float64).reshape(-1), cv.jacobian(inputs)


def _closest_approach(cv: CVFunction, x: np.ndarray) -> np.ndarray:
    """Smallest distance the CV differentiates through, per row."""
    if isinstance(cv, DistanceCV):
        return np.linalg.norm(min_image_displacement(x[:, :3], x[:, 3:6], cv.box), axis=-1)
    if isinstance(cv, CoordinationCV):
        ox = x[:, 3:].reshape(len(x), cv.n_oxygens, 3)
        return np.linalg.norm(min_image_displacement(ox, x[:, None, :3], cv.box), axis=-1).min(axis=1)
    return np.full(len(x), np.inf)


def _chunked(n: int, seed: int, draw, accept):
    """Generate ``n`` rows in fixed-size chunks, each with its own counter-seeded
    stream, so the output depends only on ``seed`` and ``n``."""
    chunks = []
    for c, start in enumerate(range(0, n, CHUNK_ROWS)):
        size = min(CHUNK_ROWS, n - start)
        rng = np.random.default_rng([seed, c])
        rows = draw(rng, size)
        bad = ~accept(rows)
        while bad.any():
            rows[bad] = draw(rng, int(bad.sum()))
            bad = ~accept(rows)
        chunks.append(rows)
    return np.concatenate(chunks, axis=0)


def gen_uniform(cv: CVFunction, n: int, box: SimBox | None = None, seed: int = 0) -> LabeledDataset:
    """Every coordinate i.i.d. uniform on ``[0, L)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    box = box or getattr(cv, "box", SimBox())
    L = box.edge_length
    dim = cv.input_dim
    x = _chunked(
        n, seed,
        draw=lambda rng, k: rng.uniform(0.0, L, size=(k, dim)),
        accept=lambda rows: _closest_approach(cv, rows) >= SINGULAR_DISTANCE,
    )
    y, jac = label(cv, x)
    return LabeledDataset(x, y, jac, cv.name, box, "uniform", seed, {})


@dataclass
class StructuredParams:
    """Knobs of the structured generator (distances in nm)."""

    contact_weight: float = 0.5
    contact_mean: float = 0.25
    contact_std: float = 0.03
    separated_mean: float = 0.50
    separated_std: float = 0.06
    shell_count: int = 6
    shell_mean: float = 0.21
    shell_std: float = 0.015
    outer_min: float = 0.4
    outer_max: float | None = None  # None means L/2
    shuffle_oxygens: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _directions(rng, shape):
    v = rng.standard_normal(shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def gen_structured(cv: CVFunction, n: int, box: SimBox | None = None, seed: int = 0,
                   params: StructuredParams | None = None) -> LabeledDataset:
    """Physically shaped configurations around a uniformly placed Mg.

    Distance CV: Mg–Cl separation from a two-Gaussian mixture (contact and
    solvent-separated basins). Coordination CV: ``shell_count`` oxygens on a
    first shell, the rest at uniform distances in ``[outer_min, outer_max]``.
    Directions are isotropic; positions are folded back into ``[0, L)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    p = params or StructuredParams()
    box = box or getattr(cv, "box", SimBox())
    L = box.edge_length

    if isinstance(cv, DistanceCV):
        def draw(rng, k):
            mg = rng.uniform(0.0, L, size=(k, 3))
            contact = rng.random(k) < p.contact_weight
            r = np.where(contact,
                         rng.normal(p.contact_mean, p.contact_std, k),
                         rng.normal(p.separated_mean, p.separated_std, k))
            cl = mg + r[:, None] * _directions(rng, (k,))
            return np.concatenate([mg, np.mod(cl, L)], axis=1)
    elif isinstance(cv, CoordinationCV):
        n_ox = cv.n_oxygens
        if not 0 <= p.shell_count <= n_ox:
            raise ValueError(f"shell_count must lie in [0, {n_ox}]")
        outer_max = 0.5 * L if p.outer_max is None else p.outer_max

        def draw(rng, k):
            mg = rng.uniform(0.0, L, size=(k, 3))
            r = np.concatenate([
                rng.normal(p.shell_mean, p.shell_std, (k, p.shell_count)),
                rng.uniform(p.outer_min, outer_max, (k, n_ox - p.shell_count)),
            ], axis=1)
            if p.shuffle_oxygens:
                r = rng.permuted(r, axis=1)
            ox = mg[:, None, :] + r[..., None] * _directions(rng, (k, n_ox))
            return np.concatenate([mg, np.mod(ox, L).reshape(k, -1)], axis=1)
    else:
        raise TypeError(f"no structured generator for {type(cv).__name__}")

    x = _chunked(n, seed, draw, accept=lambda rows: _closest_approach(cv, rows) >= OVERLAP_DISTANCE)
    y, jac = label(cv, x)
    return LabeledDataset(x, y, jac, cv.name, box, "structured", seed, p.to_dict())


def load_external(path, cv: CVFunction, box: SimBox | None = None) -> LabeledDataset:
    """Read frames of raw coordinates and label them with the oracle.

    Each non-comment row holds ``D`` coordinates, optionally followed by a
    value column and ``D`` Jacobian columns; those labels are only compared
    against the oracle (which always wins). Commas or whitespace delimit.
    """
    dim = cv.input_dim
    rows = []
    supplied = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.replace(",", " ").split()
            if len(fields) not in (dim, dim + 1, 2 * dim + 1):
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {dim} coordinates (optionally + value + {dim} Jacobian), got {len(fields)} columns")
            try:
                nums = [float(f) for f in fields]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(nums)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite number")
            rows.append(nums[:dim])
            supplied.append(nums[dim:dim + 1])
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    y, jac = label(cv, x)
    given = [(i, s[0]) for i, s in enumerate(supplied) if s]
    if given:
        idx, vals = map(np.array, zip(*given))
        off = np.abs(vals - y[idx]) > 1e-12 * np.maximum(1.0, np.abs(y[idx]))
        if off.any():
            log.warning("%s: %d of %d supplied labels disagree with the %s oracle; using oracle values",
                        path, int(off.sum()), len(given), cv.name)
    return LabeledDataset(x, y, jac, cv.name, box or getattr(cv, "box", SimBox()), "external", None, {})


def save_dataset(ds: LabeledDataset, path) -> None:
    dim = ds.input_dim
    seed = "none" if ds.seed is None else str(int(ds.seed))
    cols = [f"x{i}" for i in range(dim)] + ["value"] + [f"j{i}" for i in range(dim)]
    header = "\n".join([
        f"{FORMAT_TAG} v{FORMAT_VERSION} cv={ds.cv_name} D={dim} L={ds.box.edge_length!r} "
        f"seed={seed} provenance={ds.provenance} n={len(ds)}",
        "params=" + json.dumps(ds.params, sort_keys=True, separators=(",", ":")),
        "columns=" + ",".join(cols),
    ])
    table = np.concatenate([ds.inputs, ds.values[:, None], ds.jacobians], axis=1)
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="# ", encoding="utf-8")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        second = fh.readline().rstrip("\n")
    m = _HEADER_RE.match(first)
    if not m:
        raise DatasetFormatError(f"{path}: not a {FORMAT_TAG} file (bad header line)")
    if int(m["v"]) != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {m['v']}")
    if not second.startswith("# params="):
        raise DatasetFormatError(f"{path}: missing params line")
    return {
        "cv": m["cv"], "D": int(m["D"]), "L": float(m["L"]),
        "seed": None if m["seed"] == "none" else int(m["seed"]),
        "provenance": m["prov"], "n": int(m["n"]),
        "params": json.loads(second[len("# params="):]),
    }


def load_dataset(path, check_fraction: float = 0.01) -> LabeledDataset:
    """Read a dataset file and re-verify labels on a sample of rows."""
    meta = read_header(path)
    dim = meta["D"]
    try:
        table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=np.float64, encoding="utf-8")
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
    if table.shape != (meta["n"], 2 * dim + 1):
        raise DatasetFormatError(f"{path}: table shape {table.shape} does not match header (n={meta['n']}, D={dim})")
    box = SimBox(meta["L"])
    ds = LabeledDataset(table[:, :dim].copy(), table[:, dim].copy(), table[:, dim + 1:].copy(),
                        meta["cv"], box, meta["provenance"], meta["seed"], meta["params"])
    cv = make_cv(meta["cv"], box)
    if cv.input_dim != dim:
        raise DatasetFormatError(f"{path}: cv {meta['cv']} expects D={cv.input_dim}, header says {dim}")
    verify_labels(ds, cv, check_fraction)
    return ds


def verify_labels(ds: LabeledDataset, cv: CVFunction, fraction: float = 0.01, tol: float = 1e-12) -> None:
    n = len(ds)
    k = max(1, int(np.ceil(fraction * n)))
    idx = np.linspace(0, n - 1, k).astype(int)
    y, jac = label(cv, ds.inputs[idx])
    if not (np.allclose(y, ds.values[idx], rtol=0, atol=tol) and np.allclose(jac, ds.jacobians[idx], rtol=0, atol=tol)):
        raise DatasetFormatError("stored labels do not reproduce the analytical oracle")
