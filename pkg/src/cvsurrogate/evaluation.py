"""Accuracy measurement for CV surrogates: value and Jacobian RMSE/MAE,
error histograms, predicted-vs-analytical heatmaps, error moments and a
finite-difference cross-check of the reverse-mode Jacobian.

Any object with ``value(x)`` and ``jacobian(x)`` can be evaluated, so the
analytical oracle doubles as a self-test model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cv import CVFunction
from .datagen import LabeledDataset

REPORT_FORMAT = "cvsurrogate-eval-report"
REPORT_VERSION = 1
JACOBIAN_UNITS = {"distance": "dimensionless (nm/nm)", "coordination": "1/nm"}
VALUE_UNITS = {"distance": "nm", "coordination": "dimensionless"}


def _rows(dataset: LabeledDataset, indices):
    return slice(None) if indices is None else np.asarray(indices)


def value_metrics(model: CVFunction, dataset: LabeledDataset, indices=None):
    """Returns ``(rmse, mae, errors)`` with ``errors = predicted - analytical``."""
    rows = _rows(dataset, indices)
    err = np.asarray(model.value(dataset.inputs[rows])).reshape(-1) - dataset.values[rows]
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))), err


def jacobian_metrics(model: CVFunction, dataset: LabeledDataset, indices=None):
    """Jacobian errors pooled over samples and dimensions.

    Returns ``(rmse, mae, errors)`` where ``errors`` has shape ``(n, D)``.
    """
    rows = _rows(dataset, indices)
    err = np.asarray(model.jacobian(dataset.inputs[rows])) - dataset.jacobians[rows]
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))), err


def _edges(lo: float, hi: float, n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def _bin_index(values: np.ndarray, edges: np.ndarray):
    """Bin of each value, half-open bins with the last one closed; values
    outside the edges are clipped into the edge bins."""
    n_bins = len(edges) - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = n_bins - 1
    outside = (values < edges[0]) | (values > edges[-1])
    return np.clip(idx, 0, n_bins - 1), int(outside.sum())


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    n_clipped: int = 0


def histogram(values, n_bins: int = 100, range=None) -> Histogram:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = range if range is not None else (values.min(), values.max())
    edges = _edges(float(lo), float(hi), n_bins)
    idx, clipped = _bin_index(values, edges)
    return Histogram(edges, np.bincount(idx, minlength=n_bins), clipped)


@dataclass
class Heatmap:
    edges: np.ndarray  # shared by both axes
    counts: np.ndarray  # counts[i, j]: analytical bin i, predicted bin j
    n_clipped: int = 0


def heatmap_bins(analytical, predicted, n_bins: int = 100, range=None) -> Heatmap:
    """2-D histogram of (analytical, predicted) pairs on a common square grid.

    The default range spans the observed data of both arrays, so the
    diagonal of the grid is the line of unity.
    """
    a = np.asarray(analytical, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise ValueError("analytical and predicted must have equal length")
    if range is None:
        range = (min(a.min(), p.min()), max(a.max(), p.max()))
    edges = _edges(float(range[0]), float(range[1]), n_bins)
    ia, ca = _bin_index(a, edges)
    ip, cp = _bin_index(p, edges)
    counts = np.bincount(ia * n_bins + ip, minlength=n_bins * n_bins).reshape(n_bins, n_bins)
    clipped = int(((a < edges[0]) | (a > edges[-1]) | (p < edges[0]) | (p > edges[-1])).sum())
    return Heatmap(edges, counts, clipped)


@dataclass
class Moments:
    mean: float
    std: float
    skewness: float  # nan when undefined (zero variance)
    excess_kurtosis: float
    n: int


def gaussianity_summary(errors) -> Moments:
    """Population moments of an error sample; no hypothesis test is made."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size < 8:
        raise ValueError("need at least 8 samples for moment estimates")
    if np.all(e == e[0]):  # the rounded mean of a constant need not equal it
        return Moments(float(e[0]), 0.0, float("nan"), float("nan"), e.size)
    mean = float(e.mean())
    c = e - mean
    var = float(np.mean(c ** 2))
    std = np.sqrt(var)
    return Moments(mean, float(std), float(np.mean(c ** 3) / std ** 3),
                   float(np.mean(c ** 4) / var ** 2 - 3.0), e.size)


def central_difference(value_fn, x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function for each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, dim = x.shape
    steps = h * np.eye(dim)
    plus = x[:, None, :] + steps
    minus = x[:, None, :] - steps
    fp = np.asarray(value_fn(plus.reshape(-1, dim))).reshape(n, dim)
    fm = np.asarray(value_fn(minus.reshape(-1, dim))).reshape(n, dim)
    # divide by the step actually taken after rounding
    taken = np.diagonal(plus - minus, axis1=1, axis2=2)
    return (fp - fm) / taken


def relative_error(jac, ref) -> np.ndarray:
    """Row-wise ``max|jac - ref| / max(max|jac|, max|ref|)``; zero when both vanish."""
    jac = np.atleast_2d(jac)
    ref = np.atleast_2d(ref)
    num = np.max(np.abs(jac - ref), axis=1)
    den = np.maximum(np.max(np.abs(jac), axis=1), np.max(np.abs(ref), axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class FDCheck:
    max_rel_error: float
    worst_input: np.ndarray | None
    worst_index: int | None
    n_checked: int
    n_skipped: int
    h: float


def fd_crosscheck(model: CVFunction, inputs, h: float = 1e-5, n_samples: int = 100, seed: int = 0) -> FDCheck:
    """Compare ``model.jacobian`` with central differences of ``model.value``.

    Rows are drawn in seeded random order. If the model can tell when a
    difference stencil leaves its current linear piece (``piece_changes``),
    such rows are skipped and counted rather than checked.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    order = np.random.default_rng(seed).permutation(len(inputs))
    detector = getattr(model, "piece_changes", None)
    chosen, skipped = [], 0
    for start in range(0, len(order), max(n_samples, 1)):
        if len(chosen) >= n_samples:
            break
        block = order[start:start + n_samples]
        if detector is not None:
            bad = detector(inputs[block], h)
            skipped += int(bad.sum())
            block = block[~bad]
        chosen.extend(block[: n_samples - len(chosen)].tolist())
    if not chosen:
        return FDCheck(float("nan"), None, None, 0, skipped, h)
    idx = np.array(chosen)
    x = inputs[idx]
    rel = relative_error(model.jacobian(x), central_difference(model.value, x, h))
    k = int(np.argmax(rel))
    return FDCheck(float(rel[k]), x[k].copy(), int(idx[k]), len(idx), skipped, h)


@dataclass
class EvalReport:
    cv_name: str
    n_samples: int
    input_dim: int
    value_rmse: float
    value_mae: float
    jacobian_rmse: float
    jacobian_mae: float
    value_units: str
    jacobian_units: str
    value_error_moments: Moments | None
    jacobian_error_moments: Moments | None
    value_error_histogram: Histogram
    jacobian_error_histogram: Histogram
    value_heatmap: Heatmap
    jacobian_heatmap: Heatmap
    value_errors: np.ndarray = field(repr=False)
    jacobian_errors: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        d = {k: getattr(self, k) for k in ("cv_name", "n_samples", "input_dim", "value_rmse", "value_mae",
                                          "jacobian_rmse", "jacobian_mae", "value_units", "jacobian_units")}
        for name in ("value_error_moments", "jacobian_error_moments"):
            m = getattr(self, name)
            d[name] = None if m is None else {k: (None if np.isnan(v) else v) for k, v in asdict(m).items()}
        d["value_heatmap_clipped"] = self.value_heatmap.n_clipped
        d["jacobian_heatmap_clipped"] = self.jacobian_heatmap.n_clipped
        return d


def evaluate(model: CVFunction, dataset: LabeledDataset, indices=None, n_bins: int = 100) -> EvalReport:
    """Full accuracy report over ``indices`` (normally the held-out split)."""
    rows = _rows(dataset, indices)
    v_rmse, v_mae, v_err = value_metrics(model, dataset, indices)
    j_rmse, j_mae, j_err = jacobian_metrics(model, dataset, indices)
    truth_v = dataset.values[rows]
    truth_j = dataset.jacobians[rows]

    def moments(e):
        return gaussianity_summary(e) if e.size >= 8 else None

    return EvalReport(
        cv_name=dataset.cv_name,
        n_samples=int(v_err.size),
        input_dim=dataset.input_dim,
        value_rmse=v_rmse, value_mae=v_mae, jacobian_rmse=j_rmse, jacobian_mae=j_mae,
        value_units=VALUE_UNITS.get(dataset.cv_name, "cv units"),
        jacobian_units=JACOBIAN_UNITS.get(dataset.cv_name, "cv units per nm"),
        value_error_moments=moments(v_err),
        jacobian_error_moments=moments(j_err),
        value_error_histogram=histogram(v_err, n_bins),
        jacobian_error_histogram=histogram(j_err, n_bins),
        value_heatmap=heatmap_bins(truth_v, truth_v + v_err, n_bins),
        jacobian_heatmap=heatmap_bins(truth_j, truth_j + j_err, n_bins),
        value_errors=v_err,
        jacobian_errors=j_err,
    )


def format_table(report: EvalReport) -> str:
    rows = [
        ("RMSE", report.value_rmse, report.value_units),
        ("MAE", report.value_mae, report.value_units),
        ("RMSE (J)", report.jacobian_rmse, report.jacobian_units),
        ("MAE (J)", report.jacobian_mae, report.jacobian_units),
    ]
    lines = [f"{report.cv_name}: {report.n_samples} held-out samples"]
    lines += [f"  {name:<9} {val:10.4f}  {unit}" for name, val, unit in rows]
    return "\n".join(lines)


def _write_hist(path: Path, h: Histogram) -> None:
    table = np.column_stack([h.edges[:-1], h.edges[1:], h.counts])
    np.savetxt(path, table, fmt=["%.17g", "%.17g", "%d"], delimiter=",",
               header=f"bin_lo,bin_hi,count  clipped={h.n_clipped}", comments="# ")


def _write_heatmap(path: Path, hm: Heatmap) -> None:
    np.savetxt(path, hm.counts, fmt="%d", delimiter=",",
               header="rows: analytical bins, columns: predicted bins; edges=" + ",".join(f"{e:.17g}" for e in hm.edges)
               + f"; clipped={hm.n_clipped}", comments="# ")


def write_eval_report(report: EvalReport, outdir) -> dict:
    """Write the JSON summary plus histogram, heatmap and raw error files.

    Returns a mapping of artifact name to path.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "eval_report.json",
        "value_histogram": out / "value_error_hist.csv",
        "jacobian_histogram": out / "jacobian_error_hist.csv",
        "value_heatmap": out / "value_heatmap.csv",
        "jacobian_heatmap": out / "jacobian_heatmap.csv",
        "value_errors": out / "value_errors.csv",
        "jacobian_errors": out / "jacobian_errors.csv",
    }
    doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION}
    doc.update(report.summary())
    paths["report"].write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_hist(paths["value_histogram"], report.value_error_histogram)
    _write_hist(paths["jacobian_histogram"], report.jacobian_error_histogram)
    _write_heatmap(paths["value_heatmap"], report.value_heatmap)
    _write_heatmap(paths["jacobian_heatmap"], report.jacobian_heatmap)
    np.savetxt(paths["value_errors"], report.value_errors, fmt="%.17g", header="predicted_minus_analytical", comments="# ")
    np.savetxt(paths["jacobian_errors"], report.jacobian_errors, fmt="%.17g", delimiter=",",
               header="predicted_minus_analytical per input dimension", comments="# ")
    return paths
