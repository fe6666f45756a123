"""End-to-end acceptance checks. Each test records one PASS/FAIL line.

The four trained surrogates (distance/coordination x uniform/structured, 50,000
rows, default hyperparameters, 200-epoch budget) are built once per session;
expect roughly ten minutes on one CPU core.
"""

import time

import numpy as np
import pytest

from cvsurrogate.cli import main
from cvsurrogate.cv import DistanceCV, make_cv, mass_vector
from cvsurrogate.datagen import gen_structured, gen_uniform
from cvsurrogate.evaluation import evaluate, fd_crosscheck
from cvsurrogate.freeenergy import BiasHills, Trajectory, bias_force, bias_potential, icf, metric_tensor, \
    save_hills, save_trajectory
from cvsurrogate.geometry import SimBox
from cvsurrogate.surrogate import SurrogateCV, build_surrogate
from cvsurrogate.training import TrainConfig, train

BOX = SimBox(2.7)
N_ROWS = 50_000
SEED = 0
Z_DISTANCE = 1 / 24.305 + 1 / 35.453

_trained = {}


def trained(cv_name, generator):
    """(surrogate, dataset, held-out indices, training seconds), cached per session."""
    key = (cv_name, generator)
    if key not in _trained:
        cv = make_cv(cv_name, BOX)
        ds = (gen_uniform if generator == "uniform" else gen_structured)(cv, N_ROWS, BOX, SEED)
        model = build_surrogate(cv.input_dim, SEED, cv_name=cv_name, box=BOX)
        cfg = TrainConfig(seed=SEED)
        t0 = time.perf_counter()
        model, _ = train(model, ds, cfg)
        seconds = time.perf_counter() - t0
        _, test_idx = ds.split(cfg.train_fraction, cfg.seed)
        _trained[key] = (SurrogateCV(model, cv_name), ds, test_idx, seconds)
    return _trained[key]


MODELS = [("distance", "uniform"), ("distance", "structured"),
          ("coordination", "uniform"), ("coordination", "structured")]


@pytest.mark.slow
@pytest.mark.parametrize("cv_name,generator", MODELS)
def test_01_reverse_mode_matches_finite_differences(cv_name, generator, verdict):
    model, ds, test_idx, _ = trained(cv_name, generator)
    t0 = time.perf_counter()
    res = fd_crosscheck(model, ds.inputs[test_idx], h=1e-5, n_samples=100, seed=1)
    seconds = time.perf_counter() - t0
    verdict(f"[1] gradient exactness {cv_name}/{generator}",
            res.n_checked == 100 and res.max_rel_error < 1e-6 and seconds < 60,
            f"max rel err {res.max_rel_error:.2e} over {res.n_checked} rows "
            f"({res.n_skipped} kink rows skipped), {seconds:.2f} s")


@pytest.mark.parametrize("cv_name", ["distance", "coordination"])
def test_02_oracle_jacobians(cv_name, verdict):
    t0 = time.perf_counter()
    cv = make_cv(cv_name, BOX)
    x = gen_uniform(cv, 1000, BOX, seed=11).inputs
    fd = fd_crosscheck(cv, x, h=1e-5, n_samples=1000, seed=0)
    rng = np.random.default_rng(3)
    shift = rng.uniform(-5, 5, (1000, 3))
    xs = x + np.tile(shift, cv.input_dim // 3)
    value_res = np.max(np.abs(cv.value(xs) - cv.value(x)))
    jac_res = np.max(np.abs(cv.jacobian(xs) - cv.jacobian(x)))
    seconds = time.perf_counter() - t0
    ok = fd.n_checked == 1000 and fd.max_rel_error < 1e-6 and max(value_res, jac_res) < 1e-10 and seconds < 60
    verdict(f"[2] analytical oracle {cv_name}", ok,
            f"FD max rel err {fd.max_rel_error:.2e}; translation residual value {value_res:.1e} "
            f"jacobian {jac_res:.1e}; {seconds:.2f} s")


@pytest.mark.slow
def test_03_uniform_distance_accuracy(verdict):
    model, ds, test_idx, seconds = trained("distance", "uniform")
    rep = evaluate(model, ds, test_idx)
    verdict("[3] uniform distance RMSE <= 0.15 nm, MAE <= 0.12 nm",
            rep.value_rmse <= 0.15 and rep.value_mae <= 0.12 and seconds <= 1800,
            f"RMSE {rep.value_rmse:.4f} MAE {rep.value_mae:.4f} (reference 0.111 / 0.086); "
            f"Jacobian RMSE {rep.jacobian_rmse:.4f} MAE {rep.jacobian_mae:.4f}; trained in {seconds:.0f} s")


@pytest.mark.slow
def test_04_uniform_coordination_accuracy(verdict):
    model, ds, test_idx, seconds = trained("coordination", "uniform")
    rep = evaluate(model, ds, test_idx)
    verdict("[4] uniform coordination RMSE <= 0.45, MAE <= 0.20",
            rep.value_rmse <= 0.45 and rep.value_mae <= 0.20 and seconds <= 3600,
            f"RMSE {rep.value_rmse:.4f} MAE {rep.value_mae:.4f} (reference 0.277 / 0.103); "
            f"Jacobian RMSE {rep.jacobian_rmse:.4f} MAE {rep.jacobian_mae:.4f}; trained in {seconds:.0f} s")


@pytest.mark.slow
@pytest.mark.parametrize("cv_name", ["distance", "coordination"])
def test_05_structured_beats_uniform(cv_name, verdict):
    rmse = {}
    for gen in ("uniform", "structured"):
        model, ds, test_idx, _ = trained(cv_name, gen)
        rmse[gen] = evaluate(model, ds, test_idx).value_rmse
    verdict(f"[5] structured RMSE < uniform RMSE, {cv_name}", rmse["structured"] < rmse["uniform"],
            f"structured {rmse['structured']:.4f} vs uniform {rmse['uniform']:.4f}")


@pytest.mark.slow
def test_06_jacobian_error_shape(verdict):
    model, ds, test_idx, _ = trained("distance", "structured")
    m = evaluate(model, ds, test_idx).jacobian_error_moments
    verdict("[6] structured distance Jacobian errors centred and near-symmetric",
            abs(m.mean) < 0.1 * m.std and abs(m.skewness) < 0.5,
            f"mean {m.mean:.2e} std {m.std:.4f} skewness {m.skewness:.3f} excess kurtosis {m.excess_kurtosis:.3f}")


def _ulps(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.spacing(np.maximum(np.abs(a), np.abs(b)))
    return np.where(a == b, 0.0, np.abs(a - b) / np.maximum(scale, np.finfo(float).tiny))


@pytest.mark.slow
@pytest.mark.parametrize("cv_name", ["distance", "coordination"])
def test_07_periodicity(cv_name, verdict):
    model, _, _, _ = trained(cv_name, "uniform")
    rng = np.random.default_rng(7)
    dim = model.input_dim
    worst_v = worst_j = 0.0
    for _ in range(1000):
        x = rng.uniform(-2.7, 5.4, dim)
        shifted = x.copy()
        shifted[rng.integers(dim)] += 2.7  # one coordinate moved to its next periodic image
        everything = x + 2.7
        for xs in (shifted, everything):
            worst_v = max(worst_v, float(np.max(_ulps(model.value(x), model.value(xs)))))
            worst_j = max(worst_j, float(np.max(_ulps(model.jacobian(x), model.jacobian(xs)))))
    verdict(f"[7] periodicity {cv_name} surrogate", worst_v <= 1 and worst_j <= 1,
            f"worst value diff {worst_v:g} ulp, worst Jacobian diff {worst_j:g} ulp over 1000 trials")


def test_08a_analytical_metric_tensor(verdict):
    cv = DistanceCV(BOX)
    x = gen_structured(cv, 1000, BOX, seed=8).inputs
    z = metric_tensor(cv.jacobian(x)[:, None, :], mass_vector(cv))[:, 0, 0]
    err = float(np.max(np.abs(z - Z_DISTANCE)))
    verdict("[8a] analytical Z = 1/24.305 + 1/35.453 amu^-1", err < 1e-12, f"max abs deviation {err:.1e}")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="dropout 0.1 shrinks learned gradients to ~0.68x, so surrogate Z is ~45% low; "
                                       "see decisions ledger")
def test_08b_surrogate_metric_tensor(verdict):
    model, ds, test_idx, _ = trained("distance", "structured")
    x = ds.inputs[test_idx[:1000]]
    z = metric_tensor(model.jacobian(x)[:, None, :], mass_vector(DistanceCV(BOX)))[:, 0, 0]
    rel = np.abs(z - Z_DISTANCE) / Z_DISTANCE
    mean_dev = abs(z.mean() - Z_DISTANCE) / Z_DISTANCE
    median_dev = abs(np.median(z) - Z_DISTANCE) / Z_DISTANCE
    verdict("[8b] surrogate Z within 10% of analytical on 1000 structured configs",
            mean_dev < 0.10 and median_dev < 0.10,
            f"mean Z {z.mean():.6f} ({100 * mean_dev:.2f}% off), median {100 * median_dev:.2f}% off; "
            f"{100 * np.mean(rel < 0.10):.1f}% of configs individually within 10%")


def test_09_icf_oracle_cases(verdict):
    dt, n, z = 0.01, 41, 0.0693
    t = dt * np.arange(n)
    interior = slice(2, n - 2)
    const = np.max(np.abs(icf(np.full(n, 0.42), np.full(n, z), dt).f[interior]))
    linear = np.max(np.abs(icf(0.42 + 1.7 * t, np.full(n, z), dt).f[interior]))
    a = 2.5
    quad = icf(0.3 + 0.1 * t + 0.5 * a * t ** 2, np.full(n, z), dt).f[interior]
    quad_err = float(np.max(np.abs(quad - a / z)) / (a / z))

    # the 3-point stencils are exact on quadratics, so the convergence order is
    # measured on a smooth non-polynomial path at a fixed time
    def sine_error(step):
        m = int(round(1.0 / step)) + 1
        res = icf(np.sin(4.0 * step * np.arange(m)), np.full(m, z), step)
        i = int(round(0.5 / step))
        return abs(res.f[i] + 16.0 * np.sin(2.0) / z)

    ratio = sine_error(0.01) / sine_error(0.005)
    ok = const < 1e-10 and linear < 1e-10 and quad_err < 1e-10 and 3.2 <= ratio <= 4.8
    verdict("[9] ICF oracle cases", ok,
            f"constant {const:.1e}, linear {linear:.1e}, quadratic rel err {quad_err:.1e}, "
            f"error ratio on halving dt {ratio:.3f}")


def test_10_bias_force_consistency(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 30))
        hills = BiasHills(np.sort(rng.uniform(0, 100, k)), rng.uniform(0.1, 2.5, k), rng.uniform(0.1, 3.0, k),
                          rng.uniform(0.02, 0.3, k))
        xi = rng.uniform(0.0, 2.6)
        h = 1e-3 * hills.sigmas.min()
        # fourth-order central difference keeps truncation error far below the tolerance
        v = [bias_potential(hills, xi + s * h) for s in (-2, -1, 1, 2)]
        fd = -(v[0] - 8 * v[1] + 8 * v[2] - v[3]) / (12 * h)
        f = bias_force(hills, xi)
        scale = max(abs(f), abs(fd), 1e-6 * float(np.sum(hills.heights / hills.sigmas)))
        worst = max(worst, abs(f - fd) / scale)
    verdict("[10] bias force equals minus the FD bias gradient", worst < 1e-8,
            f"max rel err {worst:.2e} over 1000 (hills, xi) pairs")


def _run_all_commands():
    def run(*argv):
        assert main([str(a) for a in argv]) == 0, argv

    run("gen-data", "--cv", "distance", "--generator", "structured", "--n", 2000, "--seed", 7, "--out", "data.csv")
    run("gen-data", "--cv", "coordination", "--generator", "uniform", "--n", 500, "--seed", 7, "--out", "coord.csv")
    run("train", "--data", "data.csv", "--cv", "distance", "--out-dir", "run", "--max-epochs", 4, "--seed", 7)
    run("eval", "--data", "data.csv", "--checkpoint", "run/model.ckpt", "--out-dir", "eval", "--seed", 7)
    run("jacobian", "--data", "data.csv", "--checkpoint", "run/model.ckpt", "--out", "jac.csv", "--seed", 7)
    coords = np.zeros((30, 6))
    coords[:, 3] = 0.25 + 0.2 * np.sin(np.arange(30) / 5.0)
    save_trajectory(Trajectory(coords, 0.002, "distance", BOX), "traj.txt")
    save_hills(BiasHills([0.0, 0.01], [0.3, 0.4], [1.2, 0.8], [0.05, 0.05]), "hills.txt")
    run("pipeline", "--trajectory", "traj.txt", "--hills", "hills.txt", "--checkpoint", "run/model.ckpt",
        "--out", "icf.csv", "--seed", 7)
    run("pipeline", "--trajectory", "traj.txt", "--hills", "hills.txt", "--analytical", "--out", "icf_a.csv")


def test_11_cli_determinism(tmp_path, monkeypatch, verdict):
    outputs = []
    for name in ("first", "second"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        _run_all_commands()
        outputs.append({p.relative_to(tmp_path / name): p.read_bytes()
                        for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    differing = [str(p) for p in outputs[0] if outputs[0][p] != outputs[1].get(p)]
    same_set = outputs[0].keys() == outputs[1].keys()
    verdict("[11] CLI reruns are byte-identical", same_set and not differing,
            f"{len(outputs[0])} files compared" + (f"; differing: {differing}" if differing else ""))
