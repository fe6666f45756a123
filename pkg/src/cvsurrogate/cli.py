"""Command-line workflow: gen-data, train, eval, jacobian, pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes its fully resolved configuration next to its outputs.
A JSON ``--config`` file may supply any flag (by its long name with
underscores); flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cv import ATOMIC_MASSES, SingularConfigurationError, make_cv, mass_vector
from .datagen import (DatasetFormatError, StructuredParams, gen_structured, gen_uniform, load_dataset,
                      read_header, save_dataset)
from .evaluation import evaluate, format_table, write_eval_report
from .freeenergy import (BiasHills, SingularMetricError, TrajectoryFormatError, load_hills, load_trajectory,
                         run_pipeline, save_icf)
from .geometry import DEFAULT_BOX_LENGTH, SimBox
from .surrogate import HIDDEN_WIDTHS, SurrogateCV, build_surrogate, input_jacobian
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("cvsurrogate")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _widths(text):
    try:
        w = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not w or min(w) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return w


def _mass(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected ELEMENT=MASS, got {text!r}")
    return name, float(value)


def _write_config(args, path: Path) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    doc = {"command": args.command, "cvsurrogate_version": __version__, "arguments": cfg}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_data(path, cv_name=None):
    if not Path(path).is_file():
        raise DataError(f"dataset not found: {path}")
    try:
        header = read_header(path)
        if cv_name is not None and header["cv"] != cv_name:
            raise DataError(f"{path} holds a {header['cv']!r} dataset but --cv is {cv_name!r}")
        expected = make_cv(header["cv"], SimBox(header["L"])).input_dim
        if header["D"] != expected:
            raise DataError(f"{path}: D={header['D']} but the {header['cv']} CV reads {expected} coordinates")
        return load_dataset(path)
    except (DatasetFormatError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from None


def _eval_rows(ds, args):
    if args.split == "all":
        return np.arange(len(ds))
    train_idx, test_idx = ds.split(args.train_fraction, args.seed)
    return test_idx if args.split == "test" else train_idx


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    box = SimBox(args.box_length)
    cv = make_cv(args.cv, box)
    if args.generator == "uniform":
        ds = gen_uniform(cv, args.n, box, args.seed)
    else:
        params = StructuredParams(
            contact_weight=args.contact_weight, contact_mean=args.contact_mean, contact_std=args.contact_std,
            separated_mean=args.separated_mean, separated_std=args.separated_std,
            shell_count=args.shell_count, shell_mean=args.shell_mean, shell_std=args.shell_std,
            outer_min=args.outer_min, outer_max=args.outer_max, shuffle_oxygens=not args.ordered_oxygens,
        )
        ds = gen_structured(cv, args.n, box, args.seed, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _write_config(args, out.with_name(out.name + ".config.json"))
    print(f"wrote {len(ds)} {args.cv} rows ({args.generator}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_data(args.data, args.cv)
    model = build_surrogate(ds.input_dim, args.seed, cv_name=ds.cv_name, box=ds.box,
                            hidden=args.hidden, dropout=args.dropout)
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, scheduler_factor=args.lr_factor,
                      scheduler_patience=args.patience, batch_size=args.batch_size, max_epochs=args.max_epochs,
                      train_fraction=args.train_fraction, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        model, report = train(model, ds, cfg, record_wall_time=args.record_wall_time)
    except TrainingDiverged as exc:
        (out / "training_report.json").write_text(exc.report.to_json(), encoding="utf-8")
        raise
    log.info("training took %.1f s", time.perf_counter() - t0)
    save_checkpoint(model, out / "model.ckpt")
    (out / "training_report.json").write_text(report.to_json(), encoding="utf-8")
    _write_config(args, out / "run_config.json")
    if report.epochs:
        print(f"trained {len(report.epochs)} epochs; best validation MSE {report.best_val_loss:.6g} "
              f"at epoch {report.best_epoch}; final lr {report.final_lr:.3g}")
    else:
        print("zero epochs requested; checkpoint holds the initial parameters")
    print(f"wrote {out / 'model.ckpt'} and {out / 'training_report.json'}")
    return EXIT_OK


def _model_for(args, ds):
    if args.oracle:
        return make_cv(ds.cv_name, ds.box)
    model = _load_model(args.checkpoint)
    if model.input_dim != ds.input_dim:
        raise DataError(f"checkpoint expects D={model.input_dim}, dataset has D={ds.input_dim}")
    return SurrogateCV(model, ds.cv_name)


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --oracle")
    ds = _load_data(args.data)
    model = _model_for(args, ds)
    report = evaluate(model, ds, _eval_rows(ds, args), n_bins=args.bins)
    out = Path(args.out_dir)
    write_eval_report(report, out)
    _write_config(args, out / "run_config.json")
    print(format_table(report))
    return EXIT_OK


def cmd_jacobian(args) -> int:
    if not args.oracle and not args.checkpoint:
        raise UsageError("jacobian needs --checkpoint or --oracle")
    ds = _load_data(args.data)
    model = _model_for(args, ds)
    rows = _eval_rows(ds, args)
    x = ds.inputs[rows]
    if args.oracle:
        jac, seam = model.jacobian(x), np.zeros(x.shape, dtype=bool)
    else:
        jac, seam = input_jacobian(model.model, x, return_seam=True)
    table = np.column_stack([rows, model.value(x), jac, seam.any(axis=1).astype(int)])
    dim = ds.input_dim
    fmt = ["%d"] + ["%.17g"] * (dim + 1) + ["%d"]
    header = ",".join(["row", "value"] + [f"j{i}" for i in range(dim)] + ["on_wrap_seam"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, table, fmt=fmt, delimiter=",", header=header, comments="# ")
    _write_config(args, out.with_name(out.name + ".config.json"))
    print(f"wrote {len(rows)} Jacobians to {out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if not args.analytical and not args.checkpoint:
        raise UsageError("pipeline needs --checkpoint or --analytical")
    try:
        traj = load_trajectory(args.trajectory)
        hills = load_hills(args.hills) if args.hills else BiasHills.empty()
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {exc.filename}") from None
    except (TrajectoryFormatError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if len(traj) < 5:
        raise DataError(f"trajectory has {len(traj)} frames; the ICF stencils need at least 5")
    try:
        oracle = make_cv(traj.cv_name, traj.box)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if traj.coords.shape[1] != oracle.input_dim:
        raise DataError(f"trajectory has D={traj.coords.shape[1]}, {traj.cv_name} reads {oracle.input_dim}")
    if args.analytical:
        jac_cv = oracle
    else:
        model = _load_model(args.checkpoint)
        if model.input_dim != oracle.input_dim:
            raise DataError(f"checkpoint expects D={model.input_dim}, trajectory has D={oracle.input_dim}")
        jac_cv = SurrogateCV(model, traj.cv_name)
    masses = mass_vector(oracle, dict(args.mass or []))
    result = run_pipeline(traj, oracle, jac_cv, masses, hills)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_icf(result, out)
    _write_config(args, out.with_name(out.name + ".config.json"))
    mode = "analytical" if args.analytical else "surrogate"
    print(f"wrote ICF for {len(result.times)} frames ({mode} Jacobians) to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cvsurrogate", description="Neural-network surrogates for collective-variable Jacobians.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="FILE", help="JSON file supplying defaults for any flag")
        sp.add_argument("--seed", type=int, default=0, help="random seed (all randomness derives from it)")

    g = sub.add_parser("gen-data", help="generate a labeled dataset")
    common(g)
    g.add_argument("--cv", choices=["distance", "coordination"], required=True, help="collective variable")
    g.add_argument("--generator", choices=["uniform", "structured"], required=True, help="configuration sampler")
    g.add_argument("--n", type=_positive_int, default=50_000, help="number of rows (default 50000)")
    g.add_argument("--box-length", type=float, default=DEFAULT_BOX_LENGTH, help="cubic box edge, nm (default 2.7)")
    g.add_argument("--out", required=True, help="output dataset path")
    sp = StructuredParams()
    g.add_argument("--contact-weight", type=float, default=sp.contact_weight,
                   help="structured distance: weight of the contact basin")
    g.add_argument("--contact-mean", type=float, default=sp.contact_mean, help="contact basin mean, nm")
    g.add_argument("--contact-std", type=float, default=sp.contact_std, help="contact basin std, nm")
    g.add_argument("--separated-mean", type=float, default=sp.separated_mean, help="solvent-separated mean, nm")
    g.add_argument("--separated-std", type=float, default=sp.separated_std, help="solvent-separated std, nm")
    g.add_argument("--shell-count", type=int, default=sp.shell_count, help="structured coordination: shell oxygens")
    g.add_argument("--shell-mean", type=float, default=sp.shell_mean, help="shell radius mean, nm")
    g.add_argument("--shell-std", type=float, default=sp.shell_std, help="shell radius std, nm")
    g.add_argument("--outer-min", type=float, default=sp.outer_min, help="outer oxygens minimum distance, nm")
    g.add_argument("--outer-max", type=float, default=None, help="outer oxygens maximum distance, nm (default L/2)")
    g.add_argument("--ordered-oxygens", action="store_true", help="keep shell oxygens in the first input slots")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a surrogate on a dataset file")
    common(t)
    t.add_argument("--data", required=True, help="dataset file from gen-data")
    t.add_argument("--cv", choices=["distance", "coordination"], required=True, help="CV the dataset must hold")
    t.add_argument("--out-dir", required=True, help="directory for model.ckpt, training_report.json, run_config.json")
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    t.add_argument("--weight-decay", type=float, default=1e-5, help="L2 coefficient (default 1e-5)")
    t.add_argument("--lr-factor", type=float, default=0.5, help="plateau lr multiplier (default 0.5)")
    t.add_argument("--patience", type=_positive_int, default=10, help="plateau patience, epochs (default 10)")
    t.add_argument("--batch-size", type=_positive_int, default=256, help="mini-batch size, samples (default 256)")
    t.add_argument("--max-epochs", type=_nonneg_int, default=200, help="epoch budget (default 200)")
    t.add_argument("--train-fraction", type=float, default=0.8, help="training share of the split (default 0.8)")
    t.add_argument("--hidden", type=_widths, default=HIDDEN_WIDTHS, help="hidden widths (default 64,128,64,32)")
    t.add_argument("--dropout", type=float, default=0.1, help="dropout rate (default 0.1)")
    t.add_argument("--record-wall-time", action="store_true",
                   help="store wall time (s) in the report; makes the report run-dependent")
    t.set_defaults(func=cmd_train)

    def eval_flags(sp):
        sp.add_argument("--data", required=True, help="dataset file")
        sp.add_argument("--checkpoint", help="model checkpoint")
        sp.add_argument("--oracle", action="store_true", help="use the analytical CV as the model (self-test)")
        sp.add_argument("--split", choices=["test", "train", "all"], default="test",
                        help="rows to use; test/train reproduce the training split (default test)")
        sp.add_argument("--train-fraction", type=float, default=0.8, help="split fraction used in training")

    e = sub.add_parser("eval", help="accuracy of values and Jacobians against the oracle")
    common(e)
    eval_flags(e)
    e.add_argument("--out-dir", required=True, help="directory for report and histogram/heatmap files")
    e.add_argument("--bins", type=_positive_int, default=100, help="histogram/heatmap bins per axis (default 100)")
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("jacobian", help="dump per-sample values and input Jacobians")
    common(j)
    eval_flags(j)
    j.add_argument("--out", required=True, help="output CSV (value in CV units, Jacobian in CV units per nm)")
    j.set_defaults(func=cmd_jacobian)

    pl = sub.add_parser("pipeline", help="metric tensor and instantaneous collective force along a trajectory")
    common(pl)
    pl.add_argument("--trajectory", required=True, help="trajectory file (coordinates in nm, dt in ps)")
    pl.add_argument("--hills", help="hills file (time ps, center CV units, height kJ/mol, sigma CV units)")
    pl.add_argument("--checkpoint", help="surrogate checkpoint providing Jacobians")
    pl.add_argument("--analytical", action="store_true", help="use analytical Jacobians instead of a surrogate")
    pl.add_argument("--mass", type=_mass, action="append", metavar="EL=AMU",
                    help=f"override an atomic mass in amu (defaults {ATOMIC_MASSES})")
    pl.add_argument("--out", required=True, help="ICF output file")
    pl.set_defaults(func=cmd_pipeline)
    return p


def _apply_config_file(parser, argv):
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(values, dict):
        raise DataError(f"config {known.config} must hold a JSON object")
    values = {k.replace("-", "_"): (tuple(v) if k == "hidden" else v) for k, v in values.items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
            for a in sp._actions:
                if a.dest in values:
                    a.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except DataError as exc:
        print(f"cvsurrogate: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cvsurrogate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, TrajectoryFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"cvsurrogate: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, SingularConfigurationError, SingularMetricError, FloatingPointError) as exc:
        print(f"cvsurrogate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
