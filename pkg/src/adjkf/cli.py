"""Command-line front end: runs the shipped experiments and emits CSV bundles.

Subcommands
-----------
verify       Jacobian block check against central finite differences on the
             two-state benchmark model; exits 0 only when every reported
             norm is below the 1e-4 alert threshold.
rocket       Transition-operator inversion at each noise level: truth data,
             baseline filter, optimized filter, operator comparison table,
             trajectory series.
allen-cahn   Diffusivity-table inversion at each noise level, closure
             training on the identified entries, and the re-filtered run
             with the learned diffusivity; emits the d(v) curves, operator
             error series, state/covariance fields, and the table files the
             ``closure`` subcommand consumes.
closure      Retrains the closure network from stored inversion output
             (the table_*.csv files of a previous ``allen-cahn`` run).

Configuration
-------------
A single INI file, all sections optional; command-line flags win over file
values:

    [run]
    seed = 0                # root seed, expanded per experiment and sigma
    out = ./adjkf-out       # output root; env ADJKF_OUT changes the default

    [verify]
    sigma = 0.125
    eps = 1e-6

    [rocket]
    sigmas = 0.005, 0.025, 0.125

    [allen-cahn]
    sigmas = 0.0025, 0.005, 0.01

    [closure]
    sigmas = 0.0025, 0.005, 0.01
    inversion = PATH        # directory with table_*.csv; defaults to the
                            # allen-cahn output directory under the root
    epochs = 4000
    hidden = 32, 32
    lr = 1e-3
    val_frac = 0.1

Each command writes into ``<out>/<command>/`` and finishes with a
``manifest.json`` listing every other file in that directory with its
sha256, the configuration echo, library versions, and wall time.  Exit
codes: 0 success, 1 configuration or input validation failure, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import pathlib
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy

from . import __version__
from .adjoint import verify_blocks
from .benchmarks import (
    RocketConfig,
    ac_reference_model,
    diffusivity_true,
    rocket_model,
    rocket_truth,
    truth_to_csv,
)
from .closure import (
    Dataset,
    TrainConfig,
    predict_diffusivity,
    predictions_to_csv,
    save_checkpoint,
    train,
)
from .errors import AdjkfError, MissingInput, NonFiniteLoss, NotPd, NotPsd, SingularMatrix
from .kalman import run_filter
from .linalg import derive_seed
from .pipelines import (
    AC_MASS_FLOOR_FRAC,
    AC_SIGMAS,
    ROCKET_SIGMAS,
    allen_cahn_config,
    allen_cahn_experiment,
    rocket_experiment,
)

__all__ = ["RunConfig", "main", "cmd_verify", "cmd_rocket", "cmd_allen_cahn", "cmd_closure"]

ENV_OUT = "ADJKF_OUT"
NUMERICAL_ERRORS = (SingularMatrix, NotPsd, NotPd, NonFiniteLoss, FloatingPointError)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


@dataclass
class RunConfig:
    """Everything one command invocation needs, after file/flag resolution."""

    experiment: str
    seed: int = 0
    sigmas: tuple = ()
    out_root: str = ""
    # verify
    verify_sigma: float = 0.125
    eps: float = 1e-6
    # closure
    inversion_dir: str = ""
    epochs: int = 4000
    hidden: tuple = (32, 32)
    lr: float = 1e-3
    val_frac: float = 0.1

    @property
    def out_dir(self) -> pathlib.Path:
        return pathlib.Path(self.out_root) / self.experiment


_DEFAULT_SIGMAS = {
    "rocket": ROCKET_SIGMAS,
    "allen-cahn": AC_SIGMAS,
    "closure": AC_SIGMAS,
    "verify": (),
}


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(part) for part in text.replace(",", " ").split())
    except ValueError as exc:
        raise ValueError(f"expected a list of numbers, got {text!r}") from exc


def _parse_ints(text: str) -> tuple:
    return tuple(int(round(v)) for v in _parse_floats(text))


def load_config(experiment: str, args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the INI file, and command-line flags (flags win)."""
    cfg = RunConfig(
        experiment=experiment,
        sigmas=_DEFAULT_SIGMAS[experiment],
        out_root=os.environ.get(ENV_OUT, "./adjkf-out"),
    )
    parser = configparser.ConfigParser()
    if args.config is not None:
        path = pathlib.Path(args.config)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        parser.read(path)
    if parser.has_section("run"):
        run = parser["run"]
        cfg.seed = run.getint("seed", cfg.seed)
        cfg.out_root = run.get("out", cfg.out_root)
    if parser.has_section(experiment):
        sect = parser[experiment]
        if "sigmas" in sect:
            cfg.sigmas = _parse_floats(sect["sigmas"])
        if experiment == "verify":
            cfg.verify_sigma = sect.getfloat("sigma", cfg.verify_sigma)
            cfg.eps = sect.getfloat("eps", cfg.eps)
        if experiment == "closure":
            cfg.inversion_dir = sect.get("inversion", cfg.inversion_dir)
            cfg.epochs = sect.getint("epochs", cfg.epochs)
            if "hidden" in sect:
                cfg.hidden = _parse_ints(sect["hidden"])
            cfg.lr = sect.getfloat("lr", cfg.lr)
            cfg.val_frac = sect.getfloat("val_frac", cfg.val_frac)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_root = args.out
    if args.sigma is not None:
        values = _parse_floats(args.sigma)
        if experiment == "verify":
            if len(values) != 1:
                raise ValueError("verify takes exactly one --sigma value")
            cfg.verify_sigma = values[0]
        else:
            cfg.sigmas = values
    if not cfg.sigmas and experiment != "verify":
        raise ValueError("no noise levels configured")
    if not cfg.inversion_dir:
        cfg.inversion_dir = str(pathlib.Path(cfg.out_root) / "allen-cahn")
    return cfg


# ---------------------------------------------------------------------------
# emission helpers


def _write_csv(path: pathlib.Path, schema: str, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# adjkf-csv v1 {schema}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _sig_tag(sigma: float) -> str:
    return f"{sigma:g}"


def _sha256(path: pathlib.Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(cfg: RunConfig, summary: dict, wall_time: float) -> pathlib.Path:
    """List every emitted file with its hash; the manifest names itself last."""
    out_dir = cfg.out_dir
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[path.relative_to(out_dir).as_posix()] = _sha256(path)
    manifest = {
        "command": cfg.experiment,
        "config": asdict(cfg),
        "versions": {
            "adjkf": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "seed": cfg.seed,
        "wall_time_s": round(wall_time, 3),
        "files": files,
        "summary": summary,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _history_rows(results) -> list:
    rows = []
    for round_idx, result in enumerate(results):
        for it, (loss_v, grad_v) in enumerate(
                zip(result.loss_history, result.grad_norm_history)):
            rows.append([round_idx, it, _fmt(loss_v), _fmt(grad_v)])
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_verify(cfg: RunConfig) -> tuple[dict, int]:
    """Jacobian blocks vs central FD on the two-state model at the true operator."""
    t0 = time.perf_counter()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rocket_cfg = RocketConfig()
    truth = rocket_truth(rocket_cfg, cfg.verify_sigma,
                         derive_seed(cfg.seed, "rocket-truth", cfg.verify_sigma))
    model = rocket_model(rocket_cfg, rocket_cfg.F_true, cfg.verify_sigma)
    trace = run_filter(model, truth.obs_noisy)
    report = verify_blocks(trace, model, truth.obs_noisy, eps=cfg.eps)
    _write_csv(
        out_dir / "block_errors.csv",
        "jacobian-block-errors",
        ["k", "block", "dist_fd", "fd_noise"],
        [[row.k, row.block, _fmt(row.dist_fd1), _fmt(row.dist_fd12)] for row in report],
    )
    worst = max(row.dist_fd1 for row in report)
    summary = {
        "n_steps": rocket_cfg.n_steps,
        "eps": cfg.eps,
        "sigma": cfg.verify_sigma,
        "max_error": worst,
        "alert_threshold_met": bool(worst < 1e-4),
        "reference_level_met": bool(worst < 1e-5),
    }
    write_manifest(cfg, summary, time.perf_counter() - t0)
    level = "below" if summary["reference_level_met"] else "above"
    print(f"verify: max block error {worst:.3e} ({level} the 1e-5 reference level)")
    return summary, EXIT_OK if summary["alert_threshold_met"] else EXIT_NUMERICAL


def cmd_rocket(cfg: RunConfig) -> tuple[dict, int]:
    """Noise sweep of the transition-operator inversion."""
    t0 = time.perf_counter()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rocket_cfg = RocketConfig()
    summary: dict = {"sigmas": list(cfg.sigmas), "per_sigma": {}}
    op_rows = []
    failed = False
    for sigma in cfg.sigmas:
        tag = _sig_tag(sigma)
        try:
            run = rocket_experiment(rocket_cfg, (sigma,), cfg.seed)[0]
        except NUMERICAL_ERRORS as exc:
            summary["per_sigma"][tag] = {"error": f"{type(exc).__name__}: {exc}"}
            failed = True
            continue
        truth_to_csv(run.truth, rocket_cfg, out_dir / f"truth_{tag}")
        for name, matrix in (("true", rocket_cfg.F_true),
                             ("initial", run.f_init),
                             ("optimized", run.f_opt)):
            for i in range(2):
                for j in range(2):
                    op_rows.append([tag, name, i, j, _fmt(matrix[i, j])])
        dt = rocket_cfg.dt
        _write_csv(
            out_dir / f"trajectories_{tag}.csv",
            "rocket-trajectories",
            ["k", "t", "alt_true", "vel_true", "obs",
             "alt_base", "vel_base", "alt_opt", "vel_opt"],
            [
                [k + 1, _fmt((k + 1) * dt),
                 _fmt(run.truth.states[k + 1][0]), _fmt(run.truth.states[k + 1][1]),
                 _fmt(run.truth.obs_noisy[k][0]),
                 _fmt(run.trace_base.x_post[k][0]), _fmt(run.trace_base.x_post[k][1]),
                 _fmt(run.trace_opt.x_post[k][0]), _fmt(run.trace_opt.x_post[k][1])]
                for k in range(rocket_cfg.n_steps)
            ],
        )
        _write_csv(
            out_dir / f"history_{tag}.csv",
            "inversion-history-rounds",
            ["round", "iter", "loss", "grad_max_norm"],
            _history_rows(run.stages),
        )
        summary["per_sigma"][tag] = {
            "rmse_base": run.rmse_base,
            "rmse_optimized": run.rmse_opt,
            "rmse_ratio": run.ratio,
            "f_optimized": run.f_opt.tolist(),
            "wall_time_s": round(run.wall_time, 3),
        }
    _write_csv(out_dir / "operators.csv", "rocket-operators",
               ["sigma", "which", "row", "col", "value"], op_rows)
    write_manifest(cfg, summary, time.perf_counter() - t0)
    return summary, EXIT_NUMERICAL if failed else EXIT_OK


def cmd_allen_cahn(cfg: RunConfig) -> tuple[dict, int]:
    """Noise sweep: table inversion, closure training, re-filtered run."""
    t0 = time.perf_counter()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    ac_cfg = allen_cahn_config()
    grid = np.linspace(0.0, 1.0, 101)
    summary: dict = {"sigmas": list(cfg.sigmas), "per_sigma": {}}
    failed = False
    for sigma in cfg.sigmas:
        tag = _sig_tag(sigma)
        try:
            run = allen_cahn_experiment(ac_cfg, (sigma,), cfg.seed)[0]
        except NUMERICAL_ERRORS as exc:
            summary["per_sigma"][tag] = {"error": f"{type(exc).__name__}: {exc}"}
            failed = True
            continue
        truth_to_csv(run.truth, ac_cfg, out_dir / f"truth_{tag}")
        keep = (run.grad_max > 1e-10) & (
            run.support_mass >= AC_MASS_FLOOR_FRAC * run.support_mass.sum())
        _write_csv(
            out_dir / f"table_{tag}.csv",
            "diffusivity-table-identified",
            ["v_node", "d_value", "grad_max", "support_mass", "kept"],
            [
                [_fmt(v), _fmt(d), _fmt(g), _fmt(m), int(k)]
                for v, d, g, m, k in zip(run.table.nodes, run.table.values,
                                         run.grad_max, run.support_mass, keep)
            ],
        )
        _write_csv(
            out_dir / f"dv_{tag}.csv",
            "diffusivity-curves",
            ["v", "d_true", "d_table", "d_closure"],
            [
                [_fmt(v), _fmt(dt_), _fmt(dtab), _fmt(dmlp)]
                for v, dt_, dtab, dmlp in zip(
                    grid, diffusivity_true(grid), run.table(grid),
                    predict_diffusivity(run.closure_model, grid))
            ],
        )
        _write_csv(
            out_dir / f"relfrob_{tag}.csv",
            "operator-error-series",
            ["k", "err_base", "err_inverted", "err_closure"],
            [
                [k + 1, _fmt(run.err_base[k]), _fmt(run.err_inv[k]), _fmt(run.err_closure[k])]
                for k in range(ac_cfg.n_steps)
            ],
        )
        field_rows = []
        cov_rows = []
        P_ref = run_filter(ac_reference_model(ac_cfg, run.truth), run.truth.obs_noisy).P_post
        for k in range(ac_cfg.n_steps):
            vt = run.truth.states[k + 1]
            for cell in range(ac_cfg.n):
                field_rows.append([
                    k + 1, cell, _fmt(vt[cell]),
                    _fmt(run.trace_base.x_post[k][cell]),
                    _fmt(run.trace_inv.x_post[k][cell]),
                    _fmt(run.trace_closure.x_post[k][cell]),
                    _fmt(abs(run.trace_base.x_post[k][cell] - vt[cell])),
                    _fmt(abs(run.trace_inv.x_post[k][cell] - vt[cell])),
                    _fmt(abs(run.trace_closure.x_post[k][cell] - vt[cell])),
                ])
                ref = P_ref[k][cell, cell]
                cov_rows.append([
                    k + 1, cell, _fmt(ref),
                    _fmt(run.trace_base.P_post[k][cell, cell]),
                    _fmt(run.trace_inv.P_post[k][cell, cell]),
                    _fmt(run.trace_closure.P_post[k][cell, cell]),
                    _fmt(abs(run.trace_base.P_post[k][cell, cell] - ref)),
                    _fmt(abs(run.trace_inv.P_post[k][cell, cell] - ref)),
                    _fmt(abs(run.trace_closure.P_post[k][cell, cell] - ref)),
                ])
        _write_csv(out_dir / f"fields_{tag}.csv", "state-fields",
                   ["k", "cell", "v_true", "mean_base", "mean_inverted", "mean_closure",
                    "abserr_base", "abserr_inverted", "abserr_closure"], field_rows)
        _write_csv(out_dir / f"cov_{tag}.csv", "covariance-diagonals",
                   ["k", "cell", "var_ref", "var_base", "var_inverted", "var_closure",
                    "dev_base", "dev_inverted", "dev_closure"], cov_rows)
        _write_csv(out_dir / f"history_{tag}.csv", "inversion-history-rounds",
                   ["round", "iter", "loss", "grad_max_norm"], _history_rows(run.outers))
        save_checkpoint(run.closure_model, out_dir / f"closure_{tag}.ckpt")
        predictions_to_csv(run.closure_model, grid, out_dir / f"closure_pred_{tag}.csv")
        closure_rmse = float(np.sqrt(np.mean(
            (predict_diffusivity(run.closure_model, grid) - diffusivity_true(grid)) ** 2)))
        summary["per_sigma"][tag] = {
            "rmse_base": run.rmse_base,
            "rmse_inverted": run.rmse_inv,
            "rmse_closure": run.rmse_closure,
            "ratio_inverted": run.ratio_inv,
            "ratio_closure": run.ratio_closure,
            "op_err_base_band": [float(run.err_base.min()), float(run.err_base.max())],
            "op_err_inverted_max": float(run.err_inv.max()),
            "op_err_closure_max": float(run.err_closure.max()),
            "closure_rmse_on_grid": closure_rmse,
            "kept_entries": int(keep.sum()),
            "wall_time_s": round(run.wall_time_invert + run.wall_time_closure, 3),
        }
    write_manifest(cfg, summary, time.perf_counter() - t0)
    return summary, EXIT_NUMERICAL if failed else EXIT_OK


def _read_table_csv(path: pathlib.Path) -> Dataset:
    """Rebuild the training set from a stored table_*.csv (kept rows only)."""
    if not path.is_file():
        raise MissingInput(f"inversion output not found: {path}")
    nodes, values = [], []
    with open(path) as fh:
        first = fh.readline()
        if "diffusivity-table" not in first:
            raise MissingInput(f"{path} is not a diffusivity table file")
        reader = csv.DictReader(fh)
        for row in reader:
            if int(row["kept"]):
                nodes.append(float(row["v_node"]))
                values.append(float(row["d_value"]))
    if not nodes:
        raise MissingInput(f"{path} has no identified entries")
    return Dataset(np.array(nodes)[:, None], np.array(values)[:, None],
                   provenance=str(path))


def cmd_closure(cfg: RunConfig) -> tuple[dict, int]:
    """Retrain the closure from stored inversion output."""
    t0 = time.perf_counter()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    inv_dir = pathlib.Path(cfg.inversion_dir)
    grid = np.linspace(0.0, 1.0, 101)
    summary: dict = {"sigmas": list(cfg.sigmas), "inversion_dir": str(inv_dir), "per_sigma": {}}
    for sigma in cfg.sigmas:
        tag = _sig_tag(sigma)
        dataset = _read_table_csv(inv_dir / f"table_{tag}.csv")
        train_cfg = TrainConfig(hidden=cfg.hidden, epochs=cfg.epochs, lr=cfg.lr,
                                val_frac=cfg.val_frac,
                                seed=derive_seed(cfg.seed, "closure", sigma) % 2**31)
        model, history = train(dataset, train_cfg)
        ckpt = out_dir / f"closure_{tag}.ckpt"
        save_checkpoint(model, ckpt)
        predictions_to_csv(model, grid, out_dir / f"closure_pred_{tag}.csv")
        val = history["val_loss"]
        _write_csv(
            out_dir / f"training_{tag}.csv",
            "closure-training-history",
            ["epoch", "train_loss", "val_loss"],
            [
                [e + 1, _fmt(tr), _fmt(val[e]) if e < len(val) else ""]
                for e, tr in enumerate(history["train_loss"])
            ],
        )
        summary["per_sigma"][tag] = {
            "n_train": dataset.n,
            "best_val_loss": float(val.min()) if len(val) else None,
            "checkpoint_sha256": _sha256(ckpt),
        }
    write_manifest(cfg, summary, time.perf_counter() - t0)
    return summary, EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adjkf",
        description="Adjoint-differentiated Kalman filtering experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("verify", "check analytic Jacobian blocks against finite differences"),
        ("rocket", "run the transition-operator inversion noise sweep"),
        ("allen-cahn", "run the diffusivity inversion and closure sweep"),
        ("closure", "retrain the closure from stored inversion output"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None, help="INI configuration file")
        cmd.add_argument("--seed", type=int, default=None, help="root seed override")
        cmd.add_argument("--out", default=None, help="output root override")
        cmd.add_argument("--sigma", default=None,
                         help="noise level list override, e.g. '0.005,0.025'")
    return parser


_HANDLERS = {
    "verify": cmd_verify,
    "rocket": cmd_rocket,
    "allen-cahn": cmd_allen_cahn,
    "closure": cmd_closure,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args)
    except (MissingInput, ValueError, configparser.Error) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        _, code = _HANDLERS[args.command](cfg)
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AdjkfError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return code


if __name__ == "__main__":
    sys.exit(main())
