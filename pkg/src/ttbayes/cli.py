"""Command-line interface: ``ttbayes <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes a JSON manifest (config, version, seed, outputs, timings).
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as tio
from .als_engine import BayesTDModel, StoppingRule, bayes_als, conventional_als
from .exceptions import NumericalError
from .experiments import (
    ExperimentConfig,
    image_pipeline,
    run_comparison,
    run_convergence,
    run_covariance_study,
    substream,
)
from .gaussian import GaussianComponent
from .ortho_bayes import bayes_als_ortho
from .tt_format import tt_svd
from .unscented_tt import UTParams, ut_tt, ut_variances

logger = logging.getLogger("ttbayes")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
FLAT_PRIOR_VAR = 1e12


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"time": record.created, "level": record.levelname,
                           "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet, json_logs):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs
                         else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("ttbayes")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    root.propagate = False


class _Run:
    """Collects outputs and stage timings for the manifest."""

    def __init__(self, args):
        self.args = args
        self.outputs = []
        self.timings = {}
        self.config = {}
        self.seed = None
        self.exit_code = None

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = time.perf_counter() - self.t0

        return _Timer()

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def manifest(self, path):
        tio.write_json(path, {
            "tool": "ttbayes",
            "version": __version__,
            "command": self.args.command,
            "argv": self.args.argv,
            "config": self.config,
            "seed": self.seed,
            "exit_code": self.exit_code,
            "outputs": self.outputs,
            "timings": self.timings,
        })


def _env_seed(default):
    value = os.environ.get("TTBAYES_SEED")
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"TTBAYES_SEED must be an integer, got {value!r}") from None


def _parse_ranks(text):
    try:
        return tuple(int(r) for r in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"ranks must be integers, got {text!r}") from None


def _default_out(path, suffix):
    p = Path(path)
    return p.with_suffix(suffix)


# ---------------------------------------------------------------------------
# subcommands


def cmd_tt_svd(args, run):
    t = tio.read_tensor(args.tensor)
    out = Path(args.output or _default_out(args.tensor, ".ttt"))
    run.config = {"eps": args.eps, "ranks": args.ranks}
    with run.stage("tt_svd"):
        if args.ranks is not None:
            tt = tt_svd(t, ranks=_parse_ranks(args.ranks))
        else:
            tt = tt_svd(t, eps=args.eps)
    tio.write_tt(run.output(out), tt)
    logger.info("wrote %s with ranks %s", out, tt.ranks)
    return out.parent


def _flat_prior(dims, ranks, seed):
    rng = substream(seed, "init", 0)
    comps = [GaussianComponent.isotropic(rng.standard_normal(ranks[k] * dims[k] * ranks[k + 1]),
                                         FLAT_PRIOR_VAR)
             for k in range(len(dims))]
    return comps


def cmd_decompose(args, run):
    t = tio.read_tensor(args.tensor)
    run.seed = _env_seed(args.seed)
    if args.prior == "flat":
        if args.ranks is None:
            raise UsageError("--ranks is required with --prior flat")
        if args.sigma2 is None:
            raise UsageError("--sigma2 is required with --prior flat")
        ranks = _parse_ranks(args.ranks)
        if len(ranks) != t.ndim + 1:
            raise UsageError(f"{t.ndim}-way tensor needs {t.ndim + 1} ranks, got {ranks}")
        model = BayesTDModel("tt", t.shape, ranks, _flat_prior(t.shape, ranks, run.seed),
                             args.sigma2)
    else:
        model = tio.read_model(args.prior)
        if tuple(model.dims) != t.shape:
            raise ValueError(f"prior has dims {model.dims}, tensor has {t.shape}")
        if args.sigma2 is not None:
            model = model.replace(noise_var=args.sigma2)
    run.config = {"alg": args.alg, "prior": args.prior, "sigma2": model.noise_var,
                  "ranks": list(model.ranks), "max_sweeps": args.max_sweeps,
                  "meas_tol": args.meas_tol}
    stop = StoppingRule(max_sweeps=args.max_sweeps, meas_tol=args.meas_tol)
    with run.stage("decompose"):
        if args.alg == "bayes":
            post, trace = bayes_als(model, t, stop)
        elif args.alg == "bayes-ortho":
            post, trace = bayes_als_ortho(model, t, stop)
        else:
            post, trace = conventional_als(model, t, stop)
    out = Path(args.output or _default_out(args.tensor, ".tbm"))
    tio.write_model(run.output(out), post)
    trace_path = out.with_suffix(".trace.csv")
    trace.to_csv(run.output(trace_path))
    logger.info("wrote %s; final eps_meas %.4g", out, trace.rows[-1]["eps_meas"])
    return out.parent


def cmd_ut(args, run):
    model = tio.read_model(args.model)
    params = UTParams(alpha=args.alpha, beta=args.beta, kappa=args.kappa)
    run.config = {"alpha": args.alpha, "beta": args.beta, "kappa": args.kappa,
                  "round_tol": [args.mean_tol, args.cov_tol]}
    with run.stage("ut"):
        m_ut, p_ut = ut_tt(model, params, round_tol=(args.mean_tol, args.cov_tol))
    stem = Path(args.output or Path(args.model).with_suffix(""))
    tio.write_tt(run.output(stem.with_suffix(".mean.ttt")), m_ut)
    tio.write_ttm(run.output(stem.with_suffix(".cov.ttm")), p_ut)
    if args.variances:
        var = ut_variances(p_ut)
        tio.write_csv(run.output(stem.with_suffix(".var.csv")),
                      [{"index": i, "variance": repr(float(v))} for i, v in enumerate(var)])
    logger.info("UT mean ranks %s, covariance ranks %s", m_ut.ranks, p_ut.ranks)
    return stem.parent


def _image_experiment(cfg, base, out_dir, run):
    if not cfg.image:
        raise UsageError("image experiment needs an 'image' path in the config")
    path = Path(cfg.image)
    if not path.is_absolute():
        path = base / path
    img = tio.read_image(path)
    if img.shape != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image is {img.shape}, config expects {cfg.image_size}x{cfg.image_size}")
    checkpoints = sorted({k for k in cfg.sample_grid if k <= cfg.n_samples} | {cfg.n_samples})
    algorithms = [cfg.algorithm] if cfg.algorithm == "conventional" else [cfg.algorithm,
                                                                           "conventional"]
    rows = []
    for alg in algorithms:
        with run.stage(f"image_{alg}"):
            res = image_pipeline(img, tt_eps=cfg.tt_eps, snr_db=cfg.snr_db,
                                 n_samples=cfg.n_samples, algorithm=alg, seed=cfg.seed,
                                 prior_b=cfg.prior_b, max_sweeps=cfg.max_sweeps,
                                 checkpoints=checkpoints, snr_convention=cfg.snr_convention,
                                 pixel_scale=cfg.pixel_scale)
        tio.write_image(run.output(out_dir / f"reconstruction_{alg}.pgm"),
                        res["reconstruction"])
        rows += [{"algorithm": alg, "n_samples": k, "eps_truth": repr(e)}
                 for k, e in sorted(res["errors"].items())]
    tio.write_image(run.output(out_dir / "truth.pgm"), res["truth"])
    tio.write_csv(run.output(out_dir / "errors.csv"), rows)
    run.config["tt_ranks"] = list(res["ranks"])


def _csv_rows(rows):
    return [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows]


def cmd_experiment(args, run):
    config_path = Path(args.config)
    try:
        cfg = ExperimentConfig.from_json(config_path.read_text())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {config_path}: {exc}") from None
    cfg.seed = _env_seed(cfg.seed)
    if args.threads is not None:
        cfg.threads = args.threads
    run.seed = cfg.seed
    run.config = cfg.to_dict()
    out_dir = Path(args.out_dir or config_path.with_suffix(""))
    out_dir.mkdir(parents=True, exist_ok=True)
    tio.write_json(run.output(out_dir / "config.json"), cfg.to_dict())
    if args.study == "image":
        _image_experiment(cfg, config_path.parent, out_dir, run)
        return out_dir
    runner = {"convergence": run_convergence, "covariance": run_covariance_study,
              "comparison": run_comparison}[args.study]
    with run.stage(args.study):
        res = runner(cfg)
    for key, rows in res.items():
        if isinstance(rows, list):
            tio.write_csv(run.output(out_dir / f"{key}.csv"), _csv_rows(rows))
    return out_dir


def cmd_inspect(args, run):
    kind, obj = tio.read_any(args.file)
    info = tio.describe(kind, obj)
    print(json.dumps(info, indent=2, sort_keys=True))
    if args.rewrite:
        tio.write_any(run.output(args.rewrite), kind, obj)
        return Path(args.rewrite).parent
    return Path(args.file).parent


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--json-logs", action="store_true", help="log as JSON lines")
    common.add_argument("--threads", type=int, default=None, help="worker thread cap")
    common.add_argument("--manifest", default=None, help="manifest path")

    parser = _Parser(prog="ttbayes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tt-svd", parents=[common], help="TT-SVD of a dense tensor")
    p.add_argument("tensor")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--eps", type=float)
    g.add_argument("--ranks", help="rank chain, e.g. '1,3,3,1'")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_tt_svd)

    p = sub.add_parser("decompose", parents=[common], help="Bayesian or conventional TT-ALS")
    p.add_argument("tensor")
    p.add_argument("--alg", choices=("bayes", "bayes-ortho", "als"), default="bayes-ortho")
    p.add_argument("--prior", required=True, help="TBM1 model file or 'flat'")
    p.add_argument("--sigma2", type=float, help="noise variance")
    p.add_argument("--ranks", help="rank chain for a flat prior")
    p.add_argument("--max-sweeps", type=int, default=20)
    p.add_argument("--meas-tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ut", parents=[common], help="unscented transform of a model")
    p.add_argument("model")
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--mean-tol", type=float, default=1e-10)
    p.add_argument("--cov-tol", type=float, default=1e-8)
    p.add_argument("--variances", action="store_true", help="also write per-entry variances")
    p.add_argument("-o", "--output", help="output stem")
    p.set_defaults(func=cmd_ut)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment from a config")
    p.add_argument("study", choices=("convergence", "covariance", "comparison", "image"))
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("inspect", parents=[common], help="describe a binary file")
    p.add_argument("file")
    p.add_argument("--rewrite", help="write the file back out to this path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv
    _setup_logging(args.quiet, args.json_logs)
    run = _Run(args)
    code = EXIT_OK
    out_dir = Path(".")
    try:
        out_dir = args.func(args, run) or out_dir
    except UsageError as exc:
        print(f"ttbayes: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except NumericalError as exc:
        print(f"ttbayes: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except (ValueError, TypeError, OSError) as exc:
        print(f"ttbayes: data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"ttbayes: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    run.exit_code = code
    manifest = Path(args.manifest) if args.manifest else Path(out_dir) / "manifest.json"
    try:
        run.manifest(manifest)
    except OSError as exc:
        print(f"ttbayes: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
