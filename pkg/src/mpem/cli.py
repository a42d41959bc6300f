"""Command-line entry point: ``mpem {simulate,reconstruct,sweep,image} --config FILE``.

Config files are flat ``key = value`` lines (``#`` comments allowed); any
key may also be overridden by the matching command-line flag.  Relative
paths inside a config file resolve against the file's directory.

Exit codes: 0 success, 1 finished with MaxIterWarning, 2 I/O error,
3 validation error.
"""
import argparse
import configparser
import dataclasses
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import io as mio
from .em import EmConfig, EmTrace, grid_search, run_em
from .errors import DimensionError, InvalidLevels, MaxIterWarning, RangeError
from .experiments import (
    MATRIX_KINDS,
    TrialSpec,
    aggregate,
    build_operator,
    nmse,
    psnr_db,
    reconstruct_image,
    run_sweep,
    synth_image,
    write_aggregate_csv,
    write_results_csv,
)
from .rng import derive_seed
from .sensing import DenseOperator, StructurallyRandomOperator, simulate_measurements
from .tree import HmtParams, build_tree, sample_prior

logger = logging.getLogger("mpem")

EXIT_OK, EXIT_WARN, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3


class ValidationError(Exception):
    pass


@dataclass
class RunConfig:
    # geometry
    rows: int = 32
    cols: int = 32
    levels: int = 4
    # algorithm tuning constants
    gamma2: float = 1000.0
    eps2: float = 0.1
    p_root: float = 0.2
    p_high: float = 0.2
    p_low: float = 1e-5
    # true model used to simulate data
    gamma2_star: float = 1e4
    eps2_star: float = 1.0
    p_root_star: float = 0.5
    p_high_star: float = 0.5
    p_low_star: float = 1e-4
    sigma2_star: float = 1e-6
    signal_sigma2: float = None  # prior variance scale for the signal; None = sigma2_star
    # sensing
    matrix_kind: str = "white"
    corr: list = field(default_factory=lambda: [0.0])
    n_over_p: list = field(default_factory=lambda: [0.4])
    # EM / grid
    delta: float = 1e-10
    max_iters: int = 2000
    grid_k: int = 16
    grid_d: float = 2.0
    refine: int = 0
    sigma2_fixed: float = None
    # runs
    seed: int = 0
    trials: int = 50
    threads: int = 0
    baselines: bool = False
    timing: bool = True
    out: str = "out"
    # reconstruct inputs
    matrix: str = None
    operator: str = None
    op_seed: int = None
    y: str = None
    s_true: str = None
    q_true: str = None
    # image
    image: str = None
    image_kind: str = "blocks"

    @property
    def params(self):
        return HmtParams(self.gamma2, self.eps2, self.p_root, self.p_high, self.p_low)

    @property
    def model(self):
        return HmtParams(
            self.gamma2_star, self.eps2_star, self.p_root_star, self.p_high_star, self.p_low_star
        )

    @property
    def em_config(self):
        return EmConfig(
            delta=self.delta, max_iters=self.max_iters, grid_K=self.grid_k,
            grid_d=self.grid_d, refine=self.refine,
        )

    @property
    def worker_count(self):
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


_LIST_KEYS = {"corr", "n_over_p"}
_PATH_KEYS = {"matrix", "y", "s_true", "q_true", "image", "out"}


def _convert(name, raw):
    fdef = RunConfig.__dataclass_fields__[name]
    default = fdef.default if fdef.default is not dataclasses.MISSING else None
    raw = raw.strip()
    if name in _LIST_KEYS:
        return [float(v) for v in raw.split(",") if v.strip()]
    if raw.lower() in ("", "none"):
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if name in ("sigma2_fixed", "signal_sigma2") or isinstance(default, float):
        return float(raw)
    if isinstance(default, int) or name == "op_seed":
        return int(raw)
    return raw


def read_config_file(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    with open(path) as f:
        parser.read_string("[run]\n" + f.read(), source=path)
    base = os.path.dirname(os.path.abspath(path))
    values = {}
    for key, raw in parser["run"].items():
        key = key.replace("-", "_")
        if key not in RunConfig.__dataclass_fields__:
            raise ValidationError(f"{path}: unknown key {key!r}")
        val = _convert(key, raw)
        if key in _PATH_KEYS and val is not None and not os.path.isabs(val):
            val = os.path.join(base, val)
        values[key] = val
    return values


def write_manifest(path, values, comments=()):
    with open(path, "w") as f:
        for line in comments:
            f.write(f"# {line}\n")
        for key, val in values.items():
            if val is None:
                continue
            if isinstance(val, list):
                val = ",".join(repr(float(v)) for v in val)
            elif isinstance(val, (float, np.floating)) and not isinstance(val, bool):
                val = repr(float(val))
            f.write(f"{key} = {val}\n")


def make_config(args):
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    overrides = {
        "seed": args.seed, "threads": args.threads, "sigma2_fixed": args.sigma2_fixed,
        "grid_k": args.grid_k, "grid_d": args.grid_d, "delta": args.delta,
        "trials": args.trials, "out": args.out,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    if cfg.matrix_kind not in MATRIX_KINDS:
        raise ValidationError(f"matrix_kind must be one of {MATRIX_KINDS}, got {cfg.matrix_kind!r}")
    return cfg


# -- commands ----------------------------------------------------------------


def cmd_simulate(cfg):
    tree = build_tree(cfg.rows, cfg.cols, cfg.levels)
    n_over_p, corr = cfg.n_over_p[0], cfg.corr[0]
    N = max(1, int(round(n_over_p * tree.p)))
    seeds = {name: derive_seed(cfg.seed, name) for name in ("signal", "matrix", "noise")}
    # the prior scales coefficient variances by sigma2; noiseless data need a separate scale
    scale = cfg.signal_sigma2 if cfg.signal_sigma2 is not None else cfg.sigma2_star
    if not scale > 0:
        raise ValidationError("sigma2_star = 0 needs a positive signal_sigma2")
    truth = sample_prior(tree, cfg.model, scale, seeds["signal"])
    op = build_operator(cfg.matrix_kind, cfg.rows, cfg.cols, cfg.levels, N, corr, seeds["matrix"])
    meas = simulate_measurements(op, truth.s, cfg.sigma2_star, seeds["noise"])

    os.makedirs(cfg.out, exist_ok=True)
    manifest = dataclasses.asdict(cfg)
    manifest.update(
        n_over_p=[n_over_p], corr=[corr], y="y.mpcs", s_true="s_true.mpcs",
        q_true="q_true.mpcs", out="reconstruction", op_seed=seeds["matrix"],
        operator=None, matrix=None, image=None,
    )
    if isinstance(op, StructurallyRandomOperator):
        manifest["operator"] = "structurally_random"
    else:
        mio.write_matrix(os.path.join(cfg.out, "H.mpcs"), op.matrix)
        manifest["matrix"] = "H.mpcs"
    mio.write_matrix(os.path.join(cfg.out, "y.mpcs"), meas.y)
    mio.write_matrix(os.path.join(cfg.out, "s_true.mpcs"), truth.s)
    mio.write_matrix(os.path.join(cfg.out, "q_true.mpcs"), truth.q)
    path = os.path.join(cfg.out, "manifest.txt")
    header = [f"derived seed {name} = {s}" for name, s in seeds.items()]
    write_manifest(path, manifest, comments=header)
    print(f"wrote {path} (p={tree.p}, N={N}, kind={cfg.matrix_kind})")
    return EXIT_OK


def _require(path, what):
    if path is None:
        raise ValidationError(f"missing {what} path")
    if not os.path.exists(path):
        raise ValidationError(f"{what} file not found: {path}")
    return path


def load_operator(cfg, tree):
    if cfg.operator == "structurally_random":
        if cfg.op_seed is None:
            raise ValidationError("structurally_random operator needs op_seed")
        y = mio.read_matrix(_require(cfg.y, "y"))
        return StructurallyRandomOperator(cfg.rows, cfg.cols, y.size, cfg.levels, cfg.op_seed)
    H = mio.read_matrix(_require(cfg.matrix, "matrix"), squeeze=False)
    if H.shape[1] != tree.p:
        raise ValidationError(f"{cfg.matrix}: has {H.shape[1]} columns, expected p={tree.p}")
    return DenseOperator(H, spectral_norm=1.0)


def cmd_reconstruct(cfg):
    tree = build_tree(cfg.rows, cfg.cols, cfg.levels)
    op = load_operator(cfg, tree)
    y = mio.read_matrix(_require(cfg.y, "y"))
    if y.shape != (op.n_measurements,):
        raise ValidationError(f"{cfg.y}: length {y.size} does not match N={op.n_measurements}")
    truth = None
    if cfg.s_true is not None:
        truth = mio.read_matrix(_require(cfg.s_true, "s_true"))
        if truth.shape != (tree.p,):
            raise ValidationError(f"{cfg.s_true}: length {truth.size}, expected p={tree.p}")

    em_cfg = cfg.em_config
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MaxIterWarning)
        if cfg.sigma2_fixed is not None:
            theta, run = run_em(op, y, cfg.sigma2_fixed, np.zeros(tree.p), em_cfg, tree, cfg.params)
            trace = EmTrace(runs=[run], selected=0)
            sig2 = cfg.sigma2_fixed
        else:
            sig2, theta, trace = grid_search(op, y, em_cfg, tree, cfg.params)
    hit_max = any(issubclass(w.category, MaxIterWarning) for w in caught)

    os.makedirs(cfg.out, exist_ok=True)
    mio.write_matrix(os.path.join(cfg.out, "s_hat.mpcs"), theta.s)
    mio.write_matrix(os.path.join(cfg.out, "q_hat.mpcs"), theta.q)
    trace.write_iterations_csv(os.path.join(cfg.out, "trace_iterations.csv"))
    trace.write_grid_csv(os.path.join(cfg.out, "trace_grid.csv"))
    summary = {"sigma2_selected": sig2, "em_iters_total": trace.total_iterations,
               "n_high": int(theta.q.sum()), "max_iter_warning": hit_max}
    line = f"sigma2={sig2:.6g} iters={trace.total_iterations} n_high={int(theta.q.sum())}"
    if truth is not None:
        summary["nmse"] = nmse(theta.s, truth)
        summary["psnr_db"] = psnr_db(theta.s, truth)
        line += f" nmse={summary['nmse']:.6g} psnr_db={summary['psnr_db']:.4f}"
    write_manifest(os.path.join(cfg.out, "summary.txt"), summary)
    print(line)
    return EXIT_WARN if hit_max else EXIT_OK


def cmd_sweep(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    spec_results, aggs = [], []
    any_max = False
    for corr in cfg.corr:
        for n_over_p in cfg.n_over_p:
            spec = TrialSpec(
                rows=cfg.rows, cols=cfg.cols, levels=cfg.levels, matrix_kind=cfg.matrix_kind,
                corr=corr, n_over_p=n_over_p, model=cfg.model, sigma2_star=cfg.sigma2_star,
                params=cfg.params, config=cfg.em_config, seed=cfg.seed, n_trials=cfg.trials,
                baselines=cfg.baselines, record_timing=cfg.timing,
            )

            def progress(spec, r):
                status = r.error or ("max-iter" if r.max_iter_hit else "ok")
                print(f"{spec.matrix_kind} corr={spec.corr} N/p={spec.n_over_p} trial={r.trial} "
                      f"nmse={r.nmse:.4e} sigma2={r.sigma2_selected:.3e} {status}", flush=True)

            results = run_sweep(spec, threads=cfg.worker_count, progress=progress)
            spec_results.append((spec, results))
            agg = aggregate(spec, results)
            aggs.append(agg)
            any_max |= agg.n_max_iter > 0
    write_results_csv(os.path.join(cfg.out, "trials.csv"), spec_results)
    write_aggregate_csv(os.path.join(cfg.out, "aggregate.csv"), aggs)
    for a in aggs:
        print(f"{a.matrix_kind} corr={a.r_or_c} N/p={a.n_over_p}: mean nmse={a.mean_nmse:.4e} "
              f"(se {a.se_nmse:.2e}, n={a.n_trials}, failed={a.n_failed})")
    return EXIT_WARN if any_max else EXIT_OK


def cmd_image(cfg):
    if cfg.image:
        img = mio.read_pgm(_require(cfg.image, "image"))
    else:
        img = synth_image(cfg.image_kind, cfg.rows, cfg.cols, derive_seed(cfg.seed, "image"))
    rows, cols = img.shape
    block = 2**cfg.levels
    if rows % block or cols % block:
        raise DimensionError(f"image {rows}x{cols} is not divisible by 2**levels = {block}")
    em_cfg = cfg.em_config
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MaxIterWarning)
        res = reconstruct_image(
            img, cfg.levels, cfg.n_over_p[0], cfg.seed, matrix_kind=cfg.matrix_kind,
            corr=cfg.corr[0], config=em_cfg, params=cfg.params,
        )
    hit_max = any(issubclass(w.category, MaxIterWarning) for w in caught)
    os.makedirs(cfg.out, exist_ok=True)
    mio.write_pgm(os.path.join(cfg.out, "original.pgm"), img)
    mio.write_pgm(os.path.join(cfg.out, "reconstructed.pgm"), res.estimate)
    res.trace.write_grid_csv(os.path.join(cfg.out, "trace_grid.csv"))
    write_manifest(
        os.path.join(cfg.out, "metrics.txt"),
        {"psnr_db": res.psnr_db, "nmse": res.nmse, "sigma2_selected": res.sigma2_selected,
         "em_iters_total": res.trace.total_iterations},
    )
    print(f"{rows}x{cols} N/p={cfg.n_over_p[0]} psnr_db={res.psnr_db:.3f} nmse={res.nmse:.4e}")
    return EXIT_WARN if hit_max else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "image": cmd_image,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mpem", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--sigma2-fixed", type=float)
    parser.add_argument("--grid-k", type=int)
    parser.add_argument("--grid-d", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--trials", type=int)
    parser.add_argument("--out", metavar="DIR")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](cfg)
    except (ValidationError, DimensionError, InvalidLevels, RangeError, ValueError) as exc:
        print(f"mpem: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"mpem: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
