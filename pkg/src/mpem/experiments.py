"""Monte Carlo reconstruction experiments, metrics and reference baselines."""
import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .em import EmConfig, grid_search, mmse_given_q
from .errors import MaxIterWarning, RangeError, ZeroSignalError
from .rng import derive_seed, stream
from .sensing import (
    IdentityTransform,
    gen_col_correlated,
    gen_row_correlated,
    gen_white_gaussian,
    haar_dwt2,
    haar_idwt2,
    grid_to_vec,
    scale_to_unit_spectral_norm,
    simulate_measurements,
    structurally_random_operator,
    vec_to_grid,
    HaarTransform,
)
from .tree import HmtParams, build_tree, sample_prior

logger = logging.getLogger(__name__)

MATRIX_KINDS = ("white", "row_corr", "col_corr", "structurally_random")

# true-model parameters of the small-scale simulations (medium SNR)
MODEL_MEDIUM_SNR = HmtParams(gamma2=1e4, eps2=1.0, p_root=0.5, p_high=0.5, p_low=1e-4)
SIGMA2_STAR = 1e-6

RESULT_COLUMNS = [
    "trial",
    "seed",
    "matrix_kind",
    "r_or_c",
    "N_over_p",
    "gamma2_star",
    "nmse",
    "psnr_db",
    "sigma2_selected",
    "em_iters_total",
    "wall_ms",
]
BASELINE_COLUMNS = ["nmse_genie", "nmse_all_high"]


def nmse(estimate, truth):
    truth = np.asarray(truth, dtype=float)
    energy = float(truth @ truth)
    if energy == 0.0:
        raise ZeroSignalError("NMSE is undefined for an all-zero reference signal")
    err = np.asarray(estimate, dtype=float) - truth
    return float(err @ err) / energy


def psnr_db(estimate, truth, transform=None):
    """Peak SNR in dB, with the peak range taken from the truth in image domain.

    Exact recovery gives ``inf``.
    """
    truth = np.asarray(truth, dtype=float)
    psi = transform if transform is not None else IdentityTransform(truth.size)
    image = psi.synthesis(truth)
    span = float(image.max() - image.min())
    if span <= 0:
        raise RangeError("image range is zero; PSNR is undefined")
    err = np.asarray(estimate, dtype=float) - truth
    mse = float(err @ err) / truth.size
    if mse == 0.0:
        return np.inf
    return float(10.0 * np.log10(span**2 / mse))


def genie_baseline(q_true, op, y, params):
    """MMSE estimate given the true state vector."""
    return mmse_given_q(q_true, op, y, params)


def all_high_baseline(op, y, params):
    return mmse_given_q(np.ones(op.n_coefficients, dtype=np.int8), op, y, params)


@dataclass
class TrialSpec:
    rows: int = 32
    cols: int = 32
    levels: int = 4
    matrix_kind: str = "white"
    corr: float = 0.0
    n_over_p: float = 0.4
    model: HmtParams = MODEL_MEDIUM_SNR
    sigma2_star: float = SIGMA2_STAR
    params: HmtParams = field(default_factory=HmtParams)
    config: EmConfig = field(default_factory=EmConfig)
    seed: int = 0
    n_trials: int = 50
    baselines: bool = False
    record_timing: bool = True

    def __post_init__(self):
        if self.matrix_kind not in MATRIX_KINDS:
            raise ValueError(f"unknown matrix kind {self.matrix_kind!r}")
        if not 0 < self.n_over_p <= 1:
            raise RangeError(f"N/p must lie in (0, 1], got {self.n_over_p}")

    @property
    def p(self):
        return self.rows * self.cols

    @property
    def N(self):
        return max(1, int(round(self.n_over_p * self.p)))

    def trial_seed(self, trial):
        return derive_seed(self.seed, "trial", trial)


@dataclass
class TrialResult:
    trial: int
    seed: int
    nmse: float = np.nan
    psnr_db: float = np.nan
    sigma2_selected: float = np.nan
    em_iters_total: int = 0
    wall_ms: float = 0.0
    max_iter_hit: bool = False
    error: str = None
    nmse_genie: float = np.nan
    nmse_all_high: float = np.nan


def build_operator(kind, rows, cols, levels, N, corr, seed):
    """Unit-spectral-norm sensing operator for a named matrix family.

    Gaussian families use Psi = I; the structurally random family senses an
    image through the inverse Haar transform.
    """
    p = rows * cols
    if kind == "structurally_random":
        return structurally_random_operator(rows, cols, N, levels, seed)
    if kind == "white":
        phi = gen_white_gaussian(N, p, seed)
    elif kind == "row_corr":
        phi = gen_row_correlated(N, p, corr, seed)
    elif kind == "col_corr":
        phi = gen_col_correlated(N, p, corr, seed)
    else:
        raise ValueError(f"unknown matrix kind {kind!r}")
    op, _, _ = scale_to_unit_spectral_norm(phi)
    return op


def run_trial(spec, trial):
    seed = spec.trial_seed(trial)
    res = TrialResult(trial=trial, seed=seed)
    tree = build_tree(spec.rows, spec.cols, spec.levels)
    t0 = time.perf_counter()
    try:
        truth = sample_prior(tree, spec.model, spec.sigma2_star, derive_seed(seed, "signal"))
        op = build_operator(
            spec.matrix_kind, spec.rows, spec.cols, spec.levels, spec.N, spec.corr,
            derive_seed(seed, "matrix"),
        )
        y = simulate_measurements(op, truth.s, spec.sigma2_star, derive_seed(seed, "noise")).y
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MaxIterWarning)
            sig2, theta, trace = grid_search(op, y, spec.config, tree, spec.params)
        res.max_iter_hit = any(issubclass(w.category, MaxIterWarning) for w in caught)
        res.nmse = nmse(theta.s, truth.s)
        res.psnr_db = psnr_db(theta.s, truth.s)
        res.sigma2_selected = sig2
        res.em_iters_total = trace.total_iterations
        if spec.baselines:
            res.nmse_genie = nmse(genie_baseline(truth.q, op, y, spec.model), truth.s)
            res.nmse_all_high = nmse(all_high_baseline(op, y, spec.params), truth.s)
    except Exception as exc:  # recorded per trial; the sweep goes on
        logger.warning("trial %d failed: %s", trial, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    if spec.record_timing:
        res.wall_ms = 1e3 * (time.perf_counter() - t0)
    return res


def _run_trial_star(args):
    return run_trial(*args)


def run_sweep(spec, threads=1, progress=None):
    """Run ``spec.n_trials`` independent trials; results come back in trial order."""
    jobs = [(spec, i) for i in range(spec.n_trials)]
    results = []

    def collect(it):
        for r in it:
            results.append(r)
            if progress is not None:
                progress(spec, r)

    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            collect(pool.map(_run_trial_star, jobs))
    else:
        collect(run_trial(*job) for job in jobs)
    return results


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def result_rows(spec, results):
    for r in results:
        row = [
            r.trial,
            r.seed,
            spec.matrix_kind,
            spec.corr,
            spec.n_over_p,
            spec.model.gamma2,
            r.nmse,
            r.psnr_db,
            r.sigma2_selected,
            r.em_iters_total,
            r.wall_ms if spec.record_timing else 0,
        ]
        if spec.baselines:
            row += [r.nmse_genie, r.nmse_all_high]
        yield [_fmt(v) for v in row]


def write_results_csv(path, spec_results):
    """Per-trial CSV for a list of ``(spec, results)`` pairs."""
    baselines = any(spec.baselines for spec, _ in spec_results)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS + (BASELINE_COLUMNS if baselines else []))
        for spec, results in spec_results:
            for row in result_rows(spec, results):
                if baselines and not spec.baselines:
                    row += ["nan", "nan"]
                w.writerow(row)


@dataclass
class Aggregate:
    matrix_kind: str
    r_or_c: float
    n_over_p: float
    n_trials: int
    mean_nmse: float
    se_nmse: float
    mean_psnr_db: float
    n_failed: int
    n_max_iter: int


def aggregate(spec, results):
    """Deterministic fold over trial order; failed trials are excluded and counted."""
    ok = [r for r in sorted(results, key=lambda r: r.trial) if r.error is None]
    vals = np.array([r.nmse for r in ok])
    psnrs = np.array([r.psnr_db for r in ok])
    n = vals.size
    return Aggregate(
        matrix_kind=spec.matrix_kind,
        r_or_c=spec.corr,
        n_over_p=spec.n_over_p,
        n_trials=n,
        mean_nmse=float(vals.mean()) if n else np.nan,
        se_nmse=float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan,
        mean_psnr_db=float(psnrs.mean()) if n else np.nan,
        n_failed=len(results) - n,
        n_max_iter=sum(r.max_iter_hit for r in ok),
    )


def write_aggregate_csv(path, aggregates):
    cols = list(Aggregate.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for a in aggregates:
            w.writerow([_fmt(getattr(a, c)) for c in cols])


# -- synthetic images ------------------------------------------------------

IMAGE_KINDS = ("blocks", "wedges", "constant")


def synth_image(kind, rows, cols, seed, n_shapes=8):
    """Piecewise-constant grayscale test image with values in [0, 255]."""
    rng = stream(seed, "image", kind)
    if kind == "constant":
        return np.full((rows, cols), 128.0)
    if kind == "blocks":
        img = np.full((rows, cols), float(rng.integers(0, 256)))
        for _ in range(n_shapes):
            r0, r1 = np.sort(rng.choice(rows + 1, size=2, replace=False))
            c0, c1 = np.sort(rng.choice(cols + 1, size=2, replace=False))
            img[r0:r1, c0:c1] = float(rng.integers(0, 256))
        return img
    if kind == "wedges":
        ii, jj = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
        img = np.full((rows, cols), float(rng.integers(0, 256)))
        for _ in range(n_shapes):
            angle = rng.uniform(0, 2 * np.pi)
            cx, cy = rng.uniform(0, rows), rng.uniform(0, cols)
            side = (ii - cx) * np.cos(angle) + (jj - cy) * np.sin(angle) > 0
            img[side] = float(rng.integers(0, 256))
        return img
    raise ValueError(f"unknown image kind {kind!r}")


@dataclass
class ImageResult:
    image: np.ndarray
    estimate: np.ndarray
    psnr_db: float
    nmse: float
    sigma2_selected: float
    trace: object


def reconstruct_image(
    image, levels, n_over_p, seed, matrix_kind="structurally_random", corr=0.0,
    config=None, params=None,
):
    """Noiseless compressive imaging of a mean-subtracted image in the Haar domain."""
    rows, cols = image.shape
    config = config or EmConfig(delta=0.01, grid_K=16)
    params = params or HmtParams()
    tree = build_tree(rows, cols, levels)
    psi = HaarTransform(rows, cols, levels)
    mean = float(image.mean())
    s_true = grid_to_vec(haar_dwt2(image - mean, levels))
    p = rows * cols
    N = max(1, int(round(n_over_p * p)))
    op_seed = derive_seed(seed, "matrix")
    if matrix_kind == "structurally_random":
        op = structurally_random_operator(rows, cols, N, levels, op_seed)
    else:
        gen = {"white": lambda: gen_white_gaussian(N, p, op_seed),
               "row_corr": lambda: gen_row_correlated(N, p, corr, op_seed),
               "col_corr": lambda: gen_col_correlated(N, p, corr, op_seed)}[matrix_kind]
        op, _, _ = scale_to_unit_spectral_norm(gen(), psi)
    y = op.forward(s_true)
    sig2, theta, trace = grid_search(op, y, config, tree, params)
    est_img = haar_idwt2(vec_to_grid(theta.s, rows, cols), levels) + mean
    return ImageResult(
        image=image,
        estimate=est_img,
        psnr_db=psnr_db(theta.s, s_true, psi),
        nmse=nmse(theta.s, s_true),
        sigma2_selected=sig2,
        trace=trace,
    )
