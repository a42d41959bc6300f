"""EM iteration for the MAP state/signal estimate and the noise-variance grid search."""
import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import DegenerateError, DimensionError, EmptyInputError, MaxIterWarning, SolveError
from .max_product import MstepInput, mstep
from .tree import StateEstimate, log_prior_q

logger = logging.getLogger(__name__)


@dataclass
class EmConfig:
    """Convergence and grid settings.

    ``delta`` bounds ||s_new - s_old||^2 / p for convergence.  The grid has
    ``grid_K`` points spaced by the factor ``grid_d``; ``refine`` extra
    bisection rounds around the selected point are off by default.
    """

    delta: float = 1e-10
    max_iters: int = 2000
    grid_K: int = 16
    grid_d: float = 2.0
    record_trace: bool = True
    refine: int = 0
    backend: str = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.grid_d > 1:
            raise ValueError(f"grid_d must exceed 1, got {self.grid_d}")
        if self.grid_K < 1 or self.max_iters < 1:
            raise ValueError("grid_K and max_iters must be at least 1")


@dataclass
class EmRun:
    """Outcome of one EM run at a fixed sigma2."""

    sigma2: float
    theta: StateEstimate
    iterations: int
    converged: bool
    log_posteriors: list = field(default_factory=list)
    conv_metrics: list = field(default_factory=list)
    log_marginal: float = np.nan


@dataclass
class EmTrace:
    runs: list = field(default_factory=list)
    selected: int = -1

    @property
    def total_iterations(self):
        return sum(r.iterations for r in self.runs)

    @property
    def any_max_iter(self):
        return any(not r.converged for r in self.runs)

    def write_iterations_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["grid_index", "sigma2", "iteration", "log_cond_posterior", "conv_metric"])
            for g, run in enumerate(self.runs):
                for j, (lp, cm) in enumerate(zip(run.log_posteriors, run.conv_metrics), 1):
                    w.writerow([g, repr(float(run.sigma2)), j, repr(float(lp)), repr(float(cm))])

    def write_grid_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["grid_index", "sigma2", "log_marginal_posterior", "iters", "selected_flag"])
            for g, run in enumerate(self.runs):
                w.writerow(
                    [g, repr(float(run.sigma2)), repr(float(run.log_marginal)), run.iterations,
                     int(g == self.selected)]
                )


def estep(s, op, y):
    """Missing-data estimate z = s + H^T (y - H s); independent of sigma2."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if s.shape != (op.n_coefficients,) or y.shape != (op.n_measurements,):
        raise DimensionError(
            f"s{s.shape} / y{y.shape} do not fit an operator of shape {op.shape}"
        )
    return s + op.adjoint(y - op.forward(s))


def _quad_form(theta, residual, params):
    return float(residual @ residual + np.sum(theta.s**2 / params.variances(theta.q)))


def _state_terms(theta, tree, params):
    return log_prior_q(theta.q, tree, params) + 0.5 * np.log(params.eps2 / params.gamma2) * np.sum(
        theta.q
    )


def log_conditional_posterior(theta, sigma2, op, y, tree, params, residual=None):
    """log p(theta | sigma2, y) with the additive constant set to 0."""
    if residual is None:
        residual = y - op.forward(theta.s)
    return float(-0.5 * _quad_form(theta, residual, params) / sigma2 + _state_terms(theta, tree, params))


def log_marginal_posterior(theta, op, y, tree, params, residual=None):
    """log p(theta | y) with sigma2 integrated out, constant set to 0."""
    if residual is None:
        residual = y - op.forward(theta.s)
    n_tot = op.n_coefficients + op.n_measurements
    quad = _quad_form(theta, residual, params)
    if quad <= 0.0:
        raise DegenerateError("residual quadratic form is zero")
    return float(_state_terms(theta, tree, params) - 0.5 * n_tot * np.log(quad / n_tot))


def sigma2_hat(theta, op, y, params):
    """Mode-type variance update (||y - Hs||^2 + s^T D^-1 s) / (p + N)."""
    residual = y - op.forward(theta.s)
    return _quad_form(theta, residual, params) / (op.n_coefficients + op.n_measurements)


def mmse_given_q(q, op, y, params, tol=1e-10):
    """Linear-model MMSE estimate D H^T (I + H D H^T)^-1 y for fixed states.

    Dense operators use a Cholesky solve of the N x N system; operator-only
    ones fall back to preconditioned CG on (D^-1 + H^T H) s = H^T y.
    """
    d = params.variances(q)
    y = np.asarray(y, dtype=float)
    if op.matrix is not None:
        H = op.matrix
        G = np.eye(op.n_measurements) + (H * d) @ H.T
        try:
            x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), y)
        except np.linalg.LinAlgError as exc:
            raise SolveError("I + H D H^T is not positive definite") from exc
        return d * (H.T @ x)

    p = op.n_coefficients
    A = scipy.sparse.linalg.LinearOperator(
        (p, p), matvec=lambda v: v / d + op.adjoint(op.forward(v)), dtype=float
    )
    diag_guess = 1.0 / d + op.n_measurements / p
    M = scipy.sparse.linalg.LinearOperator((p, p), matvec=lambda v: v / diag_guess, dtype=float)
    s, info = scipy.sparse.linalg.cg(A, op.adjoint(y), rtol=tol, atol=0.0, maxiter=20 * p, M=M)
    if info != 0:
        raise SolveError(f"conjugate gradient failed (info={info})")
    return s


def run_em(op, y, sigma2, s_init, config, tree, params):
    """Alternate E and M steps at fixed sigma2 from ``s_init``.

    Returns the last iterate and an :class:`EmRun`.  Hitting ``max_iters``
    issues :class:`MaxIterWarning` and sets ``converged=False``.  The run's
    ``log_marginal`` is NaN when the residual quadratic form vanishes.
    """
    y = np.asarray(y, dtype=float)
    s = np.array(s_init, dtype=float, copy=True)
    p = op.n_coefficients
    residual = y - op.forward(s)
    run = EmRun(sigma2=sigma2, theta=None, iterations=0, converged=False)
    theta = None
    for j in range(1, config.max_iters + 1):
        z = s + op.adjoint(residual)
        theta = mstep(MstepInput(z, sigma2, tree, params), backend=config.backend)
        diff = theta.s - s
        metric = float(diff @ diff) / p
        s = theta.s
        residual = y - op.forward(s)
        run.iterations = j
        if config.record_trace:
            run.log_posteriors.append(
                log_conditional_posterior(theta, sigma2, op, y, tree, params, residual)
            )
            run.conv_metrics.append(metric)
        if metric < config.delta:
            run.converged = True
            break
    if not run.converged:
        warnings.warn(
            f"EM hit max_iters={config.max_iters} at sigma2={sigma2:.4g}", MaxIterWarning, stacklevel=2
        )
    run.theta = theta
    try:
        run.log_marginal = log_marginal_posterior(theta, op, y, tree, params, residual)
    except DegenerateError:
        # exact interpolation by s = 0 (y = 0): the marginal posterior is undefined
        run.log_marginal = np.nan
    return theta, run


def sigma2_max(y, p):
    y = np.asarray(y, dtype=float)
    return float(y @ y) / (p + y.size)


def _best_index(runs):
    # a NaN marginal (vanishing residual) never wins over a finite one
    vals = np.array([r.log_marginal for r in runs], dtype=float)
    return int(np.argmax(np.where(np.isnan(vals), -np.inf, vals)))


def grid_search(op, y, config, tree, params):
    """Select sigma2 on a geometric grid by the marginal posterior.

    The grid starts at ||y||^2 / (p + N) with s = 0 and each point is warm
    started from the previous point's estimate.  Returns
    ``(sigma2_selected, theta, trace)``; ``trace.runs`` holds every grid
    point in visiting order and ``trace.selected`` indexes the winner.
    """
    y = np.asarray(y, dtype=float)
    if not np.any(y):
        raise EmptyInputError("measurement vector is identically zero")
    trace = EmTrace()
    s = np.zeros(op.n_coefficients)
    sig2 = sigma2_max(y, op.n_coefficients)
    for _ in range(config.grid_K):
        theta, run = run_em(op, y, sig2, s, config, tree, params)
        trace.runs.append(run)
        logger.debug("sigma2=%.4g iters=%d logmarg=%.6g", sig2, run.iterations, run.log_marginal)
        s = theta.s
        sig2 = sig2 / config.grid_d

    step = np.sqrt(config.grid_d)
    for _ in range(config.refine):
        best = trace.runs[_best_index(trace.runs)]
        for cand in (best.sigma2 * step, best.sigma2 / step):
            _, run = run_em(op, y, cand, best.theta.s, config, tree, params)
            trace.runs.append(run)
        step = np.sqrt(step)

    trace.selected = _best_index(trace.runs)
    chosen = trace.runs[trace.selected]
    return chosen.sigma2, chosen.theta, trace


def outer_em(op, y, sigma2_init, config, tree, params, n_outer=50, rtol=1e-8):
    """Diagonal 'outer' EM alternating run_em with the sigma2_hat update.

    Provided as a diagnostic; it tends to stall in poor local maxima, which
    is why :func:`grid_search` is the default path.
    """
    sig2 = sigma2_init
    s = np.zeros(op.n_coefficients)
    trace = EmTrace()
    for _ in range(n_outer):
        theta, run = run_em(op, y, sig2, s, config, tree, params)
        trace.runs.append(run)
        s = theta.s
        new = sigma2_hat(theta, op, y, params)
        if new <= 0 or abs(new - sig2) <= rtol * sig2:
            sig2 = new if new > 0 else sig2
            break
        sig2 = new
    trace.selected = len(trace.runs) - 1
    return sig2, trace.runs[-1].theta, trace
