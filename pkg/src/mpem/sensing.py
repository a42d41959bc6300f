"""Sensing operators H = Phi Psi / rho_Phi and their building blocks."""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ConvergenceError, DimensionError, RangeError
from .rng import stream

logger = logging.getLogger(__name__)

_SQRT_HALF = np.sqrt(0.5)


# -- 2-D orthonormal Haar ---------------------------------------------------


def _check_haar_dims(shape, levels):
    rows, cols = shape[-2:]
    if levels < 0 or rows % 2**levels or cols % 2**levels:
        raise DimensionError(f"{rows}x{cols} image is not divisible by 2**{levels}")


def haar_dwt2(image, levels):
    """Orthonormal 2-D Haar analysis in nested-quadrant layout.

    The coarsest approximation ends up in the top-left ``rows/2**levels``
    block; at each scale the horizontal-detail, vertical-detail and diagonal
    bands sit to the right, below, and diagonally below-right of it.
    Leading axes are treated as a batch.
    """
    c = np.array(image, dtype=float, copy=True)
    _check_haar_dims(c.shape, levels)
    r, k = c.shape[-2:]
    for _ in range(levels):
        b = c[..., :r, :k]
        b = np.concatenate(
            [(b[..., 0::2, :] + b[..., 1::2, :]), (b[..., 0::2, :] - b[..., 1::2, :])], axis=-2
        ) * _SQRT_HALF
        b = np.concatenate(
            [(b[..., :, 0::2] + b[..., :, 1::2]), (b[..., :, 0::2] - b[..., :, 1::2])], axis=-1
        ) * _SQRT_HALF
        c[..., :r, :k] = b
        r //= 2
        k //= 2
    return c


def haar_idwt2(coeffs, levels):
    x = np.array(coeffs, dtype=float, copy=True)
    _check_haar_dims(x.shape, levels)
    rows, cols = x.shape[-2:]
    for lev in range(levels - 1, -1, -1):
        r, k = rows >> lev, cols >> lev
        b = x[..., :r, :k]
        lo, hi = b[..., :, : k // 2], b[..., :, k // 2 :]
        t = np.empty_like(b)
        t[..., :, 0::2] = (lo + hi) * _SQRT_HALF
        t[..., :, 1::2] = (lo - hi) * _SQRT_HALF
        lo, hi = t[..., : r // 2, :], t[..., r // 2 :, :]
        b = np.empty_like(t)
        b[..., 0::2, :] = (lo + hi) * _SQRT_HALF
        b[..., 1::2, :] = (lo - hi) * _SQRT_HALF
        x[..., :r, :k] = b
    return x


def vec_to_grid(v, rows, cols):
    """Columnwise vector(s) of length rows*cols -> (..., rows, cols) grid(s)."""
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


def grid_to_vec(g):
    g = np.asarray(g)
    return np.swapaxes(g, -1, -2).reshape(g.shape[:-2] + (-1,))


@dataclass(frozen=True)
class HaarTransform:
    """Psi: wavelet coefficient vector -> image vector (both columnwise)."""

    rows: int
    cols: int
    levels: int

    @property
    def p(self):
        return self.rows * self.cols

    def synthesis(self, s):
        return grid_to_vec(haar_idwt2(vec_to_grid(s, self.rows, self.cols), self.levels))

    def analysis(self, x):
        return grid_to_vec(haar_dwt2(vec_to_grid(x, self.rows, self.cols), self.levels))


class IdentityTransform:
    def __init__(self, p):
        self.p = p

    def synthesis(self, s):
        return np.asarray(s, dtype=float)

    analysis = synthesis


# -- sampling matrices --------------------------------------------------------


def gen_white_gaussian(N, p, seed):
    if N > p:
        raise DimensionError(f"need N <= p, got N={N}, p={p}")
    return stream(seed, "white").standard_normal((N, p))


def _ar1_rows(n_rows, n_cols, r, rng):
    """Rows follow x_i = r x_{i-1} + sqrt(1 - r^2) w_i, so cov = r^|i-j|."""
    w = rng.standard_normal((n_rows, n_cols))
    out = np.empty_like(w)
    out[0] = w[0]
    scale = np.sqrt(1.0 - r * r)
    for i in range(1, n_rows):
        out[i] = r * out[i - 1] + scale * w[i]
    return out


def gen_row_correlated(N, p, r, seed):
    """Columns iid with cov(Phi[i, k], Phi[j, k]) = r**|i - j|."""
    if not 0.0 <= r < 1.0:
        raise RangeError(f"row correlation must be in [0, 1), got {r}")
    if N > p:
        raise DimensionError(f"need N <= p, got N={N}, p={p}")
    return _ar1_rows(N, p, r, stream(seed, "row_corr"))


def gen_col_correlated(N, p, c, seed):
    """Rows iid with cov(Phi[k, i], Phi[k, j]) = c**|i - j|."""
    if not 0.0 <= c < 1.0:
        raise RangeError(f"column correlation must be in [0, 1), got {c}")
    if N > p:
        raise DimensionError(f"need N <= p, got N={N}, p={p}")
    return _ar1_rows(p, N, c, stream(seed, "col_corr")).T.copy()


# -- operators -------------------------------------------------------------


class SensingOperator:
    """Linear map s -> H s of shape (n_measurements, n_coefficients)."""

    n_measurements: int
    n_coefficients: int
    spectral_norm: float = np.nan
    matrix = None

    def forward(self, s):
        raise NotImplementedError

    def adjoint(self, r):
        raise NotImplementedError

    @property
    def shape(self):
        return (self.n_measurements, self.n_coefficients)

    def to_dense(self):
        if self.matrix is not None:
            return self.matrix
        eye = np.eye(self.n_coefficients)
        return np.column_stack([self.forward(e) for e in eye])


class DenseOperator(SensingOperator):
    def __init__(self, matrix, spectral_norm=np.nan):
        self.matrix = np.ascontiguousarray(matrix, dtype=float)
        self.n_measurements, self.n_coefficients = self.matrix.shape
        self.spectral_norm = spectral_norm

    def forward(self, s):
        return self.matrix @ s

    def adjoint(self, r):
        return self.matrix.T @ r


class StructurallyRandomOperator(SensingOperator):
    """Row-subsampled orthonormal DCT of a randomly sign-flipped image.

    H s = R F D Psi s with D a random +-1 diagonal, F the orthonormal DCT-II
    of the columnwise image vector, and R a uniformly drawn set of N rows.
    Every factor is orthonormal, so H H^T = I_N.
    """

    def __init__(self, rows, cols, N, levels, seed):
        p = rows * cols
        if N > p or N < 1:
            raise DimensionError(f"need 1 <= N <= p, got N={N}, p={p}")
        self.transform = HaarTransform(rows, cols, levels)
        rng = stream(seed, "structurally_random")
        self.signs = rng.choice(np.array([-1.0, 1.0]), size=p)
        self.rows_kept = np.sort(rng.choice(p, size=N, replace=False))
        self.n_measurements, self.n_coefficients = N, p
        self.spectral_norm = 1.0
        self.seed = seed

    def forward(self, s):
        x = self.signs * self.transform.synthesis(s)
        return scipy.fft.dct(x, type=2, norm="ortho")[self.rows_kept]

    def adjoint(self, r):
        u = np.zeros(self.n_coefficients)
        u[self.rows_kept] = r
        x = scipy.fft.idct(u, type=2, norm="ortho")
        return self.transform.analysis(self.signs * x)


def structurally_random_operator(rows, cols, N, levels, seed):
    return StructurallyRandomOperator(rows, cols, N, levels, seed)


def power_iteration(forward, adjoint, n, tol=1e-8, max_iter=10_000, seed=0):
    """Largest singular value of the map ``forward`` acting on R^n.

    Iterates v <- A^T A v from a fixed-seed start and stops when the
    Rayleigh quotient changes by less than ``tol`` (relative).  The result
    never exceeds the true spectral norm.
    """
    v = stream(seed, "power_iteration").standard_normal(n)
    v /= np.linalg.norm(v)
    lam_old = 0.0
    for it in range(max_iter):
        av = forward(v)
        lam = float(av @ av)
        if lam <= 0.0:
            raise ConvergenceError("operator maps the start vector to zero")
        if abs(lam - lam_old) <= tol * lam:
            logger.debug("power iteration converged after %d steps", it + 1)
            return np.sqrt(lam)
        lam_old = lam
        w = adjoint(av)
        v = w / np.linalg.norm(w)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def spectral_norm(matrix, tol=1e-8, max_iter=10_000, seed=0):
    A = np.asarray(matrix, dtype=float)
    # iterate on the smaller Gram matrix
    if A.shape[0] < A.shape[1]:
        A = A.T
    return power_iteration(lambda v: A @ v, lambda r: A.T @ r, A.shape[1], tol, max_iter, seed)


def scale_to_unit_spectral_norm(phi, psi=None, y_raw=None, sigma2_raw=None):
    """Return (H, y, sigma2) with H = Phi Psi / rho_Phi.

    ``psi`` is a transform with an ``analysis`` method (None means identity);
    since Psi is orthonormal, rho_{Phi Psi} = rho_Phi.
    """
    phi = np.asarray(phi, dtype=float)
    rho = spectral_norm(phi)
    if not rho > 0:
        raise ConvergenceError("sampling matrix has zero spectral norm")
    # rows of Phi Psi are Psi^T applied to rows of Phi
    h = phi if psi is None else psi.analysis(phi)
    h = h / rho
    op = DenseOperator(h)
    op.spectral_norm = spectral_norm(h)
    y = None if y_raw is None else np.asarray(y_raw, dtype=float) / rho
    sigma2 = None if sigma2_raw is None else sigma2_raw / rho**2
    return op, y, sigma2


@dataclass
class Measurement:
    y: np.ndarray
    sigma2_true: float = None


def simulate_measurements(op, s, sigma2, seed):
    if sigma2 < 0:
        raise RangeError(f"sigma2 must be >= 0, got {sigma2}")
    clean = op.forward(np.asarray(s, dtype=float))
    if sigma2 == 0:
        return Measurement(y=clean, sigma2_true=0.0)
    noise = np.sqrt(sigma2) * stream(seed, "noise").standard_normal(clean.shape)
    return Measurement(y=clean + noise, sigma2_true=sigma2)
