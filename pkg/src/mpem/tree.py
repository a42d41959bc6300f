"""Wavelet quadtree index algebra and the hidden Markov tree prior.

Coefficients of a ``rows x cols`` wavelet decomposition are stored in the
usual nested-quadrant layout (coarsest approximation in the top-left
corner) and linearized columnwise.  The public :func:`upsilon` helpers use
1-based (row, col) -> node numbering; every array in this module is indexed
0-based, so node ``i`` here is ``upsilon(...) - 1``.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError, InvalidLevels, RangeError
from .rng import stream


def upsilon(i1, i2, rows, cols=None):
    """Columnwise 1-based linear index of grid cell ``(i1, i2)``."""
    if not 1 <= i1 <= rows or i2 < 1 or (cols is not None and i2 > cols):
        raise RangeError(f"cell ({i1}, {i2}) outside a grid with {rows} rows")
    return (i2 - 1) * rows + i1


def upsilon_inv(i, rows, cols=None):
    if i < 1 or (cols is not None and i > rows * cols):
        raise RangeError(f"node {i} outside the grid")
    return (i - 1) % rows + 1, (i - 1) // rows + 1


@dataclass(frozen=True, eq=False)
class TreeStructure:
    """Quadtree over a ``rows x cols`` coefficient grid with ``levels`` levels.

    ``parent[i]`` is -1 for nodes without a parent in the tree set (roots and
    approximation nodes).  ``children[i]`` holds four node indices, or -1
    entries for leaves and approximation nodes.  ``level_nodes[l]`` lists the
    nodes of tree level ``l + 1``; the children of ``level_nodes[l][k]`` are
    ``level_nodes[l + 1][4k:4k + 4]``.
    """

    rows: int
    cols: int
    levels: int
    parent: np.ndarray
    children: np.ndarray
    set_A: np.ndarray
    set_T_root: np.ndarray
    set_T: np.ndarray
    set_T_leaf: np.ndarray
    level_nodes: tuple = field(repr=False)

    @property
    def p(self):
        return self.rows * self.cols

    def children_of(self, i):
        c = self.children[i]
        return [] if c[0] < 0 else [int(k) for k in c]

    def parent_of(self, i):
        j = self.parent[i]
        return None if j < 0 else int(j)

    @property
    def is_root(self):
        mask = np.zeros(self.p, dtype=bool)
        mask[self.set_T_root] = True
        return mask

    @property
    def is_approx(self):
        mask = np.zeros(self.p, dtype=bool)
        mask[self.set_A] = True
        return mask


def _check_dims(rows, cols, levels):
    if levels < 1:
        raise InvalidLevels(f"levels must be >= 1, got {levels}")
    block = 2**levels
    if rows < 1 or cols < 1 or rows % block or cols % block:
        raise DimensionError(
            f"grid {rows}x{cols} is not divisible by 2**levels = {block}"
        )


@lru_cache(maxsize=32)
def build_tree(rows, cols, levels):
    _check_dims(rows, cols, levels)
    p = rows * cols

    def idx(a, b):
        # 0-based (row, col) arrays -> columnwise 0-based node index
        return b * rows + a

    r0, c0 = rows >> levels, cols >> levels
    a, b = np.meshgrid(np.arange(r0), np.arange(c0), indexing="ij")
    set_A = np.sort(idx(a, b).ravel())

    # roots: the level-1 block minus A, ordered columnwise
    r1, c1 = 2 * r0, 2 * c0
    a, b = np.meshgrid(np.arange(r1), np.arange(c1), indexing="ij")
    in_A = (a < r0) & (b < c0)
    roots = np.sort(idx(a[~in_A], b[~in_A]))

    parent = np.full(p, -1, dtype=np.int64)
    children = np.full((p, 4), -1, dtype=np.int64)
    level_nodes = [roots]
    for _ in range(levels - 1):
        cur = level_nodes[-1]
        ra, cb = cur % rows, cur // rows
        kids = np.stack(
            [
                idx(2 * ra, 2 * cb),
                idx(2 * ra, 2 * cb + 1),
                idx(2 * ra + 1, 2 * cb),
                idx(2 * ra + 1, 2 * cb + 1),
            ],
            axis=1,
        )
        children[cur] = kids
        parent[kids.ravel()] = np.repeat(cur, 4)
        level_nodes.append(kids.ravel())

    set_T = np.setdiff1d(np.arange(p), set_A)
    set_T_leaf = np.sort(level_nodes[-1])
    for arr in (parent, children, set_A, roots, set_T, set_T_leaf, *level_nodes):
        arr.setflags(write=False)
    return TreeStructure(
        rows=rows,
        cols=cols,
        levels=levels,
        parent=parent,
        children=children,
        set_A=set_A,
        set_T_root=roots,
        set_T=set_T,
        set_T_leaf=set_T_leaf,
        level_nodes=tuple(level_nodes),
    )


@dataclass(frozen=True)
class HmtParams:
    """Tuning constants of the signal prior.

    ``gamma2`` and ``eps2`` are the large/small coefficient variances
    relative to the noise variance; the three probabilities drive the
    Markov tree over the binary states.
    """

    gamma2: float = 1000.0
    eps2: float = 0.1
    p_root: float = 0.2
    p_high: float = 0.2
    p_low: float = 1e-5

    def __post_init__(self):
        if not (self.eps2 > 0 and self.gamma2 >= self.eps2):
            raise RangeError(
                f"need gamma2 >= eps2 > 0, got gamma2={self.gamma2}, eps2={self.eps2}"
            )
        for name in ("p_root", "p_high", "p_low"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise RangeError(f"{name} must lie in (0, 1), got {v}")

    @property
    def log_gamma(self):
        return 0.5 * np.log(self.gamma2)

    @property
    def log_eps(self):
        return 0.5 * np.log(self.eps2)

    def variances(self, q):
        """Diagonal of D(q): gamma2 where q == 1, eps2 elsewhere."""
        return np.where(np.asarray(q) == 1, self.gamma2, self.eps2)


@dataclass
class StateEstimate:
    q: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int8)
        self.s = np.asarray(self.s, dtype=float)
        if self.q.shape != self.s.shape:
            raise DimensionError("q and s must have the same length")


def level_high_probs(params, levels):
    """Marginal P(q_i = 1) for tree levels 1..levels (roots first)."""
    probs = [params.p_root]
    for _ in range(levels - 1):
        prev = probs[-1]
        probs.append(prev * params.p_high + (1.0 - prev) * params.p_low)
    return np.array(probs)


def expected_high_fraction(params, levels):
    """Expected fraction of large-magnitude states, E[sum q] / p."""
    if levels < 1:
        raise InvalidLevels(f"levels must be >= 1, got {levels}")
    probs = level_high_probs(params, levels)
    weights = 4.0 ** np.arange(levels)
    return (1.0 + 3.0 * np.dot(weights, probs)) / 4.0**levels


def log_prior_q(q, tree, params):
    """Un-normalized log prior of the state vector (constant fixed to 0).

    Returns ``-inf`` when any approximation state is not 1.
    """
    q = np.asarray(q)
    if q.shape != (tree.p,):
        raise DimensionError(f"q has shape {q.shape}, expected ({tree.p},)")
    if np.any(q[tree.set_A] != 1):
        return -np.inf
    qr = q[tree.set_T_root]
    total = np.sum(qr) * np.log(params.p_root) + np.sum(1 - qr) * np.log1p(-params.p_root)

    child = np.concatenate(tree.level_nodes[1:]) if tree.levels > 1 else np.empty(0, int)
    qc = q[child]
    qp = q[tree.parent[child]]
    n11 = np.sum(qc * qp)
    n01 = np.sum((1 - qc) * qp)
    n10 = np.sum(qc * (1 - qp))
    n00 = np.sum((1 - qc) * (1 - qp))
    total += (
        n11 * np.log(params.p_high)
        + n01 * np.log1p(-params.p_high)
        + n10 * np.log(params.p_low)
        + n00 * np.log1p(-params.p_low)
    )
    return float(total)


def sample_states(tree, params, rng):
    q = np.zeros(tree.p, dtype=np.int8)
    q[tree.set_A] = 1
    roots = tree.level_nodes[0]
    q[roots] = rng.random(roots.size) < params.p_root
    for nodes in tree.level_nodes[1:]:
        qp = q[tree.parent[nodes]]
        prob = np.where(qp == 1, params.p_high, params.p_low)
        q[nodes] = rng.random(nodes.size) < prob
    return q


def sample_prior(tree, params, sigma2, rng_seed):
    """Draw (q, s) from the tree prior; deterministic in ``rng_seed``."""
    if not sigma2 > 0:
        raise RangeError(f"sigma2 must be positive, got {sigma2}")
    q = sample_states(tree, params, stream(rng_seed, "states"))
    std = np.sqrt(sigma2 * params.variances(q))
    s = std * stream(rng_seed, "coefficients").standard_normal(tree.p)
    return StateEstimate(q=q, s=s)
