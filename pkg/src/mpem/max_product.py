"""Exact M step: maximize p(theta | sigma2, z) by max-product on the wavelet trees.

Approximation nodes have a closed-form update; the tree nodes are decoded
with one upward pass, one downward pass and a belief maximization.  Every
message is a normalized pair of log-probabilities.

The tree passes run in a compiled kernel when it is available and fall
back to a NumPy implementation otherwise.  Set ``MPEM_PURE_PYTHON=1`` to
force the fallback.
"""
import os
from dataclasses import dataclass

import numpy as np

from . import _mp_py
from .tree import StateEstimate, log_prior_q

try:
    if os.environ.get("MPEM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python kernels requested")
    from . import _mp_ext as _kernel
except ImportError:
    _kernel = _mp_py

BACKEND = "compiled" if _kernel is not _mp_py else "python"

__all__ = [
    "BACKEND",
    "MstepInput",
    "NodeMessages",
    "downward_pass",
    "log_phi",
    "maximize_beliefs",
    "mstep",
    "mstep_objective",
    "shat_pair",
    "upward_pass",
]


def get_kernels(backend=None):
    """Kernel module for ``backend`` ('compiled', 'python' or None for default)."""
    if backend is None:
        return _kernel
    if backend == "python":
        return _mp_py
    if backend == "compiled":
        from . import _mp_ext

        return _mp_ext
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class MstepInput:
    z: np.ndarray
    sigma2: float
    tree: object
    params: object

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.z.shape != (self.tree.p,):
            raise ValueError(f"z has shape {self.z.shape}, expected ({self.tree.p},)")


@dataclass
class NodeMessages:
    """Per-node log-domain message pairs, indexed by node (shape ``(p, 2)``).

    Entries that a node does not have (roots have no upward or downward
    message, approximation nodes have none at all) are NaN.  ``eta_up`` is
    the summed log upward messages from a node's children.
    """

    up_log: np.ndarray
    down_log: np.ndarray
    belief_log: np.ndarray
    eta_up: np.ndarray


def shat_pair(z, params):
    """Conditional maximizers of s_i given q_i = 0 and q_i = 1."""
    z = np.asarray(z, dtype=float)
    return (
        params.eps2 / (1.0 + params.eps2) * z,
        params.gamma2 / (1.0 + params.gamma2) * z,
    )


def log_phi(z, sigma2, params):
    """Log node potentials maximized over s, shape ``z.shape + (2,)``."""
    z2 = np.square(np.asarray(z, dtype=float))
    return np.stack(
        [
            -0.5 * z2 / (sigma2 * (1.0 + params.eps2)) - params.log_eps,
            -0.5 * z2 / (sigma2 * (1.0 + params.gamma2)) - params.log_gamma,
        ],
        axis=-1,
    )


def _log_consts(params):
    return np.array(
        [
            np.log1p(-params.p_low),
            np.log(params.p_low),
            np.log1p(-params.p_high),
            np.log(params.p_high),
            np.log1p(-params.p_root),
            np.log(params.p_root),
        ]
    )


def _layout(tree):
    order = np.concatenate(tree.level_nodes)
    sizes = np.array([lv.size for lv in tree.level_nodes], dtype=np.int64)
    return order, sizes


def _scatter(order, values, p):
    full = np.full((p, 2), np.nan)
    full[order] = values
    return full


def upward_pass(inp, backend=None):
    k = get_kernels(backend)
    order, sizes = _layout(inp.tree)
    lphi = np.ascontiguousarray(log_phi(inp.z[order], inp.sigma2, inp.params))
    up = np.full((order.size, 2), np.nan)
    eta = np.empty((order.size, 2))
    k.upward(lphi, sizes, _log_consts(inp.params), up, eta)
    p = inp.tree.p
    return NodeMessages(
        up_log=_scatter(order, up, p),
        down_log=np.full((p, 2), np.nan),
        belief_log=np.full((p, 2), np.nan),
        eta_up=_scatter(order, eta, p),
    )


def downward_pass(inp, msgs, backend=None):
    k = get_kernels(backend)
    order, sizes = _layout(inp.tree)
    up = msgs.up_log[order]
    # the upward pass must have filled every non-root node
    assert not np.isnan(up[sizes[0]:]).any(), "downward_pass needs a completed upward pass"
    lphi = np.ascontiguousarray(log_phi(inp.z[order], inp.sigma2, inp.params))
    down = np.empty((order.size, 2))
    k.downward(lphi, sizes, _log_consts(inp.params), np.ascontiguousarray(up), down)
    return NodeMessages(
        up_log=msgs.up_log,
        down_log=_scatter(order, down, inp.tree.p),
        belief_log=msgs.belief_log,
        eta_up=msgs.eta_up,
    )


def maximize_beliefs(inp, msgs, backend=None):
    """Decode (q, s) on the tree nodes from completed messages.

    Returns the estimate restricted to ``tree.set_T`` (in that order) and
    stores the normalized log beliefs in ``msgs.belief_log``.
    """
    k = get_kernels(backend)
    tree = inp.tree
    order, sizes = _layout(tree)
    lphi = np.ascontiguousarray(log_phi(inp.z[order], inp.sigma2, inp.params))
    belief = np.empty((order.size, 2))
    q = np.empty(order.size, dtype=np.int8)
    k.beliefs(
        lphi,
        sizes,
        _log_consts(inp.params),
        np.ascontiguousarray(msgs.eta_up[order]),
        np.ascontiguousarray(msgs.down_log[order]),
        belief,
        q,
    )
    msgs.belief_log = _scatter(order, belief, tree.p)
    q_full = np.zeros(tree.p, dtype=np.int8)
    q_full[order] = q
    qt = q_full[tree.set_T]
    s0, s1 = shat_pair(inp.z[tree.set_T], inp.params)
    return StateEstimate(q=qt, s=np.where(qt == 1, s1, s0))


def mstep(inp, backend=None, return_messages=False):
    """Full M step: the maximizer of p(theta | sigma2, z) over all theta."""
    k = get_kernels(backend)
    tree, params = inp.tree, inp.params
    order, sizes = _layout(tree)
    consts = _log_consts(params)
    lphi = np.ascontiguousarray(log_phi(inp.z[order], inp.sigma2, params))
    n = order.size
    up = np.full((n, 2), np.nan)
    eta = np.empty((n, 2))
    down = np.empty((n, 2))
    belief = np.empty((n, 2))
    q_t = np.empty(n, dtype=np.int8)
    k.upward(lphi, sizes, consts, up, eta)
    k.downward(lphi, sizes, consts, up, down)
    k.beliefs(lphi, sizes, consts, eta, down, belief, q_t)

    q = np.ones(tree.p, dtype=np.int8)
    q[order] = q_t
    s0, s1 = shat_pair(inp.z, params)
    est = StateEstimate(q=q, s=np.where(q == 1, s1, s0))
    if return_messages:
        p = tree.p
        msgs = NodeMessages(
            up_log=_scatter(order, up, p),
            down_log=_scatter(order, down, p),
            belief_log=_scatter(order, belief, p),
            eta_up=_scatter(order, eta, p),
        )
        return est, msgs
    return est


def mstep_objective(theta, z, sigma2, tree, params):
    """Log p(theta | sigma2, z) up to an additive constant."""
    q, s = theta.q, theta.s
    quad = np.sum((z - s) ** 2) + np.sum(s**2 / params.variances(q))
    return (
        -0.5 * quad / sigma2
        + log_prior_q(q, tree, params)
        + 0.5 * np.log(params.eps2 / params.gamma2) * np.sum(q)
    )
