"""NumPy reference kernels for tree max-product, vectorized one level at a time.

All arrays are in level order: level ``l`` occupies rows
``offsets[l]:offsets[l + 1]`` and the children of the ``k``-th node of level
``l`` are rows ``4k .. 4k + 3`` of level ``l + 1``.  Pairs are stored as
``(..., 2)`` arrays of natural logs indexed by state (0 = small, 1 = large).
``consts`` holds ``ln(1-P_L), ln P_L, ln(1-P_H), ln P_H, ln(1-P_root), ln P_root``.
"""
import numpy as np

_SIBLINGS = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def _offsets(sizes):
    return np.concatenate(([0], np.cumsum(sizes)))


def _log_normalize(m0, m1):
    hi = np.maximum(m0, m1)
    lse = hi + np.log1p(np.exp(-np.abs(m0 - m1)))
    return np.stack([m0 - lse, m1 - lse], axis=-1)


def upward(lphi, sizes, consts, up, eta):
    lpl0, lpl1, lph0, lph1 = consts[:4]
    off = _offsets(sizes)
    n_levels = len(sizes)
    for lev in range(n_levels - 1, -1, -1):
        sl = slice(off[lev], off[lev + 1])
        if lev == n_levels - 1:
            eta[sl] = 0.0
        else:
            kids = up[off[lev + 1]:off[lev + 2]].reshape(-1, 4, 2)
            eta[sl] = kids.sum(axis=1)
        if lev == 0:
            continue
        a = lphi[sl] + eta[sl]
        m0 = np.maximum(lpl0 + a[:, 0], lpl1 + a[:, 1])
        m1 = np.maximum(lph0 + a[:, 0], lph1 + a[:, 1])
        up[sl] = _log_normalize(m0, m1)


def downward(lphi, sizes, consts, up, down):
    lpl0, lpl1, lph0, lph1, lpr0, lpr1 = consts
    off = _offsets(sizes)
    down[off[0]:off[1]] = np.nan
    for lev in range(1, len(sizes)):
        par = slice(off[lev - 1], off[lev])
        kids = up[off[lev]:off[lev + 1]].reshape(-1, 4, 2)
        sib = kids[:, _SIBLINGS].sum(axis=2)  # (n_parents, 4, 2)
        if lev == 1:
            ed = np.broadcast_to(np.array([lpr0, lpr1]), (sizes[0], 2))
        else:
            ed = down[par]
        b = (lphi[par] + ed)[:, None, :] + sib
        m0 = np.maximum(lpl0 + b[..., 0], lph0 + b[..., 1])
        m1 = np.maximum(lpl1 + b[..., 0], lph1 + b[..., 1])
        down[off[lev]:off[lev + 1]] = _log_normalize(m0, m1).reshape(-1, 2)


def beliefs(lphi, sizes, consts, eta, down, belief, q):
    lpr0, lpr1 = consts[4], consts[5]
    off = _offsets(sizes)
    raw = lphi + eta
    roots = slice(0, off[1])
    raw[roots] += np.array([lpr0, lpr1])
    rest = slice(off[1], off[-1])
    raw[rest] += down[rest]
    q[:] = raw[:, 1] >= raw[:, 0]
    belief[:] = _log_normalize(raw[:, 0], raw[:, 1])
