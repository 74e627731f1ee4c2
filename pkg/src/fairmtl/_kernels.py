"""Compiled inner loops of the solver.

Sample features are passed in CSR form (``indptr``, ``indices``, ``values``)
since one-hot encoded rows are mostly zeros.
"""

import numpy as np
from numba import njit

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True)
def _xorshift(state):
    x = state[0]
    x ^= (x << np.uint64(13)) & MASK64
    x ^= x >> np.uint64(7)
    x ^= (x << np.uint64(17)) & MASK64
    state[0] = x
    return x


@njit(cache=True)
def shuffle(order, n, state):
    for i in range(n - 1, 0, -1):
        j = np.int64(_xorshift(state) % np.uint64(i + 1))
        tmp = order[i]
        order[i] = order[j]
        order[j] = tmp


@njit(cache=True)
def term_diag(indptr, indices, values, rows, blocks, dinv, AU):
    """Diagonal of the dual Hessian, ``a_j' P a_j`` for every term."""
    n_terms = rows.shape[0]
    out = np.empty(n_terms)
    for j in range(n_terms):
        i = rows[j]
        q = 0.0
        for s in range(blocks.shape[1]):
            b = blocks[j, s]
            if b < 0:
                continue
            for p in range(indptr[i], indptr[i + 1]):
                q += values[p] * values[p] * dinv[b, indices[p]]
        for r in range(AU.shape[1]):
            q -= AU[j, r] * AU[j, r]
        out[j] = q
    return out


@njit(cache=True)
def cd_epochs(alpha, cap, y, indptr, indices, values, rows, blocks, dinv, AU, qii,
              ug, t, n_epochs, state, order, n_active, bounds):
    """Clipped coordinate ascent on the dual with shrinking.

    ``ug = dinv * g`` and ``t = U' g`` stay in sync with ``alpha`` where
    ``g = sum_j alpha_j y_j a_j``, so the primal point is ``ug - U t``.
    ``order[:n_active[0]]`` holds the unshrunk terms; ``bounds`` carries the
    projected-gradient extremes of the previous epoch.  Returns the spread of
    projected gradients in the last epoch.
    """
    m = AU.shape[1]
    spread = 0.0
    for _ in range(n_epochs):
        n_act = n_active[0]
        shuffle(order, n_act, state)
        hi = -np.inf
        lo = np.inf
        s = 0
        while s < n_act:
            j = order[s]
            i = rows[j]
            score = 0.0
            for k in range(blocks.shape[1]):
                b = blocks[j, k]
                if b < 0:
                    continue
                for p in range(indptr[i], indptr[i + 1]):
                    score += values[p] * ug[b, indices[p]]
            for r in range(m):
                score -= AU[j, r] * t[r]
            grad = y[i] * score - 1.0
            a_old = alpha[j]
            pg = 0.0
            if a_old == 0.0:
                if grad > bounds[0]:
                    n_act -= 1
                    order[s] = order[n_act]
                    order[n_act] = j
                    continue
                if grad < 0.0:
                    pg = grad
            elif a_old == cap[j]:
                if grad < bounds[1]:
                    n_act -= 1
                    order[s] = order[n_act]
                    order[n_act] = j
                    continue
                if grad > 0.0:
                    pg = grad
            else:
                pg = grad
            if pg > hi:
                hi = pg
            if pg < lo:
                lo = pg
            s += 1
            if pg == 0.0:
                continue
            if qii[j] > 1e-14:
                a_new = a_old - grad / qii[j]
            else:
                a_new = cap[j]
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > cap[j]:
                a_new = cap[j]
            delta = a_new - a_old
            if delta == 0.0:
                continue
            alpha[j] = a_new
            step = delta * y[i]
            for k in range(blocks.shape[1]):
                b = blocks[j, k]
                if b < 0:
                    continue
                for p in range(indptr[i], indptr[i + 1]):
                    ug[b, indices[p]] += step * dinv[b, indices[p]] * values[p]
            for r in range(m):
                t[r] += step * AU[j, r]
        n_active[0] = n_act
        bounds[0] = hi if hi > 0.0 else np.inf
        bounds[1] = lo if lo < 0.0 else -np.inf
        spread = hi - lo
    return spread


@njit(cache=True)
def _huber_slope_curv(m, dm, cap, delta, t):
    """Slope and curvature in ``t`` of ``sum_j cap_j h(m_j + t dm_j)``."""
    lo = 1.0 - delta
    hi = 1.0 + delta
    slope = 0.0
    curv = 0.0
    for j in range(m.shape[0]):
        if dm[j] == 0.0:
            continue
        mj = m[j] + t * dm[j]
        if mj <= lo:
            slope -= cap[j] * dm[j]
        elif mj < hi:
            slope -= cap[j] * dm[j] * (hi - mj) / (2.0 * delta)
            curv += cap[j] * dm[j] * dm[j] / (2.0 * delta)
    return slope, curv


@njit(cache=True)
def line_minimize(m, dm, cap, delta, a1, a2):
    """Minimize ``sum_j cap_j h(m_j + t dm_j) + 2 a1 t + a2 t^2`` over ``t >= 0``.

    ``h`` is the Huberized hinge, so the slope is piecewise linear and
    nondecreasing; Newton steps on it are kept inside a shrinking bracket.
    """
    g, c = _huber_slope_curv(m, dm, cap, delta, 0.0)
    if g + 2.0 * a1 >= 0.0:
        return 0.0
    lo = 0.0
    hi = 1.0
    while True:
        g, c = _huber_slope_curv(m, dm, cap, delta, hi)
        if g + 2.0 * (a1 + hi * a2) >= 0.0 or hi >= 1e12:
            break
        lo = hi
        hi *= 2.0
    t = hi
    for _ in range(200):
        g, c = _huber_slope_curv(m, dm, cap, delta, t)
        g += 2.0 * (a1 + t * a2)
        c += 2.0 * a2
        if g == 0.0:
            return t
        if g < 0.0:
            lo = t
        else:
            hi = t
        if hi - lo <= 1e-14 * hi:
            break
        nt = t - g / c if c > 0.0 else 0.5 * (lo + hi)
        if not (lo < nt < hi):
            nt = 0.5 * (lo + hi)
        t = nt
    return lo


@njit(cache=True)
def huber_eval(m, cap, delta):
    """Value of ``sum_j cap_j h(m_j)`` and the per-term slopes ``cap_j h'(m_j)``."""
    lo = 1.0 - delta
    hi = 1.0 + delta
    val = 0.0
    coef = np.empty(m.shape[0])
    for j in range(m.shape[0]):
        mj = m[j]
        if mj <= lo:
            val += cap[j] * (1.0 - mj)
            coef[j] = -cap[j]
        elif mj < hi:
            val += cap[j] * (hi - mj) * (hi - mj) / (4.0 * delta)
            coef[j] = -cap[j] * (hi - mj) / (2.0 * delta)
        else:
            coef[j] = 0.0
    return val, coef


@njit(cache=True)
def band_grams(indptr, indices, values, rows, combo_of, m, cap, delta, n_combos, dim):
    """Weighted Gram matrices ``sum_j w_j x_j x_j'`` per block combination.

    Only terms whose margin lies strictly inside the smoothing band carry
    curvature ``w_j = cap_j / (2 delta)``.
    """
    out = np.zeros((n_combos, dim, dim))
    for j in range(m.shape[0]):
        if abs(m[j] - 1.0) >= delta:
            continue
        w = cap[j] / (2.0 * delta)
        c = combo_of[j]
        i = rows[j]
        for p in range(indptr[i], indptr[i + 1]):
            a = indices[p]
            vp = w * values[p]
            for q in range(indptr[i], indptr[i + 1]):
                out[c, a, indices[q]] += vp * values[q]
    return out
