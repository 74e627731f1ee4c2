"""Constrained regularized hinge-loss training for the STL / ITL / MTL models.

Every method is written as one problem in a working vector ``u`` of ``k + 1``
blocks::

    min_u  sum_j c_j * hinge(y_j <a_j, u>) + u' diag(pen) u   s.t.  R u = 0

where each term ``j`` is one sample seen through one or two blocks.  Three
routes are available:

``newton`` (default)
    Newton's method on the Huberized hinge with an exact line search,
    continuation over the smoothing width and the equality constraints
    handled in the KKT system, so iterates stay feasible.
``dual-cd``
    The exact hinge problem by coordinate ascent on its dual, with the
    constraints folded into the projected metric
    ``P = H^-1 - H^-1 R' (R H^-1 R')^+ R H^-1``.
``gd``
    Substitutes ``u = N z`` for an orthonormal null-space basis ``N`` and
    runs backtracking gradient descent on the Huberized hinge (subgradient
    steps with averaging when the smoothing width is 0).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import _kernels
from .dataset import Dataset
from .fairness import ConstraintSet, InfeasibleConstraintError
from .model import ModelSpec, ParamVector, augment, objective, penalty

log = logging.getLogger(__name__)

# relative floor on the penalty of a block that carries loss but no regularizer
PENALTY_FLOOR = 2.0 ** -20


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-6
    max_iterations: int = 50000
    hinge_smoothing: float = 1e-3
    seed: int = 0
    method: str = "newton"
    check_every: int = 10

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.hinge_smoothing < 0:
            raise ValueError("hinge_smoothing must be non-negative")
        if self.method not in ("newton", "dual-cd", "gd"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass(frozen=True, eq=False)
class SolveResult:
    params: ParamVector
    objective_value: float
    constraint_violation: float
    iterations: int
    converged: bool
    gap: float = float("nan")
    # (route, state) pair accepted by ``solve(..., warm_start=...)``
    warm: tuple | None = field(default=None, repr=False)
    # smoothed objective after each accepted step at the final smoothing width
    history: tuple = field(default=(), repr=False)

    def convergence_record(self) -> dict:
        return {
            "objective": self.objective_value,
            "constraint_violation": self.constraint_violation,
            "iterations": self.iterations,
            "converged": self.converged,
            "gap": self.gap,
        }

    def to_text(self) -> str:
        return json.dumps(self.convergence_record(), sort_keys=True) + "\n" + self.params.to_text()


def read_params(text: str) -> ParamVector:
    """Parameters from a :meth:`SolveResult.to_text` or :meth:`ParamVector.to_text` dump."""
    first, _, rest = text.partition("\n")
    return ParamVector.from_text(rest if "converged" in json.loads(first) else text)


# ---------------------------------------------------------------------------
# linear algebra


def orthonormal_rows(C, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the row space of ``C``, redundant rows dropped.

    Classical Gram-Schmidt with one reorthogonalization pass; a row is kept
    when its residual exceeds ``rtol`` times the largest row norm.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0:
        return np.zeros((0, C.shape[1]))
    if not np.all(np.isfinite(C)):
        raise ValueError("constraint rows must be finite")
    scale = np.max(np.linalg.norm(C, axis=1))
    if scale == 0:
        return np.zeros((0, C.shape[1]))
    basis: list[np.ndarray] = []
    for row in C:
        v = row.copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > rtol * scale:
            basis.append(v / nv)
    return np.array(basis) if basis else np.zeros((0, C.shape[1]))


def nullspace_basis(constraints) -> np.ndarray:
    """Orthonormal basis ``N`` (as columns) of ``{W : C W = 0}``."""
    C = constraints.rows if isinstance(constraints, ConstraintSet) else np.asarray(constraints, float)
    C = np.atleast_2d(C)
    dim = C.shape[1]
    Q = orthonormal_rows(C)
    if Q.shape[0] >= dim:
        raise InfeasibleConstraintError(
            f"{Q.shape[0]} independent constraints leave no free direction in dimension {dim}")
    if Q.shape[0] == 0:
        return np.eye(dim)
    full, _ = np.linalg.qr(Q.T, mode="complete")
    N = full[:, Q.shape[0]:]
    # wipe round-off leaking back into the row space
    N -= Q.T @ (Q @ N)
    N, _ = np.linalg.qr(N)
    return N


# ---------------------------------------------------------------------------
# problem assembly


@dataclass(eq=False)
class _Problem:
    X: np.ndarray          # augmented features, one row per sample
    y: np.ndarray
    rows: np.ndarray       # sample of every loss term
    blocks: np.ndarray     # (n_terms, 2) block ids, -1 for unused
    cap: np.ndarray        # per-term loss weight c_j
    pen: np.ndarray        # (k+1, d') penalty, 0 where inactive
    active: np.ndarray     # (k+1, d') bool
    R: np.ndarray          # orthonormal constraint rows over the working vector
    literal: bool

    def __post_init__(self):
        self.Xs = sparse.csr_matrix(self.X)

    @property
    def shape(self):
        return self.pen.shape

    def to_params(self, u: np.ndarray, spec: ModelSpec) -> ParamVector:
        U = u.reshape(self.shape)
        if self.literal:
            W = U - np.vstack([np.zeros((1, U.shape[1])), np.repeat(U[:1], U.shape[0] - 1, 0)])
        else:
            W = U
        return ParamVector(W.ravel(), spec.k, spec.d_prime, spec.method)

    def csr(self):
        Xs = self.Xs
        return Xs.indptr.astype(np.int64), Xs.indices.astype(np.int64), Xs.data

    def term_scores(self, u: np.ndarray) -> np.ndarray:
        S = np.asarray(self.Xs @ u.reshape(self.shape).T)
        out = S[self.rows, self.blocks[:, 0]]
        second = self.blocks[:, 1] >= 0
        out[second] += S[self.rows[second], self.blocks[second, 1]]
        return out


def _working_transform(spec: ModelSpec) -> np.ndarray | None:
    """Matrix ``T`` with ``W = T u`` for the literal regularizer, else None."""
    if spec.regularizer != "literal" or spec.method != "MTL":
        return None
    k, dp = spec.k, spec.d_prime
    T = np.eye((k + 1) * dp)
    for s in range(1, k + 1):
        T[s * dp:(s + 1) * dp, :dp] -= np.eye(dp)
    return T


def _build_problem(spec: ModelSpec, data: Dataset, constraints: ConstraintSet | None,
                   model_groups) -> _Problem:
    if spec.k != data.k or spec.d != data.d:
        raise ValueError(f"spec expects k={spec.k}, d={spec.d}; data has k={data.k}, d={data.d}")
    counts = np.bincount(data.groups - 1, minlength=data.k)
    if np.any(counts == 0):
        raise ValueError(f"group(s) {np.flatnonzero(counts == 0) + 1} have no samples")
    routed = data.groups if model_groups is None else np.asarray(model_groups, dtype=np.int64)
    if routed.shape != data.groups.shape or routed.min() < 1 or routed.max() > data.k:
        raise ValueError("model groups must be one id in 1..k per sample")

    k, dp = spec.k, spec.d_prime
    n = data.n
    w = 1.0 / (k * counts[data.groups - 1])
    idx = np.arange(n)
    none = -np.ones(n, dtype=np.int64)
    literal = spec.regularizer == "literal" and spec.method == "MTL"
    pen = np.zeros((k + 1, dp))
    terms = []  # (rows, block0, block1, weight)

    if spec.method == "STL":
        pen[0] = spec.rho
        terms.append((idx, np.zeros(n, np.int64), none, w))
    elif spec.method == "ITL":
        pen[1:] = spec.rho / k
        terms.append((idx, routed, none, w))
    elif spec.method == "STL_GROUP_BIAS":
        pen[0] = spec.rho
        pen[1:] = spec.rho
        terms.append((idx, np.zeros(n, np.int64), routed, w))
    else:
        lam, theta = spec.lam, spec.theta
        pen[0] = spec.rho * lam
        pen[1:] = spec.rho * (1 - lam) / k
        if theta > 0:
            terms.append((idx, np.zeros(n, np.int64), none, theta * w))
        if theta < 1:
            if literal:
                terms.append((idx, routed, none, (1 - theta) * w))
            else:
                terms.append((idx, np.zeros(n, np.int64), routed, (1 - theta) * w))

    rows = np.concatenate([t[0] for t in terms])
    blocks = np.stack([np.concatenate([t[1] for t in terms]),
                       np.concatenate([t[2] for t in terms])], axis=1).astype(np.int64)
    cap = np.concatenate([t[3] for t in terms])

    used = np.zeros(k + 1, dtype=bool)
    used[np.unique(blocks[blocks >= 0])] = True
    active = np.repeat(used[:, None], dp, axis=1)
    if spec.method == "STL_GROUP_BIAS":
        active[0, -1] = False
        active[1:, :-1] = False
    if not spec.bias:
        active[:, -1] = False
    if spec.method == "MTL" and not literal and spec.lam == 0 and spec.theta == 0:
        # w0 is redundant here; pinning it to 0 recovers ITL
        active[0] = False
    floor = PENALTY_FLOOR * (spec.rho if spec.rho > 0 else 1.0)
    starved = active & (pen <= 0)
    if starved.any():
        pen = np.where(starved, floor, pen)
    pen = np.where(active, pen, 0.0)

    R = np.zeros((0, pen.size))
    if constraints is not None and constraints.m:
        C = np.asarray(constraints.rows, dtype=float)
        if C.shape[1] != pen.size:
            raise ValueError("constraint rows do not match the model layout")
        T = _working_transform(spec)
        if T is not None:
            C = C @ T
        C = C * active.ravel()[None, :]
        R = orthonormal_rows(C)
        if R.shape[0] >= int(active.sum()):
            raise InfeasibleConstraintError("constraints leave no free direction")
    X = np.ascontiguousarray(augment(data.X))
    y = data.labels.astype(np.float64)
    return _Problem(X, y, rows, blocks, cap, pen, active, R, literal)


# ---------------------------------------------------------------------------
# dual coordinate descent


def _projected_metric(prob: _Problem):
    dinv = np.where(prob.active, 1.0 / (2.0 * np.where(prob.active, prob.pen, 1.0)), 0.0)
    m = prob.R.shape[0]
    if m == 0:
        return dinv, np.zeros((dinv.size, 0))
    RD = prob.R * dinv.ravel()[None, :]
    M = RD @ prob.R.T
    evals, evecs = np.linalg.eigh(M)
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    U = RD.T @ (evecs[:, keep] / np.sqrt(evals[keep]))
    return dinv, U


def _project(u: np.ndarray, R: np.ndarray) -> np.ndarray:
    if R.shape[0] == 0:
        return u
    return u - R.T @ (R @ u)


def _primal_value(prob: _Problem, u: np.ndarray) -> tuple[float, float]:
    margins = prob.y[prob.rows] * prob.term_scores(u)
    loss = float(prob.cap @ np.maximum(0.0, 1.0 - margins))
    reg = float(u @ (prob.pen.ravel() * u))
    return loss, reg


def _solve_dual_cd(prob: _Problem, config: SolverConfig, warm: np.ndarray | None):
    dinv, U = _projected_metric(prob)
    m = U.shape[1]
    B, dp = prob.shape
    n_terms = len(prob.rows)
    AU = np.zeros((n_terms, m))
    if m:
        Ub = U.reshape(B, dp, m)
        for s in range(2):
            b = prob.blocks[:, s]
            sel = b >= 0
            # (X_i . U_b) for each term, grouped by block to stay vectorized
            for blk in np.unique(b[sel]):
                which = np.flatnonzero(sel & (b == blk))
                AU[which] += prob.X[prob.rows[which]] @ Ub[blk]
    indptr, indices, values = prob.csr()
    qii = _kernels.term_diag(indptr, indices, values, prob.rows, prob.blocks, dinv, AU)

    alpha = np.zeros(n_terms) if warm is None or len(warm) != n_terms else np.clip(warm, 0, prob.cap)
    g = np.zeros(B * dp)
    if alpha.any():
        contrib = alpha * prob.y[prob.rows]
        G = np.zeros((B, dp))
        for s in range(2):
            b = prob.blocks[:, s]
            sel = b >= 0
            np.add.at(G, b[sel], contrib[sel, None] * prob.X[prob.rows[sel]])
        g = G.ravel()
    ug = (dinv.ravel() * g).reshape(B, dp)
    t = U.T @ g if m else np.zeros(0)
    state = np.array([np.uint64(0x9E3779B97F4A7C15) ^ np.uint64(config.seed + 1)], dtype=np.uint64)
    order = np.arange(n_terms, dtype=np.int64)
    n_active = np.array([n_terms], dtype=np.int64)
    bounds = np.array([np.inf, -np.inf])

    epochs, gap, converged = 0, np.inf, False
    u = np.zeros(B * dp)
    while epochs < config.max_iterations:
        step = min(config.check_every, config.max_iterations - epochs)
        _kernels.cd_epochs(alpha, prob.cap, prob.y, indptr, indices, values, prob.rows,
                           prob.blocks, dinv, AU, qii, ug, t, step, state, order, n_active, bounds)
        epochs += step
        u = ug.ravel() - (U @ t if m else 0.0)
        loss, reg = _primal_value(prob, u)
        primal = loss + reg
        gap = primal + reg - float(alpha.sum())
        if gap <= config.tolerance * (1.0 + abs(primal)):
            converged = True
            break
        # shrunk terms are only trusted within one checking window
        order.sort()
        n_active[0] = n_terms
        bounds[:] = (np.inf, -np.inf)
    u = _project(u * prob.active.ravel(), prob.R)
    return u, epochs, converged, float(gap), alpha, []


# ---------------------------------------------------------------------------
# null-space methods on the smoothed hinge


def huber_hinge(margins, delta: float):
    """Hinge smoothed quadratically on ``[1 - delta, 1 + delta]``; returns value and slope."""
    if delta == 0:
        val = np.maximum(0.0, 1.0 - margins)
        return val, np.where(margins < 1.0, -1.0, 0.0)
    lo, hi = 1.0 - delta, 1.0 + delta
    val = np.where(margins <= lo, 1.0 - margins,
                   np.where(margins >= hi, 0.0, (hi - margins) ** 2 / (4 * delta)))
    slope = np.where(margins <= lo, -1.0,
                     np.where(margins >= hi, 0.0, -(hi - margins) / (2 * delta)))
    return val, slope


class _Smoothed:
    """Huberized objective over the active coordinates of the working vector.

    The null-space basis ``N`` is only formed when ``basis`` is set; the
    reduced variable is then ``z`` with ``u_active = N z``.
    """

    def __init__(self, prob: _Problem, basis: bool = True):
        self.prob = prob
        self.A = np.flatnonzero(prob.active.ravel())
        self.R = prob.R[:, self.A]
        if basis:
            self.N = nullspace_basis(self.R) if self.R.shape[0] else np.eye(len(self.A))
        self.pen = prob.pen.ravel()[self.A]
        self.yt = prob.y[prob.rows]
        B, dp = prob.shape
        n = prob.X.shape[0]
        self.flat0 = prob.rows * B + prob.blocks[:, 0]
        self.second = np.flatnonzero(prob.blocks[:, 1] >= 0)
        self.flat1 = prob.rows[self.second] * B + prob.blocks[self.second, 1]
        self.n, self.B, self.dp = n, B, dp
        keys = (prob.blocks[:, 0] + 1) * (B + 1) + prob.blocks[:, 1] + 1
        uniq, self.combo_of = np.unique(keys, return_inverse=True)
        self.combo_of = self.combo_of.ravel().astype(np.int64)
        self.combos = np.stack([uniq // (B + 1) - 1, uniq % (B + 1) - 1], axis=1)
        self.csr = prob.csr()

    def embed(self, uA) -> np.ndarray:
        u = np.zeros(self.B * self.dp)
        u[self.A] = uA
        return u

    def lift(self, z) -> np.ndarray:
        return self.embed(self.N @ z)

    def margins(self, u) -> np.ndarray:
        return self.yt * self.prob.term_scores(u)

    def value_u(self, uA, delta, m) -> float:
        if delta == 0:
            val, _ = huber_hinge(m, delta)
            return float(self.prob.cap @ val) + float(uA @ (self.pen * uA))
        val, _ = _kernels.huber_eval(m, self.prob.cap, delta)
        return float(val) + float(uA @ (self.pen * uA))

    def value(self, z, delta, m=None) -> float:
        uA = self.N @ z
        m = self.margins(self.embed(uA)) if m is None else m
        return self.value_u(uA, delta, m)

    def block_sums(self, coef) -> np.ndarray:
        """``sum_j coef_j a_j`` as a flat working vector."""
        size = self.n * self.B
        acc = np.bincount(self.flat0, coef, size)
        if len(self.second):
            acc += np.bincount(self.flat1, coef[self.second], size)
        return np.asarray(self.prob.Xs.T @ acc.reshape(self.n, self.B)).T.ravel()

    def value_grad_u(self, uA, delta, m) -> tuple[float, np.ndarray]:
        if delta == 0:
            val, slope = huber_hinge(m, delta)
            val, coef = float(self.prob.cap @ val), self.prob.cap * slope
        else:
            val, coef = _kernels.huber_eval(m, self.prob.cap, delta)
        g = self.block_sums(coef * self.yt)[self.A] + 2 * self.pen * uA
        return float(val) + float(uA @ (self.pen * uA)), g

    def grad_u(self, uA, delta, m) -> np.ndarray:
        return self.value_grad_u(uA, delta, m)[1]

    def grad(self, z, delta, m):
        return self.N.T @ self.grad_u(self.N @ z, delta, m)

    def hessian_u(self, m, delta) -> np.ndarray:
        """Dense Hessian over the active coordinates."""
        return _ArrowHessian(self, m, delta).dense()


class _ArrowHessian:
    """Hessian of the smoothed objective in block-arrow form.

    Every loss term touches block 0 and at most one other block, so blocks
    ``r >= 1`` couple only to block 0 and a Schur complement on block 0
    solves the system with one small factorization per block.
    """

    def __init__(self, sm: _Smoothed, m, delta):
        prob = sm.prob
        B, dp = sm.B, sm.dp
        diag = [np.zeros((dp, dp)) for _ in range(B)]
        off = [None] * B
        grams = _kernels.band_grams(*sm.csr, prob.rows, sm.combo_of, m, prob.cap, delta,
                                    len(sm.combos), dp)
        for c, (b0, b1) in enumerate(sm.combos):
            M = grams[c]
            diag[b0] += M
            if b1 >= 0:
                if b0 != 0:
                    raise AssertionError("loss terms may only pair a block with block 0")
                diag[b1] += M
                off[b1] = M if off[b1] is None else off[b1] + M
        act = prob.active
        pen = prob.pen
        self.idx = [np.flatnonzero(act[b]) for b in range(B)]
        self.offsets = np.concatenate([[0], np.cumsum([len(i) for i in self.idx])])
        self.diag = []
        for b in range(B):
            i = self.idx[b]
            D = diag[b] if len(i) == dp else diag[b][np.ix_(i, i)]
            D[np.diag_indices_from(D)] += 2 * pen[b, i]
            self.diag.append(D)
        self.off = [None] * B
        for b in range(1, B):
            if off[b] is None or not len(self.idx[b]) or not len(self.idx[0]):
                continue
            full = len(self.idx[0]) == dp and len(self.idx[b]) == dp
            self.off[b] = off[b] if full else off[b][np.ix_(self.idx[0], self.idx[b])]

    def dense(self) -> np.ndarray:
        size = self.offsets[-1]
        H = np.zeros((size, size))
        for b, D in enumerate(self.diag):
            sl = slice(self.offsets[b], self.offsets[b + 1])
            H[sl, sl] = D
            if self.off[b] is not None:
                s0 = slice(self.offsets[0], self.offsets[1])
                H[s0, sl] = self.off[b]
                H[sl, s0] = self.off[b].T
        return H

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        out = np.zeros_like(rhs)
        sl = [slice(self.offsets[b], self.offsets[b + 1]) for b in range(len(self.diag))]
        S = self.diag[0].copy()
        r0 = rhs[sl[0]].copy()
        facs = [None] * len(self.diag)
        for b in range(1, len(self.diag)):
            if not len(self.idx[b]):
                continue
            facs[b] = _cholesky(self.diag[b])
            if self.off[b] is not None:
                # L^-1 H_b0 gives the Schur update as a Gram matrix
                Z = solve_triangular(facs[b], self.off[b].T, lower=True, check_finite=False)
                S -= Z.T @ Z
                r0 -= self.off[b] @ cho_solve((facs[b], True), rhs[sl[b]], check_finite=False)
        if len(self.idx[0]):
            out[sl[0]] = cho_solve((_cholesky(S), True), r0, check_finite=False)
        for b in range(1, len(self.diag)):
            if facs[b] is None:
                continue
            rb = rhs[sl[b]]
            if self.off[b] is not None:
                rb = rb - self.off[b].T @ out[sl[0]]
            out[sl[b]] = cho_solve((facs[b], True), rb, check_finite=False)
        return out


def _cholesky(H) -> np.ndarray:
    """Lower Cholesky factor, with a tiny diagonal jitter if round-off broke definiteness."""
    try:
        return cho_factor(H, lower=True, check_finite=False)[0]
    except np.linalg.LinAlgError:
        jitter = 1e-12 * max(np.trace(H) / len(H), 1e-300)
        return cho_factor(H + jitter * np.eye(len(H)), lower=True, check_finite=False)[0]


def _line_search_u(sm: _Smoothed, uA, du, m, delta):
    """Exact minimizer of the convex piecewise-quadratic objective along ``du``.

    Returns the step and the margin change per unit step.
    """
    dm = sm.margins(sm.embed(du))
    a2, a1 = float(du @ (sm.pen * du)), float(uA @ (sm.pen * du))
    return float(_kernels.line_minimize(m, dm, sm.prob.cap, delta, a1, a2)), dm


def _continuation(target: float) -> list[float]:
    deltas, d = [], 1.0
    while d > target * 1.0001:
        deltas.append(d)
        d /= 10.0
    return deltas + [target]


def _newton_direction(H: _ArrowHessian, g, R):
    """Solve ``H d + R' nu = -g, R d = 0`` by block elimination."""
    if not R.shape[0]:
        return -H.solve(g)
    sol = H.solve(np.column_stack([g, R.T]))
    x, Y = sol[:, 0], sol[:, 1:]
    nu = np.linalg.solve(R @ Y, R @ x)
    return -(x - Y @ nu)


def _solve_newton(prob: _Problem, config: SolverConfig, warm: np.ndarray | None):
    sm = _Smoothed(prob, basis=False)
    R = sm.R
    uA = np.zeros(len(sm.A))
    if warm is not None and len(warm) == prob.pen.size:
        uA = np.asarray(warm, dtype=float)[sm.A]
        if R.shape[0]:
            uA = uA - R.T @ (R @ uA)
    target = config.hinge_smoothing
    if target == 0:
        raise ValueError("the Newton route needs hinge_smoothing > 0")
    deltas = _continuation(target)
    if warm is not None:
        deltas = deltas[-1:]
    it, converged, gnorm = 0, False, np.inf
    history = []
    m = sm.margins(sm.embed(uA))
    for stage, delta in enumerate(deltas):
        final = stage == len(deltas) - 1
        while it < config.max_iterations:
            f, g = sm.value_grad_u(uA, delta, m)
            if final:
                history.append(f)
            pg = g - R.T @ (R @ g) if R.shape[0] else g
            gnorm = float(np.linalg.norm(pg))
            if gnorm <= config.tolerance * (1.0 + abs(f)):
                converged = final
                break
            du = _newton_direction(_ArrowHessian(sm, m, delta), g, R)
            if not np.all(np.isfinite(du)) or g @ du >= 0:
                du = -pg
            t, dm = _line_search_u(sm, uA, du, m, delta)
            if t == 0.0 and not np.array_equal(du, -pg):
                # ill-conditioned Hessian: fall back to steepest descent
                du = -pg
                t, dm = _line_search_u(sm, uA, du, m, delta)
            it += 1
            if t == 0.0:
                # no progress possible along the Newton direction
                converged = final and gnorm <= 1e3 * config.tolerance * (1.0 + abs(f))
                break
            uA = uA + t * du
            m = m + t * dm
        if it >= config.max_iterations:
            break
    u = _project(sm.embed(uA), prob.R)
    return u, it, converged, gnorm, u, history


def _solve_gd(prob: _Problem, config: SolverConfig, warm: np.ndarray | None):
    sm = _Smoothed(prob)
    delta = config.hinge_smoothing
    z = np.zeros(sm.N.shape[1])
    if warm is not None and len(warm) == prob.pen.size:
        z = sm.N.T @ np.asarray(warm)[sm.A]

    def value_grad(z):
        m = sm.margins(sm.lift(z))
        g = sm.grad(z, delta, m)
        return sm.value(z, delta, m), g

    f, g = value_grad(z)
    it, converged = 0, False
    if delta == 0:
        mu = 2 * sm.pen.min() if len(sm.pen) else 1.0
        z_avg, wsum = z.copy(), 0.0
        best = (f, z.copy())
        for it in range(1, config.max_iterations + 1):
            z = z - g / (mu * it)
            f, g = value_grad(z)
            z_avg = (wsum * z_avg + it * z) / (wsum + it)
            wsum += it
            if f < best[0]:
                best = (f, z.copy())
        fa, _ = value_grad(z_avg)
        z = z_avg if fa <= best[0] else best[1]
        u = _project(sm.lift(z), prob.R)
        return u, it, False, float("nan"), u, [min(fa, best[0])]
    step = 1.0
    history = [f]
    while it < config.max_iterations:
        gn = float(g @ g)
        if np.sqrt(gn) <= config.tolerance * (1.0 + abs(f)):
            converged = True
            break
        while True:
            z_new = z - step * g
            f_new, g_new = value_grad(z_new)
            if f_new <= f - 0.5 * step * gn:
                break
            step *= 0.5
            if step < 1e-30:
                break
        if f_new > f:
            break
        z, f, g = z_new, f_new, g_new
        history.append(f)
        step *= 2.0
        it += 1
    u = _project(sm.lift(z), prob.R)
    return u, it, converged, float(np.sqrt(g @ g)), u, history


def smoothed_objective(params: ParamVector, data: Dataset, spec: ModelSpec, delta: float,
                       model_groups=None) -> float:
    """The objective with the hinge replaced by its Huberized version."""
    prob = _build_problem(spec, data, None, model_groups)
    T = _working_transform(spec)
    u = params.stacked if T is None else np.linalg.solve(T, params.stacked)
    margins = prob.y[prob.rows] * prob.term_scores(u)
    val, _ = huber_hinge(margins, delta)
    return float(prob.cap @ val) + penalty(params, spec)


# ---------------------------------------------------------------------------

_ROUTES = {"newton": _solve_newton, "dual-cd": _solve_dual_cd, "gd": _solve_gd}


def solve(spec: ModelSpec, data: Dataset, constraints: ConstraintSet | None = None,
          config: SolverConfig | None = None, model_groups=None, warm_start=None) -> SolveResult:
    """Train ``spec`` on ``data`` subject to ``constraints``.

    ``model_groups`` routes samples to task models (default: true groups);
    risks are always balanced over the true groups.  ``warm_start`` is the
    ``warm`` field of an earlier result solved with the same route; dual
    warm starts also need the same data, method and theta.
    """
    config = config or SolverConfig()
    prob = _build_problem(spec, data, constraints, model_groups)
    if warm_start is not None and warm_start[0] != config.method:
        warm_start = None
    u, iters, converged, gap, warm, history = _ROUTES[config.method](
        prob, config, None if warm_start is None else warm_start[1])
    params = prob.to_params(u, spec)
    violation = constraints.violation(params) if constraints is not None else 0.0
    value = objective(params, data, spec, model_groups)
    if not converged:
        log.warning("%s solve stopped after %d iterations without converging (residual %.3g)",
                    spec.method, iters, gap)
    return SolveResult(params, value, violation, iters, converged, gap, (config.method, warm),
                       tuple(history))
