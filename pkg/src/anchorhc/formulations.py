"""Depth-formulated polynomial systems for the 5pt and Scranton problems.

Each equation row equates the squared distance between two 3D points as
reconstructed from two different views::

    |lam_ki v_ki - lam_mi v_mi|^2 - |lam_kj v_kj - lam_mj v_mj|^2 = 0

with ``v = [x; 1]``. The 5pt square system keeps 9 of the 10 point pairs
(pair (4,5) is dropped). The Scranton system uses all 6 point pairs for view
pairs (1,2) and (1,3); point 1 in view 1 is relaxed along ``[0; 1; 0]`` by the
extra unknown ``l``.

The kernels below are written so numba can specialise them for both float64
and complex128 inputs; the complex versions are only used by the arc tracker.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .problem import Kind

# rows: (point k, point m, view i, view j), 0-based
ROWS_5PT = np.array(
    [(0, 1, 0, 1), (0, 2, 0, 1), (0, 3, 0, 1), (0, 4, 0, 1),
     (1, 2, 0, 1), (1, 3, 0, 1), (1, 4, 0, 1), (2, 3, 0, 1), (2, 4, 0, 1)],
    dtype=np.int64,
)
DROPPED_ROW_5PT = np.array([(3, 4, 0, 1)], dtype=np.int64)
_PAIRS4 = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
ROWS_SCRANTON = np.array(
    [(k, m, 0, 1) for k, m in _PAIRS4] + [(k, m, 0, 2) for k, m in _PAIRS4],
    dtype=np.int64,
)
RELAX_SLOT = 11

PIVOT_TOL = 1e-14


class SingularSystemError(ArithmeticError):
    """Raised when the pattern solver meets a pivot below tolerance."""


# ---------------------------------------------------------------------------
# kernels

@nb.njit(cache=True)
def _rows(kind):
    return ROWS_5PT if kind == 0 else ROWS_SCRANTON


# column of lam(point, view) in the solution vector; -1 marks the gauge slot
COLS_5PT = np.array([[-1, 4], [0, 5], [1, 6], [2, 7], [3, 8]], dtype=np.int64)
COLS_SCRANTON = np.array([[-1, 3, 7], [0, 4, 8], [1, 5, 9], [2, 6, 10]], dtype=np.int64)


@nb.njit(cache=True)
def _cols(kind):
    return COLS_5PT if kind == 0 else COLS_SCRANTON


@nb.njit(cache=True)
def _unpack(kind, p, s, lam, X):
    # depth table lam[point, view] and image points X[view, point, c],
    # with the relaxed observation already shifted for Scranton
    cols = _cols(kind)
    npts = cols.shape[0]
    nv = cols.shape[1]
    for v in range(nv):
        for i in range(npts):
            c = cols[i, v]
            if c < 0:
                lam[i, v] = 1.0
            else:
                lam[i, v] = s[c]
            b = (v * npts + i) * 2
            X[v, i, 0] = p[b]
            X[v, i, 1] = p[b + 1]
    if kind == 1:
        X[0, 0, 1] += s[11]


@nb.njit(cache=True)
def _scratch(kind, s):
    cols = _cols(kind)
    lam = np.empty((cols.shape[0], cols.shape[1]), dtype=s.dtype)
    X = np.empty((cols.shape[1], cols.shape[0], 2), dtype=s.dtype)
    return lam, X


@nb.njit(cache=True)
def evaluate_kernel(kind, p, s, out):
    lam, X = _scratch(kind, s)
    evaluate_ws(kind, p, s, out, lam, X)


@nb.njit(cache=True)
def evaluate_ws(kind, p, s, out, lam, X):
    _unpack(kind, p, s, lam, X)
    _eval_rows(_rows(kind), lam, X, out)


@nb.njit(cache=True)
def _eval_rows(rows, lam, X, out):
    for r in range(rows.shape[0]):
        k, m, vi, vj = rows[r, 0], rows[r, 1], rows[r, 2], rows[r, 3]
        a0 = lam[k, vi] * X[vi, k, 0] - lam[m, vi] * X[vi, m, 0]
        a1 = lam[k, vi] * X[vi, k, 1] - lam[m, vi] * X[vi, m, 1]
        a2 = lam[k, vi] - lam[m, vi]
        b0 = lam[k, vj] * X[vj, k, 0] - lam[m, vj] * X[vj, m, 0]
        b1 = lam[k, vj] * X[vj, k, 1] - lam[m, vj] * X[vj, m, 1]
        b2 = lam[k, vj] - lam[m, vj]
        out[r] = a0 * a0 + a1 * a1 + a2 * a2 - (b0 * b0 + b1 * b1 + b2 * b2)


@nb.njit(cache=True)
def jacobian_s_kernel(kind, p, s, J):
    lam, X = _scratch(kind, s)
    jacobian_s_ws(kind, p, s, J, lam, X)


@nb.njit(cache=True)
def jacobian_s_ws(kind, p, s, J, lam, X):
    _unpack(kind, p, s, lam, X)
    rows = _rows(kind)
    cols = _cols(kind)
    J[:, :] = 0.0
    for r in range(rows.shape[0]):
        k, m, vi, vj = rows[r, 0], rows[r, 1], rows[r, 2], rows[r, 3]
        a0 = lam[k, vi] * X[vi, k, 0] - lam[m, vi] * X[vi, m, 0]
        a1 = lam[k, vi] * X[vi, k, 1] - lam[m, vi] * X[vi, m, 1]
        a2 = lam[k, vi] - lam[m, vi]
        b0 = lam[k, vj] * X[vj, k, 0] - lam[m, vj] * X[vj, m, 0]
        b1 = lam[k, vj] * X[vj, k, 1] - lam[m, vj] * X[vj, m, 1]
        b2 = lam[k, vj] - lam[m, vj]
        c = cols[k, vi]
        if c >= 0:
            J[r, c] += 2.0 * (a0 * X[vi, k, 0] + a1 * X[vi, k, 1] + a2)
        c = cols[m, vi]
        if c >= 0:
            J[r, c] -= 2.0 * (a0 * X[vi, m, 0] + a1 * X[vi, m, 1] + a2)
        c = cols[k, vj]
        if c >= 0:
            J[r, c] -= 2.0 * (b0 * X[vj, k, 0] + b1 * X[vj, k, 1] + b2)
        c = cols[m, vj]
        if c >= 0:
            J[r, c] += 2.0 * (b0 * X[vj, m, 0] + b1 * X[vj, m, 1] + b2)
        if kind == 1 and k == 0 and vi == 0:
            J[r, 11] += 2.0 * a1 * lam[0, 0]


@nb.njit(cache=True)
def dfdp_dot_kernel(kind, p, s, dp, out):
    """Directional derivative of the residual w.r.t. the problem along ``dp``."""
    lam, X = _scratch(kind, s)
    dfdp_dot_ws(kind, p, s, dp, out, lam, X)


@nb.njit(cache=True)
def dfdp_dot_ws(kind, p, s, dp, out, lam, X):
    _unpack(kind, p, s, lam, X)
    rows = _rows(kind)
    npts = lam.shape[0]
    for r in range(rows.shape[0]):
        k, m, vi, vj = rows[r, 0], rows[r, 1], rows[r, 2], rows[r, 3]
        a0 = lam[k, vi] * X[vi, k, 0] - lam[m, vi] * X[vi, m, 0]
        a1 = lam[k, vi] * X[vi, k, 1] - lam[m, vi] * X[vi, m, 1]
        b0 = lam[k, vj] * X[vj, k, 0] - lam[m, vj] * X[vj, m, 0]
        b1 = lam[k, vj] * X[vj, k, 1] - lam[m, vj] * X[vj, m, 1]
        ki = (vi * npts + k) * 2
        mi = (vi * npts + m) * 2
        kj = (vj * npts + k) * 2
        mj = (vj * npts + m) * 2
        acc = (a0 * (lam[k, vi] * dp[ki] - lam[m, vi] * dp[mi])
               + a1 * (lam[k, vi] * dp[ki + 1] - lam[m, vi] * dp[mi + 1])
               - b0 * (lam[k, vj] * dp[kj] - lam[m, vj] * dp[mj])
               - b1 * (lam[k, vj] * dp[kj + 1] - lam[m, vj] * dp[mj + 1]))
        out[r] = 2.0 * acc


@nb.njit(cache=True)
def _gauss_small(M, g, z, tol):
    # partial-pivot elimination on the small dense Schur block
    n = M.shape[0]
    for c in range(n):
        piv = c
        best = abs(M[c, c])
        for r in range(c + 1, n):
            a = abs(M[r, c])
            if a > best:
                best = a
                piv = r
        if best <= tol:
            return False
        if piv != c:
            for q in range(n):
                tmp = M[c, q]
                M[c, q] = M[piv, q]
                M[piv, q] = tmp
            tmp = g[c]
            g[c] = g[piv]
            g[piv] = tmp
        inv = 1.0 / M[c, c]
        for r in range(c + 1, n):
            f = M[r, c] * inv
            if f != 0:
                for q in range(c + 1, n):
                    M[r, q] -= f * M[c, q]
                g[r] -= f * g[c]
    for c in range(n - 1, -1, -1):
        acc = g[c]
        for q in range(c + 1, n):
            acc -= M[c, q] * z[q]
        z[c] = acc / M[c, c]
    return True


@nb.njit(cache=True)
def _solve_5pt(J, b, x, tol, wf, wi):
    # Stage 1: rows 0..3 are pairs (1,k): entries at a_k (col k-1), b1 (col 4),
    # b_k (col 4+k). Eliminate whichever of a_k / b_k has the larger pivot.
    elim = wi[0:4]
    keep = wi[4:8]
    c_b1 = wf[0:4]
    c_keep = wf[4:8]
    c_0 = wf[8:12]
    for q in range(4):
        r = q
        ca = q
        cb = 5 + q
        if abs(J[r, ca]) >= abs(J[r, cb]):
            e, u = ca, cb
        else:
            e, u = cb, ca
        piv = J[r, e]
        if abs(piv) <= tol:
            return False
        elim[q] = e
        keep[q] = u
        c_b1[q] = -J[r, 4] / piv
        c_keep[q] = -J[r, u] / piv
        c_0[q] = b[r] / piv
    # Stage 2: rows 4..8 reduce to a dense 5x5 over z = (b1, u_1..u_4)
    M = wf[12:37].reshape((5, 5))
    M[:, :] = 0.0
    g = wf[37:42]
    for rr in range(5):
        r = 4 + rr
        g[rr] = b[r]
        M[rr, 0] = J[r, 4]
        for q in range(4):
            ce = elim[q]
            cu = keep[q]
            je = J[r, ce]
            if je != 0:
                M[rr, 0] += je * c_b1[q]
                M[rr, 1 + q] += je * c_keep[q]
                g[rr] -= je * c_0[q]
            ju = J[r, cu]
            if ju != 0:
                M[rr, 1 + q] += ju
    z = wf[42:47]
    if not _gauss_small(M, g, z, tol):
        return False
    x[4] = z[0]
    for q in range(4):
        x[keep[q]] = z[1 + q]
        x[elim[q]] = c_0[q] + c_b1[q] * z[0] + c_keep[q] * z[1 + q]
    return True


@nb.njit(cache=True)
def _solve_scranton(J, b, x, tol, wf):
    # The view-2 rows (0..5) and view-3 rows (6..11) only couple through the
    # shared view-1 unknowns (a2, a3, a4, l) = cols (0, 1, 2, 11). Reduce each
    # block's four own depths, leaving 2 rows per block on the shared unknowns.
    shared = (0, 1, 2, 11)
    Ms = wf[0:16].reshape((4, 4))
    gs = wf[16:20]
    # per block: 6 x (4 own + 4 shared + rhs)
    blocks = wf[20:128].reshape((2, 6, 9))
    for blk in range(2):
        r0 = 6 * blk
        w0 = 3 + 4 * blk
        A = blocks[blk]
        for i in range(6):
            for q in range(4):
                A[i, q] = J[r0 + i, w0 + q]
                A[i, 4 + q] = J[r0 + i, shared[q]]
            A[i, 8] = b[r0 + i]
        for c in range(4):
            piv = c
            best = abs(A[c, c])
            for r in range(c + 1, 6):
                a = abs(A[r, c])
                if a > best:
                    best = a
                    piv = r
            if best <= tol:
                return False
            if piv != c:
                for q in range(9):
                    tmp = A[c, q]
                    A[c, q] = A[piv, q]
                    A[piv, q] = tmp
            inv = 1.0 / A[c, c]
            for r in range(c + 1, 6):
                f = A[r, c] * inv
                if f != 0:
                    for q in range(c + 1, 9):
                        A[r, q] -= f * A[c, q]
                    A[r, c] = 0.0
        for i in range(2):
            for q in range(4):
                Ms[2 * blk + i, q] = A[4 + i, 4 + q]
            gs[2 * blk + i] = A[4 + i, 8]
    zs = wf[128:132]
    if not _gauss_small(Ms, gs, zs, tol):
        return False
    for q in range(4):
        x[shared[q]] = zs[q]
    for blk in range(2):
        A = blocks[blk]
        w0 = 3 + 4 * blk
        for c in range(3, -1, -1):
            acc = A[c, 8]
            for q in range(4):
                acc -= A[c, 4 + q] * zs[q]
            for q in range(c + 1, 4):
                acc -= A[c, q] * x[w0 + q]
            x[w0 + c] = acc / A[c, c]
    return True


SOLVE_WORK = 132


@nb.njit(cache=True)
def solve_kernel(kind, J, b, x):
    wf = np.empty(SOLVE_WORK, dtype=J.dtype)
    wi = np.empty(8, dtype=np.int64)
    return solve_ws(kind, J, b, x, wf, wi)


@nb.njit(cache=True)
def solve_ws(kind, J, b, x, wf, wi):
    scale = 0.0
    for i in range(J.shape[0]):
        for j in range(J.shape[1]):
            a = abs(J[i, j])
            if a > scale:
                scale = a
    if not scale > 0.0:
        return False
    tol = PIVOT_TOL * max(scale, 1.0)
    if kind == 0:
        ok = _solve_5pt(J, b, x, tol, wf, wi)
    else:
        ok = _solve_scranton(J, b, x, tol, wf)
    if not ok:
        return False
    for i in range(x.shape[0]):
        if not np.isfinite(abs(x[i])):
            return False
    return True


# ---------------------------------------------------------------------------
# public API

def _prep(kind, problem, solution):
    kind = Kind.parse(kind)
    p = np.ascontiguousarray(problem, dtype=np.float64).reshape(-1)
    s = np.ascontiguousarray(solution, dtype=np.float64).reshape(-1)
    if p.size != kind.problem_dim or s.size != kind.n_unknowns:
        raise ValueError(
            f"{kind.value}: expected problem/solution of size "
            f"{kind.problem_dim}/{kind.n_unknowns}, got {p.size}/{s.size}")
    return kind, p, s


def evaluate(kind, problem, solution) -> np.ndarray:
    """Residual vector of the square system."""
    kind, p, s = _prep(kind, problem, solution)
    out = np.empty(kind.n_unknowns)
    evaluate_kernel(kind.code, p, s, out)
    return out


def dropped_residual(problem, solution) -> float:
    """Residual of the 5pt equation for point pair (4,5), left out of the square system."""
    _, p, s = _prep(Kind.FIVE_POINT, problem, solution)
    out = np.empty(1)
    lam, X = _scratch(0, s)
    _unpack(0, p, s, lam, X)
    _eval_rows(DROPPED_ROW_5PT, lam, X, out)
    return float(out[0])


def jacobian_s(kind, problem, solution) -> np.ndarray:
    """Analytic Jacobian w.r.t. the unknowns; structural zeros are exact zeros."""
    kind, p, s = _prep(kind, problem, solution)
    J = np.empty((kind.n_unknowns, kind.n_unknowns))
    jacobian_s_kernel(kind.code, p, s, J)
    return J


def jacobian_t(kind, start_problem, target_problem, solution, t: float) -> np.ndarray:
    """d/dt of the residual along ``p(t) = (1 - t) p0 + t p1`` at fixed solution."""
    kind, p0, s = _prep(kind, start_problem, solution)
    p1 = np.ascontiguousarray(target_problem, dtype=np.float64).reshape(-1)
    if p1.size != p0.size:
        raise ValueError("start and target problems differ in size")
    dp = p1 - p0
    pt = p0 + t * dp
    out = np.empty(kind.n_unknowns)
    dfdp_dot_kernel(kind.code, pt, s, dp, out)
    return out


def solve_pattern(kind, jacobian, rhs) -> np.ndarray:
    """Solve ``J x = rhs`` for a Jacobian with the fixed sparsity pattern."""
    kind = Kind.parse(kind)
    J = np.array(jacobian, dtype=np.float64)  # copy; kernel leaves it intact but be safe
    b = np.ascontiguousarray(rhs, dtype=np.float64).reshape(-1)
    n = kind.n_unknowns
    if J.shape != (n, n) or b.size != n:
        raise ValueError(f"{kind.value}: expected {n}x{n} system")
    x = np.empty(n)
    if not solve_kernel(kind.code, J, b, x):
        raise SingularSystemError(f"{kind.value} pattern solve hit a pivot below tolerance")
    return x


def sparse_pattern(kind) -> list[tuple[int, int]]:
    """Row-major structurally nonzero ``(row, col)`` slots of dH/ds."""
    kind = Kind.parse(kind)
    rows = ROWS_5PT if kind is Kind.FIVE_POINT else ROWS_SCRANTON
    slots = set()
    for r, (k, m, vi, vj) in enumerate(rows):
        for pt, v in ((k, vi), (m, vi), (k, vj), (m, vj)):
            col = int((COLS_5PT if kind is Kind.FIVE_POINT else COLS_SCRANTON)[pt, v])
            if col >= 0:
                slots.add((r, col))
        if kind is Kind.SCRANTON and k == 0 and vi == 0:
            slots.add((r, RELAX_SLOT))
    return sorted(slots)


def pattern_mask(kind) -> np.ndarray:
    kind = Kind.parse(kind)
    mask = np.zeros((kind.n_unknowns, kind.n_unknowns), dtype=bool)
    for r, c in sparse_pattern(kind):
        mask[r, c] = True
    return mask


@dataclass(frozen=True)
class FormulationSystem:
    kind: Kind
    n_unknowns: int
    n_equations: int
    equation_index_map: list = field(repr=False)

    @classmethod
    def for_kind(cls, kind) -> "FormulationSystem":
        kind = Kind.parse(kind)
        rows = ROWS_5PT if kind is Kind.FIVE_POINT else ROWS_SCRANTON
        # 1-based indices, matching the usual lam_{point,view} notation
        index_map = [((int(k) + 1, int(m) + 1), (int(i) + 1, int(j) + 1)) for k, m, i, j in rows]
        return cls(kind, kind.n_unknowns, len(index_map), index_map)

    def evaluate(self, problem, solution):
        return evaluate(self.kind, problem, solution)

    def jacobian_s(self, problem, solution):
        return jacobian_s(self.kind, problem, solution)

    def jacobian_t(self, start_problem, target_problem, solution, t):
        return jacobian_t(self.kind, start_problem, target_problem, solution, t)

    def solve(self, jacobian, rhs):
        return solve_pattern(self.kind, jacobian, rhs)
