"""Predictor-corrector path tracking between two problems.

The homotopy is ``H(s, tau) = f(p(t(tau)), s)`` with
``p(t) = (1 - t) p0 + t p1`` and ``t(tau) = gamma tau / (1 + (gamma - 1) tau)``.
With ``gamma = 1`` this is the straight segment, tracked in real arithmetic.
Any other unit-modulus ``gamma`` bends the path into the complex plane.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .formulations import (
    SOLVE_WORK,
    FormulationSystem,
    _scratch,
    dfdp_dot_ws,
    evaluate_ws,
    jacobian_s_ws,
    solve_ws,
)
from .problem import Kind, PsPair


class TrackStatus(enum.IntEnum):
    CONVERGED = 0
    STEP_SIZE_UNDERFLOW = 1
    MAX_STEPS_EXCEEDED = 2
    SINGULAR_JACOBIAN = 3
    DIVERGED_NORM = 4
    NON_REAL_ENDPOINT = 5

    @property
    def label(self) -> str:
        return {
            0: "Converged", 1: "StepSizeUnderflow", 2: "MaxStepsExceeded",
            3: "SingularJacobian", 4: "DivergedNorm", 5: "NonRealEndpoint",
        }[int(self)]


@dataclass(frozen=True)
class TrackSettings:
    initial_dt: float = 0.05
    min_dt: float = 1e-7
    max_dt: float = 0.25
    max_steps: int = 10000
    corrector_tolerance: float = 1e-9
    max_corrector_iters: int = 3
    step_growth: float = 2.0
    grow_after: int = 4
    step_shrink: float = 0.5
    divergence_norm: float = 1e8
    success_distance_sq: float = 1e-5
    imag_tolerance: float = 1e-6

    def __post_init__(self):
        if not (0 < self.min_dt < self.initial_dt <= 1.0):
            raise ValueError("need 0 < min_dt < initial_dt <= 1")
        if self.max_dt < self.initial_dt:
            raise ValueError("max_dt must be at least initial_dt")
        if self.max_corrector_iters < 1 or self.max_steps < 1:
            raise ValueError("max_corrector_iters and max_steps must be >= 1")
        if not (0 < self.step_shrink < 1 < self.step_growth):
            raise ValueError("need step_shrink < 1 < step_growth")

    def as_array(self) -> np.ndarray:
        return np.array([
            self.initial_dt, self.min_dt, self.max_dt, self.max_steps,
            self.corrector_tolerance, self.max_corrector_iters, self.step_growth,
            self.grow_after, self.step_shrink, self.divergence_norm,
        ], dtype=np.float64)


DEFAULT_SETTINGS = TrackSettings()


@dataclass(frozen=True, eq=False)
class TrackOutcome:
    status: TrackStatus
    solution: np.ndarray | None
    steps_taken: int
    wall_time: float
    # last iterate, also filled for failed tracks (useful for diagnostics)
    last_iterate: np.ndarray | None = field(default=None, repr=False)
    residual_history: tuple = field(default=(), repr=False)

    @property
    def converged(self) -> bool:
        return self.status is TrackStatus.CONVERGED


# ---------------------------------------------------------------------------
# kernels


@nb.njit(cache=True)
def _inf_norm(v):
    m = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if not a <= m:  # also propagates NaN
            m = a
    return m


@nb.njit(cache=True)
def _path_point(p0, p1, gamma, tau, p, dp):
    # p(t(tau)) and dp/dtau
    den = 1.0 + (gamma - 1.0) * tau
    t = gamma * tau / den
    dt = gamma / (den * den)
    for i in range(p.shape[0]):
        d = p1[i] - p0[i]
        p[i] = p0[i] + t * d
        dp[i] = dt * d


@nb.njit(cache=True)
def _workspace(kind, s):
    # scratch shared by all kernels of one track, allocated once
    lam, X = _scratch(kind, s)
    wf = np.empty(SOLVE_WORK, dtype=s.dtype)
    wi = np.empty(8, dtype=np.int64)
    return lam, X, wf, wi


@nb.njit(cache=True)
def _velocity(kind, p0, p1, gamma, tau, s, out, p, dp, J, rhs, ws):
    lam, X, wf, wi = ws
    _path_point(p0, p1, gamma, tau, p, dp)
    jacobian_s_ws(kind, p, s, J, lam, X)
    dfdp_dot_ws(kind, p, s, dp, rhs, lam, X)
    for i in range(rhs.shape[0]):
        rhs[i] = -rhs[i]
    return solve_ws(kind, J, rhs, out, wf, wi)


@nb.njit(cache=True)
def rk4_step_kernel(kind, p0, p1, gamma, tau, h, s, out):
    """One classical RK4 step of the Davidenko ODE; returns False on a singular solve."""
    n = s.shape[0]
    m = p0.shape[0]
    p = np.empty(m, dtype=s.dtype)
    dp = np.empty(m, dtype=s.dtype)
    J = np.empty((n, n), dtype=s.dtype)
    rhs = np.empty(n, dtype=s.dtype)
    k1 = np.empty(n, dtype=s.dtype)
    k2 = np.empty(n, dtype=s.dtype)
    k3 = np.empty(n, dtype=s.dtype)
    k4 = np.empty(n, dtype=s.dtype)
    tmp = np.empty(n, dtype=s.dtype)
    ws = _workspace(kind, s)
    return _rk4(kind, p0, p1, gamma, tau, h, s, out, p, dp, J, rhs, k1, k2, k3, k4, tmp, ws)


@nb.njit(cache=True)
def _rk4(kind, p0, p1, gamma, tau, h, s, out, p, dp, J, rhs, k1, k2, k3, k4, tmp, ws):
    n = s.shape[0]
    if not _velocity(kind, p0, p1, gamma, tau, s, k1, p, dp, J, rhs, ws):
        return False
    for i in range(n):
        tmp[i] = s[i] + 0.5 * h * k1[i]
    if not _velocity(kind, p0, p1, gamma, tau + 0.5 * h, tmp, k2, p, dp, J, rhs, ws):
        return False
    for i in range(n):
        tmp[i] = s[i] + 0.5 * h * k2[i]
    if not _velocity(kind, p0, p1, gamma, tau + 0.5 * h, tmp, k3, p, dp, J, rhs, ws):
        return False
    for i in range(n):
        tmp[i] = s[i] + h * k3[i]
    if not _velocity(kind, p0, p1, gamma, tau + h, tmp, k4, p, dp, J, rhs, ws):
        return False
    for i in range(n):
        out[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return True


@nb.njit(cache=True)
def _correct(kind, p, s, iters, tol, J, r, d, ws):
    # returns 0 converged, 1 not converged, 2 singular
    lam, X, wf, wi = ws
    for it in range(iters + 1):
        evaluate_ws(kind, p, s, r, lam, X)
        if _inf_norm(r) <= tol:
            return 0
        if it == iters:
            break
        jacobian_s_ws(kind, p, s, J, lam, X)
        for i in range(r.shape[0]):
            r[i] = -r[i]
        if not solve_ws(kind, J, r, d, wf, wi):
            return 2
        for i in range(s.shape[0]):
            s[i] += d[i]
    return 1


@nb.njit(cache=True)
def track_kernel(kind, p0, p1, s0, gamma, params, s_out):
    """Track from ``(p0, s0)`` to ``p1``. Returns ``(status, steps)``; ``s_out`` holds the last iterate."""
    initial_dt = params[0]
    min_dt = params[1]
    max_dt = params[2]
    max_steps = int(params[3])
    tol = params[4]
    max_corr = int(params[5])
    growth = params[6]
    grow_after = int(params[7])
    shrink = params[8]
    div_norm = params[9]

    n = s0.shape[0]
    m = p0.shape[0]
    dt_ = s0.dtype
    p = np.empty(m, dtype=dt_)
    dp = np.empty(m, dtype=dt_)
    J = np.empty((n, n), dtype=dt_)
    rhs = np.empty(n, dtype=dt_)
    k1 = np.empty(n, dtype=dt_)
    k2 = np.empty(n, dtype=dt_)
    k3 = np.empty(n, dtype=dt_)
    k4 = np.empty(n, dtype=dt_)
    tmp = np.empty(n, dtype=dt_)
    cand = np.empty(n, dtype=dt_)
    ws = _workspace(kind, s0)
    for i in range(n):
        s_out[i] = s0[i]

    tau = 0.0
    dt = initial_dt
    streak = 0
    steps = 0
    last_singular = False
    while tau < 1.0:
        if steps >= max_steps:
            return 2, steps
        steps += 1
        h = dt
        final = False
        if tau + h >= 1.0:
            h = 1.0 - tau
            final = True
        ok = _rk4(kind, p0, p1, gamma, tau, h, s_out, cand, p, dp, J, rhs, k1, k2, k3, k4, tmp, ws)
        code = 2
        if ok:
            t_new = 1.0 if final else tau + h
            _path_point(p0, p1, gamma, t_new, p, dp)
            code = _correct(kind, p, cand, max_corr, tol, J, rhs, tmp, ws)
        if code == 0:
            for i in range(n):
                s_out[i] = cand[i]
            tau = 1.0 if final else tau + h
            last_singular = False
            streak += 1
            if streak >= grow_after:
                dt = min(dt * growth, max_dt)
                streak = 0
            nrm = 0.0
            for i in range(n):
                nrm += abs(s_out[i]) ** 2
            if not np.sqrt(nrm) <= div_norm:
                return 4, steps
        else:
            last_singular = code == 2
            streak = 0
            dt *= shrink
            if dt < min_dt:
                return (3 if last_singular else 1), steps
    return 0, steps


@nb.njit(cache=True, nogil=True)
def track_batch_kernel(kind, P0, S0, P1, gamma, params, S_out, status, steps):
    for k in range(P0.shape[0]):
        st, ns = track_kernel(kind, P0[k], P1[k], S0[k], gamma, params, S_out[k])
        status[k] = st
        steps[k] = ns


@nb.njit(cache=True)
def newton_kernel(kind, p, s0, max_steps, tol, s_out, history):
    n = s0.shape[0]
    J = np.empty((n, n), dtype=s0.dtype)
    r = np.empty(n, dtype=s0.dtype)
    d = np.empty(n, dtype=s0.dtype)
    lam, X, wf, wi = _workspace(kind, s0)
    for i in range(n):
        s_out[i] = s0[i]
    for it in range(max_steps + 1):
        evaluate_ws(kind, p, s_out, r, lam, X)
        res = _inf_norm(r)
        history[it] = res
        if res <= tol:
            return 0, it
        if not np.isfinite(res):
            return 4, it
        if it == max_steps:
            return 2, it
        jacobian_s_ws(kind, p, s_out, J, lam, X)
        for i in range(n):
            r[i] = -r[i]
        if not solve_ws(kind, J, r, d, wf, wi):
            return 3, it
        for i in range(n):
            s_out[i] += d[i]
    return 2, max_steps


# ---------------------------------------------------------------------------
# public API


def _kind_of(system) -> Kind:
    if isinstance(system, FormulationSystem):
        return system.kind
    return Kind.parse(system)


def _vec(x, n, dtype=np.float64, what="vector"):
    v = np.ascontiguousarray(x, dtype=dtype).reshape(-1)
    if v.size != n:
        raise ValueError(f"{what} needs {n} entries, got {v.size}")
    return v


def track_segment(system, start: PsPair, target_problem, settings: TrackSettings | None = None) -> TrackOutcome:
    """Real linear-segment tracking from ``start`` to ``target_problem``."""
    kind = _kind_of(system)
    cfg = settings or DEFAULT_SETTINGS
    if start.kind is not kind:
        raise ValueError("start pair kind does not match the system")
    p1 = _vec(target_problem, kind.problem_dim, what="target problem")
    out = np.empty(kind.n_unknowns)
    t0 = time.perf_counter()
    status, steps = track_kernel(kind.code, start.problem, p1, start.solution, 1.0, cfg.as_array(), out)
    wall = time.perf_counter() - t0
    st = TrackStatus(status)
    return TrackOutcome(st, out.copy() if st is TrackStatus.CONVERGED else None, int(steps), wall, out)


def track_arc(system, start: PsPair, target_problem, gamma: complex,
              settings: TrackSettings | None = None) -> TrackOutcome:
    """Complex circular-arc tracking; ``gamma`` must have unit modulus."""
    kind = _kind_of(system)
    cfg = settings or DEFAULT_SETTINGS
    gamma = complex(gamma)
    if abs(abs(gamma) - 1.0) > 1e-12:
        raise ValueError("gamma must have unit modulus")
    p0 = start.problem.astype(np.complex128)
    p1 = _vec(target_problem, kind.problem_dim, what="target problem").astype(np.complex128)
    s0 = start.solution.astype(np.complex128)
    out = np.empty(kind.n_unknowns, dtype=np.complex128)
    t0 = time.perf_counter()
    status, steps = track_kernel(kind.code, p0, p1, s0, gamma, cfg.as_array(), out)
    wall = time.perf_counter() - t0
    st = TrackStatus(status)
    sol = None
    if st is TrackStatus.CONVERGED:
        if np.linalg.norm(out.imag) > cfg.imag_tolerance:
            st = TrackStatus.NON_REAL_ENDPOINT
        else:
            sol = out.real.copy()
    return TrackOutcome(st, sol, int(steps), wall, out)


@dataclass(frozen=True, eq=False)
class BatchOutcome:
    status: np.ndarray  # int codes, see TrackStatus
    solutions: np.ndarray  # last iterate per track
    steps: np.ndarray
    wall_time: float

    @property
    def converged(self) -> np.ndarray:
        return self.status == TrackStatus.CONVERGED


def track_many(kind, start_problems, start_solutions, target_problems,
               settings: TrackSettings | None = None) -> BatchOutcome:
    """Track many independent segments in one compiled loop."""
    kind = Kind.parse(kind)
    cfg = settings or DEFAULT_SETTINGS
    P0 = np.ascontiguousarray(start_problems, dtype=np.float64).reshape(-1, kind.problem_dim)
    S0 = np.ascontiguousarray(start_solutions, dtype=np.float64).reshape(-1, kind.n_unknowns)
    P1 = np.ascontiguousarray(target_problems, dtype=np.float64).reshape(-1, kind.problem_dim)
    n = len(P1)
    if len(P0) == 1 and n > 1:
        P0 = np.ascontiguousarray(np.broadcast_to(P0, (n, P0.shape[1])))
        S0 = np.ascontiguousarray(np.broadcast_to(S0, (n, S0.shape[1])))
    if not (len(P0) == len(S0) == n):
        raise ValueError("start and target counts differ")
    out = np.empty((n, kind.n_unknowns))
    status = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    t0 = time.perf_counter()
    if n:
        track_batch_kernel(kind.code, P0, S0, P1, 1.0, cfg.as_array(), out, status, steps)
    return BatchOutcome(status, out, steps, time.perf_counter() - t0)


def newton_refine(system, problem, initial_solution, max_steps: int = 15,
                  settings: TrackSettings | None = None) -> TrackOutcome:
    """Plain Newton iteration on the target system, no continuation."""
    kind = _kind_of(system)
    cfg = settings or DEFAULT_SETTINGS
    if max_steps < 0:
        raise ValueError("max_steps must be nonnegative")
    p = _vec(problem, kind.problem_dim, what="problem")
    s0 = _vec(initial_solution, kind.n_unknowns, what="solution")
    out = np.empty(kind.n_unknowns)
    hist = np.full(max_steps + 1, np.nan)
    t0 = time.perf_counter()
    status, it = newton_kernel(kind.code, p, s0, max_steps, cfg.corrector_tolerance, out, hist)
    wall = time.perf_counter() - t0
    st = TrackStatus(status)
    return TrackOutcome(st, out.copy() if st is TrackStatus.CONVERGED else None, int(it), wall, out,
                        tuple(float(h) for h in hist[: it + 1]))


def rk4_predict(kind, start_problem, target_problem, solution, tau: float, h: float) -> np.ndarray:
    """A single uncorrected RK4 step along the real segment, from ``tau`` to ``tau + h``."""
    kind = Kind.parse(kind)
    p0 = _vec(start_problem, kind.problem_dim)
    p1 = _vec(target_problem, kind.problem_dim)
    s = _vec(solution, kind.n_unknowns)
    out = np.empty_like(s)
    if not rk4_step_kernel(kind.code, p0, p1, 1.0, float(tau), float(h), s, out):
        from .formulations import SingularSystemError
        raise SingularSystemError("singular Jacobian during the predictor step")
    return out


def squared_distance(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def track_succeeded(outcome: TrackOutcome, expected_solution, settings: TrackSettings | None = None) -> bool:
    cfg = settings or DEFAULT_SETTINGS
    return outcome.converged and squared_distance(outcome.solution, expected_solution) < cfg.success_distance_sq
