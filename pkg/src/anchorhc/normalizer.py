"""Canonical form of a problem modulo camera rotations and orderings.

Strategy ``A`` (the default, compiled):

1. turn image points into unit rays and rotate each camera so its mean ray is ``e3``;
2. find the ray farthest from ``e3`` over all cameras, call its point ``j*``;
3. spin every camera about ``e3`` so that ``j*`` lies on the positive x axis;
4. order cameras by decreasing angle of ``j*``;
5. sort points counter-clockwise by polar angle in the first camera, from ``j*``.

Strategies ``B``..``E`` swap step 1 (iterated image centroid, or the ray closest
to the mean) and/or step 3 (principal axis of the image points instead of ``j*``).
They are plain numpy and only meant for comparison studies.

Depths are not rotation invariant in the ``[x; 1]`` chart: a point at depth
``lam`` on ray ``v`` has depth ``lam * (R v)_3`` after rotating the camera by
``R``. :func:`denormalize_solution` undoes that rescaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .problem import Kind, depth_table, solution_from_depths
from .scene import Pose

STRATEGIES = ("A", "B", "C", "D", "E")


class NormalizationError(ArithmeticError):
    pass


class GaugeError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class NormalizationRecord:
    """How an original problem maps to its normalized form.

    ``rotations[c]`` acts on rays of *original* camera ``c``. Normalized view
    ``v`` is original camera ``camera_perm[v]`` and normalized point ``k`` is
    original point ``point_perm[k]``.
    """

    kind: Kind
    rotations: np.ndarray
    camera_perm: np.ndarray
    point_perm: np.ndarray
    strategy: str
    normalized_problem: np.ndarray

    @property
    def relaxed_observation(self) -> tuple[int, int]:
        """Original (point, camera) of the observation that carries the line offset."""
        return int(self.point_perm[0]), int(self.camera_perm[0])

    def is_identity(self, tol: float = 1e-10) -> bool:
        eye = np.abs(self.rotations - np.eye(3)).max() <= tol
        return bool(eye and np.array_equal(self.camera_perm, np.arange(len(self.camera_perm)))
                    and np.array_equal(self.point_perm, np.arange(len(self.point_perm))))


# ---------------------------------------------------------------------------
# compiled strategy A


@nb.njit(cache=True)
def _to_e3(m, R):
    # minimal rotation taking unit vector m to e3
    c = m[2]
    if c < -1.0 + 1e-12:
        # antipodal: half turn about x
        R[:, :] = 0.0
        R[0, 0] = 1.0
        R[1, 1] = -1.0
        R[2, 2] = -1.0
        return
    # axis v = m x e3 = (m1, -m0, 0); R = I + K + K^2 / (1 + c)
    v0 = m[1]
    v1 = -m[0]
    f = 1.0 / (1.0 + c)
    R[0, 0] = 1.0 - f * v1 * v1
    R[0, 1] = f * v0 * v1
    R[0, 2] = v1
    R[1, 0] = f * v0 * v1
    R[1, 1] = 1.0 - f * v0 * v0
    R[1, 2] = -v0
    R[2, 0] = -v1
    R[2, 1] = v0
    R[2, 2] = 1.0 - f * (v0 * v0 + v1 * v1)


@nb.njit(cache=True)
def _less(a1, r1, i1, a2, r2, i2):
    if a1 != a2:
        return a1 < a2
    if r1 != r2:
        return r1 < r2
    return i1 < i2


@nb.njit(cache=True)
def normalize_a_kernel(p, nv, npts, out, rots, cam_perm, pt_perm):
    """Strategy A. Returns 0 on success, 1 for zero angular spread, 2 for a ray leaving the chart."""
    w = np.empty((nv, npts, 3))
    R1 = np.empty((3, 3))
    m = np.empty(3)
    for c in range(nv):
        m[:] = 0.0
        for i in range(npts):
            b = (c * npts + i) * 2
            x = p[b]
            y = p[b + 1]
            nr = math.sqrt(x * x + y * y + 1.0)
            w[c, i, 0] = x / nr
            w[c, i, 1] = y / nr
            w[c, i, 2] = 1.0 / nr
            m[0] += w[c, i, 0]
            m[1] += w[c, i, 1]
            m[2] += w[c, i, 2]
        nm = math.sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2])
        if not nm > 1e-12:
            return 1
        m /= nm
        _to_e3(m, R1)
        rots[c] = R1
        for i in range(npts):
            a0 = R1[0, 0] * w[c, i, 0] + R1[0, 1] * w[c, i, 1] + R1[0, 2] * w[c, i, 2]
            a1 = R1[1, 0] * w[c, i, 0] + R1[1, 1] * w[c, i, 1] + R1[1, 2] * w[c, i, 2]
            a2 = R1[2, 0] * w[c, i, 0] + R1[2, 1] * w[c, i, 1] + R1[2, 2] * w[c, i, 2]
            w[c, i, 0] = a0
            w[c, i, 1] = a1
            w[c, i, 2] = a2
    # farthest ray from e3
    best = -1.0
    jstar = 0
    for c in range(nv):
        for i in range(npts):
            th = math.atan2(math.sqrt(w[c, i, 0] ** 2 + w[c, i, 1] ** 2), w[c, i, 2])
            if th > best:
                best = th
                jstar = i
    if not best > 1e-12:
        return 1
    # spin about e3 so j* sits on +x
    theta = np.empty(nv)
    for c in range(nv):
        x = w[c, jstar, 0]
        y = w[c, jstar, 1]
        r = math.sqrt(x * x + y * y)
        theta[c] = math.atan2(r, w[c, jstar, 2])
        if r > 0.0:
            cs = x / r
            sn = y / r
        else:
            cs = 1.0
            sn = 0.0
        for i in range(npts):
            a0 = cs * w[c, i, 0] + sn * w[c, i, 1]
            a1 = -sn * w[c, i, 0] + cs * w[c, i, 1]
            w[c, i, 0] = a0
            w[c, i, 1] = a1
        for q in range(3):
            a0 = cs * rots[c, 0, q] + sn * rots[c, 1, q]
            a1 = -sn * rots[c, 0, q] + cs * rots[c, 1, q]
            rots[c, 0, q] = a0
            rots[c, 1, q] = a1
        w[c, jstar, 1] = 0.0
    # cameras by decreasing angle of j*, ties by index (insertion sort, stable)
    for c in range(nv):
        cam_perm[c] = c
    for a in range(1, nv):
        k = cam_perm[a]
        b = a - 1
        while b >= 0 and theta[cam_perm[b]] < theta[k]:
            cam_perm[b + 1] = cam_perm[b]
            b -= 1
        cam_perm[b + 1] = k
    for c in range(nv):
        for i in range(npts):
            if not w[c, i, 2] > 1e-12:
                return 2
    # counter-clockwise order in the first camera starting at j*
    c0 = cam_perm[0]
    ang = np.empty(npts)
    rad = np.empty(npts)
    for i in range(npts):
        x = w[c0, i, 0] / w[c0, i, 2]
        y = w[c0, i, 1] / w[c0, i, 2]
        rad[i] = math.sqrt(x * x + y * y)
        if i == jstar:
            ang[i] = -1.0
        else:
            a = math.atan2(y, x)
            if a < 0.0:
                a += 2.0 * math.pi
            ang[i] = a
    for i in range(npts):
        pt_perm[i] = i
    for a in range(1, npts):
        k = pt_perm[a]
        b = a - 1
        while b >= 0 and _less(ang[k], rad[k], k, ang[pt_perm[b]], rad[pt_perm[b]], pt_perm[b]):
            pt_perm[b + 1] = pt_perm[b]
            b -= 1
        pt_perm[b + 1] = k
    for v in range(nv):
        c = cam_perm[v]
        for k in range(npts):
            i = pt_perm[k]
            o = (v * npts + k) * 2
            out[o] = w[c, i, 0] / w[c, i, 2]
            out[o + 1] = w[c, i, 1] / w[c, i, 2]
    return 0


@nb.njit(cache=True, nogil=True)
def normalize_a_batch(P, nv, npts, OUT, ROTS, CAM, PT, status):
    for k in range(P.shape[0]):
        status[k] = normalize_a_kernel(P[k], nv, npts, OUT[k], ROTS[k], CAM[k], PT[k])


# ---------------------------------------------------------------------------
# numpy reference implementation of all strategies


def _rays(problem, kind):
    img = np.asarray(problem, dtype=np.float64).reshape(kind.n_views, kind.n_points, 2)
    v = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=2)
    return v / np.linalg.norm(v, axis=2, keepdims=True)


def _rotation_to_e3(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    m = m / np.linalg.norm(m)
    c = m[2]
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    v = np.array([m[1], -m[0], 0.0])
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def _spin(angle) -> np.ndarray:
    cs, sn = math.cos(angle), math.sin(angle)
    return np.array([[cs, -sn, 0.0], [sn, cs, 0.0], [0.0, 0.0, 1.0]])


def _center_rotation(rays_c, strategy: str) -> np.ndarray:
    mean = rays_c.sum(axis=0)
    if np.linalg.norm(mean) <= 1e-12:
        raise NormalizationError("rays have no mean direction")
    mean /= np.linalg.norm(mean)
    if strategy in ("A", "D"):
        return _rotation_to_e3(mean)
    if strategy in ("C", "E"):
        return _rotation_to_e3(rays_c[np.argmax(rays_c @ mean)])
    # B: drive the centroid of the projected image points to the origin
    R = _rotation_to_e3(mean)
    for _ in range(10):
        u = rays_c @ R.T
        if np.any(u[:, 2] <= 1e-12):
            break
        cen = (u[:, :2] / u[:, 2:3]).mean(axis=0)
        if np.linalg.norm(cen) < 1e-14:
            break
        R = _rotation_to_e3(np.append(cen, 1.0)) @ R
    return R


def normalize_reference(problem, kind, strategy: str = "A"):
    """Readable numpy version of every strategy; returns the same as :func:`normalize`."""
    kind = Kind.parse(kind)
    strategy = strategy.upper()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    rays = _rays(problem, kind)
    nv, npts = kind.n_views, kind.n_points
    rots = np.stack([_center_rotation(rays[c], strategy) for c in range(nv)])
    u = np.einsum("cij,cpj->cpi", rots, rays)
    theta = np.arctan2(np.linalg.norm(u[:, :, :2], axis=2), u[:, :, 2])
    if theta.max() <= 1e-12:
        raise NormalizationError("zero angular spread")
    jstar = int(np.unravel_index(np.argmax(theta), theta.shape)[1])
    for c in range(nv):
        if strategy in ("A", "B", "C"):
            phi = math.atan2(u[c, jstar, 1], u[c, jstar, 0])
        else:
            if np.any(u[c, :, 2] <= 1e-12):
                raise NormalizationError("ray leaves the image chart")
            xy = u[c, :, :2] / u[c, :, 2:3]
            xy = xy - xy.mean(axis=0)
            evals, evecs = np.linalg.eigh(xy.T @ xy)
            d = evecs[:, -1]
            if d @ (u[c, jstar, :2] / u[c, jstar, 2] - (u[c, :, :2] / u[c, :, 2:3]).mean(axis=0)) < 0:
                d = -d
            phi = math.atan2(d[1], d[0])
        rots[c] = _spin(-phi) @ rots[c]
    u = np.einsum("cij,cpj->cpi", rots, rays)
    th_j = np.arctan2(np.linalg.norm(u[:, jstar, :2], axis=1), u[:, jstar, 2])
    cam_perm = np.array(sorted(range(nv), key=lambda c: (-th_j[c], c)), dtype=np.int64)
    if np.any(u[:, :, 2] <= 1e-12):
        raise NormalizationError("ray leaves the image chart")
    img = u[:, :, :2] / u[:, :, 2:3]
    if strategy in ("A", "B", "C"):
        img[:, jstar, 1] = 0.0
    first = img[cam_perm[0]]
    a0 = math.atan2(first[jstar, 1], first[jstar, 0])

    def key(i):
        if i == jstar:
            return (-1.0, 0.0, i)
        a = (math.atan2(first[i, 1], first[i, 0]) - a0) % (2.0 * math.pi)
        return (a, float(np.hypot(*first[i])), i)

    pt_perm = np.array(sorted(range(npts), key=key), dtype=np.int64)
    out = img[cam_perm][:, pt_perm].reshape(-1)
    return out, NormalizationRecord(kind, rots, cam_perm, pt_perm, strategy, out)


# ---------------------------------------------------------------------------
# public API


def normalize(problem, kind, strategy: str = "A"):
    """Return ``(normalized_problem, record)``."""
    kind = Kind.parse(kind)
    strategy = strategy.upper()
    if strategy != "A":
        return normalize_reference(problem, kind, strategy)
    p = np.ascontiguousarray(problem, dtype=np.float64).reshape(-1)
    if p.size != kind.problem_dim:
        raise ValueError(f"{kind.value} problem needs {kind.problem_dim} entries")
    out = np.empty_like(p)
    rots = np.empty((kind.n_views, 3, 3))
    cam = np.empty(kind.n_views, dtype=np.int64)
    pt = np.empty(kind.n_points, dtype=np.int64)
    code = normalize_a_kernel(p, kind.n_views, kind.n_points, out, rots, cam, pt)
    if code == 1:
        raise NormalizationError("zero angular spread")
    if code == 2:
        raise NormalizationError("ray leaves the image chart")
    return out, NormalizationRecord(kind, rots, cam, pt, "A", out)


@dataclass(frozen=True, eq=False)
class NormalizedBatch:
    problems: np.ndarray
    rotations: np.ndarray
    camera_perm: np.ndarray
    point_perm: np.ndarray
    ok: np.ndarray

    def record(self, kind, k: int) -> NormalizationRecord:
        if not self.ok[k]:
            raise NormalizationError(f"problem {k} could not be normalized")
        return NormalizationRecord(Kind.parse(kind), self.rotations[k], self.camera_perm[k],
                                   self.point_perm[k], "A", self.problems[k])


def normalize_many(problems, kind) -> NormalizedBatch:
    """Strategy A over a stack of problems; failures are flagged in ``ok``."""
    kind = Kind.parse(kind)
    P = np.ascontiguousarray(problems, dtype=np.float64).reshape(-1, kind.problem_dim)
    n = len(P)
    out = np.empty_like(P)
    rots = np.empty((n, kind.n_views, 3, 3))
    cam = np.empty((n, kind.n_views), dtype=np.int64)
    pt = np.empty((n, kind.n_points), dtype=np.int64)
    status = np.empty(n, dtype=np.int64)
    if n:
        normalize_a_batch(P, kind.n_views, kind.n_points, out, rots, cam, pt, status)
    return NormalizedBatch(out, rots, cam, pt, status == 0)


def denormalize_solution(solution, record: NormalizationRecord, kind=None) -> np.ndarray:
    """Map a solution of the normalized problem back to the original problem.

    Depths are rescaled for the camera rotations, permuted back and re-gauged.
    For Scranton the offset slot keeps the normalized value: it still refers to
    the normalized relaxed observation, see ``record.relaxed_observation``.
    """
    kind = Kind.parse(kind or record.kind)
    s = np.asarray(solution, dtype=np.float64).reshape(-1)
    lam_n = depth_table(kind, s)
    offset = float(s[-1]) if kind is Kind.SCRANTON else 0.0
    img = record.normalized_problem.reshape(kind.n_views, kind.n_points, 2)
    lam = np.empty_like(lam_n)
    for v in range(kind.n_views):
        c = int(record.camera_perm[v])
        Rt3 = record.rotations[c][:, 2]  # third row of R^T
        for k in range(kind.n_points):
            x, y = img[v, k]
            if kind is Kind.SCRANTON and k == 0 and v == 0:
                y = y + offset
            lam[int(record.point_perm[k]), c] = lam_n[k, v] * (Rt3[0] * x + Rt3[1] * y + Rt3[2])
    g = lam[0, 0]
    if not (np.isfinite(g) and g > 0):
        raise GaugeError("reference depth is not positive after denormalization")
    return solution_from_depths(kind, lam, offset)


def _camera_poses(normalized_poses, record: NormalizationRecord):
    """Pose of every original camera relative to original camera ``camera_perm[0]``."""
    nv = len(record.camera_perm)
    c0 = int(record.camera_perm[0])
    Q = np.empty((nv, 3, 3))
    u = np.empty((nv, 3))
    Q[c0] = np.eye(3)
    u[c0] = 0.0
    for v in range(1, nv):
        R_n, t_n = normalized_poses[v - 1]
        c = int(record.camera_perm[v])
        Rc = record.rotations[c]
        Q[c] = Rc.T @ np.asarray(R_n) @ record.rotations[c0]
        u[c] = Rc.T @ np.asarray(t_n)
    return Q, u


def denormalize_pose(normalized_poses, record: NormalizationRecord) -> list[Pose]:
    """Relative poses for the original camera pairs from poses of the normalized problem.

    ``normalized_poses`` lists poses from normalized view 1 to each later view,
    in the order returned by :func:`anchorhc.scene.recover_pose` (extra entries are ignored).
    """
    Q, u = _camera_poses(normalized_poses, record)
    nv = len(record.camera_perm)
    pairs = [(0, 1)] if nv == 2 else [(0, 1), (0, 2), (1, 2)]
    out = []
    for a, b in pairs:
        R = Q[b] @ Q[a].T
        out.append(Pose(R, u[b] - R @ u[a]))
    return out


def apply_camera_rotation(problem, kind, camera: int, R) -> np.ndarray:
    """Rotate every ray of one camera by ``R`` and re-project; handy for invariance checks."""
    kind = Kind.parse(kind)
    img = np.asarray(problem, dtype=np.float64).reshape(kind.n_views, kind.n_points, 2).copy()
    v = np.concatenate([img[camera], np.ones((kind.n_points, 1))], axis=1) @ np.asarray(R).T
    if np.any(v[:, 2] <= 0):
        raise NormalizationError("rotation moves a point behind the camera")
    img[camera] = v[:, :2] / v[:, 2:3]
    return img.reshape(-1)


def permute_problem(problem, kind, camera_perm=None, point_perm=None) -> np.ndarray:
    kind = Kind.parse(kind)
    img = np.asarray(problem, dtype=np.float64).reshape(kind.n_views, kind.n_points, 2)
    if camera_perm is not None:
        img = img[list(camera_perm)]
    if point_perm is not None:
        img = img[:, list(point_perm)]
    return np.ascontiguousarray(img).reshape(-1)


def normalize_solution(solution, record: NormalizationRecord, kind=None) -> np.ndarray:
    """Forward map of a solution of the original problem; inverse of :func:`denormalize_solution`."""
    kind = Kind.parse(kind or record.kind)
    s = np.asarray(solution, dtype=np.float64).reshape(-1)
    if kind is Kind.SCRANTON and s[-1] != 0.0:
        raise ValueError("only unrelaxed Scranton solutions (offset 0) can be normalized")
    lam = depth_table(kind, s)
    img = record.normalized_problem.reshape(kind.n_views, kind.n_points, 2)
    lam_n = np.empty_like(lam)
    for v in range(kind.n_views):
        c = int(record.camera_perm[v])
        Rt3 = record.rotations[c][:, 2]
        for k in range(kind.n_points):
            x, y = img[v, k]
            lam_n[k, v] = lam[int(record.point_perm[k]), c] / (Rt3[0] * x + Rt3[1] * y + Rt3[2])
    if not lam_n[0, 0] > 0:
        raise GaugeError("reference depth is not positive after normalization")
    return solution_from_depths(kind, lam_n, 0.0)


def normalize_pair(pair):
    """Normalize a p-s pair; returns ``(normalized_pair, record)``."""
    problem, record = normalize(pair.problem, pair.kind)
    return pair.with_problem(problem).with_solution(normalize_solution(pair.solution, record)), record
