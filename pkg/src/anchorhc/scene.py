"""Synthetic scenes, p-s pair fabrication and pose recovery from depths."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .problem import Kind, PsPair, depth_table, solution_from_depths


class SceneGenerationError(RuntimeError):
    pass


class FabricationError(ValueError):
    pass


class DegeneracyError(ArithmeticError):
    pass


class SymmetryUndefinedError(ArithmeticError):
    pass


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation by ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    axis = rng.normal(size=3)
    if max_angle is None:
        # uniform on SO(3) via a random unit quaternion
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    return rotation_about(axis, rng.uniform(0.0, max_angle))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera transform ``X_cam = R X + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or np.linalg.det(R) <= 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, X) -> np.ndarray:
        return np.asarray(X) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class SceneModel:
    points: np.ndarray
    cameras: tuple
    visibility: frozenset

    def __post_init__(self):
        X = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        X.flags.writeable = False
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "visibility", frozenset(self.visibility))
        for pi, ci in self.visibility:
            if not (0 <= pi < len(X) and 0 <= ci < len(self.cameras)):
                raise ValueError(f"visibility pair {(pi, ci)} out of range")
            if self.cameras[ci].to_camera(X[pi])[2] <= 0:
                raise ValueError(f"point {pi} visible in camera {ci} but behind it")

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def visible_in_all(self, camera_indices) -> list[int]:
        return [i for i in range(self.n_points)
                if all((i, c) in self.visibility for c in camera_indices)]


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 40
    n_cameras: int = 4
    # distance from camera centres to the centre of the point cloud
    depth_range: tuple = (2.0, 4.0)
    # allowed distance between any two camera centres
    baseline_range: tuple = (0.5, 3.0)
    fov: float = 70.0  # full field of view, degrees
    point_extent: float = 1.0  # half-size of the point box
    jitter: float = 8.0  # max look-at perturbation, degrees
    roll: float = 15.0  # max roll about the optical axis, degrees
    max_tries: int = 10000

    def __post_init__(self):
        if self.n_points < 4 or self.n_cameras < 2:
            raise ValueError("need at least 4 points and 2 cameras")
        lo, hi = self.depth_range
        blo, bhi = self.baseline_range
        if not (0 < lo <= hi and 0 < blo <= bhi and 0 < self.fov < 180 and self.point_extent > 0):
            raise ValueError("ranges must be positive and ordered")


def _look_at(center: np.ndarray, target: np.ndarray, rng, jitter: float, roll: float) -> CameraPose:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    if roll > 0:
        R = rotation_about([0, 0, 1], rng.uniform(-roll, roll)) @ R
    if jitter > 0:
        R = random_rotation(rng, jitter) @ R
    # re-orthonormalise against drift
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return CameraPose(R, -R @ center)


def synth_scene(config: SceneConfig | None = None, seed: int = 0) -> SceneModel:
    """Random points in a box seen by cameras on a sphere looking inward.

    Every point is visible (in front, inside the field of view) in every camera.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    jitter = math.radians(cfg.jitter)
    roll = math.radians(cfg.roll)
    half_fov = math.tan(math.radians(cfg.fov) / 2.0)
    blo, bhi = cfg.baseline_range

    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < cfg.n_cameras:
        tries += 1
        if tries > cfg.max_tries:
            raise SceneGenerationError("could not place cameras within the baseline range")
        d = rng.uniform(*cfg.depth_range)
        if centers:
            # sample near an existing camera so the baseline constraint is satisfiable
            ref = centers[rng.integers(len(centers))]
            u = ref / np.linalg.norm(ref) + rng.normal(size=3) * (bhi / d)
        else:
            u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        c = d * u
        if all(blo <= np.linalg.norm(c - o) <= bhi for o in centers):
            centers.append(c)
    cameras = [_look_at(c, np.zeros(3), rng, jitter, roll) for c in centers]

    pts = []
    tries = 0
    e = cfg.point_extent
    while len(pts) < cfg.n_points:
        tries += 1
        if tries > cfg.max_tries * max(1, cfg.n_points):
            raise SceneGenerationError("could not sample points visible in all cameras")
        X = rng.uniform(-e, e, size=3)
        ok = True
        for cam in cameras:
            Xc = cam.to_camera(X)
            if Xc[2] <= 1e-3 or abs(Xc[0]) > half_fov * Xc[2] or abs(Xc[1]) > half_fov * Xc[2]:
                ok = False
                break
        if ok:
            pts.append(X)
    vis = {(i, c) for i in range(len(pts)) for c in range(len(cameras))}
    return SceneModel(np.array(pts), tuple(cameras), frozenset(vis))


def project(camera: CameraPose, X) -> tuple[np.ndarray, np.ndarray]:
    """Image points and depths of world points ``X`` in ``camera``."""
    Xc = camera.to_camera(np.atleast_2d(X))
    return Xc[:, :2] / Xc[:, 2:3], Xc[:, 2]


def fabricate_pair(scene: SceneModel, camera_indices: Sequence[int], point_indices: Sequence[int],
                   kind=Kind.FIVE_POINT) -> PsPair:
    """Project the chosen points into the chosen cameras and record their depths."""
    kind = Kind.parse(kind)
    cams = list(camera_indices)
    pts = list(point_indices)
    if len(cams) != kind.n_views or len(pts) != kind.n_points:
        raise FabricationError(
            f"{kind.value} needs {kind.n_points} points in {kind.n_views} cameras")
    if len(set(cams)) != len(cams) or len(set(pts)) != len(pts):
        raise FabricationError("camera and point indices must be distinct")
    for c in cams:
        for i in pts:
            if (i, c) not in scene.visibility:
                raise FabricationError(f"point {i} is not visible in camera {c}")
    X = scene.points[pts]
    img = np.empty((kind.n_views, kind.n_points, 2))
    lam = np.empty((kind.n_points, kind.n_views))
    for v, c in enumerate(cams):
        x, d = project(scene.cameras[c], X)
        if np.any(d <= 0):
            raise FabricationError("point behind camera")
        img[v] = x
        lam[:, v] = d
        rays = np.hstack([x, np.ones((len(pts), 1))])
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        cosines = rays @ rays.T
        np.fill_diagonal(cosines, -1.0)
        if cosines.max() > 1.0 - 1e-12:
            raise FabricationError("coincident image rays")
    return PsPair(kind, img.reshape(-1), solution_from_depths(kind, lam))


class Pose(NamedTuple):
    """Relative pose ``X_b = R X_a + t``."""

    rotation: np.ndarray
    translation: np.ndarray


def relative_pose(scene: SceneModel, a: int, b: int) -> Pose:
    Ca, Cb = scene.cameras[a], scene.cameras[b]
    R = Cb.rotation @ Ca.rotation.T
    return Pose(R, Cb.translation - R @ Ca.translation)


def _lifted_points(pair: PsPair) -> np.ndarray:
    """``(n_views, n_points, 3)`` array of ``lam * [x; 1]`` in each camera frame."""
    kind = pair.kind
    img = pair.image_points().copy()
    if kind is Kind.SCRANTON:
        img[0, 0, 1] += pair.solution[-1]
    lam = pair.depths()
    rays = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=2)
    return rays * lam.T[:, :, None]


_TETRA = {"A234": (1, 2, 3), "A235": (1, 2, 4)}


def _rotation_from_lifted(Xs, va: int, vb: int, which: str) -> np.ndarray:
    try:
        idx = _TETRA[which]
    except KeyError:
        raise ValueError(f"unknown tetrahedron {which!r}") from None
    A = [np.stack([Xs[v, k] - Xs[v, 0] for k in idx], axis=1) for v in (va, vb)]
    if abs(np.linalg.det(A[0])) <= 1e-12:
        raise DegeneracyError("tetrahedron in the first view is flat")
    return A[1] @ np.linalg.inv(A[0])


def recover_rotation(pair: PsPair, which: str = "A234", views: tuple = (0, 1)) -> np.ndarray:
    """Rotation mapping view ``views[0]`` to ``views[1]`` from lifted tetrahedra.

    No validity filtering: a sign-flipped solution gives a matrix with det -1.
    """
    if which == "A235" and pair.kind is not Kind.FIVE_POINT:
        raise ValueError("A235 needs a fifth point")
    return _rotation_from_lifted(_lifted_points(pair), views[0], views[1], which)


def view_pairs(kind) -> list[tuple[int, int]]:
    kind = Kind.parse(kind)
    return [(0, 1)] if kind is Kind.FIVE_POINT else [(0, 1), (0, 2), (1, 2)]


def recover_pose(pair: PsPair) -> list[Pose]:
    """One pose per view pair: ``[(1,2)]`` for 5pt, ``[(1,2), (1,3), (2,3)]`` for Scranton."""
    Xs = _lifted_points(pair)
    poses = []
    for a, b in view_pairs(pair.kind):
        R = _rotation_from_lifted(Xs, a, b, "A234")
        poses.append(Pose(R, Xs[b, 0] - R @ Xs[a, 0]))
    return poses


def twisted_pair(pair: PsPair) -> PsPair:
    """The twisted-pair partner of a 5pt solution, re-gauged to ``lam_11 = 1``."""
    if pair.kind is not Kind.FIVE_POINT:
        raise ValueError("twisted pair is defined for the 5pt problem")
    Xs = _lifted_points(pair)
    R = _rotation_from_lifted(Xs, 0, 1, "A234")
    t = Xs[1, 0] - R @ Xs[0, 0]
    denom = np.sum(Xs[1] ** 2, axis=1) - np.sum(Xs[0] ** 2, axis=1)
    if np.any(np.abs(denom) <= 1e-14):
        raise SymmetryUndefinedError("equal distances from both camera centres")
    lam = pair.depths()
    tt = float(t @ t)
    tw = np.empty_like(lam)
    tw[:, 0] = tt * lam[:, 0] / denom
    tw[:, 1] = -tt * lam[:, 1] / denom
    return pair.with_solution(solution_from_depths(Kind.FIVE_POINT, tw))


class PoseError(NamedTuple):
    rot_deg: float
    trans_deg: float


def rotation_angle_deg(R) -> float:
    R = np.asarray(R)
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return math.degrees(math.atan2(s, c))


def angle_between_deg(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def pose_error(estimate: Pose, ground_truth: Pose) -> PoseError:
    """Rotation angle between the two rotations and angle between translation directions."""
    te = np.asarray(estimate[1], dtype=np.float64)
    tg = np.asarray(ground_truth[1], dtype=np.float64)
    if np.linalg.norm(te) == 0 or np.linalg.norm(tg) == 0:
        raise ValueError("translation direction undefined for a zero translation")
    rot = rotation_angle_deg(np.asarray(estimate[0]).T @ np.asarray(ground_truth[0]))
    return PoseError(rot, angle_between_deg(te, tg))


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class SamplingConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    pairs_per_scene: int = 8


def sample_pairs(kind, n: int, seed: int = 0, config: SamplingConfig | None = None) -> list[PsPair]:
    """Draw ``n`` fabricated pairs, refreshing the synthetic scene every few samples."""
    kind = Kind.parse(kind)
    cfg = config or SamplingConfig()
    rng = np.random.default_rng(seed)
    out: list[PsPair] = []
    scene = None
    used = cfg.pairs_per_scene
    while len(out) < n:
        if used >= cfg.pairs_per_scene:
            scene = synth_scene(cfg.scene, seed=int(rng.integers(2**63 - 1)))
            used = 0
        cams = rng.choice(scene.n_cameras, size=kind.n_views, replace=False)
        pts = rng.choice(scene.n_points, size=kind.n_points, replace=False)
        used += 1
        try:
            out.append(fabricate_pair(scene, cams, pts, kind))
        except FabricationError:
            continue
    return out


def pose_from_depths(kind, problem, depths, relax_offset: float = 0.0) -> list[Pose]:
    kind = Kind.parse(kind)
    return recover_pose(PsPair(kind, problem, solution_from_depths(kind, depths, relax_offset)))


__all__ = [
    "CameraPose", "SceneModel", "SceneConfig", "SamplingConfig", "Pose", "PoseError",
    "SceneGenerationError", "FabricationError", "DegeneracyError", "SymmetryUndefinedError",
    "synth_scene", "fabricate_pair", "recover_rotation", "recover_pose", "twisted_pair",
    "pose_error", "relative_pose", "sample_pairs", "project", "rotation_about",
    "random_rotation", "view_pairs", "depth_table",
]
