"""RANSAC relative-pose estimation around the pick-and-solve solver."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anchors import AnchorSet
from .formulations import FormulationSystem
from .normalizer import GaugeError, denormalize_pose, normalize_many
from .problem import Kind, PsPair, solution_from_depths
from .scene import (
    CameraPose, Pose, SceneConfig, project, recover_pose, relative_pose, synth_scene, view_pairs,
    pose_error, DegeneracyError,
)
from .selector import MlpModel, select_many
from .tracker import DEFAULT_SETTINGS, TrackSettings, newton_kernel, track_many


class NoModelError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Calibrated correspondences, ``points[i, view] = (x, y)``."""

    kind: Kind
    points: np.ndarray
    gt_cameras: tuple | None = None
    inlier_truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        kind = Kind.parse(self.kind)
        x = np.asarray(self.points, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (kind.n_views, 2):
            raise ValueError(f"points must have shape (n, {kind.n_views}, 2)")
        if len(x) < kind.n_points:
            raise ValueError(f"need at least {kind.n_points} correspondences")
        if not np.isfinite(x).all():
            raise ValueError("non-finite coordinates")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "points", x)

    def __len__(self):
        return len(self.points)

    def gt_poses(self) -> list[Pose] | None:
        if self.gt_cameras is None:
            return None
        out = []
        for a, b in view_pairs(self.kind):
            Ca, Cb = self.gt_cameras[a], self.gt_cameras[b]
            R = Cb.rotation @ Ca.rotation.T
            out.append(Pose(R, Cb.translation - R @ Ca.translation))
        return out

    def sample_problem(self, idx) -> np.ndarray:
        """Problem vector (view-major) for the correspondences ``idx``."""
        return np.ascontiguousarray(self.points[list(idx)].transpose(1, 0, 2)).reshape(-1)


def synth_matches(kind, n_matches: int = 200, outlier_ratio: float = 0.5, noise_px: float = 1.0,
                  focal: float = 1000.0, seed: int = 0, scene_config: SceneConfig | None = None) -> MatchSet:
    """Noisy correspondences from a synthetic scene with a share of random outliers."""
    kind = Kind.parse(kind)
    rng = np.random.default_rng(seed)
    n_out = int(round(outlier_ratio * n_matches))
    n_in = n_matches - n_out
    base = scene_config or SceneConfig()
    cfg = SceneConfig(**{**base.__dict__, "n_points": max(n_in, 4), "n_cameras": kind.n_views})
    scene = synth_scene(cfg, seed=int(rng.integers(2**63 - 1)))
    x = np.empty((n_matches, kind.n_views, 2))
    for v, cam in enumerate(scene.cameras):
        xi, _ = project(cam, scene.points[:n_in])
        x[:n_in, v] = xi + rng.normal(scale=noise_px / focal, size=xi.shape)
    # outliers: independent random image points inside the field of view
    half = np.tan(np.radians(cfg.fov) / 2.0)
    x[n_in:] = rng.uniform(-half, half, size=(n_out, kind.n_views, 2))
    perm = rng.permutation(n_matches)
    truth = np.zeros(n_matches, dtype=bool)
    truth[:n_in] = True
    # ground truth relative to the first camera
    C0 = scene.cameras[0]
    cams = tuple(CameraPose(c.rotation @ C0.rotation.T, c.translation - c.rotation @ C0.rotation.T @ C0.translation)
                 for c in scene.cameras)
    return MatchSet(kind, x[perm], cams, truth[perm])


@dataclass(frozen=True)
class RansacConfig:
    n_samples: int = 800
    threshold_px: float = 3.0
    focal: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not (self.threshold_px > 0 and self.focal > 0):
            raise ValueError("threshold and focal must be positive")

    @property
    def threshold(self) -> float:
        """Inlier threshold in normalized image units."""
        return self.threshold_px / self.focal


# ---------------------------------------------------------------------------
# scoring


def essential(pose: Pose) -> np.ndarray:
    t = np.asarray(pose[1], dtype=np.float64)
    tx = np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])
    return tx @ np.asarray(pose[0], dtype=np.float64)


def sampson_distance(E, x1, x2) -> np.ndarray:
    """First-order geometric epipolar error, in image units (not squared)."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    h1 = np.hstack([x1, np.ones((len(x1), 1))])
    h2 = np.hstack([x2, np.ones((len(x2), 1))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.einsum("ij,ij->i", h2, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(den > 0, d, np.inf)


def score_epipolar(poses, matches: MatchSet, threshold: float):
    """Inlier score and mask. For three views the score is the mean count over the
    three camera pairs and a correspondence is an inlier when all pairs accept it."""
    if isinstance(poses, Pose) or (isinstance(poses, tuple) and len(poses) == 2 and np.ndim(poses[0]) == 2):
        poses = [poses]
    pairs = view_pairs(matches.kind)
    mask = np.ones(len(matches), dtype=bool)
    counts = []
    for (a, b), pose in zip(pairs, poses):
        d = sampson_distance(essential(pose), matches.points[:, a], matches.points[:, b])
        m = d < threshold
        counts.append(int(m.sum()))
        mask &= m
    return float(np.mean(counts)), mask


# ---------------------------------------------------------------------------
# solvers


@dataclass(eq=False)
class PickSolve:
    """Select anchors for a normalized problem, then track (or Newton-refine) from them.

    ``selection`` is ``"mlp"`` (needs ``model``), ``"fixed"`` (always anchor 0) or
    ``"nearest"`` (Euclidean nearest anchor).
    """

    anchors: AnchorSet
    model: MlpModel | None = None
    selection: str = "mlp"
    method: str = "hc"
    tracks_per_problem: int = 1
    settings: TrackSettings = DEFAULT_SETTINGS
    newton_steps: int = 15

    def __post_init__(self):
        if self.selection == "mlp" and self.model is None:
            raise ValueError("MLP selection needs a model")
        if self.method not in ("hc", "newton"):
            raise ValueError("method is 'hc' or 'newton'")
        if self.selection not in ("mlp", "fixed", "nearest"):
            raise ValueError("selection is 'mlp', 'fixed' or 'nearest'")

    @property
    def kind(self) -> Kind:
        return self.anchors.kind

    def choose(self, normalized_problems) -> np.ndarray:
        """``(n, m)`` anchor indices; rows of -1 mean the sample is skipped."""
        n = len(normalized_problems)
        m = self.tracks_per_problem
        if self.selection == "mlp":
            return select_many(self.model, normalized_problems, m)
        if self.selection == "fixed":
            return np.tile(np.arange(m), (n, 1))
        from .selector import nearest_anchors
        return nearest_anchors(normalized_problems, self.anchors.problems).reshape(n, 1)

    def solve_normalized(self, normalized_problems):
        """Returns ``(choice, solutions, ok)`` with solutions of shape ``(n, m, n_unknowns)``."""
        kind = self.kind
        Pn = np.asarray(normalized_problems, dtype=np.float64).reshape(-1, kind.problem_dim)
        choice = self.choose(Pn)
        n, m = choice.shape
        sols = np.full((n, m, kind.n_unknowns), np.nan)
        ok = np.zeros((n, m), dtype=bool)
        rows = np.argwhere(choice >= 0)
        if len(rows) == 0:
            return choice, sols, ok
        a = choice[rows[:, 0], rows[:, 1]]
        if self.method == "hc":
            b = track_many(kind, self.anchors.problems[a], self.anchors.solutions[a], Pn[rows[:, 0]], self.settings)
            sols[rows[:, 0], rows[:, 1]] = b.solutions
            ok[rows[:, 0], rows[:, 1]] = b.converged
        else:
            out = np.empty(kind.n_unknowns)
            hist = np.empty(self.newton_steps + 1)
            for r, (i, j) in enumerate(rows):
                st, _ = newton_kernel(kind.code, Pn[i], self.anchors.solutions[a[r]], self.newton_steps,
                                      self.settings.corrector_tolerance, out, hist)
                sols[i, j] = out
                ok[i, j] = st == 0
        return choice, sols, ok


def candidate_poses(kind: Kind, normalized_problem, solution, record):
    """Poses in the original frames, or None when the solution is not physically meaningful."""
    s = np.asarray(solution)
    if not np.isfinite(s).all():
        return None
    pair = PsPair(kind, normalized_problem, s)
    if np.any(pair.depths() <= 0):
        return None
    try:
        poses = recover_pose(pair)
    except DegeneracyError:
        return None
    for P in poses:
        if abs(np.linalg.det(P.rotation) - 1.0) > 1e-6:
            return None
    return denormalize_pose(poses, record)


@dataclass
class RansacResult:
    poses: list | None
    inliers: np.ndarray
    score: float
    valid_rate: float
    mean_sample_time: float
    skipped: int
    # (sample index, score, poses) whenever the best model improved
    improvements: list = field(default_factory=list, repr=False)

    def best_at(self, n_samples: int):
        """Best poses among the first ``n_samples`` samples, or None."""
        best = None
        for k, _, poses in self.improvements:
            if k < n_samples:
                best = poses
        return best


def draw_samples(n_matches: int, sample_size: int, n_samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([rng.choice(n_matches, size=sample_size, replace=False) for _ in range(n_samples)],
                    dtype=np.int64).reshape(n_samples, sample_size)


def run(matches: MatchSet, solver: PickSolve, config: RansacConfig | None = None,
        raise_on_empty: bool = True) -> RansacResult:
    """Sample, solve, validate, score; keeps the best-scoring pose.

    Samples are drawn up front from one seeded stream and processed in order,
    so the result equals a sample-by-sample loop.
    """
    cfg = config or RansacConfig()
    kind = matches.kind
    if solver.kind is not kind:
        raise ValueError("solver and matches have different kinds")
    t0 = time.perf_counter()
    idx = draw_samples(len(matches), kind.n_points, cfg.n_samples, cfg.seed)
    problems = np.stack([matches.sample_problem(i) for i in idx])
    nb = normalize_many(problems, kind)
    choice, sols, ok = solver.solve_normalized(nb.problems)
    ok &= nb.ok[:, None]
    best_score, best_poses, best_mask = -1.0, None, np.zeros(len(matches), dtype=bool)
    valid = 0
    improvements = []
    for k in range(cfg.n_samples):
        for j in range(choice.shape[1]):
            if not ok[k, j]:
                continue
            try:
                poses = candidate_poses(kind, nb.problems[k], sols[k, j], nb.record(kind, k))
            except GaugeError:
                poses = None
            if poses is None:
                continue
            valid += 1
            score, mask = score_epipolar(poses, matches, cfg.threshold)
            if score > best_score:
                best_score, best_poses, best_mask = score, poses, mask
                improvements.append((k, score, poses))
    elapsed = time.perf_counter() - t0
    skipped = int((choice[:, 0] < 0).sum())
    if best_poses is None and raise_on_empty:
        raise NoModelError("no valid candidate in any sample")
    return RansacResult(best_poses, best_mask, max(best_score, 0.0), valid / cfg.n_samples,
                        elapsed / cfg.n_samples, skipped, improvements)


def pose_success(poses, gt_poses, max_deg: float = 10.0) -> bool:
    if poses is None:
        return False
    for est, gt in zip(poses, gt_poses):
        err = pose_error(est, gt)
        if not (err.rot_deg < max_deg and err.trans_deg < max_deg):
            return False
    return True


def benchmark(datasets: Sequence[MatchSet], solvers: dict, checkpoints: Sequence[int] = (25, 50, 100, 200, 400, 800, 1600, 3200),
              config: RansacConfig | None = None, max_deg: float = 10.0):
    """Percentage of trials whose best pose is within ``max_deg`` in rotation and translation.

    Each trial runs once with the largest sample count; smaller counts read the
    best-scoring model among the first samples of that same stream.
    Returns a list of ``(solver, n_samples, percent)`` rows.
    """
    cfg = config or RansacConfig()
    top = max(checkpoints)
    hits = {(name, c): 0 for name in solvers for c in checkpoints}
    for t, ms in enumerate(datasets):
        gt = ms.gt_poses()
        if gt is None:
            raise ValueError(f"dataset {t} has no ground truth")
        for name, solver in solvers.items():
            rc = RansacConfig(top, cfg.threshold_px, cfg.focal, cfg.seed + t)
            res = run(ms, solver, rc, raise_on_empty=False)
            for c in checkpoints:
                hits[(name, c)] += pose_success(res.best_at(c), gt, max_deg)
    n = max(len(datasets), 1)
    return [(name, c, 100.0 * hits[(name, c)] / n) for name in solvers for c in checkpoints]


def format_table(rows) -> str:
    lines = ["solver\tn_samples\tsuccess_pct"]
    lines += [f"{name}\t{c}\t{pct:.2f}" for name, c, pct in rows]
    return "\n".join(lines)
