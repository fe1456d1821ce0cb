import itertools

import numpy as np
import pytest

from anchorhc import scene as S
from anchorhc.formulations import evaluate
from anchorhc.problem import Kind
from conftest import fabricated


def identical_camera_scene(n_points=5):
    rng = np.random.default_rng(3)
    X = rng.uniform(-0.5, 0.5, size=(n_points, 3)) + [0, 0, 3]
    cam = S.CameraPose(np.eye(3), np.zeros(3))
    vis = {(i, c) for i in range(n_points) for c in range(3)}
    return S.SceneModel(X, (cam, cam, cam), vis)


def test_small_scene_fully_visible():
    sc = S.synth_scene(S.SceneConfig(n_points=5, n_cameras=2), seed=7)
    assert len(sc.visibility) == 10
    for cam in sc.cameras:
        Xc = cam.to_camera(sc.points)
        assert np.all(Xc[:, 2] > 0)
        half = np.tan(np.radians(70.0) / 2)
        assert np.all(np.abs(Xc[:, :2] / Xc[:, 2:]) <= half + 1e-12)


def test_scene_deterministic():
    cfg = S.SceneConfig(n_points=20, n_cameras=3)
    a, b = S.synth_scene(cfg, seed=11), S.synth_scene(cfg, seed=11)
    assert np.array_equal(a.points, b.points)
    for ca, cb in zip(a.cameras, b.cameras):
        assert np.array_equal(ca.rotation, cb.rotation) and np.array_equal(ca.translation, cb.translation)
    assert not np.array_equal(a.points, S.synth_scene(cfg, seed=12).points)


def test_every_scranton_tuple_fabricates_exactly():
    sc = S.synth_scene(S.SceneConfig(n_points=100, n_cameras=3), seed=1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        pts = rng.choice(100, size=4, replace=False)
        pair = S.fabricate_pair(sc, [0, 1, 2], pts, Kind.SCRANTON)
        assert pair.solution[-1] == 0.0
        assert np.abs(evaluate(Kind.SCRANTON, pair.problem, pair.solution)).max() < 1e-10


def test_generation_error_when_impossible():
    cfg = S.SceneConfig(n_points=5, n_cameras=2, fov=0.01, max_tries=50)
    with pytest.raises(S.SceneGenerationError):
        S.synth_scene(cfg, seed=0)


def test_fabricated_pairs_exact_and_positive(kind):
    for pair in fabricated(kind, 100):
        assert np.abs(evaluate(kind, pair.problem, pair.solution)).max() < 1e-10
        assert np.all(pair.depths() > 0)
        assert pair.depths()[0, 0] == 1.0


def test_identical_cameras_give_equal_depths():
    sc = identical_camera_scene()
    pair = S.fabricate_pair(sc, [0, 1], range(5), Kind.FIVE_POINT)
    lam = pair.depths()
    np.testing.assert_allclose(lam[:, 0], lam[:, 1], rtol=1e-14)
    assert np.abs(evaluate(Kind.FIVE_POINT, pair.problem, pair.solution)).max() < 1e-12
    np.testing.assert_allclose(S.recover_rotation(pair), np.eye(3), atol=1e-10)
    pose = S.recover_pose(pair)[0]
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-10)
    assert np.linalg.norm(pose.translation) < 1e-10


def test_fabrication_errors():
    sc = identical_camera_scene()
    with pytest.raises(S.FabricationError):
        S.fabricate_pair(sc, [0, 1], range(4), Kind.FIVE_POINT)
    vis = set(sc.visibility) - {(2, 1)}
    sc2 = S.SceneModel(sc.points, sc.cameras, vis)
    with pytest.raises(S.FabricationError, match="not visible"):
        S.fabricate_pair(sc2, [0, 1], range(5), Kind.FIVE_POINT)
    # two points on one ray
    X = sc.points.copy()
    X[1] = 2.0 * X[0]
    sc3 = S.SceneModel(X, sc.cameras, sc.visibility)
    with pytest.raises(S.FabricationError, match="coincident"):
        S.fabricate_pair(sc3, [0, 1], range(5), Kind.FIVE_POINT)


def test_rotation_recovery_matches_scene():
    sc = S.synth_scene(S.SceneConfig(n_points=30, n_cameras=2), seed=5)
    rng = np.random.default_rng(1)
    gt = S.relative_pose(sc, 0, 1)
    for _ in range(20):
        pair = S.fabricate_pair(sc, [0, 1], rng.choice(30, 5, replace=False), Kind.FIVE_POINT)
        R234 = S.recover_rotation(pair, "A234")
        R235 = S.recover_rotation(pair, "A235")
        np.testing.assert_allclose(R234, gt.rotation, atol=1e-8)
        np.testing.assert_allclose(R234, R235, atol=1e-8)
        assert abs(np.linalg.det(R234) - 1) < 1e-8
        pose = S.recover_pose(pair)[0]
        assert S.angle_between_deg(pose.translation, gt.translation) < np.degrees(1e-6)
        # lifted points reproject into view 2
        Xs = S._lifted_points(pair)
        Y = Xs[0] @ pose.rotation.T + pose.translation
        np.testing.assert_allclose(Y[:, :2] / Y[:, 2:], pair.image_points()[1], atol=1e-6)


def test_scranton_recovers_three_poses():
    sc = S.synth_scene(S.SceneConfig(n_points=20, n_cameras=3), seed=2)
    pair = S.fabricate_pair(sc, [0, 1, 2], [0, 1, 2, 3], Kind.SCRANTON)
    poses = S.recover_pose(pair)
    assert len(poses) == 3
    for est, (a, b) in zip(poses, S.view_pairs(Kind.SCRANTON)):
        err = S.pose_error(est, S.relative_pose(sc, a, b))
        assert err.rot_deg < 1e-6 and err.trans_deg < 1e-4


def test_sign_flip_gives_reflection():
    pair = fabricated(Kind.FIVE_POINT, 1)[0]
    s = pair.solution.copy()
    s[4:] *= -1
    assert np.linalg.det(S.recover_rotation(pair.with_solution(s))) < 0
    # no validity filtering: a pose is still returned
    assert len(S.recover_pose(pair.with_solution(s))) == 1


def test_degenerate_tetrahedron():
    pair = fabricated(Kind.FIVE_POINT, 1)[0]
    s = pair.solution.copy()
    s[:3] = 0.0  # points 2..4 collapse onto the camera centre in view 1
    with pytest.raises(S.DegeneracyError):
        S.recover_rotation(pair.with_solution(s))


def test_twisted_pair():
    for pair in fabricated(Kind.FIVE_POINT, 30):
        tw = S.twisted_pair(pair)
        lam, lt = pair.depths(), tw.depths()
        # the map scales point i by t't / D_i; after re-gauging only the sign of D_i / D_1 survives
        Xs = S._lifted_points(pair)
        D = np.sum(Xs[1] ** 2, axis=1) - np.sum(Xs[0] ** 2, axis=1)
        rel = np.sign(D / D[0])
        assert np.all(np.sign(lt[:, 1]) == -np.sign(lam[:, 1]) * rel)
        assert np.all(np.sign(lt[:, 0]) == np.sign(lam[:, 0]) * rel)
        if np.all(rel > 0):
            assert np.all(np.sign(lt[:, 1]) == -np.sign(lam[:, 1]))
        assert np.abs(evaluate(Kind.FIVE_POINT, tw.problem, tw.solution)).max() < 1e-8
        np.testing.assert_allclose(S.twisted_pair(tw).solution, pair.solution, rtol=1e-8, atol=1e-8)
    with pytest.raises(ValueError):
        S.twisted_pair(fabricated(Kind.SCRANTON, 1)[0])


def test_twisted_pair_undefined():
    sc = identical_camera_scene()
    pair = S.fabricate_pair(sc, [0, 1], range(5), Kind.FIVE_POINT)
    with pytest.raises(S.SymmetryUndefinedError):
        S.twisted_pair(pair)


def test_pose_error():
    rng = np.random.default_rng(4)
    R = S.random_rotation(rng)
    t = rng.normal(size=3)
    assert S.pose_error(S.Pose(R, t), S.Pose(R, 3 * t)) == pytest.approx((0, 0), abs=1e-6)
    for _ in range(10):
        axis = rng.normal(size=3)
        Q = S.rotation_about(axis, np.radians(10.0)) @ R
        err = S.pose_error(S.Pose(Q, t), S.Pose(R, -t))
        assert err.rot_deg == pytest.approx(10.0, abs=1e-6)
        assert err.trans_deg == pytest.approx(180.0, abs=1e-6)
        assert S.pose_error(S.Pose(R, -t), S.Pose(Q, t)) == pytest.approx(err, abs=1e-9)
    with pytest.raises(ValueError):
        S.pose_error(S.Pose(R, np.zeros(3)), S.Pose(R, t))


def test_sample_pairs_deterministic():
    a = S.sample_pairs(Kind.FIVE_POINT, 5, seed=9)
    b = S.sample_pairs(Kind.FIVE_POINT, 5, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.problem, y.problem) and np.array_equal(x.solution, y.solution)
