import numpy as np
import pytest

from anchorhc.normalizer import normalize_pair
from anchorhc.problem import Kind
from anchorhc.scene import sample_pairs

KINDS = [Kind.FIVE_POINT, Kind.SCRANTON]


@pytest.fixture(params=KINDS, ids=lambda k: k.value)
def kind(request):
    return request.param


_cache = {}


def fabricated(kind, n, seed=0):
    key = ("raw", kind, n, seed)
    if key not in _cache:
        _cache[key] = sample_pairs(kind, n, seed=seed)
    return _cache[key]


def normalized(kind, n, seed=0):
    key = ("norm", kind, n, seed)
    if key not in _cache:
        _cache[key] = [normalize_pair(p)[0] for p in fabricated(kind, n, seed)]
    return _cache[key]


def random_inputs(kind, rng):
    p = rng.normal(scale=0.5, size=kind.problem_dim)
    s = rng.uniform(0.5, 2.0, size=kind.n_unknowns)
    if kind is Kind.SCRANTON:
        s[-1] = rng.normal(scale=0.1)
    return p, s


def jittered_pair(kind, seed, angle_deg=1.0):
    """A fabricated pair and its twin seen after rotating the second camera by ``angle_deg``."""
    from anchorhc import scene as S

    rng = np.random.default_rng(seed)
    sc = S.synth_scene(S.SceneConfig(n_points=kind.n_points, n_cameras=kind.n_views), seed=seed)
    cams, pts = list(range(kind.n_views)), list(range(kind.n_points))
    a = S.fabricate_pair(sc, cams, pts, kind)
    c = sc.cameras[1]
    R = S.rotation_about(rng.normal(size=3), np.radians(angle_deg)) @ c.rotation
    moved = S.SceneModel(sc.points, (sc.cameras[0], S.CameraPose(R, c.translation)) + sc.cameras[2:], sc.visibility)
    return a, S.fabricate_pair(moved, cams, pts, kind)
