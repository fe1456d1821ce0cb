"""Acceptance criteria 1-11, each printed as one PASS/FAIL line.

Criteria 7, 9 and 10 share one offline stage (reachability graph, anchors,
coverage labels, trained classifier). It is cached under ``.acceptance_cache``
(or ``$ANCHORHC_CACHE``) keyed by a hash of every setting that feeds it, and
rebuilt when missing. A cold build takes about 12 minutes on one core.
"""
import dataclasses
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from anchorhc import formulations as F
from anchorhc import io as aio
from anchorhc import selector as M
from anchorhc.anchors import ReachabilityGraph, build_graph, coverage, greedy_cover, greedy_order
from anchorhc.evaluation import evaluate_strategy
from anchorhc.normalizer import normalize_many, normalize_pair
from anchorhc.problem import Kind, PsPair
from anchorhc.ransac import PickSolve, RansacConfig, benchmark, synth_matches
from anchorhc.scene import recover_rotation, sample_pairs
from anchorhc.tracker import DEFAULT_SETTINGS, track_arc, track_many, track_segment

from conftest import KINDS, jittered_pair, random_inputs

CACHE = Path(os.environ.get("ANCHORHC_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
CHECKPOINTS = (25, 50, 100, 200, 400, 800, 1600, 3200)

OFFLINE = dict(kind="5pt", graph_n=1000, graph_seed=1, train_n=50000, train_seed=2, val_n=5000, val_seed=3,
               test_n=10000, test_seed=4, fraction=0.75,
               track=dataclasses.asdict(DEFAULT_SETTINGS), train=dataclasses.asdict(M.TrainConfig()))


def verdict(request, number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    rep = request.config.pluginmanager.get_plugin("terminalreporter")
    if rep is not None:
        rep.write_line("")
        rep.write_line(line)
    print(line)
    assert ok, line


def stack(pairs):
    return np.array([p.problem for p in pairs]), np.array([p.solution for p in pairs])


def normalized_pairs(kind, n, seed):
    return [normalize_pair(p)[0] for p in sample_pairs(kind, n, seed=seed)]


# ---------------------------------------------------------------------------
# offline stage shared by criteria 7, 9 and 10


@pytest.fixture(scope="module")
def offline():
    kind = Kind.parse(OFFLINE["kind"])
    d = CACHE / aio.settings_hash(OFFLINE)
    done = d / "timing.json"
    if not done.exists():
        d.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        graph = build_graph(normalized_pairs(kind, OFFLINE["graph_n"], OFFLINE["graph_seed"]),
                            jobs=os.cpu_count() or 1)
        np.save(d / "adjacency.npy", graph.adjacency)
        aset = greedy_cover(graph, OFFLINE["fraction"], source="acceptance")
        aio.write_anchors(d / "anchors.txt", aset, {"indices": ",".join(map(str, aset.indices))})
        tr = normalized_pairs(kind, OFFLINE["train_n"], OFFLINE["train_seed"])
        va = normalized_pairs(kind, OFFLINE["val_n"], OFFLINE["val_seed"])
        Ltr = coverage(aset, tr, jobs=os.cpu_count() or 1).labels
        Lva = coverage(aset, va, jobs=os.cpu_count() or 1).labels
        aio.write_labels(d / "train_labels.txt", Ltr)
        aio.write_labels(d / "val_labels.txt", Lva)
        model = M.train(stack(tr)[0], M.label_sets_from_matrix(Ltr), len(aset), kind,
                        M.TrainConfig(**OFFLINE["train"]), stack(va)[0], Lva)
        aio.write_mlp(d / "model.txt", model)
        done.write_text(json.dumps({"offline_s": time.perf_counter() - t0}))
    pairs = normalized_pairs(kind, OFFLINE["graph_n"], OFFLINE["graph_seed"])
    graph = ReachabilityGraph.from_adjacency(pairs, np.load(d / "adjacency.npy"))
    aset, _ = aio.read_anchors(d / "anchors.txt")
    return dict(kind=kind, graph=graph, anchors=aset, model=aio.read_mlp(d / "model.txt"),
                offline_s=json.loads(done.read_text())["offline_s"])


@pytest.fixture(scope="module")
def lift(offline):
    test = normalized_pairs(offline["kind"], OFFLINE["test_n"], OFFLINE["test_seed"])
    t0 = time.perf_counter()
    res = {name: evaluate_strategy(name, offline["anchors"], test, model=offline["model"])
           for name in ("MLP", "B2", "fixed")}
    return res, time.perf_counter() - t0


# ---------------------------------------------------------------------------


def test_criterion_01_fabrication_exactness(request):
    worst, elapsed = {}, {}
    for kind in KINDS:
        sample_pairs(kind, 2, seed=0)  # compile outside the timed run
        t0 = time.perf_counter()
        pairs = sample_pairs(kind, 10000, seed=11)
        elapsed[kind.value] = time.perf_counter() - t0
        worst[kind.value] = max(np.abs(F.evaluate(kind, p.problem, p.solution)).max() for p in pairs)
    ok = all(w < 1e-10 for w in worst.values()) and all(t < 10 for t in elapsed.values())
    verdict(request, 1, ok, "max |residual| " + ", ".join(f"{k} {worst[k]:.1e} in {elapsed[k]:.1f}s" for k in worst))


def test_criterion_02_jacobians(request):
    h = 1e-6
    worst = {}
    for kind in KINDS:
        rng = np.random.default_rng(21)
        err = 0.0
        for _ in range(1000):
            p0, s = random_inputs(kind, rng)
            p1, _ = random_inputs(kind, rng)
            t = rng.uniform(0, 1)
            p = (1 - t) * p0 + t * p1
            J = F.jacobian_s(kind, p, s)
            for c in range(kind.n_unknowns):
                e = np.zeros(kind.n_unknowns)
                e[c] = h
                fd = (F.evaluate(kind, p, s + e) - F.evaluate(kind, p, s - e)) / (2 * h)
                err = max(err, np.abs(J[:, c] - fd).max())
            fd_t = (F.evaluate(kind, (1 - t - h) * p0 + (t + h) * p1, s)
                    - F.evaluate(kind, (1 - t + h) * p0 + (t - h) * p1, s)) / (2 * h)
            err = max(err, np.abs(F.jacobian_t(kind, p0, p1, s, t) - fd_t).max())
        worst[kind.value] = err
    verdict(request, 2, all(e < 1e-6 for e in worst.values()),
            "max FD error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_03_pattern_solver(request):
    worst, raised = {}, {}
    for kind in KINDS:
        rng = np.random.default_rng(31)
        mask = F.pattern_mask(kind)
        err = 0.0
        for _ in range(1000):
            J = np.where(mask, rng.normal(size=mask.shape), 0.0)
            b = rng.normal(size=kind.n_unknowns)
            ref = np.linalg.solve(J, b)
            err = max(err, np.linalg.norm(F.solve_pattern(kind, J, b) - ref) / np.linalg.norm(ref))
        worst[kind.value] = err
        n_raised = 0
        for k in range(kind.n_unknowns):
            J = np.where(mask, rng.normal(size=mask.shape), 0.0)
            J[:, k] = 0.0
            try:
                F.solve_pattern(kind, J, np.ones(kind.n_unknowns))
            except F.SingularSystemError:
                n_raised += 1
        raised[kind.value] = (n_raised, kind.n_unknowns)
    ok = all(e < 1e-10 for e in worst.values()) and all(a == b for a, b in raised.values())
    verdict(request, 3, ok, "max rel error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + "; singular raised " + ", ".join(f"{k} {a}/{b}" for k, (a, b) in raised.items()))


def test_criterion_04_tracker_identity_and_locality(request):
    ident, local = {}, {}
    for kind in KINDS:
        pairs = sample_pairs(kind, 1000, seed=41)
        P, S = stack(pairs)
        b = track_many(kind, P, S, P)
        ident[kind.value] = float(np.abs(b.solutions - S).max()) if b.converged.all() else math.inf
        jit = [jittered_pair(kind, 4000 + i) for i in range(1000)]
        A, SA = stack([a for a, _ in jit])
        B, SB = stack([b for _, b in jit])
        out = track_many(kind, A, SA, B)
        d = ((out.solutions - SB) ** 2).sum(axis=1)
        local[kind.value] = float(np.mean(out.converged & (d < DEFAULT_SETTINGS.success_distance_sq)))
    ok = all(v < 1e-12 for v in ident.values()) and all(v >= 0.95 for v in local.values())
    verdict(request, 4, ok, "zero-length max dev " + ", ".join(f"{k} {v:.1e}" for k, v in ident.items())
            + "; 1 deg success " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in local.items()))


def test_criterion_05_implicit_constraints(request):
    kind = Kind.FIVE_POINT
    rng = np.random.default_rng(51)
    n, res, det = 0, 0.0, 0.0
    for i in range(800):
        a, b = jittered_pair(kind, 5000 + i, angle_deg=rng.uniform(1, 20))
        o = track_segment(kind, a, b.problem)
        if not (o.converged and ((o.solution - b.solution) ** 2).sum() < DEFAULT_SETTINGS.success_distance_sq):
            continue
        n += 1
        res = max(res, abs(F.dropped_residual(b.problem, o.solution)))
        det = max(det, abs(np.linalg.det(recover_rotation(PsPair(kind, b.problem, o.solution))) - 1))
    ok = n >= 500 and res < 1e-6 and det < 1e-6
    verdict(request, 5, ok, f"{n} tracks, max dropped residual {res:.1e}, max |det R - 1| {det:.1e}")


def test_criterion_06_gamma_one_arc(request):
    worst, counts = 0.0, {}
    for kind in KINDS:
        n, seed = 0, 6000
        while n < 100 and seed < 7000:
            a, b = jittered_pair(kind, seed, angle_deg=5.0)
            seed += 1
            seg = track_segment(kind, a, b.problem)
            if not seg.converged:
                continue
            arc = track_arc(kind, a, b.problem, 1.0)
            worst = max(worst, np.abs(arc.solution - seg.solution).max() if arc.converged else math.inf)
            n += 1
        counts[kind.value] = n
    ok = all(c == 100 for c in counts.values()) and worst < 1e-8
    verdict(request, 6, ok, f"{sum(counts.values())} tracks, max endpoint difference {worst:.1e}")


def test_criterion_07_greedy_cover(request, offline):
    graph = offline["graph"]
    n = len(graph.nodes)
    order, cov = greedy_order(graph.adjacency, 1.0)
    sets = {f: greedy_cover(graph, f) for f in (0.5, 0.75, 0.9, 1.0)}
    size = {f: len(s) for f, s in sets.items()}
    fs = sorted(sets)
    nested = all(sets[b].indices[: size[a]] == sets[a].indices for a, b in zip(fs, fs[1:]))
    monotone = all(x <= y for x, y in zip(cov, cov[1:]))
    ok = n == 1000 and monotone and nested and size[0.5] < size[0.9] < size[1.0] <= n
    verdict(request, 7, ok, f"n={n}, |A50|={size[0.5]} |A75|={size[0.75]} |A90|={size[0.9]} |A100|={size[1.0]}, "
            f"monotone={monotone}, nested={nested}")


def test_criterion_08_classifier(request):
    kind = Kind.FIVE_POINT
    m = M.MlpModel.initialize(kind, 3, (6, 5), seed=81)
    rng = np.random.default_rng(82)
    for b in m.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    for a in m.slopes:
        a[:] = rng.uniform(0.1, 0.4, size=a.shape)
    X = rng.normal(size=(8, kind.problem_dim))
    y = rng.integers(0, 4, size=8)
    _, grads = M.loss_and_grads(m, X, y)
    h, worst = 1e-6, 0.0
    for prm, g in zip(m.parameters(), grads):
        flat, gflat = prm.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, _ = M.loss_and_grads(m, X, y)
            flat[i] = old - h
            dn, _ = M.loss_and_grads(m, X, y)
            flat[i] = old
            num = (up - dn) / (2 * h)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6))
    Xt = rng.normal(size=(200, kind.problem_dim))
    labels = [[int(i % 4)] for i in range(200)]
    cfg = M.TrainConfig(epochs=5, hidden=(16, 16), batch_size=16, seed=83)
    a, b = M.train(Xt, labels, 4, kind, cfg), M.train(Xt, labels, 4, kind, cfg)
    same = all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    verdict(request, 8, worst < 1e-4 and same, f"max relative gradient error {worst:.1e}, bit-identical={same}")


def test_criterion_09_learning_lift(request, offline, lift):
    res, eval_s = lift
    mlp, b2, fixed = res["MLP"].rho, res["B2"].rho, res["fixed"].rho
    ok = (mlp >= 1.5 * b2 and mlp >= 3 * fixed and offline["offline_s"] < 7200 and eval_s < 300)
    verdict(request, 9, ok, f"5pt |A75|={len(offline['anchors'])}: MLP {mlp:.1f}% B2 {b2:.1f}% fixed {fixed:.1f}% "
            f"(x{mlp / max(b2, 1e-9):.2f}, x{mlp / max(fixed, 1e-9):.2f}); offline {offline['offline_s']:.0f}s, "
            f"eval {eval_s:.0f}s")


def test_criterion_10_ransac(request, offline, lift):
    kind = offline["kind"]
    n_trials, n_matches, ratio = 500, 200, 0.5
    datasets = [synth_matches(kind, n_matches, ratio, 1.0, 1000.0, seed=10000 + t) for t in range(n_trials)]
    solver = PickSolve(offline["anchors"], offline["model"])
    rows = benchmark(datasets, {"mlp_hc": solver}, CHECKPOINTS, RansacConfig(max(CHECKPOINTS), 3.0, 1000.0, 10))
    pct = {c: p for _, c, p in rows}
    monotone = all(pct[a] <= pct[b] for a, b in zip(CHECKPOINTS, CHECKPOINTS[1:]))
    # expected share of trials with at least one all-inlier sample solved by the selected track
    n_in = n_matches - round(ratio * n_matches)
    q = math.comb(n_in, kind.n_points) / math.comb(n_matches, kind.n_points) * lift[0]["MLP"].rho / 100
    expected = 100 * (1 - (1 - q) ** 800)
    ok = monotone and pct[800] >= 90.0
    verdict(request, 10, ok, f"success@800 {pct[800]:.1f}% (binomial expectation {expected:.2f}%), monotone={monotone}, "
            "curve " + " ".join(f"{c}:{pct[c]:.0f}" for c in CHECKPOINTS))


def test_criterion_11_performance(request):
    detail, ok = [], True
    for kind in KINDS:
        raw = sample_pairs(kind, 10001, seed=111)
        P = np.array([p.problem for p in raw])
        normalize_many(P[:2], kind)
        t0 = time.perf_counter()
        normalize_many(P, kind)
        t_norm = (time.perf_counter() - t0) / len(P)
        Pn, Sn = stack([normalize_pair(p)[0] for p in raw])
        track_many(kind, Pn[:1], Sn[:1], Pn[1:2])
        t0 = time.perf_counter()
        track_many(kind, Pn[:-1], Sn[:-1], Pn[1:])
        total = time.perf_counter() - t0
        t_track = total / 10000
        ok &= t_track < 1e-3 and t_norm < 0.05 * t_track and total < 60
        detail.append(f"{kind.value} track {1e6 * t_track:.0f}us, normalize {1e6 * t_norm:.1f}us "
                      f"({100 * t_norm / t_track:.2f}%), 10k tracks {total:.1f}s")
    verdict(request, 11, ok, "; ".join(detail))
