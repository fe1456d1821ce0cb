"""Command-line entry point: ``anchorhc <command> [options]``.

Each command accepts ``--config file.json`` whose keys are option names
(dashes or underscores); explicit command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as aio
from .anchors import build_graph, coverage, greedy_cover, ReachabilityGraph
from .evaluation import (
    OUTCOMES, STRATEGY_NAMES, evaluate_strategy, format_strategy_table, variant_taxonomy,
)
from .normalizer import STRATEGIES, normalize, normalize_solution
from .problem import Kind
from .ransac import PickSolve, RansacConfig, benchmark, format_table, synth_matches
from .scene import FabricationError, SamplingConfig, fabricate_pair, sample_pairs
from .selector import (
    TrainConfig, TrainHistory, estimate_covariance, label_hit_rate, label_sets_from_matrix, train,
)
from .tracker import DEFAULT_SETTINGS, TrackSettings, track_many

CHECKPOINTS = (25, 50, 100, 200, 400, 800, 1600, 3200)
SOLVERS = ("mlp_hc", "fixed_anchor_hc", "newton_baseline")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t.strip()]


def _names(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def track_settings(args) -> TrackSettings:
    return TrackSettings(initial_dt=args.initial_dt, min_dt=args.min_dt, max_steps=args.max_steps,
                         corrector_tolerance=args.corrector_tol)


def run_hash(args) -> str:
    """Hash over the numeric configuration of a run (paths and worker count excluded)."""
    skip = {"config", "func", "jobs", "out", "out_prefix", "pairs", "train", "val", "test", "anchors", "model",
            "matches", "scene", "graph_in", "graph_out", "train_labels", "val_labels", "test_labels", "labels_out"}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return aio.settings_hash(cfg)


def header(args, kind) -> dict:
    return {"kind": Kind.parse(kind).value, "seed": str(args.seed), "settings": run_hash(args)}


def emit(args, kind, table: str):
    h = header(args, kind)
    print(f"# kind={h['kind']} seed={h['seed']} settings={h['settings']}")
    print(table)


def _need(path, what):
    if path is None:
        raise CliError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    return p


def _load_pairs(path, what="pairs"):
    pf = aio.read_pairs(_need(path, what))
    return pf.kind, pf.pairs


def _check_kind(args, kind):
    if args.kind is not None and Kind.parse(args.kind) is not kind:
        raise CliError(f"--kind {args.kind} does not match input kind {kind.value}")


def normalized_pair(pair, strategy: str):
    problem, record = normalize(pair.problem, pair.kind, strategy)
    return pair.with_problem(problem).with_solution(normalize_solution(pair.solution, record))


def pairs_from_scene(scene, kind: Kind, n: int, seed: int):
    """Random camera/point tuples of one fixed scene."""
    rng = np.random.default_rng(seed)
    out, tries = [], 0
    while len(out) < n:
        tries += 1
        if tries > 100 * max(n, 1) + 1000:
            raise CliError("scene yields too few valid tuples")
        cams = rng.choice(scene.n_cameras, size=kind.n_views, replace=False)
        vis = scene.visible_in_all(cams)
        if len(vis) < kind.n_points:
            continue
        pts = rng.choice(vis, size=kind.n_points, replace=False)
        try:
            out.append(fabricate_pair(scene, cams, pts, kind))
        except FabricationError:
            continue
    return out


def _labels(anchor_set, pairs, path, args, kind):
    """Label matrix from a cached file when given and present, otherwise by tracking."""
    if path is not None and Path(path).is_file():
        L, _ = aio.read_labels(path)
        if L.shape != (len(pairs), len(anchor_set)):
            raise CliError(f"label file {path} has shape {L.shape}, expected {(len(pairs), len(anchor_set))}")
        return L
    L = coverage(anchor_set, pairs, track_settings(args), jobs=args.jobs).labels
    if path is not None:
        aio.write_labels(path, L, header(args, kind))
    return L


def _problems(pairs):
    return np.array([p.problem for p in pairs]).reshape(len(pairs), -1)


# ---------------------------------------------------------------------------
# commands


def cmd_fabricate(args):
    kind = Kind.parse(args.kind or "5pt")
    if args.n < 0:
        raise CliError("--n must be >= 0")
    if args.scene:
        scene = aio.read_scene(_need(args.scene, "scene"))
        raw = pairs_from_scene(scene, kind, args.n, args.seed)
    else:
        raw = sample_pairs(kind, args.n, seed=args.seed, config=SamplingConfig())
    pairs = raw if args.strategy == "none" else [normalized_pair(p, args.strategy) for p in raw]
    meta = header(args, kind)
    meta["normalization"] = args.strategy
    aio.write_pairs(args.out, kind, pairs, aio.settings_hash(DEFAULT_SETTINGS), meta)
    print(f"# kind={meta['kind']} seed={meta['seed']} settings={meta['settings']}")
    print(f"wrote {len(pairs)} pairs to {args.out}")


def cmd_anchors(args):
    kind, pairs = _load_pairs(args.pairs)
    _check_kind(args, kind)
    fractions = _floats(args.fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise CliError("fractions must lie in (0, 1]")
    cfg = track_settings(args)
    if args.graph_in:
        A, _ = aio.read_labels(_need(args.graph_in, "graph-in"))
        if A.shape != (len(pairs), len(pairs)):
            raise CliError("graph size does not match the pairs file")
        graph = ReachabilityGraph.from_adjacency(pairs, A, cfg)
    else:
        graph = build_graph(pairs, cfg, jobs=args.jobs)
    meta = header(args, kind)
    if args.graph_out:
        aio.write_labels(args.graph_out, graph.adjacency, {**meta, "content": "reachability"})
    rows = ["fraction\tn_anchors\tcoverage\tpath"]
    for f in sorted(fractions):
        aset = greedy_cover(graph, f, source=str(args.pairs))
        path = f"{args.out_prefix}_{int(round(f * 100))}.txt"
        aio.write_anchors(path, aset, {**meta, "fraction": aio.fmt(f),
                                       "indices": ",".join(str(i) for i in aset.indices)})
        rows.append(f"{f:g}\t{len(aset)}\t{aset.coverage:.6f}\t{path}")
    emit(args, kind, "\n".join(rows))


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       hidden=(args.hidden_width,) * args.hidden_depth, seed=args.seed)


def _fit(args, anchor_set, tr, va, kind, config):
    Ltr = _labels(anchor_set, tr, args.train_labels, args, kind)
    Lva = _labels(anchor_set, va, args.val_labels, args, kind) if va else None
    hist = TrainHistory()
    model = train(_problems(tr), label_sets_from_matrix(Ltr), len(anchor_set), kind, config,
                  _problems(va) if va else None, Lva, hist)
    return model, hist


def cmd_train(args):
    anchor_set, _ = aio.read_anchors(_need(args.anchors, "anchors"))
    kind, tr = _load_pairs(args.train, "train")
    if kind is not anchor_set.kind:
        raise CliError("anchors and training pairs have different kinds")
    _check_kind(args, kind)
    va = []
    if args.val:
        _, va = _load_pairs(args.val, "val")
    model, hist = _fit(args, anchor_set, tr, va, kind, _train_config(args))
    meta = header(args, kind)
    meta["best_epoch"] = str(hist.best_epoch)
    aio.write_mlp(args.out, model, meta)
    best = max(hist.val_hit) if hist.val_hit else float("nan")
    emit(args, kind, f"epochs\tbest_epoch\tval_label_hit\tpath\n{len(hist.loss)}\t{hist.best_epoch}\t{best:.4f}\t{args.out}")


def cmd_eval(args):
    anchor_set, _ = aio.read_anchors(_need(args.anchors, "anchors"))
    kind, te = _load_pairs(args.test, "test")
    if kind is not anchor_set.kind:
        raise CliError("anchors and test pairs have different kinds")
    _check_kind(args, kind)
    names = _names(args.strategies)
    unknown = set(names) - set(STRATEGY_NAMES)
    if unknown:
        raise CliError(f"unknown strategies {sorted(unknown)}")
    model = aio.read_mlp(_need(args.model, "model")) if "MLP" in names else None
    cov = None
    if "B3" in names:
        _, tr = _load_pairs(args.train, "train")
        cov = estimate_covariance(_problems(tr))
    cfg = track_settings(args)
    results = [evaluate_strategy(n, anchor_set, te, model, cov, args.tracks_per_problem, cfg) for n in names]
    emit(args, kind, format_strategy_table(results))


def _solvers(names, anchor_set, model, m, cfg):
    out = {}
    for name in names:
        if name == "mlp_hc":
            out[name] = PickSolve(anchor_set, model, "mlp", "hc", m, cfg)
        elif name == "fixed_anchor_hc":
            out[name] = PickSolve(anchor_set, None, "fixed", "hc", m, cfg)
        elif name == "newton_baseline":
            sel = "mlp" if model is not None else "nearest"
            out[name] = PickSolve(anchor_set, model, sel, "newton", m, cfg)
        else:
            raise CliError(f"unknown solver {name!r}")
    return out


def cmd_ransac(args):
    anchor_set, _ = aio.read_anchors(_need(args.anchors, "anchors"))
    kind = anchor_set.kind
    _check_kind(args, kind)
    names = _names(args.solvers)
    if "mlp_hc" in names or args.model:
        model = aio.read_mlp(_need(args.model, "model"))
    else:
        model = None
    if args.matches:
        datasets = [aio.read_matches(_need(p, "matches")) for p in args.matches]
    else:
        datasets = [synth_matches(kind, args.n_matches, args.outlier_ratio, args.noise_px, args.focal,
                                  seed=args.seed + t) for t in range(args.trials)]
    if any(d.kind is not kind for d in datasets):
        raise CliError("matches and anchors have different kinds")
    solvers = _solvers(names, anchor_set, model, args.tracks_per_problem, track_settings(args))
    checkpoints = sorted(set(_ints(args.samples)))
    rows = benchmark(datasets, solvers, checkpoints, RansacConfig(max(checkpoints), args.threshold_px, args.focal,
                                                                  args.seed))
    emit(args, kind, format_table(rows))


# studies


def study_normalization(args, kind):
    cfg = track_settings(args)
    raw = sample_pairs(kind, args.n, seed=args.seed)
    lines = ["strategy\tsuccess_pct\tnormalize_us\ttrack_us"]
    track_many(kind, _problems(raw[:1]), np.array([raw[0].solution]), _problems(raw[1:2]), cfg)
    for st in _names(args.variants or ",".join(STRATEGIES)):
        normalized_pair(raw[0], st)
        t0 = time.perf_counter()
        pairs = [normalized_pair(p, st) for p in raw]
        t_norm = (time.perf_counter() - t0) / len(raw)
        P = _problems(pairs)
        S = np.array([p.solution for p in pairs])
        src, dst = np.nonzero(~np.eye(len(pairs), dtype=bool))
        b = track_many(kind, P[src], S[src], P[dst], cfg)
        ok = b.converged & (((b.solutions - S[dst]) ** 2).sum(axis=1) < cfg.success_distance_sq)
        lines.append(f"{st}\t{100 * ok.mean():.2f}\t{1e6 * t_norm:.2f}\t{1e6 * b.wall_time / len(src):.2f}")
    return "\n".join(lines)


def study_hc(args, kind):
    cfg = track_settings(args)
    pairs = [normalized_pair(p, args.strategy) for p in sample_pairs(kind, args.n, seed=args.seed)]
    lines = ["variant\t" + "\t".join(f"{o}_pct" for o in OUTCOMES) + "\ttime_us"]
    for v in _names(args.variants or "segment,arc-gamma1,arc-random,newton15"):
        pct, t = variant_taxonomy(v, pairs, cfg, args.seed)
        lines.append(v + "\t" + "\t".join(f"{pct[o]:.2f}" for o in OUTCOMES) + f"\t{t:.2f}")
    return "\n".join(lines)


def study_tracks(args, kind):
    anchor_set, _ = aio.read_anchors(_need(args.anchors, "anchors"))
    model = aio.read_mlp(_need(args.model, "model"))
    _, te = _load_pairs(args.test, "test")
    cfg = track_settings(args)
    results = []
    for m in _ints(args.variants or "1,2,3,4,5"):
        r = evaluate_strategy("MLP", anchor_set, te, model, None, m, cfg)
        results.append(r.__class__(f"m={m}", r.rho, r.mu_t, r.n))
    return format_strategy_table(results)


def study_width(args, kind):
    anchor_set, _ = aio.read_anchors(_need(args.anchors, "anchors"))
    _, tr = _load_pairs(args.train, "train")
    _, va = _load_pairs(args.val, "val")
    _, te = _load_pairs(args.test, "test")
    Lte = _labels(anchor_set, te, args.test_labels, args, kind)
    cfg = track_settings(args)
    lines = ["width\tval_label_hit\ttest_label_hit\trho_pct\tmu_t_us\teps_t_us"]
    for w in _ints(args.variants or "25,50,100,200"):
        tc = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                         hidden=(w,) * args.hidden_depth, seed=args.seed)
        model, hist = _fit(args, anchor_set, tr, va, kind, tc)
        r = evaluate_strategy("MLP", anchor_set, te, model, None, 1, cfg)
        lines.append(f"{w}\t{max(hist.val_hit):.4f}\t{label_hit_rate(model, _problems(te), Lte):.4f}"
                     f"\t{r.rho:.2f}\t{r.mu_t:.2f}\t{r.eps_t:.2f}")
    return "\n".join(lines)


STUDIES = {"normalization": study_normalization, "hc": study_hc, "tracks": study_tracks, "width": study_width}


def cmd_study(args):
    kind = Kind.parse(args.kind or "5pt")
    if args.n < 2 and args.which in ("normalization", "hc"):
        raise CliError("--n must be >= 2")
    emit(args, kind, STUDIES[args.which](args, kind))


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--kind", choices=[k.value for k in Kind], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--strategy", choices=list(STRATEGIES), default="A", help="normalization strategy")
    p.add_argument("--tracks-per-problem", type=int, default=1)
    d = DEFAULT_SETTINGS
    p.add_argument("--initial-dt", type=float, default=d.initial_dt)
    p.add_argument("--min-dt", type=float, default=d.min_dt)
    p.add_argument("--max-steps", type=int, default=d.max_steps)
    p.add_argument("--corrector-tol", type=float, default=d.corrector_tolerance)


def _training(p: argparse.ArgumentParser):
    t = TrainConfig()
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--hidden-width", type=int, default=t.hidden[0])
    p.add_argument("--hidden-depth", type=int, default=len(t.hidden))
    p.add_argument("--train-labels", help="label cache for the training pairs (read if present, else written)")
    p.add_argument("--val-labels", help="label cache for the validation pairs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorhc", description="Anchor-based homotopy continuation for minimal problems")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fabricate", help="write a file of fabricated problem-solution pairs")
    _common(p)
    p.set_defaults(func=cmd_fabricate)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--scene", help="scene file to sample from (default: fresh synthetic scenes)")
    p.add_argument("--out", required=True)
    # writing raw pairs is allowed here only
    p._option_string_actions["--strategy"].choices = list(STRATEGIES) + ["none"]

    p = sub.add_parser("anchors", help="build the reachability graph and greedy anchor sets")
    _common(p)
    p.set_defaults(func=cmd_anchors)
    p.add_argument("--pairs", required=True)
    p.add_argument("--fractions", default="0.5,0.75,0.9,1.0")
    p.add_argument("--out-prefix", default="anchors")
    p.add_argument("--graph-in")
    p.add_argument("--graph-out")

    p = sub.add_parser("train", help="train the anchor classifier")
    _common(p)
    _training(p)
    p.set_defaults(func=cmd_train)
    p.add_argument("--anchors", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="success rate and timing per selection strategy")
    _common(p)
    p.set_defaults(func=cmd_eval)
    p.add_argument("--anchors", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--model")
    p.add_argument("--train", help="training pairs, for the Mahalanobis covariance (B3)")
    p.add_argument("--strategies", default=",".join(STRATEGY_NAMES))

    p = sub.add_parser("ransac", help="RANSAC benchmark: success-at-10-degrees per solver and sample count")
    _common(p)
    p.set_defaults(func=cmd_ransac)
    p.add_argument("--anchors", required=True)
    p.add_argument("--model")
    p.add_argument("--matches", nargs="*")
    p.add_argument("--solvers", default=",".join(SOLVERS))
    p.add_argument("--samples", default=",".join(str(c) for c in CHECKPOINTS))
    p.add_argument("--threshold-px", type=float, default=3.0)
    p.add_argument("--focal", type=float, default=1000.0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--n-matches", type=int, default=200)
    p.add_argument("--outlier-ratio", type=float, default=0.5)
    p.add_argument("--noise-px", type=float, default=1.0)

    p = sub.add_parser("study", help="ablation tables")
    _common(p)
    _training(p)
    p.set_defaults(func=cmd_study)
    p.add_argument("which", choices=sorted(STUDIES))
    p.add_argument("--variants", help="comma-separated rows (strategies, variants, m values or widths)")
    p.add_argument("--n", type=int, default=30, help="pairs to sample for the normalization and hc studies")
    p.add_argument("--anchors")
    p.add_argument("--model")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")
    p.add_argument("--test-labels")
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv):
    """Parse ``argv``; options found in a ``--config`` JSON file become defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None or not argv:
        return ap.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices
    sub = subs.get(argv[0])
    if sub is None:
        return ap.parse_args(argv)
    known = {a.dest for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = k.replace("-", "_")
        if dest not in known:
            raise CliError(f"config {path}: unknown option {k!r}")
        defaults[dest] = v
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return ap.parse_args(argv)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (CliError, aio.FormatError, OSError, ValueError, ArithmeticError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
