"""Offline evaluation of start-pair selection strategies and tracking variants."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import AnchorSet
from .problem import Kind, PsPair
from .selector import MlpModel, nearest_anchors, select_many
from .tracker import (
    DEFAULT_SETTINGS, TrackSettings, TrackStatus, newton_refine, track_arc, track_many, track_segment,
)

STRATEGY_NAMES = ("B1", "B2", "B3", "MLP", "fixed")


@dataclass(frozen=True)
class StrategyResult:
    name: str
    rho: float  # success rate, percent
    mu_t: float  # mean time per problem, microseconds
    n: int

    @property
    def eps_t(self) -> float:
        """Mean time per correct solution: ``100 * mu_t / rho``."""
        return float("inf") if self.rho <= 0 else 100.0 * self.mu_t / self.rho


def _stack(pairs: Sequence[PsPair]):
    kind = pairs[0].kind
    return (np.array([p.problem for p in pairs]).reshape(-1, kind.problem_dim),
            np.array([p.solution for p in pairs]).reshape(-1, kind.n_unknowns))


def track_choices(anchors: AnchorSet, problems, solutions, choice, settings: TrackSettings):
    """Track from the chosen anchors (``-1`` = skip); returns per-problem success."""
    rows = np.argwhere(choice >= 0)
    hit = np.zeros(len(problems), dtype=bool)
    if len(rows) == 0:
        return hit
    a = choice[rows[:, 0], rows[:, 1]]
    b = track_many(anchors.kind, anchors.problems[a], anchors.solutions[a], problems[rows[:, 0]], settings)
    d = ((b.solutions - solutions[rows[:, 0]]) ** 2).sum(axis=1)
    good = b.converged & (d < settings.success_distance_sq)
    np.logical_or.at(hit, rows[:, 0], good)
    return hit


def warmup(anchors: AnchorSet, P, S, settings: TrackSettings):
    """One untimed track so that compilation does not count towards the timings."""
    if len(anchors) and len(P):
        track_choices(anchors, P, S, np.zeros((1, 1), dtype=np.int64), settings)


def evaluate_strategy(name: str, anchors: AnchorSet, test_pairs: Sequence[PsPair], model: MlpModel | None = None,
                      covariance=None, m: int = 1, settings: TrackSettings | None = None) -> StrategyResult:
    """Success rate and timing of one selection strategy on normalized test pairs.

    ``B1`` tracks from every anchor, ``B2``/``B3`` from the Euclidean/Mahalanobis
    nearest anchor, ``MLP`` from the ``m`` best-scoring anchors (skipping TRASH)
    and ``fixed`` always from anchor 0.
    """
    cfg = settings or DEFAULT_SETTINGS
    P, S = _stack(test_pairs)
    n = len(P)
    warmup(anchors, P[:1], S[:1], cfg)
    t0 = time.perf_counter()
    if name == "B1":
        choice = np.tile(np.arange(len(anchors)), (n, 1))
    elif name == "B2":
        choice = nearest_anchors(P, anchors.problems).reshape(n, 1)
    elif name == "B3":
        if covariance is None:
            raise ValueError("B3 needs a covariance estimate")
        choice = nearest_anchors(P, anchors.problems, "mahalanobis", covariance).reshape(n, 1)
    elif name == "MLP":
        if model is None:
            raise ValueError("MLP strategy needs a model")
        choice = select_many(model, P, m)
    elif name == "fixed":
        choice = np.zeros((n, 1), dtype=np.int64)
    else:
        raise ValueError(f"unknown strategy {name!r}")
    hit = track_choices(anchors, P, S, choice, cfg)
    elapsed = time.perf_counter() - t0
    return StrategyResult(name, 100.0 * float(hit.mean()), 1e6 * elapsed / max(n, 1), n)


def format_strategy_table(results: Sequence[StrategyResult]) -> str:
    lines = ["strategy\trho_pct\tmu_t_us\teps_t_us\tn"]
    for r in results:
        lines.append(f"{r.name}\t{r.rho:.2f}\t{r.mu_t:.2f}\t{r.eps_t:.2f}\t{r.n}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# outcome taxonomy for tracking variants

OUTCOMES = ("correct", "wrong_solution", "negative_depth", "det_minus_one",
            "step_underflow", "max_steps", "singular", "diverged", "non_real")


def classify_outcome(kind: Kind, target: PsPair, outcome, settings: TrackSettings) -> str:
    from .scene import recover_rotation, DegeneracyError

    st = outcome.status
    if st is not TrackStatus.CONVERGED:
        return {TrackStatus.STEP_SIZE_UNDERFLOW: "step_underflow", TrackStatus.MAX_STEPS_EXCEEDED: "max_steps",
                TrackStatus.SINGULAR_JACOBIAN: "singular", TrackStatus.DIVERGED_NORM: "diverged",
                TrackStatus.NON_REAL_ENDPOINT: "non_real"}[st]
    s = outcome.solution
    if float(((s - target.solution) ** 2).sum()) < settings.success_distance_sq:
        return "correct"
    pair = target.with_solution(s)
    if np.any(pair.depths() <= 0):
        return "negative_depth"
    try:
        if np.linalg.det(recover_rotation(pair)) < 0:
            return "det_minus_one"
    except DegeneracyError:
        pass
    return "wrong_solution"


def run_variant(variant: str, start: PsPair, target: PsPair, settings: TrackSettings, rng=None):
    kind = start.kind
    if variant == "segment":
        return track_segment(kind, start, target.problem, settings)
    if variant == "arc-gamma1":
        return track_arc(kind, start, target.problem, 1.0, settings)
    if variant == "arc-random":
        ang = (rng or np.random.default_rng(0)).uniform(0, 2 * np.pi)
        return track_arc(kind, start, target.problem, complex(np.cos(ang), np.sin(ang)), settings)
    if variant.startswith("newton"):
        steps = int(variant[len("newton"):] or 15)
        return newton_refine(kind, target.problem, start.solution, steps, settings)
    raise ValueError(f"unknown variant {variant!r}")


def variant_taxonomy(variant: str, pairs: Sequence[PsPair], settings: TrackSettings | None = None, seed: int = 0):
    """Track from every pair to every other pair; percentages per outcome class plus mean time (us)."""
    cfg = settings or DEFAULT_SETTINGS
    rng = np.random.default_rng(seed)
    counts = {k: 0 for k in OUTCOMES}
    total_t = 0.0
    n = 0
    if len(pairs) > 1:
        run_variant(variant, pairs[0], pairs[1], cfg, np.random.default_rng(seed))
    for i, a in enumerate(pairs):
        for j, b in enumerate(pairs):
            if i == j:
                continue
            o = run_variant(variant, a, b, cfg, rng)
            total_t += o.wall_time
            counts[classify_outcome(a.kind, b, o, cfg)] += 1
            n += 1
    pct = {k: 100.0 * v / max(n, 1) for k, v in counts.items()}
    return pct, 1e6 * total_t / max(n, 1)
