"""Reachability graphs over p-s pairs and greedy anchor selection."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .io import settings_hash
from .problem import Kind, PsPair
from .tracker import DEFAULT_SETTINGS, TrackSettings, track_many


def _stack(pairs: Sequence[PsPair]):
    kind = pairs[0].kind
    P = np.array([p.problem for p in pairs]).reshape(-1, kind.problem_dim)
    S = np.array([p.solution for p in pairs]).reshape(-1, kind.n_unknowns)
    return kind, P, S


def reach_rows(kind, P, S, sources, targets_P, targets_S, settings: TrackSettings):
    """Boolean matrix ``(len(sources), len(targets))``: does source ``i`` reach target ``j``."""
    out = np.zeros((len(sources), len(targets_P)), dtype=bool)
    for r, i in enumerate(sources):
        b = track_many(kind, P[i:i + 1], S[i:i + 1], targets_P, settings)
        d = ((b.solutions - targets_S) ** 2).sum(axis=1)
        out[r] = b.converged & (d < settings.success_distance_sq)
    return out


def _parallel_rows(kind, P, S, tP, tS, settings, jobs, progress):
    n = len(P)
    if jobs <= 1 or n < 2:
        rows = []
        for i in range(n):
            rows.append(reach_rows(kind, P, S, [i], tP, tS, settings)[0])
            if progress:
                progress(i + 1, n)
        return np.array(rows).reshape(n, len(tP))
    chunks = np.array_split(np.arange(n), min(n, 4 * jobs))
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(lambda c: reach_rows(kind, P, S, c, tP, tS, settings), chunks))
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True, eq=False)
class ReachabilityGraph:
    """Directed graph; edge ``i -> j`` when tracking from pair ``i`` solves problem ``j``.

    The adjacency is stored as a packed bit matrix.
    """

    nodes: tuple
    bits: np.ndarray
    settings: TrackSettings = DEFAULT_SETTINGS

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def kind(self) -> Kind:
        return self.nodes[0].kind

    @property
    def adjacency(self) -> np.ndarray:
        return np.unpackbits(self.bits, axis=1, count=self.n).astype(bool)

    def out_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @classmethod
    def from_adjacency(cls, nodes, adjacency, settings=DEFAULT_SETTINGS) -> "ReachabilityGraph":
        A = np.array(adjacency, dtype=bool)
        n = len(nodes)
        if A.shape != (n, n):
            raise ValueError("adjacency must be n x n")
        np.fill_diagonal(A, True)
        return cls(tuple(nodes), np.packbits(A, axis=1), settings)


def build_graph(pairs: Sequence[PsPair], settings: TrackSettings | None = None, jobs: int = 1,
                progress: Callable | None = None) -> ReachabilityGraph:
    """Track from every pair to every other pair; self-loops are added without tracking."""
    if len(pairs) == 0:
        raise ValueError("need at least one pair")
    cfg = settings or DEFAULT_SETTINGS
    kind, P, S = _stack(pairs)
    if any(p.kind is not kind for p in pairs):
        raise ValueError("mixed kinds")
    n = len(pairs)
    if n == 1:
        return ReachabilityGraph.from_adjacency(pairs, np.ones((1, 1), bool), cfg)
    A = _parallel_rows(kind, P, S, P, S, cfg, jobs, progress)
    return ReachabilityGraph.from_adjacency(pairs, A, cfg)


@dataclass(frozen=True, eq=False)
class AnchorSet:
    kind: Kind
    pairs: tuple
    coverage: float
    source: str = ""
    settings_hash: str = "0" * 16
    indices: tuple = field(default=())

    def __len__(self):
        return len(self.pairs)

    @property
    def problems(self) -> np.ndarray:
        return np.array([p.problem for p in self.pairs]).reshape(-1, self.kind.problem_dim)

    @property
    def solutions(self) -> np.ndarray:
        return np.array([p.solution for p in self.pairs]).reshape(-1, self.kind.n_unknowns)

    def prefix(self, k: int, coverage: float) -> "AnchorSet":
        return AnchorSet(self.kind, self.pairs[:k], coverage, self.source, self.settings_hash,
                         self.indices[:k])


def greedy_order(adjacency: np.ndarray, target_fraction: float = 1.0):
    """Greedy dominating-set order. Returns ``(indices, coverage_after_each)``."""
    A = np.asarray(adjacency, dtype=bool).copy()
    n = len(A)
    np.fill_diagonal(A, True)
    covered = np.zeros(n, dtype=bool)
    gains = A.sum(axis=1).astype(np.int64)
    order, cov = [], []
    need = int(np.ceil(target_fraction * n - 1e-9))
    while covered.sum() < need:
        j = int(np.argmax(gains))  # lowest index wins ties
        if gains[j] <= 0:
            break
        new = A[j] & ~covered
        covered |= new
        gains -= A[:, new].sum(axis=1)
        order.append(j)
        cov.append(covered.sum() / n)
    return order, cov


def greedy_cover(graph: ReachabilityGraph, target_fraction: float, source: str = "") -> AnchorSet:
    """Pick nodes covering the most uncovered nodes until ``target_fraction`` is reached."""
    if not 0 < target_fraction <= 1:
        raise ValueError("target_fraction must lie in (0, 1]")
    order, cov = greedy_order(graph.adjacency, target_fraction)
    h = settings_hash(graph.settings)
    return AnchorSet(graph.kind, tuple(graph.nodes[i] for i in order), cov[-1] if cov else 0.0,
                     source, h, tuple(order))


@dataclass(frozen=True, eq=False)
class CoverageResult:
    fraction: float
    labels: np.ndarray  # (n_test, n_anchors) bool

    def best_anchor(self) -> np.ndarray:
        """First covering anchor per test pair, -1 when none."""
        first = np.argmax(self.labels, axis=1) if self.labels.shape[1] else np.zeros(len(self.labels), int)
        return np.where(self.labels.any(axis=1), first, -1)


def coverage(anchor_set: AnchorSet, test_pairs: Sequence[PsPair], settings: TrackSettings | None = None,
             jobs: int = 1, progress: Callable | None = None) -> CoverageResult:
    """Track from every anchor to every test pair; a pair is covered if any anchor reaches it."""
    cfg = settings or DEFAULT_SETTINGS
    n = len(test_pairs)
    if len(anchor_set) == 0 or n == 0:
        return CoverageResult(0.0, np.zeros((n, len(anchor_set)), dtype=bool))
    _, tP, tS = _stack(test_pairs)
    aP, aS = anchor_set.problems, anchor_set.solutions
    L = _parallel_rows(anchor_set.kind, aP, aS, tP, tS, cfg, jobs, progress).T.copy()
    return CoverageResult(float(L.any(axis=1).mean()), L)
