"""Problem kinds and problem-solution pairs.

Vector layouts are view-major throughout the package:

* problem: ``p[(view * n_points + point) * 2 + coord]``
* solution, 5pt (9): ``[lam(2..5, view1), lam(1..5, view2)]``
* solution, Scranton (12): ``[lam(2..4, view1), lam(1..4, view2),
  lam(1..4, view3), l]``

``lam(1, view1)`` is the scale gauge and is always 1, so it is never stored.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Kind(str, enum.Enum):
    FIVE_POINT = "5pt"
    SCRANTON = "scranton"

    @property
    def code(self) -> int:
        # integer tag used by the jitted kernels
        return 0 if self is Kind.FIVE_POINT else 1

    @property
    def n_points(self) -> int:
        return 5 if self is Kind.FIVE_POINT else 4

    @property
    def n_views(self) -> int:
        return 2 if self is Kind.FIVE_POINT else 3

    @property
    def problem_dim(self) -> int:
        return 2 * self.n_points * self.n_views

    @property
    def n_unknowns(self) -> int:
        return 9 if self is Kind.FIVE_POINT else 12

    @classmethod
    def parse(cls, value: "Kind | str") -> "Kind":
        if isinstance(value, Kind):
            return value
        v = str(value).strip().lower()
        if v in ("5pt", "fivepoint", "five_point", "5"):
            return cls.FIVE_POINT
        if v in ("scranton", "4pt", "4"):
            return cls.SCRANTON
        raise ValueError(f"unknown problem kind {value!r}")


@dataclass(frozen=True, eq=False)
class PsPair:
    """A problem vector together with one of its solutions."""

    kind: Kind
    problem: np.ndarray
    solution: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.problem, dtype=np.float64).reshape(-1)
        s = np.ascontiguousarray(self.solution, dtype=np.float64).reshape(-1)
        if p.size != self.kind.problem_dim:
            raise ValueError(f"{self.kind.value} problem needs {self.kind.problem_dim} entries, got {p.size}")
        if s.size != self.kind.n_unknowns:
            raise ValueError(f"{self.kind.value} solution needs {self.kind.n_unknowns} entries, got {s.size}")
        p.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "problem", p)
        object.__setattr__(self, "solution", s)

    def image_points(self) -> np.ndarray:
        """Problem reshaped to ``(n_views, n_points, 2)``."""
        return self.problem.reshape(self.kind.n_views, self.kind.n_points, 2)

    def depths(self) -> np.ndarray:
        """Full ``(n_points, n_views)`` depth table with the gauge slot filled in."""
        return depth_table(self.kind, self.solution)

    def with_solution(self, solution) -> "PsPair":
        return PsPair(self.kind, self.problem, solution)

    def with_problem(self, problem) -> "PsPair":
        return PsPair(self.kind, problem, self.solution)


def depth_table(kind: Kind, solution) -> np.ndarray:
    kind = Kind.parse(kind)
    s = np.asarray(solution)
    lam = np.empty((kind.n_points, kind.n_views), dtype=s.dtype)
    npts = kind.n_points
    lam[0, 0] = 1.0
    lam[1:, 0] = s[: npts - 1]
    off = npts - 1
    for v in range(1, kind.n_views):
        lam[:, v] = s[off: off + npts]
        off += npts
    return lam


def solution_from_depths(kind: Kind, depths, relax_offset: float = 0.0) -> np.ndarray:
    """Inverse of :func:`depth_table`; divides by ``depths[0, 0]`` to fix the gauge."""
    kind = Kind.parse(kind)
    lam = np.asarray(depths, dtype=np.float64)
    lam = lam / lam[0, 0]
    parts = [lam[1:, 0]] + [lam[:, v] for v in range(1, kind.n_views)]
    if kind is Kind.SCRANTON:
        parts.append(np.array([relax_offset]))
    return np.concatenate(parts)
