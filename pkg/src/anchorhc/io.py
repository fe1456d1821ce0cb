"""Plain-text file formats.

Every format starts with a one-line header naming the record type. Lines
beginning with ``#`` carry metadata (seed, settings hash, provenance) and are
ignored by the structural parser but returned in ``meta``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .problem import Kind, PsPair
from .scene import CameraPose, SceneModel

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class FormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(config) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return {k: getattr(o, k) for k in o.__dataclass_fields__}
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def settings_hash(config) -> str:
    """16 hex digits of FNV-1a over the canonical JSON of ``config``."""
    return f"{fnv1a64(canonical_json(config).encode('utf-8')):016x}"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _floats(values) -> str:
    return " ".join(fmt(v) for v in np.asarray(values, dtype=np.float64).reshape(-1))


def _meta_lines(meta: dict | None) -> list[str]:
    return [f"# {k}={v}" for k, v in (meta or {}).items()]


def _write(path, lines: Iterable[str]):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line)
            f.write("\n")
    os.replace(tmp, path)


class _Reader:
    """Line cursor that skips blanks and collects ``# key=value`` metadata."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, encoding="utf-8") as f:
            raw = f.read().splitlines()
        self.lines = []
        self.meta: dict[str, str] = {}
        for i, line in enumerate(raw, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    self.meta[k.strip()] = v.strip()
                continue
            self.lines.append((i, s.split()))
        self.pos = 0

    def error(self, msg, lineno=None):
        if lineno is None:
            lineno = self.lines[min(self.pos, len(self.lines) - 1)][0] if self.lines else 0
        return FormatError(self.path, lineno, msg)

    def next(self, tag: str | None = None):
        if self.pos >= len(self.lines):
            raise self.error(f"unexpected end of file, wanted {tag or 'a line'}")
        lineno, toks = self.lines[self.pos]
        self.pos += 1
        if tag is not None and toks[0] != tag:
            raise self.error(f"expected {tag!r}, got {toks[0]!r}", lineno)
        return lineno, toks

    def peek(self):
        return self.lines[self.pos][1] if self.pos < len(self.lines) else None

    def floats(self, tag, count=None):
        lineno, toks = self.next(tag)
        try:
            vals = np.array([float(t) for t in toks[1:]])
        except ValueError as e:
            raise self.error(str(e), lineno) from None
        if count is not None and vals.size != count:
            raise self.error(f"{tag} line needs {count} numbers, got {vals.size}", lineno)
        return vals

    def done(self):
        if self.pos != len(self.lines):
            raise self.error("trailing content")


def _int(r: _Reader, tok, lineno):
    try:
        return int(tok)
    except ValueError:
        raise r.error(f"expected an integer, got {tok!r}", lineno) from None


# ---------------------------------------------------------------------------
# scenes


def write_scene(path, scene: SceneModel, meta: dict | None = None):
    lines = [f"SCENE {scene.n_points} {scene.n_cameras}"] + _meta_lines(meta)
    lines += [f"P {_floats(X)}" for X in scene.points]
    lines += [f"C {_floats(c.rotation)} {_floats(c.translation)}" for c in scene.cameras]
    lines += [f"V {i} {c}" for i, c in sorted(scene.visibility)]
    _write(path, lines)


def read_scene(path) -> SceneModel:
    r = _Reader(path)
    lineno, toks = r.next("SCENE")
    if len(toks) != 3:
        raise r.error("header is SCENE <n_points> <n_cameras>", lineno)
    n_pts, n_cams = _int(r, toks[1], lineno), _int(r, toks[2], lineno)
    pts = [r.floats("P", 3) for _ in range(n_pts)]
    cams = []
    for _ in range(n_cams):
        v = r.floats("C", 12)
        try:
            cams.append(CameraPose(v[:9].reshape(3, 3), v[9:]))
        except ValueError as e:
            raise r.error(str(e)) from None
    vis = set()
    while r.peek() is not None and r.peek()[0] == "V":
        lineno, toks = r.next("V")
        vis.add((_int(r, toks[1], lineno), _int(r, toks[2], lineno)))
    r.done()
    try:
        return SceneModel(np.array(pts).reshape(-1, 3), tuple(cams), frozenset(vis))
    except ValueError as e:
        raise FormatError(str(path), 0, str(e)) from None


# ---------------------------------------------------------------------------
# p-s pairs and anchors


def _write_pairs(path, tag, kind, pairs, settings, meta):
    kind = Kind.parse(kind)
    lines = [f"{tag} {kind.value} {len(pairs)} {settings}"] + _meta_lines(meta)
    for pr in pairs:
        if pr.kind is not kind:
            raise ValueError("mixed kinds in one file")
        lines.append(f"P {_floats(pr.problem)}")
        lines.append(f"S {_floats(pr.solution)}")
    _write(path, lines)


def _read_pairs(path, tag):
    r = _Reader(path)
    lineno, toks = r.next(tag)
    if len(toks) != 4:
        raise r.error(f"header is {tag} <kind> <count> <settings-hash>", lineno)
    try:
        kind = Kind.parse(toks[1])
    except ValueError as e:
        raise r.error(str(e), lineno) from None
    n = _int(r, toks[2], lineno)
    pairs = []
    for _ in range(n):
        p = r.floats("P", kind.problem_dim)
        s = r.floats("S", kind.n_unknowns)
        pairs.append(PsPair(kind, p, s))
    r.done()
    return kind, pairs, toks[3], r.meta


@dataclass
class PairsFile:
    kind: Kind
    pairs: list
    settings_hash: str = "0" * 16
    meta: dict = field(default_factory=dict)


def write_pairs(path, kind, pairs, settings: str = "0" * 16, meta: dict | None = None):
    _write_pairs(path, "PAIRS", kind, pairs, settings, meta)


def read_pairs(path) -> PairsFile:
    return PairsFile(*_read_pairs(path, "PAIRS"))


def write_anchors(path, anchor_set, meta: dict | None = None):
    m = {"coverage": fmt(anchor_set.coverage), "source": anchor_set.source}
    m.update(meta or {})
    _write_pairs(path, "ANCHORS", anchor_set.kind, anchor_set.pairs, anchor_set.settings_hash, m)


def read_anchors(path):
    from .anchors import AnchorSet

    kind, pairs, h, meta = _read_pairs(path, "ANCHORS")
    cov = float(meta.get("coverage", "nan"))
    idx = meta.get("indices", "")
    indices = tuple(int(t) for t in idx.split(",") if t) if idx else ()
    return AnchorSet(kind, tuple(pairs), cov, meta.get("source", ""), h, indices), meta


# ---------------------------------------------------------------------------
# label matrices (which anchors reach which problems)


def write_labels(path, labels: np.ndarray, meta: dict | None = None):
    L = np.asarray(labels, dtype=bool)
    lines = [f"LABELS {L.shape[0]} {L.shape[1]}"] + _meta_lines(meta)
    lines += ["".join("1" if b else "0" for b in row) or "-" for row in L]
    _write(path, lines)


def read_labels(path) -> tuple[np.ndarray, dict]:
    r = _Reader(path)
    lineno, toks = r.next("LABELS")
    n, m = _int(r, toks[1], lineno), _int(r, toks[2], lineno)
    L = np.zeros((n, m), dtype=bool)
    for i in range(n):
        lineno, toks = r.next()
        row = toks[0]
        if m == 0 and row == "-":
            continue
        if len(row) != m or set(row) - {"0", "1"}:
            raise r.error(f"label row needs {m} binary digits", lineno)
        L[i] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("1")
    r.done()
    return L, r.meta


# ---------------------------------------------------------------------------
# classifier weights


def write_mlp(path, model, meta: dict | None = None):
    lines = [f"MLP {model.kind.value} {model.n_anchors} {len(model.weights)}"] + _meta_lines(meta)
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"L {W.shape[0]} {W.shape[1]}")
        lines += [f"W {_floats(row)}" for row in W]
        lines.append(f"B {_floats(b)}")
        if k < len(model.slopes):
            lines.append(f"A {_floats(model.slopes[k])}")
    _write(path, lines)


def read_mlp(path):
    from .selector import MlpModel

    r = _Reader(path)
    lineno, toks = r.next("MLP")
    if len(toks) != 4:
        raise r.error("header is MLP <kind> <n_anchors> <layer-count>", lineno)
    kind = Kind.parse(toks[1])
    n_anchors = _int(r, toks[2], lineno)
    n_layers = _int(r, toks[3], lineno)
    Ws, bs, As = [], [], []
    for k in range(n_layers):
        lineno, toks = r.next("L")
        rows, cols = _int(r, toks[1], lineno), _int(r, toks[2], lineno)
        Ws.append(np.stack([r.floats("W", cols) for _ in range(rows)]) if rows else np.zeros((0, cols)))
        bs.append(r.floats("B", rows))
        if k < n_layers - 1:
            As.append(r.floats("A", rows))
    r.done()
    try:
        return MlpModel(kind, n_anchors, Ws, bs, As)
    except ValueError as e:
        raise FormatError(str(path), 0, str(e)) from None


# ---------------------------------------------------------------------------
# correspondences


def write_matches(path, match_set, meta: dict | None = None):
    kind = match_set.kind
    x = match_set.points  # (n, views, 2)
    lines = [f"MATCHES {kind.value} {len(x)}"] + _meta_lines(meta)
    lines += [_floats(row) for row in x.reshape(len(x), -1)]
    if match_set.gt_cameras is not None:
        lines.append(f"GT {len(match_set.gt_cameras)}")
        lines += [f"C {_floats(c.rotation)} {_floats(c.translation)}" for c in match_set.gt_cameras]
    _write(path, lines)


def read_matches(path):
    from .ransac import MatchSet

    r = _Reader(path)
    lineno, toks = r.next("MATCHES")
    kind = Kind.parse(toks[1])
    n = _int(r, toks[2], lineno)
    rows = []
    for _ in range(n):
        lineno, toks = r.next()
        try:
            vals = [float(t) for t in toks]
        except ValueError as e:
            raise r.error(str(e), lineno) from None
        if len(vals) != 2 * kind.n_views:
            raise r.error(f"correspondence needs {2 * kind.n_views} numbers", lineno)
        rows.append(vals)
    cams = None
    if r.peek() is not None and r.peek()[0] == "GT":
        lineno, toks = r.next("GT")
        cams = []
        for _ in range(_int(r, toks[1], lineno)):
            v = r.floats("C", 12)
            cams.append(CameraPose(v[:9].reshape(3, 3), v[9:]))
        cams = tuple(cams)
    r.done()
    pts = np.array(rows, dtype=np.float64).reshape(n, kind.n_views, 2)
    return MatchSet(kind, pts, cams)
