"""Start-pair selection: an MLP over normalized problems plus nearest-anchor baselines.

The classifier has one output per anchor and a final TRASH output meaning
"no anchor is expected to reach this problem".
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .problem import Kind


class TrainingDivergenceError(ArithmeticError):
    pass


class MetricError(ValueError):
    pass


class _Trash:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "TRASH"


TRASH = _Trash()


@dataclass(eq=False)
class MlpModel:
    """Affine layers ``W x + b``; every layer but the last is followed by a per-channel PReLU."""

    kind: Kind
    n_anchors: int
    weights: list
    biases: list
    slopes: list

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        self.slopes = [np.asarray(a, dtype=np.float64).reshape(-1) for a in self.slopes]
        if not self.weights or len(self.biases) != len(self.weights) or len(self.slopes) != len(self.weights) - 1:
            raise ValueError("need one bias per layer and one slope vector per hidden layer")
        if self.weights[0].shape[1] != self.kind.problem_dim:
            raise ValueError("input width does not match the problem dimension")
        if self.weights[-1].shape[0] != self.n_anchors + 1:
            raise ValueError("output width must be n_anchors + 1")
        for k, W in enumerate(self.weights):
            if self.biases[k].shape[0] != W.shape[0]:
                raise ValueError(f"layer {k}: bias width mismatch")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width mismatch")
            if k < len(self.slopes) and self.slopes[k].shape[0] != W.shape[0]:
                raise ValueError(f"layer {k}: slope width mismatch")
        if not all(np.isfinite(a).all() for a in self.weights + self.biases + self.slopes):
            raise ValueError("non-finite parameters")

    @property
    def trash_index(self) -> int:
        return self.n_anchors

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases + self.slopes

    def copy(self) -> "MlpModel":
        return MlpModel(self.kind, self.n_anchors, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], [a.copy() for a in self.slopes])

    @classmethod
    def initialize(cls, kind, n_anchors: int, hidden: Sequence[int] = (100,) * 6, seed: int = 0,
                   slope: float = 0.25) -> "MlpModel":
        """Uniform ``+-sqrt(6 / fan_in)`` weights, zero biases, PReLU slopes at ``slope``."""
        kind = Kind.parse(kind)
        rng = np.random.default_rng(seed)
        widths = [kind.problem_dim, *hidden, n_anchors + 1]
        Ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = math.sqrt(6.0 / fan_in)
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(kind, n_anchors, Ws, bs, [np.full(h, slope) for h in hidden])


def _prelu(z, a):
    return np.where(z > 0, z, a * z)


def infer(model: MlpModel, problems) -> np.ndarray:
    """Raw scores, shape ``(n_anchors + 1,)`` for one problem or ``(n, n_anchors + 1)`` for a stack."""
    x = np.asarray(problems, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != model.weights[0].shape[1]:
        raise ValueError(f"input width {X.shape[1]} != {model.weights[0].shape[1]}")
    h = X
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W.T + b
        if k < last:
            h = _prelu(h, model.slopes[k])
    return h[0] if single else h


def rank_scores(scores, m: int = 1):
    """TRASH, or the ``m`` best anchor indices (ties go to the lower index)."""
    s = np.asarray(scores, dtype=np.float64)
    n_anchors = s.shape[0] - 1
    if not 1 <= m <= max(n_anchors, 1):
        raise ValueError("m must lie in [1, n_anchors]")
    anchor_scores = s[:n_anchors]
    if n_anchors == 0 or s[n_anchors] > anchor_scores.max():
        return TRASH
    order = np.argsort(-anchor_scores, kind="stable")
    return tuple(int(i) for i in order[:m])


def select(model: MlpModel, normalized_problem, m: int = 1):
    return rank_scores(infer(model, normalized_problem), m)


def select_many(model: MlpModel, problems, m: int = 1) -> np.ndarray:
    """Batch selection: ``(n, m)`` anchor indices, rows of -1 where TRASH wins."""
    S = infer(model, np.asarray(problems).reshape(-1, model.weights[0].shape[1]))
    A = S[:, :-1]
    order = np.argsort(-A, axis=1, kind="stable")[:, :m]
    trash = S[:, -1] > A.max(axis=1)
    order[trash] = -1
    return order


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    lr_decay: float = 0.3
    decay_epochs: tuple = (50, 70)
    batch_size: int = 64
    epochs: int = 80
    dropout: float = 0.5
    hidden: tuple = (100,) * 6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** sum(epoch >= e for e in self.decay_epochs)


def loss_and_grads(model: MlpModel, X, y, keep_mask=None, keep_prob: float = 1.0):
    """Mean softmax cross-entropy and its gradients (same order as ``model.parameters()``).

    ``keep_mask`` is the inverted-dropout mask applied to the input of the final layer.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(X)
    L = len(model.weights)
    acts = [X]  # inputs to each affine layer
    pre = []
    h = X
    for k in range(L - 1):
        z = h @ model.weights[k].T + model.biases[k]
        pre.append(z)
        h = _prelu(z, model.slopes[k])
        acts.append(h)
    if keep_mask is not None:
        h = h * keep_mask / keep_prob
        acts[-1] = h
    logits = h @ model.weights[-1].T + model.biases[-1]
    logits = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    Z = ex.sum(axis=1, keepdims=True)
    P = ex / Z
    loss = float(np.mean(np.log(Z[:, 0]) - logits[np.arange(n), y]))
    g = P
    g[np.arange(n), y] -= 1.0
    g /= n
    gW = [None] * L
    gb = [None] * L
    ga = [None] * (L - 1)
    gW[-1] = g.T @ acts[-1]
    gb[-1] = g.sum(axis=0)
    gh = g @ model.weights[-1]
    if keep_mask is not None:
        gh = gh * keep_mask / keep_prob
    for k in range(L - 2, -1, -1):
        z = pre[k]
        neg = z <= 0
        ga[k] = (gh * np.where(neg, z, 0.0)).sum(axis=0)
        gz = np.where(neg, model.slopes[k] * gh, gh)
        gW[k] = gz.T @ acts[k]
        gb[k] = gz.sum(axis=0)
        if k:
            gh = gz @ model.weights[k]
    return loss, gW + gb + ga


def expand_labels(problems, label_sets, n_anchors: int):
    """One ``(problem, label)`` row per label; empty label sets become TRASH."""
    X, y = [], []
    for p, labels in zip(problems, label_sets):
        labs = sorted(set(int(l) for l in labels)) or [n_anchors]
        for l in labs:
            if not 0 <= l <= n_anchors:
                raise ValueError(f"label {l} outside [0, {n_anchors}]")
            X.append(p)
            y.append(l)
    return np.array(X, dtype=np.float64), np.array(y, dtype=np.int64)


def label_sets_from_matrix(labels: np.ndarray) -> list[list[int]]:
    return [list(np.flatnonzero(row)) for row in np.asarray(labels, dtype=bool)]


def label_hit_rate(model: MlpModel, problems, labels: np.ndarray) -> float:
    """Fraction of problems whose top-1 anchor is one that reaches them (TRASH counts as a miss)."""
    L = np.asarray(labels, dtype=bool)
    if len(L) == 0:
        return 0.0
    sel = select_many(model, problems, 1)[:, 0]
    hit = (sel >= 0) & L[np.arange(len(L)), np.maximum(sel, 0)]
    return float(hit.mean())


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_hit: list = field(default_factory=list)
    best_epoch: int = -1


def train(problems, label_sets, n_anchors: int, kind, config: TrainConfig | None = None,
          val_problems=None, val_labels=None, history: TrainHistory | None = None) -> MlpModel:
    """Plain SGD on softmax cross-entropy; keeps the epoch with the best validation label-hit rate.

    Without validation data the final epoch is returned.
    """
    cfg = config or TrainConfig()
    kind = Kind.parse(kind)
    X, y = expand_labels(problems, label_sets, n_anchors)
    if len(X) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel.initialize(kind, n_anchors, cfg.hidden, seed=int(rng.integers(2**63 - 1)))
    keep = 1.0 - cfg.dropout
    hist = history if history is not None else TrainHistory()
    best, best_hit = None, -1.0
    has_val = val_problems is not None and val_labels is not None and len(val_problems) > 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            mask = None
            if cfg.dropout > 0:
                mask = (rng.random((len(idx), model.weights[-1].shape[1])) < keep).astype(np.float64)
            loss, grads = loss_and_grads(model, X[idx], y[idx], mask, keep)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss in epoch {epoch}")
            total += loss * len(idx)
            for prm, g in zip(model.parameters(), grads):
                prm -= lr * g
        hist.loss.append(total / len(X))
        if has_val:
            hit = label_hit_rate(model, val_problems, val_labels)
            hist.val_hit.append(hit)
            if hit > best_hit:
                best_hit, best = hit, model.copy()
                hist.best_epoch = epoch
    if best is None:
        hist.best_epoch = cfg.epochs - 1
        return model
    return best


# ---------------------------------------------------------------------------
# nearest-anchor baselines


def estimate_covariance(problems, ridge: float = 1e-9) -> np.ndarray:
    """Sample covariance plus ``ridge * mean variance`` on the diagonal.

    Normalized problems have coordinates pinned to zero, so the raw sample
    covariance is singular; the ridge keeps it positive definite.
    """
    X = np.asarray(problems, dtype=np.float64)
    C = np.cov(X, rowvar=False)
    scale = max(float(np.trace(C)) / C.shape[0], 1e-300)
    return C + ridge * scale * np.eye(C.shape[0])


def nearest_anchor(problem, anchor_problems, metric: str = "euclidean", covariance=None) -> int:
    return int(nearest_anchors(np.asarray(problem).reshape(1, -1), anchor_problems, metric, covariance)[0])


def nearest_anchors(problems, anchor_problems, metric: str = "euclidean", covariance=None) -> np.ndarray:
    """Index of the closest anchor for each problem; ties go to the lower index."""
    X = np.asarray(problems, dtype=np.float64)
    A = np.asarray(anchor_problems, dtype=np.float64)
    if len(A) == 0:
        raise ValueError("no anchors")
    metric = metric.lower()
    if metric == "euclidean":
        Xt, At = X, A
    elif metric == "mahalanobis":
        if covariance is None:
            raise MetricError("Mahalanobis distance needs a covariance")
        C = np.asarray(covariance, dtype=np.float64)
        if C.shape != (X.shape[1], X.shape[1]) or not np.allclose(C, C.T, rtol=1e-12, atol=1e-15):
            raise MetricError("covariance must be symmetric with matching size")
        try:
            Lc = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise MetricError("covariance is not positive definite") from None
        # whiten: d^2 = |L^{-1}(x - a)|^2
        Xt = np.linalg.solve(Lc, X.T).T
        At = np.linalg.solve(Lc, A.T).T
    else:
        raise ValueError(f"unknown metric {metric!r}")
    out = np.empty(len(Xt), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, At.size))
    for s in range(0, len(Xt), step):
        # explicit differences rather than the expanded quadratic, so exact ties stay exact
        d = ((Xt[s:s + step, None, :] - At[None, :, :]) ** 2).sum(axis=2)
        out[s:s + step] = np.argmin(d, axis=1)
    return out


def with_hidden(config: TrainConfig, width: int, depth: int = 6) -> TrainConfig:
    return replace(config, hidden=(width,) * depth)
