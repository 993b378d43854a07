"""One-vs-all linear SVM and the evaluation metrics (mAcc, AP/mAP).

Each binary problem minimizes ``0.5*||w||^2 + C * sum(max(0, 1 - y(w.x + b)))``
with an unregularized bias.  It is solved in the dual by sequential minimal
optimization over a precomputed linear Gram matrix, choosing working pairs
with second-order information.  Pair selection is a deterministic function
of the data, so repeated runs give identical models.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_TAU = 1e-12


@dataclass(frozen=True)
class SvmTrainOpts:
    C: float = 100.0
    max_epochs: int = 1000
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.max_epochs < 1 or not self.tol > 0:
            raise ValueError("max_epochs and tol must be positive")


@dataclass(frozen=True, eq=False)
class LinearOvaModel:
    class_labels: tuple[str, ...]
    weights: np.ndarray  # (classes, dim)
    biases: np.ndarray   # (classes,)

    def to_json(self, config_digest: str = "") -> dict:
        return {
            "labels": list(self.class_labels),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "config_digest": config_digest,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LinearOvaModel":
        return cls(
            tuple(doc["labels"]),
            np.asarray(doc["weights"], dtype=np.float64),
            np.asarray(doc["biases"], dtype=np.float64),
        )


def save_model(model: LinearOvaModel, path, config_digest: str = "") -> None:
    Path(path).write_text(json.dumps(model.to_json(config_digest)) + "\n", encoding="utf-8")


def load_model(path) -> LinearOvaModel:
    return LinearOvaModel.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def svm_objective(w, b, X, y, C) -> float:
    margins = 1.0 - y * (X @ w + b)
    return float(0.5 * w @ w + C * np.maximum(margins, 0.0).sum())


def _bias(alpha, G, y, C) -> float:
    """Bias from the free support vectors, or the midpoint of its feasible range."""
    pos = y > 0
    yg = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return -float(yg[free].mean())
    upper_set = np.where(alpha >= C, ~pos, pos)
    lower_set = ~upper_set
    ub = float(yg[upper_set].min()) if upper_set.any() else np.inf
    lb = float(yg[lower_set].max()) if lower_set.any() else -np.inf
    if np.isfinite(ub) and np.isfinite(lb):
        return -0.5 * (ub + lb)
    return -(ub if np.isfinite(ub) else lb)


def _duality_gap(alpha, G, y, C) -> tuple[float, float]:
    """``(primal - dual, primal)`` at the current iterate.

    ``G = Q alpha - 1`` gives ``y_i w.x_i = G_i + 1`` and ``||w||^2 = alpha.(G + 1)``.
    """
    margin = G + 1.0
    wsq = float(alpha @ margin)
    b = _bias(alpha, G, y, C)
    primal = 0.5 * wsq + C * float(np.maximum(0.0, 1.0 - margin - y * b).sum())
    dual = float(alpha.sum()) - 0.5 * wsq
    return primal - dual, primal


def _smo(gram: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int):
    """Dual SMO for a binary problem; returns ``(alpha, b)``.

    Stops once the primal-dual gap falls below ``tol`` relative to the primal
    objective, or when no pair violates the optimality conditions.
    """
    n = y.shape[0]
    Q = gram * np.outer(y, y)
    QD = np.diag(gram).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    pos = y > 0

    for _ in range(max_iter):
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = np.where(pos, ~at_upper, ~at_lower)
        low = np.where(pos, ~at_lower, ~at_upper)
        minus_yg = -y * G
        if not up.any() or not low.any():
            break
        cand = np.where(up, minus_yg, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        gmin = np.min(np.where(low, minus_yg, np.inf))
        if gmax - gmin < _TAU:
            break
        gap, primal = _duality_gap(alpha, G, y, C)
        if gap <= tol * abs(primal):
            break
        grad_diff = gmax - minus_yg
        quad = QD[i] + QD - 2.0 * y[i] * y * Q[i]
        quad = np.where(quad > 0, quad, _TAU)
        score = np.where(low & (grad_diff > 0), -(grad_diff ** 2) / quad, np.inf)
        j = int(np.argmin(score))
        if not np.isfinite(score[j]):
            break

        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            q = QD[i] + QD[j] + 2.0 * Q[i, j]
            delta = (-G[i] - G[j]) / (q if q > 0 else _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            q = QD[i] + QD[j] - 2.0 * Q[i, j]
            delta = (G[i] - G[j]) / (q if q > 0 else _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        G += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        alpha[i], alpha[j] = ni, nj

    return alpha, _bias(alpha, G, y, C)


def train_binary(X: np.ndarray, y: np.ndarray, opts: SvmTrainOpts, gram: np.ndarray | None = None):
    """Binary SVM with labels in {-1, +1}; returns ``(w, b)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if gram is None:
        gram = X @ X.T
    alpha, b = _smo(gram, y, opts.C, opts.tol, opts.max_epochs * X.shape[0])
    w = (alpha * y) @ X
    return w, b


def svm_train_ova(features, labels: Sequence[str], opts: SvmTrainOpts | None = None,
                  label_order: Sequence[str] | None = None, threads: int = 1) -> LinearOvaModel:
    """One binary classifier per label (label vs the rest)."""
    opts = opts or SvmTrainOpts()
    X = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ValueError("features must be (n, dim) with one label per row")
    if not np.isfinite(X).all():
        raise ValueError("non-finite feature values")
    present = set(labels)
    if label_order is None:
        classes = sorted(present)
    else:
        classes = [c for c in label_order if c in present]
    if len(classes) < 2:
        raise ValueError("need at least two distinct labels")
    gram = X @ X.T
    arr = np.asarray(labels, dtype=object)

    def solve(c):
        return train_binary(X, np.where(arr == c, 1.0, -1.0), opts, gram)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(solve, classes))
    else:
        results = [solve(c) for c in classes]
    return LinearOvaModel(
        tuple(classes),
        np.stack([w for w, _ in results]),
        np.array([b for _, b in results]),
    )


def predict_scores(model: LinearOvaModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.weights.shape[1]:
        raise ValueError(f"expected dimension {model.weights.shape[1]}, got {x.shape[-1]}")
    return x @ model.weights.T + model.biases


def predict(model: LinearOvaModel, features) -> list[str]:
    """Arg-max label per row; ties go to the earlier label."""
    scores = np.atleast_2d(predict_scores(model, features))
    return [model.class_labels[i] for i in np.argmax(scores, axis=1)]


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    aggregate: float
    per_class: list[tuple[str, float]]
    config_digest: str = ""
    folds: list["EvalReport"] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = {
            "protocol": self.protocol,
            "aggregate": self.aggregate,
            "per_class": [{"label": lab, "value": val} for lab, val in self.per_class],
            "config_digest": self.config_digest,
        }
        if self.folds:
            doc["folds"] = [f.to_json() for f in self.folds]
        return doc


def mean_accuracy(predictions: Sequence[str], truths: Sequence[str],
                  label_set: Sequence[str], protocol: str = "split") -> EvalReport:
    """Class-balanced accuracy; classes absent from ``truths`` are skipped."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        raise ValueError("empty evaluation set")
    unknown = set(truths) - set(label_set)
    if unknown:
        raise ValueError(f"truth labels outside label set: {sorted(unknown)}")
    per_class = []
    for label in label_set:
        idx = [i for i, t in enumerate(truths) if t == label]
        if idx:
            correct = sum(predictions[i] == label for i in idx)
            per_class.append((label, correct / len(idx)))
    aggregate = float(np.mean([v for _, v in per_class]))
    return EvalReport(protocol, aggregate, per_class)


def average_precision(scores, relevant) -> float:
    """AP of one ranking: stable descending sort, ties keep input order."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    P = int(relevant.sum())
    if P == 0:
        raise ValueError("no positives")
    order = np.argsort(-scores, kind="stable")
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, P + 1) / ranks).sum() / P)


def mean_average_precision(scores, truths, label_set: Sequence[str],
                           protocol: str = "split") -> EvalReport:
    """mAP over classes.

    ``scores`` is (videos, classes) aligned with ``label_set``; each truth is
    a label or a collection of labels.  Classes without positives are
    excluded with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth_sets = [{t} if isinstance(t, str) else set(t) for t in truths]
    if scores.shape != (len(truth_sets), len(label_set)):
        raise ValueError("scores must be (videos, classes)")
    per_class = []
    for c, label in enumerate(label_set):
        relevant = np.array([label in ts for ts in truth_sets])
        if not relevant.any():
            warnings.warn(f"class {label!r} has no positives; excluded from mAP")
            continue
        per_class.append((label, average_precision(scores[:, c], relevant)))
    if not per_class:
        raise ValueError("no class has positives")
    aggregate = float(np.mean([v for _, v in per_class]))
    return EvalReport(protocol, aggregate, per_class)
