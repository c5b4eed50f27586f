"""When to fire the query: a per-turn logistic predictor.

Scanning a dialog turn by turn, the predictor scores whether the query
should be issued now; the first turn whose probability clears the decision
threshold is the predicted position, falling back to the final turn. It
trains on the heuristic labels (first system turn naming a fresh entity) or
on gold positions when those exist.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dialog import Dialog, context_at
from .explore import candidate_clauses
from .kb import KnowledgeBase
from .policy import CheckpointError

_FORMAT = "dialoquery-position/1"
LABEL_SOURCES = ("heuristic", "gold")


def feature_names(kb: KnowledgeBase) -> tuple[str, ...]:
    return ("turn_index", "new_candidate_clause", "n_constrained_fields") + tuple(
        f"mentions_{f}" for f in kb.fields
    )


def featurize_turns(dialog: Dialog, kb: KnowledgeBase, up_to: int | None = None) -> np.ndarray:
    """Feature matrix for turns 1..up_to (default: the whole dialog).

    Features: the turn index, whether the newest user utterance added a
    candidate constraint, how many fields have candidate constraints so
    far, and per-field counts of distinct values mentioned so far.
    """
    n = dialog.n_turns if up_to is None else up_to
    if not 1 <= n <= dialog.n_turns:
        raise ValueError(f"up_to {up_to} outside 1..{dialog.n_turns}")
    rows = np.zeros((n, 3 + len(kb.fields)), dtype=np.float64)
    prev_cands: frozenset = frozenset()
    for t in range(1, n + 1):
        cands = candidate_clauses(context_at(dialog, t), kb)
        by_field: dict[str, set[str]] = {}
        for f, v in cands:
            by_field.setdefault(f, set()).add(v)
        row = rows[t - 1]
        row[0] = t
        row[1] = 1.0 if cands - prev_cands else 0.0
        row[2] = len(by_field)
        for j, f in enumerate(kb.fields):
            row[3 + j] = len(by_field.get(f, ()))
        prev_cands = cands
    return rows


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class PositionModel:
    """Standardized logistic scorer plus the decision threshold."""

    fields: tuple[str, ...]
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    threshold: float

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        x = (features - self.mean) / self.std
        return _sigmoid(x @ self.weights + self.bias)

    def save(self, path) -> None:
        payload = {
            "format": _FORMAT,
            "fields": list(self.fields),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "threshold": self.threshold,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path, expected_fields: Sequence[str] | None = None) -> "PositionModel":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read position model {path}: {e}") from e
        if payload.get("format") != _FORMAT:
            raise CheckpointError(f"position model {path} has unsupported format")
        model = cls(
            fields=tuple(payload["fields"]),
            weights=np.asarray(payload["weights"], dtype=np.float64),
            bias=float(payload["bias"]),
            mean=np.asarray(payload["mean"], dtype=np.float64),
            std=np.asarray(payload["std"], dtype=np.float64),
            threshold=float(payload["threshold"]),
        )
        if expected_fields is not None and tuple(expected_fields) != model.fields:
            raise CheckpointError(f"position model {path} was trained for a different schema")
        n = 3 + len(model.fields)
        if model.weights.shape != (n,) or model.mean.shape != (n,) or model.std.shape != (n,):
            raise CheckpointError(f"position model {path} has inconsistent dimensions")
        return model


@dataclass(frozen=True)
class PositionTrainConfig:
    label_source: str = "heuristic"
    learning_rate: float = 0.5
    epochs: int = 300
    l2: float = 1e-4
    threshold: float = 0.5

    def __post_init__(self):
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning_rate must be positive and epochs at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


def _label_of(dialog: Dialog, source: str) -> int | None:
    return dialog.heuristic_position if source == "heuristic" else dialog.gold_position


def train_position(
    dialogs: Sequence[Dialog], kb: KnowledgeBase, config: PositionTrainConfig = PositionTrainConfig()
) -> PositionModel:
    """Fit the logistic scorer on turns 1..label of every labeled dialog.

    Dialogs without the configured label are skipped; having none at all is
    an error. Training is full-batch gradient descent and deterministic.
    """
    xs = []
    ys = []
    for d in dialogs:
        label = _label_of(d, config.label_source)
        if label is None:
            continue
        feats = featurize_turns(d, kb, label)
        xs.append(feats)
        y = np.zeros(label)
        y[label - 1] = 1.0
        ys.append(y)
    if not xs:
        raise ValueError(f"no dialog carries a {config.label_source} position label")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if y.min() == y.max():
        warnings.warn("position labels are degenerate (all turns identical); "
                      "the predictor will be constant", stacklevel=2)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    xn = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    m = len(y)
    for _ in range(config.epochs):
        p = _sigmoid(xn @ w + b)
        err = p - y
        grad_w = xn.T @ err / m + config.l2 * w
        grad_b = float(err.mean())
        w -= config.learning_rate * grad_w
        b -= config.learning_rate * grad_b
    return PositionModel(
        fields=kb.fields, weights=w, bias=b, mean=mean, std=std, threshold=config.threshold
    )


def predict_position(model: PositionModel, dialog: Dialog, kb: KnowledgeBase) -> int:
    """First turn whose probability clears the threshold, else the last."""
    probs = model.probabilities(featurize_turns(dialog, kb))
    above = np.nonzero(probs >= model.threshold)[0]
    return int(above[0]) + 1 if above.size else dialog.n_turns


@dataclass(frozen=True)
class PositionMetrics:
    strict_accuracy: float
    avg_turn_distance: float
    n_dialogs: int

    def to_json(self) -> dict:
        return {
            "strict_accuracy": self.strict_accuracy,
            "avg_turn_distance": self.avg_turn_distance,
            "n_dialogs": self.n_dialogs,
        }


def position_metrics(
    model: PositionModel,
    dialogs: Sequence[Dialog],
    kb: KnowledgeBase,
    label_source: str = "gold",
) -> PositionMetrics:
    """Exact-position accuracy and mean |predicted - labeled| distance."""
    if label_source not in LABEL_SOURCES:
        raise ValueError(f"label_source must be one of {LABEL_SOURCES}")
    labeled = [(d, _label_of(d, label_source)) for d in dialogs]
    labeled = [(d, q) for d, q in labeled if q is not None]
    if not labeled:
        raise ValueError(f"no dialog carries a {label_source} position label")
    hits = 0
    dist = 0.0
    for d, q in labeled:
        predicted = predict_position(model, d, kb)
        hits += predicted == q
        dist += abs(predicted - q)
    n = len(labeled)
    return PositionMetrics(hits / n, dist / n, n)
