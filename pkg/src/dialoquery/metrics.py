"""Evaluation: greedy decoding, query accuracy, partial-query rate, reward.

Dialogs are prepared once into (context, supervision) pairs at a chosen
query position; every metric then works off greedy decodes against those
pairs, so training and the CLI report numbers from one code path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

from .dialog import Dialog, DialogContext, context_at, heuristic_position, merge_dialog_spans, subsequent_entities
from .kb import KnowledgeBase, Query, canonicalize, parse_query
from .policy import PolicyParameters, beam_search
from .position import PositionModel, predict_position
from .reward import reward

POSITION_SOURCES = ("gold", "heuristic", "predicted")


@dataclass(frozen=True)
class PreparedDialog:
    """One dialog fixed at a query position, ready to score."""

    dialog: Dialog
    position: int
    context: DialogContext
    supervision: frozenset[str]

    @property
    def gold_query(self) -> Query | None:
        return self.dialog.gold_query


def resolve_position(
    dialog: Dialog,
    kb: KnowledgeBase,
    source: str,
    position_model: PositionModel | None = None,
) -> int:
    if source == "gold":
        if dialog.gold_position is None:
            raise ValueError("dialog has no gold position")
        return dialog.gold_position
    if source == "heuristic":
        return dialog.heuristic_position or heuristic_position(dialog, kb)
    if source == "predicted":
        if position_model is None:
            raise ValueError("predicted positions need a position model")
        return predict_position(position_model, dialog, kb)
    raise ValueError(f"position source must be one of {POSITION_SOURCES}")


def prepare_dialogs(
    dialogs: Sequence[Dialog],
    kb: KnowledgeBase,
    position_source: str = "heuristic",
    position_model: PositionModel | None = None,
) -> list[PreparedDialog]:
    """Fix each dialog's query position and collect its supervision set.

    Multiword KB values in the utterances are merged to single tokens here
    so the decoder can copy them.
    """
    out = []
    for d in dialogs:
        merged = merge_dialog_spans(d, kb)
        pos = resolve_position(merged, kb, position_source, position_model)
        out.append(
            PreparedDialog(
                dialog=merged,
                position=pos,
                context=context_at(merged, pos),
                supervision=subsequent_entities(merged, pos, kb),
            )
        )
    return out


def greedy_query(params: PolicyParameters, context: DialogContext) -> Query:
    """The single most likely query under the policy."""
    tokens, _ = beam_search(params, context, 1)[0]
    return canonicalize(parse_query(tokens))


@dataclass(frozen=True)
class MetricsReport:
    query_accuracy: float | None
    piq_ratio: float | None
    total_reward: float
    mean_reward: float
    n_dialogs: int
    n_scored: int
    n_with_gold: int

    def to_json(self) -> dict:
        return {
            "query_accuracy": self.query_accuracy,
            "piq_ratio": self.piq_ratio,
            "total_reward": self.total_reward,
            "mean_reward": self.mean_reward,
            "n_dialogs": self.n_dialogs,
            "n_scored": self.n_scored,
            "n_with_gold": self.n_with_gold,
        }

    def rows(self) -> list[tuple[str, float]]:
        out = []
        if self.query_accuracy is not None:
            out.append(("query_accuracy", self.query_accuracy))
        if self.piq_ratio is not None:
            out.append(("piq_ratio", self.piq_ratio))
        out.append(("total_reward", self.total_reward))
        out.append(("mean_reward", self.mean_reward))
        return out


def _is_partial(decoded: Query, gold: Query) -> bool:
    # Proper nonempty subset: the decode dropped some constraints but kept
    # at least one. A zero-clause decode is a miss, not a partial query.
    return bool(decoded.clauses) and set(decoded.clauses) < set(gold.clauses)


def _require_gold(items: Sequence[PreparedDialog], what: str) -> None:
    if not items:
        raise ValueError(f"{what} needs a non-empty corpus")
    for i, item in enumerate(items):
        if item.gold_query is None:
            raise ValueError(f"{what} needs gold queries; dialog {i} has none")


def query_accuracy(
    params: PolicyParameters, items: Sequence[PreparedDialog], kb: KnowledgeBase
) -> float:
    """Fraction of dialogs whose greedy decode equals the gold query."""
    _require_gold(items, "query accuracy")
    hits = sum(
        greedy_query(params, it.context) == canonicalize(it.gold_query) for it in items
    )
    return hits / len(items)


def piq_ratio(
    params: PolicyParameters, items: Sequence[PreparedDialog], kb: KnowledgeBase
) -> float:
    """Fraction of dialogs whose greedy decode is a partial intent query."""
    _require_gold(items, "partial-query ratio")
    partial = sum(
        _is_partial(greedy_query(params, it.context), canonicalize(it.gold_query))
        for it in items
    )
    return partial / len(items)


def total_reward(
    params: PolicyParameters, items: Sequence[PreparedDialog], kb: KnowledgeBase
) -> float:
    """Summed reward of the greedy decodes over dialogs with supervision."""
    return sum(
        reward(greedy_query(params, it.context), it.supervision, kb)
        for it in items
        if it.supervision
    )


def evaluate(
    params: PolicyParameters, items: Sequence[PreparedDialog], kb: KnowledgeBase
) -> MetricsReport:
    """Greedy-decode every prepared dialog and aggregate the metrics.

    Accuracy and the partial-query ratio cover dialogs with gold queries;
    the reward totals cover every dialog whose supervision set is non-empty.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    hits = 0
    partial = 0
    n_gold = 0
    reward_total = 0.0
    n_scored = 0
    for item in items:
        decoded = greedy_query(params, item.context)
        if item.supervision:
            reward_total += reward(decoded, item.supervision, kb)
            n_scored += 1
        gold = item.gold_query
        if gold is not None:
            n_gold += 1
            hits += decoded == canonicalize(gold)
            partial += _is_partial(decoded, gold)
    return MetricsReport(
        query_accuracy=(hits / n_gold) if n_gold else None,
        piq_ratio=(partial / n_gold) if n_gold else None,
        total_reward=reward_total,
        mean_reward=(reward_total / n_scored) if n_scored else 0.0,
        n_dialogs=len(items),
        n_scored=n_scored,
        n_with_gold=n_gold,
    )


def write_metrics_csv(path, rows: Sequence[tuple[int, str, str, float]]) -> None:
    """Write (epoch, split, metric, value) rows in a stable format."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in rows:
            writer.writerow([epoch, split, metric, repr(float(value))])
