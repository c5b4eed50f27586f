"""Systematic exploration: enumerate context-grounded queries with reward > 0.

The search space is tiny once queries are restricted to clauses whose value
is both a KB cell value of the clause's field and literally present in the
context, with at most one clause per field and a small clause budget. That
makes exhaustive enumeration feasible and gives replay buffers their seeds.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

from .dialog import DialogContext, linked_entities
from .kb import RESERVED, KnowledgeBase, Query, parse_query, serialize
from .reward import reward

Clause = tuple[str, str]


def candidate_clauses(context: DialogContext, kb: KnowledgeBase) -> frozenset[Clause]:
    """(field, value) pairs grounded in both the context and the table."""
    mentioned = linked_entities(context.utterances, kb) - RESERVED
    out = set()
    for value in mentioned:
        for f in kb.fields_of_value(value):
            out.add((f, value))
    return frozenset(out)


@dataclass(frozen=True)
class ExplorationResult:
    """Queries with positive reward, with the reward each one earned.

    ``entries`` is sorted by (reward descending, query ascending) so that
    downstream consumers are deterministic.
    """

    entries: tuple[tuple[Query, float], ...]

    @property
    def best_reward(self) -> float:
        return self.entries[0][1] if self.entries else 0.0

    @property
    def queries(self) -> tuple[Query, ...]:
        return tuple(q for q, _ in self.entries)

    def to_json(self) -> list[dict]:
        return [{"query": " ".join(serialize(q)), "reward": r} for q, r in self.entries]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> "ExplorationResult":
        entries = tuple((parse_query(d["query"]), float(d["reward"])) for d in data)
        return cls(entries)


def systematic_explore(
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    max_clauses: int = 4,
) -> ExplorationResult:
    """Score every candidate-clause subset (one clause per field, bounded size).

    Requires a non-empty supervision set; returns only positive-reward
    queries. The zero-clause query is enumerated like any other subset (it
    earns reward whenever the supervision values exist in the table), but
    the replay buffers refuse it downstream: it expresses no intent and
    would otherwise be a universal decoy.
    """
    if not supervision:
        raise ValueError("exploration needs a non-empty supervision set")
    if max_clauses < 0:
        raise ValueError("max_clauses must be non-negative")
    candidates = sorted(candidate_clauses(context, kb))
    found: list[tuple[Query, float]] = []
    for size in range(0, min(max_clauses, len(candidates)) + 1):
        for combo in itertools.combinations(candidates, size):
            fields = [f for f, _ in combo]
            if len(set(fields)) != len(fields):
                continue
            query = Query(combo)  # combinations of a sorted list are canonical
            r = reward(query, supervision, kb)
            if r > 0.0:
                found.append((query, r))
    found.sort(key=lambda e: (-e[1], e[0]))
    return ExplorationResult(tuple(found))


def explore_summary(results: Sequence[ExplorationResult]) -> dict:
    """Aggregate statistics over a corpus worth of exploration results."""
    n = len(results)
    nonempty = sum(1 for r in results if r.entries)
    sizes = [len(r.entries) for r in results]
    return {
        "n_contexts": n,
        "n_with_positive_query": nonempty,
        "mean_positive_queries": (sum(sizes) / n) if n else 0.0,
        "max_positive_queries": max(sizes) if sizes else 0,
        "mean_best_reward": (sum(r.best_reward for r in results) / n) if n else 0.0,
    }


def dump_exploration(results: Sequence[ExplorationResult], path) -> None:
    """Write per-context positive queries plus a summary to a JSON file."""
    payload = {
        "summary": explore_summary(results),
        "contexts": [r.to_json() for r in results],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
