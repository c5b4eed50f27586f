"""Weak reward for a query given the entities of the remaining dialog.

A query earns reward only if its answer covers every subsequently mentioned
entity (recall 1); the reward is then the precision of the answer set, so
tighter queries that retrieve less irrelevant material score higher.
"""

from __future__ import annotations

from .kb import KnowledgeBase, Query, SchemaError, execute, parse_query


def recall(supervision: frozenset[str], answer: frozenset[str]) -> float:
    """Fraction of supervision entities covered by the answer."""
    if not supervision:
        raise ValueError("recall is undefined for an empty supervision set")
    return len(supervision & answer) / len(supervision)


def precision(supervision: frozenset[str], answer: frozenset[str]) -> float:
    """Fraction of answer entities that are supervision entities; 0 if empty."""
    if not answer:
        return 0.0
    return len(supervision & answer) / len(answer)


def reward(query: Query, supervision: frozenset[str], kb: KnowledgeBase) -> float:
    """Precision gated on full recall; 0 when any supervision entity is missed.

    Queries over unknown fields and queries with an empty answer score 0.
    """
    if not supervision:
        raise ValueError("reward is undefined for an empty supervision set")
    try:
        result = execute(query, kb)
    except SchemaError:
        return 0.0
    answer = result.entities
    if not answer or not supervision <= answer:
        return 0.0
    return len(supervision) / len(answer)


def reward_for_tokens(tokens, supervision: frozenset[str], kb: KnowledgeBase) -> float:
    """Reward of a token sequence; unparseable sequences score 0."""
    try:
        query = parse_query(tokens)
    except ValueError:
        return 0.0
    return reward(query, supervision, kb)
