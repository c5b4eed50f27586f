"""Decoding grammar for queries: every action sequence it permits parses.

The grammar is a small state machine over the query token language. Values
are restricted to tokens that appeared in the dialog context (a copy
mechanism), each field may be constrained at most once, and WHERE/AND are
only offered while a field and a context token are still available, so all
terminal sequences execute without parse errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from .dialog import DialogContext
from .kb import AND, EOQ, EQUALS, FROM, KEYWORDS, RESERVED, SELECT, STAR, TABLE_NAME, WHERE

# stages of the state machine, named after the token they expect
S_SELECT = "select"
S_STAR = "star"
S_FROM = "from"
S_TABLE = "table"
S_OPEN = "open"          # WHERE or end of query
S_FIELD = "field"
S_EQUALS = "equals"
S_VALUE = "value"
S_CLAUSE_DONE = "clause_done"  # AND or end of query
S_DONE = "done"


class GrammarError(ValueError):
    """An action is not permitted in the current grammar state."""


@dataclass(frozen=True)
class ActionVocabulary:
    """Actions available while decoding a query for one context.

    ``fields`` is the sorted KB schema; ``values`` the sorted distinct
    context tokens usable as clause values. Keywords and the end marker are
    shared constants.
    """

    fields: tuple[str, ...]
    values: tuple[str, ...]

    def __post_init__(self):
        if tuple(sorted(set(self.fields))) != self.fields or not self.fields:
            raise ValueError("fields must be sorted, distinct, and non-empty")
        if tuple(sorted(set(self.values))) != self.values:
            raise ValueError("values must be sorted and distinct")
        clash = (set(self.fields) | set(self.values)) & RESERVED
        if clash:
            raise ValueError(f"vocabulary items collide with keywords: {sorted(clash)}")

    @classmethod
    def for_context(cls, fields: Sequence[str], context: DialogContext) -> "ActionVocabulary":
        values = tuple(sorted(context.token_set - RESERVED))
        return cls(tuple(sorted(set(fields))), values)

    @property
    def all_actions(self) -> tuple[str, ...]:
        # a token may serve as both field and value; list it once
        return (SELECT, STAR, FROM, TABLE_NAME, WHERE, AND, EQUALS, EOQ) + tuple(
            sorted(set(self.fields) | set(self.values))
        )


@dataclass(frozen=True)
class GrammarState:
    stage: str
    used_fields: frozenset[str] = frozenset()
    pending_field: str | None = None

    @property
    def is_terminal(self) -> bool:
        return self.stage == S_DONE

    @property
    def n_clauses(self) -> int:
        """Completed clauses so far (the pending one does not count)."""
        return len(self.used_fields) - (self.pending_field is not None)

    def key(self) -> str:
        """Stable identifier used for state-conditioned features.

        Value slots are distinguished by the field being constrained, so the
        policy can learn field-specific value preferences.
        """
        if self.stage == S_VALUE:
            return f"{S_VALUE}:{self.pending_field}"
        return self.stage


def initial_state() -> GrammarState:
    return GrammarState(S_SELECT)


def _clause_possible(state: GrammarState, vocab: ActionVocabulary) -> bool:
    return bool(vocab.values) and len(state.used_fields) < len(vocab.fields)


def valid_actions(state: GrammarState, vocab: ActionVocabulary) -> tuple[str, ...]:
    """Permitted actions, sorted lexicographically (the tie-break order)."""
    stage = state.stage
    if stage == S_SELECT:
        return (SELECT,)
    if stage == S_STAR:
        return (STAR,)
    if stage == S_FROM:
        return (FROM,)
    if stage == S_TABLE:
        return (TABLE_NAME,)
    if stage == S_OPEN:
        return (EOQ, WHERE) if _clause_possible(state, vocab) else (EOQ,)
    if stage == S_FIELD:
        return tuple(f for f in vocab.fields if f not in state.used_fields)
    if stage == S_EQUALS:
        return (EQUALS,)
    if stage == S_VALUE:
        return vocab.values
    if stage == S_CLAUSE_DONE:
        return (EOQ, AND) if _clause_possible(state, vocab) else (EOQ,)
    return ()


def advance(state: GrammarState, action: str, vocab: ActionVocabulary) -> GrammarState:
    """Apply one action; raises GrammarError if it is not permitted."""
    if action not in valid_actions(state, vocab):
        raise GrammarError(f"action {action!r} not permitted in stage {state.stage!r}")
    stage = state.stage
    if stage == S_SELECT:
        return GrammarState(S_STAR)
    if stage == S_STAR:
        return GrammarState(S_FROM)
    if stage == S_FROM:
        return GrammarState(S_TABLE)
    if stage == S_TABLE:
        return GrammarState(S_OPEN)
    if stage in (S_OPEN, S_CLAUSE_DONE):
        if action == EOQ:
            return GrammarState(S_DONE, state.used_fields)
        return GrammarState(S_FIELD, state.used_fields)
    if stage == S_FIELD:
        return GrammarState(S_EQUALS, state.used_fields | {action}, action)
    if stage == S_EQUALS:
        return GrammarState(S_VALUE, state.used_fields, state.pending_field)
    # S_VALUE: clause complete
    return GrammarState(S_CLAUSE_DONE, state.used_fields)


def replay(tokens: Sequence[str], vocab: ActionVocabulary) -> GrammarState:
    """State after consuming ``tokens``; raises GrammarError with position."""
    state = initial_state()
    for i, tok in enumerate(tokens):
        if state.is_terminal:
            raise GrammarError(f"token {tok!r} after end of query (at token {i})")
        try:
            state = advance(state, tok, vocab)
        except GrammarError as e:
            raise GrammarError(f"{e} (at token {i})") from None
    return state


# non-end-marker tokens needed from each stage to reach a terminal state by
# the shortest route (value slots need 1: the value itself, and so on)
_CLOSE_COST = {
    S_SELECT: 4,
    S_STAR: 3,
    S_FROM: 2,
    S_TABLE: 1,
    S_OPEN: 0,
    S_FIELD: 3,
    S_EQUALS: 2,
    S_VALUE: 1,
    S_CLAUSE_DONE: 0,
    S_DONE: 0,
}


def closing_cost(state: GrammarState) -> int:
    """Non-end-marker tokens needed to finish the query from here."""
    return _CLOSE_COST[state.stage]


_NEXT_STAGE = {
    S_SELECT: S_STAR,
    S_STAR: S_FROM,
    S_FROM: S_TABLE,
    S_TABLE: S_OPEN,
    S_FIELD: S_EQUALS,
    S_EQUALS: S_VALUE,
    S_VALUE: S_CLAUSE_DONE,
    S_OPEN: S_FIELD,        # any non-end action here starts a clause
    S_CLAUSE_DONE: S_FIELD,
}


def cost_after(stage: str, action: str) -> int:
    """Closing cost after taking ``action`` from ``stage`` (cheap form)."""
    if action == EOQ:
        return 0
    return _CLOSE_COST[_NEXT_STAGE[stage]]


def shortest_completion(state: GrammarState, vocab: ActionVocabulary) -> tuple[str, ...]:
    """Deterministic shortest way to finish: end if possible, else the
    lexicographically smallest permitted action."""
    out: list[str] = []
    while not state.is_terminal:
        actions = valid_actions(state, vocab)
        act = EOQ if EOQ in actions else actions[0]
        out.append(act)
        state = advance(state, act, vocab)
    return tuple(out)


@lru_cache(maxsize=4096)
def _vocab_for(fields: tuple[str, ...], context: DialogContext) -> ActionVocabulary:
    return ActionVocabulary.for_context(fields, context)


def vocabulary_for(fields: Sequence[str], context: DialogContext) -> ActionVocabulary:
    """Cached vocabulary lookup (contexts are revisited every epoch)."""
    return _vocab_for(tuple(fields), context)


MIN_QUERY_TOKENS = 4  # SELECT * FROM <table>


def max_tokens_for_clauses(max_clauses: int) -> int:
    """Token budget (end marker excluded) admitting up to ``max_clauses``."""
    return MIN_QUERY_TOKENS + 4 * max_clauses


__all__ = [
    "ActionVocabulary",
    "GrammarError",
    "GrammarState",
    "advance",
    "closing_cost",
    "cost_after",
    "initial_state",
    "max_tokens_for_clauses",
    "replay",
    "shortest_completion",
    "valid_actions",
    "vocabulary_for",
    "MIN_QUERY_TOKENS",
]
