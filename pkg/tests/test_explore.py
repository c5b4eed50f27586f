"""Exploration must equal brute force over the grounded query space."""

import itertools
import json

import pytest

from dialoquery.dialog import context_at, subsequent_entities
from dialoquery.explore import (
    ExplorationResult,
    candidate_clauses,
    dump_exploration,
    explore_summary,
    systematic_explore,
)
from dialoquery.kb import Query
from dialoquery.reward import reward
from helpers import random_context, random_kb, random_supervision


def brute_force(context, supervision, kb, max_clauses):
    """Independent enumeration: every one-clause-per-field subset, rescored."""
    candidates = sorted(candidate_clauses(context, kb))
    found = []
    for size in range(0, max_clauses + 1):
        for combo in itertools.combinations(candidates, size):
            if len({f for f, _ in combo}) != size:
                continue
            r = reward(Query(combo), supervision, kb)
            if r > 0:
                found.append((Query(combo), r))
    return sorted(found, key=lambda e: (-e[1], e[0]))


def test_candidate_clauses_ground_in_context_and_table(restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    assert candidate_clauses(ctx, restaurants_kb) == frozenset(
        {("area", "south"), ("pricerange", "moderate")}
    )


def test_candidate_clauses_fan_out_over_ambiguous_fields():
    # a value occurring under two fields yields a candidate for each
    from dialoquery.dialog import DialogContext
    from dialoquery.kb import KnowledgeBase

    kb = KnowledgeBase(("a", "b"), ({"a": "x", "b": "x"}, {"a": "y", "b": "z"}))
    ctx = DialogContext((("want", "x"),), position=1)
    assert candidate_clauses(ctx, kb) == frozenset({("a", "x"), ("b", "x")})


def test_explore_worked_example(restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    sup = subsequent_entities(booking_dialog, 2, restaurants_kb)
    result = systematic_explore(ctx, sup, restaurants_kb)
    gold = booking_dialog.gold_query
    assert result.entries == (
        (gold, pytest.approx(2 / 5)),
        (Query((("pricerange", "moderate"),)), pytest.approx(2 / 5)),
        (Query((("area", "south"),)), pytest.approx(2 / 9)),
        (Query(()), pytest.approx(2 / 17)),
    )
    assert result.best_reward == pytest.approx(2 / 5)
    assert result.queries[0] == gold


def test_explore_validates_inputs(restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    with pytest.raises(ValueError, match="supervision"):
        systematic_explore(ctx, frozenset(), restaurants_kb)
    with pytest.raises(ValueError, match="max_clauses"):
        systematic_explore(ctx, frozenset({"south"}), restaurants_kb, max_clauses=-1)


def test_explore_respects_the_clause_budget(restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    sup = subsequent_entities(booking_dialog, 2, restaurants_kb)
    capped = systematic_explore(ctx, sup, restaurants_kb, max_clauses=1)
    assert all(len(q.clauses) <= 1 for q in capped.queries)
    zero = systematic_explore(ctx, sup, restaurants_kb, max_clauses=0)
    assert zero.queries == (Query(()),)


def test_explore_matches_brute_force(rng):
    for _ in range(40):
        kb = random_kb(rng, n_fields=int(rng.integers(1, 4)), n_rows=int(rng.integers(2, 6)))
        ctx = random_context(rng, kb, n_values=int(rng.integers(1, 5)))
        sup = random_supervision(rng, kb)
        got = systematic_explore(ctx, sup, kb)
        assert list(got.entries) == brute_force(ctx, sup, kb, max_clauses=4)


def test_exploration_result_round_trip(restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    sup = subsequent_entities(booking_dialog, 2, restaurants_kb)
    result = systematic_explore(ctx, sup, restaurants_kb)
    assert ExplorationResult.from_json(result.to_json()) == result
    assert ExplorationResult(()).best_reward == 0.0


def test_explore_summary_and_dump(tmp_path, restaurants_kb, booking_dialog):
    ctx = context_at(booking_dialog, 2)
    sup = subsequent_entities(booking_dialog, 2, restaurants_kb)
    results = [systematic_explore(ctx, sup, restaurants_kb), ExplorationResult(())]
    summary = explore_summary(results)
    assert summary["n_contexts"] == 2
    assert summary["n_with_positive_query"] == 1
    assert summary["max_positive_queries"] == 4
    assert summary["mean_best_reward"] == pytest.approx(0.2)

    path = tmp_path / "explore.json"
    dump_exploration(results, path)
    payload = json.loads(path.read_text())
    assert payload["summary"] == summary
    assert len(payload["contexts"]) == 2
    assert payload["contexts"][1] == []
