"""Reference implementations the tests check the package against.

Everything here is written the slow, obviously-correct way: exhaustive
enumeration over the grammar, direct probability sums, central finite
differences. The package must agree with these oracles, never the other
way around.
"""

from __future__ import annotations

import numpy as np

from dialoquery.dialog import DialogContext
from dialoquery.estimators import BufferPair, clip_buffer_probs
from dialoquery.grammar import advance, initial_state, valid_actions, vocabulary_for
from dialoquery.kb import KnowledgeBase, Query, serialize
from dialoquery.policy import (
    FeatureTemplate,
    PolicyParameters,
    logprob_and_gradient,
    sequence_logprob,
)
from dialoquery.reward import reward_for_tokens


def enumerate_terminal_sequences(fields, context: DialogContext) -> list[tuple[str, ...]]:
    """Every token sequence the decoding grammar can terminate with."""
    vocab = vocabulary_for(fields, context)
    out: list[tuple[str, ...]] = []

    def walk(state, prefix):
        if state.is_terminal:
            out.append(tuple(prefix))
            return
        for action in valid_actions(state, vocab):
            walk(advance(state, action, vocab), prefix + [action])

    walk(initial_state(), [])
    return out


def exact_distribution(params: PolicyParameters, context: DialogContext):
    """(tokens, probability) for every terminal sequence under the policy."""
    seqs = enumerate_terminal_sequences(params.template.fields, context)
    return [(s, float(np.exp(sequence_logprob(params, context, s)))) for s in seqs]


def exact_policy_gradient(params, context, supervision, kb) -> np.ndarray:
    """sum_s pi(s) * R(s) * grad log pi(s), by full enumeration."""
    total = np.zeros(params.template.dim)
    for tokens, p in exact_distribution(params, context):
        r = reward_for_tokens(tokens, supervision, kb)
        if r == 0.0:
            continue
        _, grad = logprob_and_gradient(params, context, tokens)
        total += p * r * grad
    return total


def exact_two_buffer_surrogate(
    params,
    context,
    supervision,
    kb,
    buffers: BufferPair,
    alpha_high: float,
    alpha_other: float,
) -> np.ndarray:
    """Exact expectation of the two-buffer estimate (no draw shortfall).

    The in-buffer terms are deterministic; each accepted outside draw is
    distributed as the policy conditioned on non-buffered sequences, so the
    outside part is the enumerated outside sum divided by the outside mass.
    """
    dim = params.template.dim

    def buffer_part(entries):
        scored, seqs = [], set()
        for q, r in entries:
            toks = serialize(q)
            seqs.add(toks)
            lp, grad = logprob_and_gradient(params, context, toks)
            scored.append((float(np.exp(lp)), grad, r))
        return scored, seqs

    high_entries = [(q, buffers.best_reward) for q in buffers.high]
    scored_h, seq_h = buffer_part(high_entries)
    scored_o, seq_o = buffer_part(list(buffers.other))
    pi_h = min(sum(p for p, _, _ in scored_h), 1.0)
    pi_o = min(sum(p for p, _, _ in scored_o), 1.0)
    w_h, w_o = clip_buffer_probs(pi_h, pi_o, alpha_high, alpha_other)
    if not high_entries:
        w_h = 0.0
    if not buffers.other:
        w_o = 0.0

    total = np.zeros(dim)
    for scored, w in ((scored_h, w_h), (scored_o, w_o)):
        mass = sum(p for p, _, _ in scored)
        if mass == 0.0 or w == 0.0:
            continue
        for p, grad, r in scored:
            total += w * (p / mass) * r * grad

    rejected = seq_h | seq_o
    w_out = 1.0 - w_h - w_o
    if w_out > 0.0:
        outside_mass = 0.0
        outside_sum = np.zeros(dim)
        for tokens, p in exact_distribution(params, context):
            if tokens in rejected:
                continue
            outside_mass += p
            r = reward_for_tokens(tokens, supervision, kb)
            if r > 0.0:
                _, grad = logprob_and_gradient(params, context, tokens)
                outside_sum += p * r * grad
        total += w_out * outside_sum / outside_mass
    return total


def finite_difference(params, context, tokens, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of the sequence log-probability at given indices."""
    out = np.zeros(len(indices))
    w = params.weights
    for j, i in enumerate(indices):
        orig = w[i]
        w[i] = orig + h
        hi = sequence_logprob(params, context, tokens)
        w[i] = orig - h
        lo = sequence_logprob(params, context, tokens)
        w[i] = orig
        out[j] = (hi - lo) / (2.0 * h)
    return out


# small pools for randomly generated tables; "fusion" deliberately lives in
# two fields so some values are field-ambiguous
FIELD_POOL = ("area", "cuisine", "pricerange")
VALUE_POOLS = {
    "area": ("north", "south", "east", "west", "centre"),
    "cuisine": ("chinese", "indian", "thai", "french", "fusion"),
    "pricerange": ("cheap", "moderate", "expensive", "fusion"),
}
FILLER = ("i", "want", "something", "please", "find", "nice", "spot", "for", "dinner")


def random_kb(rng: np.random.Generator, n_fields: int, n_rows: int) -> KnowledgeBase:
    fields = tuple(sorted(str(f) for f in rng.choice(FIELD_POOL, size=n_fields, replace=False)))
    rows = tuple(
        {f: str(VALUE_POOLS[f][int(rng.integers(len(VALUE_POOLS[f])))]) for f in fields}
        for _ in range(n_rows)
    )
    return KnowledgeBase(fields, rows)


def random_context(rng: np.random.Generator, kb: KnowledgeBase, n_values: int) -> DialogContext:
    values = sorted(kb.cell_values)
    chosen = [values[int(i)] for i in rng.choice(len(values), size=min(n_values, len(values)), replace=False)]
    tokens = list(chosen) + [FILLER[int(i)] for i in rng.choice(len(FILLER), size=2, replace=False)]
    rng.shuffle(tokens)
    return DialogContext((tuple(tokens),), position=1)


def random_supervision(rng: np.random.Generator, kb: KnowledgeBase) -> frozenset[str]:
    """One or two values from one row, so full recall is often achievable."""
    row = kb.rows[int(rng.integers(kb.n_rows))]
    vals = sorted(set(row.values()))
    k = 1 + int(rng.integers(min(2, len(vals))))
    picked = rng.choice(len(vals), size=k, replace=False)
    return frozenset(vals[int(i)] for i in picked)


def random_query(rng: np.random.Generator, kb: KnowledgeBase, min_clauses: int = 0, max_clauses=None) -> Query:
    """Random query over the schema; values are drawn from the whole table so
    field-mismatched clauses (empty answers) occur too."""
    if max_clauses is None:
        max_clauses = len(kb.fields)
    k = int(rng.integers(min_clauses, max_clauses + 1))
    fields = [str(f) for f in rng.choice(kb.fields, size=k, replace=False)] if k else []
    pool = sorted(kb.cell_values)
    clauses = []
    for f in fields:
        vs = sorted(kb.field_values(f)) if rng.random() < 0.7 else pool
        clauses.append((f, str(vs[int(rng.integers(len(vs)))])))
    return Query(tuple(clauses))


def small_instance(rng: np.random.Generator, max_sequences: int = 200):
    """(kb, context, supervision) whose grammar admits few terminal sequences."""
    while True:
        n_fields = int(rng.integers(2, 4))
        kb = random_kb(rng, n_fields, int(rng.integers(2, 5)))
        context = random_context(rng, kb, n_values=2 if n_fields == 3 else 3)
        n_seq = count_terminal_sequences(kb.fields, context)
        if n_seq <= max_sequences:
            return kb, context, random_supervision(rng, kb)


def count_terminal_sequences(fields, context: DialogContext) -> int:
    v = len(vocabulary_for(fields, context).values)
    f = len(fields)
    total, perm = 1, 1
    for k in range(1, f + 1):
        perm *= f - k + 1
        total += perm * v**k
    return total


def random_params(rng: np.random.Generator, fields, dim: int = 512, scale: float = 0.5):
    template = FeatureTemplate(tuple(sorted(set(fields))), dim)
    return PolicyParameters(template, rng.normal(0.0, scale, dim))
