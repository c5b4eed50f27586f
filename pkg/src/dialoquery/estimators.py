"""Policy-gradient estimators, from plain sampling to two-buffer replay.

All estimators return an ascent direction: the training loop always does
``weights += lr * estimate.gradient``. The buffer-based estimators split the
objective into an in-buffer part, enumerated exactly over the remembered
queries, and an outside part estimated by rejection sampling; the buffer
weights are clipped so rare-but-good queries keep a gradient share.

A buffered query stands for its canonical token serialization: buffer
probabilities sum only those sequences, and rejection sampling rejects
exactly those sequences, so the two parts partition sequence space and the
combined estimator stays unbiased whenever clipping is inactive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dialog import DialogContext
from .explore import ExplorationResult
from .kb import KnowledgeBase, Query, canonicalize, parse_query, serialize
from .policy import PolicyParameters, beam_search, logprob_and_gradient, randomized_beam_search, sample
from .reward import reward_for_tokens

REJECTION_BUDGET_FACTOR = 10  # max draws per requested accepted sample


@dataclass(frozen=True)
class ReplayBuffer:
    """Positive-reward queries found so far for one context.

    Entries are canonical, distinct, and sorted by (reward descending, query)
    so iteration order is deterministic.
    """

    entries: tuple[tuple[Query, float], ...] = ()

    def __post_init__(self):
        qs = [q for q, _ in self.entries]
        if len(set(qs)) != len(qs):
            raise ValueError("buffer holds duplicate queries")
        for q, r in self.entries:
            if not q.clauses:
                raise ValueError("the zero-clause query may not be buffered")
            if r <= 0.0:
                raise ValueError(f"buffer entry {str(q)!r} has non-positive reward")
            if canonicalize(q) != q:
                raise ValueError(f"buffer entry {str(q)!r} is not canonical")
        if list(self.entries) != sorted(self.entries, key=lambda e: (-e[1], e[0])):
            raise ValueError("buffer entries are not sorted")

    @classmethod
    def from_exploration(cls, result: ExplorationResult) -> "ReplayBuffer":
        # exploration may list the zero-clause query; buffers refuse it
        return cls(tuple(e for e in result.entries if e[0].clauses))

    @property
    def queries(self) -> tuple[Query, ...]:
        return tuple(q for q, _ in self.entries)

    def add(self, query: Query, reward: float) -> "ReplayBuffer":
        if not query.clauses:
            raise ValueError("the zero-clause query may not be buffered")
        if reward <= 0.0:
            raise ValueError("only positive-reward queries may be buffered")
        q = canonicalize(query)
        if any(q == e[0] for e in self.entries):
            return self
        merged = sorted(self.entries + ((q, reward),), key=lambda e: (-e[1], e[0]))
        return ReplayBuffer(tuple(merged))


@dataclass(frozen=True)
class BufferPair:
    """Two-tier replay memory: the best queries found, and the rest.

    ``high`` holds every known query at ``best_reward``; ``other`` holds the
    remaining positive-reward queries. When a strictly better query shows
    up, it starts a fresh high buffer and the old high entries are demoted.
    """

    high: tuple[Query, ...] = ()
    other: tuple[tuple[Query, float], ...] = ()
    best_reward: float = 0.0

    def __post_init__(self):
        if bool(self.high) != (self.best_reward > 0.0):
            raise ValueError("high buffer and best_reward disagree")
        high_set = set(self.high)
        if len(high_set) != len(self.high):
            raise ValueError("high buffer holds duplicate queries")
        if tuple(sorted(self.high)) != self.high:
            raise ValueError("high buffer is not sorted")
        for q in self.high:
            if not q.clauses:
                raise ValueError("the zero-clause query may not be buffered")
            if canonicalize(q) != q:
                raise ValueError(f"high entry {str(q)!r} is not canonical")
        for q, r in self.other:
            if not q.clauses:
                raise ValueError("the zero-clause query may not be buffered")
            if not 0.0 < r < self.best_reward:
                raise ValueError(f"other entry {str(q)!r} reward {r} outside (0, best)")
            if canonicalize(q) != q:
                raise ValueError(f"other entry {str(q)!r} is not canonical")
            if q in high_set:
                raise ValueError(f"query {str(q)!r} is in both buffers")
        other_qs = [q for q, _ in self.other]
        if len(set(other_qs)) != len(other_qs):
            raise ValueError("other buffer holds duplicate queries")
        if list(self.other) != sorted(self.other, key=lambda e: (-e[1], e[0])):
            raise ValueError("other buffer entries are not sorted")

    @classmethod
    def from_exploration(cls, result: ExplorationResult) -> "BufferPair":
        entries = tuple(e for e in result.entries if e[0].clauses)
        if not entries:
            return cls()
        best = entries[0][1]
        high = tuple(sorted(q for q, r in entries if r == best))
        other = tuple((q, r) for q, r in entries if r != best)
        return cls(high, other, best)

    @property
    def all_queries(self) -> tuple[Query, ...]:
        return self.high + tuple(q for q, _ in self.other)

    def add(self, query: Query, reward: float) -> "BufferPair":
        """Fold one discovered query in, demoting the old best if beaten."""
        if not query.clauses:
            raise ValueError("the zero-clause query may not be buffered")
        if reward <= 0.0:
            raise ValueError("only positive-reward queries may be buffered")
        q = canonicalize(query)
        if q in self.high or any(q == e[0] for e in self.other):
            return self
        if reward > self.best_reward:
            demoted = tuple((hq, self.best_reward) for hq in self.high)
            other = sorted(self.other + demoted, key=lambda e: (-e[1], e[0]))
            return BufferPair((q,), tuple(other), reward)
        if reward == self.best_reward:
            return BufferPair(tuple(sorted(self.high + (q,))), self.other, self.best_reward)
        other = sorted(self.other + ((q, reward),), key=lambda e: (-e[1], e[0]))
        return BufferPair(self.high, tuple(other), self.best_reward)


def clip_buffer_probs(
    pi_high: float, pi_other: float, alpha_high: float, alpha_other: float
) -> tuple[float, float]:
    """Clipped gradient weights for the two buffer terms.

    The high buffer is guaranteed at least ``alpha_high``; the other buffer
    is guaranteed at least an ``alpha_other`` share of what the high buffer
    left over, capped so the two never exceed probability one. The cap makes
    the output feasible for any inputs in [0, 1], so the two probabilities
    are not required to sum below one (numerical drift aside, that also lets
    each buffer mass be estimated independently).
    """
    for name, p in (("pi_high", pi_high), ("pi_other", pi_other)):
        if not 0.0 <= p <= 1.0 + 1e-9:
            raise ValueError(f"{name}={p} outside [0, 1]")
    for name, a in (("alpha_high", alpha_high), ("alpha_other", alpha_other)):
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"{name}={a} outside [0, 1]")
    pi_high = min(pi_high, 1.0)
    pi_other = min(pi_other, 1.0)
    clipped_high = max(pi_high, alpha_high)
    floor_other = (1.0 - clipped_high) * alpha_other
    clipped_other = min(max(floor_other, pi_other), 1.0 - clipped_high)
    return clipped_high, clipped_other


@dataclass
class GradientEstimate:
    """An ascent direction plus the diagnostics the training loop records."""

    gradient: np.ndarray
    pi_high: float = 0.0
    pi_other: float = 0.0
    clipped_high: float = 0.0
    clipped_other: float = 0.0
    n_draws: int = 0
    n_accepted: int = 0
    discoveries: tuple[tuple[Query, float], ...] = ()
    best_sample_reward: float = 0.0


def _buffer_term(
    params: PolicyParameters,
    context: DialogContext,
    entries: Sequence[tuple[Query, float]],
) -> tuple[float, list[tuple[float, np.ndarray, float]], set[tuple[str, ...]]]:
    """Score one buffer: total probability, per-entry terms, sequence set."""
    pi_total = 0.0
    scored = []
    sequences = set()
    for q, r in entries:
        tokens = serialize(q)
        sequences.add(tokens)
        lp, grad = logprob_and_gradient(params, context, tokens)
        pi_total += float(np.exp(lp))
        scored.append((lp, grad, r))
    return pi_total, scored, sequences


def _weighted_buffer_gradient(
    scored: list[tuple[float, np.ndarray, float]], weight: float, dim: int
) -> np.ndarray:
    """weight * sum_i p(i | buffer) * R_i * grad_i, computed stably."""
    out = np.zeros(dim)
    if not scored or weight == 0.0:
        return out
    lps = np.array([lp for lp, _, _ in scored])
    rel = np.exp(lps - lps.max())
    rel /= rel.sum()
    for (_, grad, r), p in zip(scored, rel):
        out += (weight * p * r) * grad
    return out


def _outside_term(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    rejected: set[tuple[str, ...]],
    known: set[Query],
    weight: float,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
) -> tuple[np.ndarray, int, int, list[tuple[Query, float]], float]:
    """Rejection-sampled estimate of the objective outside the buffers.

    Draws until ``n_samples`` sequences outside ``rejected`` are accepted or
    the draw budget runs out; the estimate divides by ``n_samples`` either
    way, so a shortfall shrinks the term instead of skewing it.
    """
    dim = params.template.dim
    total = np.zeros(dim)
    discoveries: list[tuple[Query, float]] = []
    seen_new: set[Query] = set()
    best_r = 0.0
    n_draws = 0
    n_accepted = 0
    if weight == 0.0 or n_samples <= 0:
        return total, 0, 0, [], 0.0
    budget = REJECTION_BUDGET_FACTOR * n_samples
    while n_accepted < n_samples and n_draws < budget:
        tokens = sample(params, context, rng, max_len)
        n_draws += 1
        if tokens in rejected:
            continue
        n_accepted += 1
        r = reward_for_tokens(tokens, supervision, kb)
        if r == 0.0:
            continue
        best_r = max(best_r, r)
        _, grad = logprob_and_gradient(params, context, tokens)
        total += r * grad
        q = canonicalize(parse_query(tokens))
        if q.clauses and q not in known and q not in seen_new:
            seen_new.add(q)
            discoveries.append((q, r))
    total *= weight / n_samples
    return total, n_draws, n_accepted, discoveries, best_r


def reinforce_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
) -> GradientEstimate:
    """Monte Carlo policy gradient: mean of reward-weighted score functions.

    Implemented as the buffer estimators' outside term with nothing to
    reject, so emptying their buffers reproduces this estimator exactly.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    total, n_draws, n_accepted, discoveries, best_r = _outside_term(
        params, context, supervision, kb,
        set(), set(), 1.0, n_samples, rng, max_len,
    )
    return GradientEstimate(
        gradient=total,
        n_draws=n_draws,
        n_accepted=n_accepted,
        discoveries=tuple(discoveries),
        best_sample_reward=best_r,
    )


def _beam_weighted_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    beam: Sequence[tuple[tuple[str, ...], float]],
) -> GradientEstimate:
    dim = params.template.dim
    total = np.zeros(dim)
    discoveries: list[tuple[Query, float]] = []
    seen: set[Query] = set()
    best_r = 0.0
    positive = 0
    for tokens, lp in beam:
        r = reward_for_tokens(tokens, supervision, kb)
        if r == 0.0:
            continue
        positive += 1
        best_r = max(best_r, r)
        _, grad = logprob_and_gradient(params, context, tokens)
        total += r * float(np.exp(lp)) * grad
        q = canonicalize(parse_query(tokens))
        if q.clauses and q not in seen:
            seen.add(q)
            discoveries.append((q, r))
    return GradientEstimate(
        gradient=total,
        n_draws=len(beam),
        n_accepted=positive,
        discoveries=tuple(discoveries),
        best_sample_reward=best_r,
    )


def bs_reinforce_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    beam_width: int,
) -> GradientEstimate:
    """Beam-based policy gradient: each beam entry weighted by reward times
    its model likelihood (a biased but low-variance surrogate)."""
    beam = beam_search(params, context, beam_width)
    return _beam_weighted_gradient(params, context, supervision, kb, beam)


def rbs_reinforce_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    beam_width: int,
    epsilon: float,
    rng: np.random.Generator,
) -> GradientEstimate:
    """Beam-based gradient over a randomized beam; equals the deterministic
    variant when epsilon is zero."""
    beam = randomized_beam_search(params, context, beam_width, epsilon, rng)
    return _beam_weighted_gradient(params, context, supervision, kb, beam)


def mapo_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    buffer: ReplayBuffer,
    alpha: float,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
) -> GradientEstimate:
    """Single-buffer estimator: exact in-buffer term with clipped weight
    ``max(pi_buffer, alpha)`` plus a rejection-sampled outside term."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    dim = params.template.dim
    pi_b, scored, sequences = _buffer_term(params, context, buffer.entries)
    pi_b = min(pi_b, 1.0)
    clipped = max(pi_b, alpha) if buffer.entries else 0.0
    total = _weighted_buffer_gradient(scored, clipped, dim)
    outside, n_draws, n_accepted, discoveries, best_r = _outside_term(
        params, context, supervision, kb,
        sequences, set(buffer.queries),
        1.0 - clipped, n_samples, rng, max_len,
    )
    total += outside
    return GradientEstimate(
        gradient=total,
        pi_high=pi_b,
        clipped_high=clipped,
        n_draws=n_draws,
        n_accepted=n_accepted,
        discoveries=tuple(discoveries),
        best_sample_reward=best_r,
    )


def mbmapo_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    buffers: BufferPair,
    alpha_high: float,
    alpha_other: float,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
) -> GradientEstimate:
    """Two-buffer estimator: best-so-far and runner-up queries each get an
    exactly enumerated, separately clipped term; the rest is sampled.

    An empty buffer contributes weight zero (there is nothing to enumerate),
    which reduces this estimator to the single-buffer one and further to
    plain sampling as the buffers empty out.
    """
    dim = params.template.dim
    high_entries = tuple((q, buffers.best_reward) for q in buffers.high)
    pi_h, scored_h, seq_h = _buffer_term(params, context, high_entries)
    pi_o, scored_o, seq_o = _buffer_term(params, context, buffers.other)
    pi_h = min(pi_h, 1.0)
    pi_o = min(pi_o, 1.0)
    clipped_h, clipped_o = clip_buffer_probs(pi_h, pi_o, alpha_high, alpha_other)
    if not high_entries:
        clipped_h = 0.0
    if not buffers.other:
        clipped_o = 0.0
    total = _weighted_buffer_gradient(scored_h, clipped_h, dim)
    total += _weighted_buffer_gradient(scored_o, clipped_o, dim)
    outside, n_draws, n_accepted, discoveries, best_r = _outside_term(
        params, context, supervision, kb,
        seq_h | seq_o, set(buffers.all_queries),
        1.0 - clipped_h - clipped_o, n_samples, rng, max_len,
    )
    total += outside
    return GradientEstimate(
        gradient=total,
        pi_high=pi_h,
        pi_other=pi_o,
        clipped_high=clipped_h,
        clipped_other=clipped_o,
        n_draws=n_draws,
        n_accepted=n_accepted,
        discoveries=tuple(discoveries),
        best_sample_reward=best_r,
    )


def supervised_gradient(
    params: PolicyParameters, context: DialogContext, gold: Query
) -> GradientEstimate:
    """Cross-entropy ascent direction for the gold query (its serialization
    must be producible by the grammar for this context)."""
    _, grad = logprob_and_gradient(params, context, serialize(gold))
    return GradientEstimate(gradient=grad)


def supervised_rl_gradient(
    params: PolicyParameters,
    context: DialogContext,
    supervision: frozenset[str],
    kb: KnowledgeBase,
    gold: Query,
    buffers: BufferPair,
    alpha_high: float,
    alpha_other: float,
    lam: float,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
) -> GradientEstimate:
    """Joint objective: gold-query cross entropy plus ``lam`` times the
    two-buffer expected reward. Returns the combined ascent direction."""
    if lam < 0.0:
        raise ValueError("lam must be non-negative")
    sl = supervised_gradient(params, context, gold)  # raises before any sampling
    rl = mbmapo_gradient(
        params, context, supervision, kb, buffers,
        alpha_high, alpha_other, n_samples, rng, max_len,
    )
    rl.gradient = sl.gradient + lam * rl.gradient
    return rl
