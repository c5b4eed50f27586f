"""Autoregressive log-linear policy over grammar-constrained query tokens.

Each decoding step scores the permitted actions with hashed sparse features
(action bias, context-word conjunctions, previous-action bigram, grammar
state, and a query-length feature on the end marker) and normalizes with a
softmax. Gradients of sequence log-probabilities are exact: for every step,
the features of the chosen action minus the probability-weighted features
of all permitted actions.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .dialog import DialogContext
from .grammar import (
    ActionVocabulary,
    GrammarError,
    GrammarState,
    MIN_QUERY_TOKENS,
    advance,
    cost_after,
    initial_state,
    replay,
    shortest_completion,
    valid_actions,
    vocabulary_for,
)
from .kb import EOQ

START = "<s>"  # previous-action placeholder at the first step
_SEP = "\x1f"
_FORMAT = "dialoquery-policy/1"


class CheckpointError(ValueError):
    """A stored checkpoint does not match the expected feature template."""


@dataclass(frozen=True)
class FeatureTemplate:
    """Hashed feature space tied to a KB schema.

    The fingerprint commits to the schema and dimensionality so checkpoints
    cannot silently be reused against an incompatible table.
    """

    fields: tuple[str, ...]
    dim: int = 1 << 15

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("feature dimension must be positive")
        if tuple(sorted(set(self.fields))) != self.fields or not self.fields:
            raise ValueError("fields must be sorted, distinct, and non-empty")

    def index(self, *parts: str) -> int:
        """Stable hash of a feature name into [0, dim)."""
        return zlib.crc32(_SEP.join(parts).encode("utf-8")) % self.dim

    def fingerprint(self) -> str:
        payload = json.dumps({"format": _FORMAT, "dim": self.dim, "fields": list(self.fields)})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class PolicyParameters:
    """Weight vector over the hashed feature space."""

    template: FeatureTemplate
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.template.dim,):
            raise ValueError(f"weights must have shape ({self.template.dim},)")

    @classmethod
    def zeros(cls, template: FeatureTemplate) -> "PolicyParameters":
        return cls(template, np.zeros(template.dim))

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.template, self.weights.copy())

    def save(self, path) -> None:
        payload = {
            "format": _FORMAT,
            "dim": self.template.dim,
            "fields": list(self.template.fields),
            "fingerprint": self.template.fingerprint(),
            "weights": self.weights.tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path, expected_fields: Sequence[str] | None = None) -> "PolicyParameters":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if payload.get("format") != _FORMAT:
            raise CheckpointError(f"checkpoint {path} has unsupported format {payload.get('format')!r}")
        template = FeatureTemplate(tuple(payload["fields"]), int(payload["dim"]))
        if template.fingerprint() != payload.get("fingerprint"):
            raise CheckpointError(f"checkpoint {path} fingerprint does not match its template")
        if expected_fields is not None and tuple(sorted(set(expected_fields))) != template.fields:
            raise CheckpointError(
                f"checkpoint {path} was trained for fields {list(template.fields)}, "
                f"not {sorted(set(expected_fields))}"
            )
        weights = np.asarray(payload["weights"], dtype=np.float64)
        if weights.shape != (template.dim,):
            raise CheckpointError(f"checkpoint {path} weight vector has the wrong length")
        return cls(template, weights)


@dataclass(frozen=True)
class StepArrays:
    """Per-step scoring tables: permitted actions and their feature indices."""

    actions: tuple[str, ...]
    feats: np.ndarray
    eoq_pos: int
    eoq_idx: int

    def scores(self, weights: np.ndarray) -> np.ndarray:
        s = weights[self.feats].sum(axis=1)
        if self.eoq_pos >= 0:
            s[self.eoq_pos] += weights[self.eoq_idx]
        return s


class ContextScorer:
    """Feature-index tables for decoding one context under one template.

    Building index matrices once per context keeps the per-step work down to
    a weight gather and a softmax.
    """

    def __init__(self, template: FeatureTemplate, vocab: ActionVocabulary):
        self.template = template
        self.vocab = vocab
        acts = vocab.all_actions
        self.action_row = {a: i for i, a in enumerate(acts)}
        words = vocab.values
        base = np.empty((len(acts), 1 + len(words)), dtype=np.int64)
        for i, a in enumerate(acts):
            base[i, 0] = template.index("act", a)
            for j, w in enumerate(words):
                base[i, 1 + j] = template.index("ctx", w, a)
        self._base = base
        self._steps: dict = {}

    def step_arrays(self, state: GrammarState, prev: str) -> "StepArrays":
        """Feature-index tables for one decoding step.

        Row i of ``feats`` lists the feature indices shared by action i; the
        end marker additionally carries a query-length feature, tracked as a
        scalar (``eoq_pos`` is -1 when the end marker is not permitted).
        """
        actions = valid_actions(state, self.vocab)
        key = (state.key(), prev, state.n_clauses, actions)
        cached = self._steps.get(key)
        if cached is not None:
            return cached
        rows = [self.action_row[a] for a in actions]
        skey = state.key()
        extra = np.empty((len(actions), 2), dtype=np.int64)
        for i, a in enumerate(actions):
            extra[i, 0] = self.template.index("prev", prev, a)
            extra[i, 1] = self.template.index("state", skey, a)
        feats = np.concatenate([self._base[rows], extra], axis=1)
        eoq_pos = actions.index(EOQ) if EOQ in actions else -1
        eoq_idx = self.template.index("eoqlen", str(state.n_clauses))
        step = StepArrays(actions, feats, eoq_pos, eoq_idx)
        if len(self._steps) >= 8192:
            self._steps.clear()
        self._steps[key] = step
        return step


@lru_cache(maxsize=2048)
def _scorer_for(template: FeatureTemplate, vocab: ActionVocabulary) -> ContextScorer:
    return ContextScorer(template, vocab)


def scorer_for(params: PolicyParameters, context: DialogContext) -> ContextScorer:
    vocab = vocabulary_for(params.template.fields, context)
    return _scorer_for(params.template, vocab)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    return shifted - np.log(np.exp(shifted).sum())


def _step_log_probs(weights: np.ndarray, scorer: ContextScorer, state: GrammarState, prev: str):
    step = scorer.step_arrays(state, prev)
    return step, _log_softmax(step.scores(weights))


def step_distribution(params: PolicyParameters, context: DialogContext, prefix: Sequence[str]) -> dict[str, float]:
    """Next-action distribution after a grammatical, unfinished prefix."""
    scorer = scorer_for(params, context)
    state = replay(tuple(prefix), scorer.vocab)
    if state.is_terminal:
        raise GrammarError("prefix is already a complete query")
    step, logp = _step_log_probs(params.weights, scorer, state, prefix[-1] if prefix else START)
    return {a: float(np.exp(lp)) for a, lp in zip(step.actions, logp)}


def sequence_logprob(params: PolicyParameters, context: DialogContext, tokens: Sequence[str]) -> float:
    """Log-probability of a complete token sequence (must end the query)."""
    scorer = scorer_for(params, context)
    state = initial_state()
    prev = START
    total = 0.0
    for tok in tokens:
        if state.is_terminal:
            raise GrammarError(f"token {tok!r} after end of query")
        step, logp = _step_log_probs(params.weights, scorer, state, prev)
        try:
            total += logp[step.actions.index(tok)]
        except ValueError:
            raise GrammarError(f"action {tok!r} not permitted in stage {state.stage!r}") from None
        state = advance(state, tok, scorer.vocab)
        prev = tok
    if not state.is_terminal:
        raise GrammarError("sequence does not end the query")
    return float(total)


def logprob_and_gradient(
    params: PolicyParameters, context: DialogContext, tokens: Sequence[str]
) -> tuple[float, np.ndarray]:
    """Log-probability of a complete sequence and its exact weight gradient."""
    scorer = scorer_for(params, context)
    weights = params.weights
    state = initial_state()
    prev = START
    total = 0.0
    idx_parts: list[np.ndarray] = []
    coef_parts: list[np.ndarray] = []
    for tok in tokens:
        if state.is_terminal:
            raise GrammarError(f"token {tok!r} after end of query")
        step = scorer.step_arrays(state, prev)
        logp = _log_softmax(step.scores(weights))
        try:
            chosen = step.actions.index(tok)
        except ValueError:
            raise GrammarError(f"action {tok!r} not permitted in stage {state.stage!r}") from None
        total += logp[chosen]
        if len(step.actions) > 1:  # forced steps contribute nothing to the gradient
            probs = np.exp(logp)
            feats = step.feats
            idx_parts.append(feats.ravel())
            coef_parts.append(np.repeat(-probs, feats.shape[1]))
            idx_parts.append(feats[chosen])
            coef_parts.append(np.ones(feats.shape[1]))
            if step.eoq_pos >= 0:
                idx_parts.append(np.array([step.eoq_idx]))
                coef_parts.append(np.array([float(chosen == step.eoq_pos) - probs[step.eoq_pos]]))
        state = advance(state, tok, scorer.vocab)
        prev = tok
    if not state.is_terminal:
        raise GrammarError("sequence does not end the query")
    if idx_parts:
        grad = np.bincount(
            np.concatenate(idx_parts),
            weights=np.concatenate(coef_parts),
            minlength=params.template.dim,
        )
    else:
        grad = np.zeros(params.template.dim)
    return float(total), grad


def sample(
    params: PolicyParameters,
    context: DialogContext,
    rng: np.random.Generator,
    max_len: int,
) -> tuple[str, ...]:
    """Ancestral sample of a complete query within a token budget.

    ``max_len`` bounds the number of non-end-marker tokens. Actions whose
    shortest continuation would overrun the budget are masked out and the
    step distribution renormalized, so every sample closes in budget.
    """
    if max_len < MIN_QUERY_TOKENS:
        raise ValueError(f"max_len must be at least {MIN_QUERY_TOKENS}")
    scorer = scorer_for(params, context)
    weights = params.weights
    vocab = scorer.vocab
    state = initial_state()
    prev = START
    tokens: list[str] = []
    used = 0
    while not state.is_terminal:
        step = scorer.step_arrays(state, prev)
        actions = step.actions
        if used + 4 <= max_len:  # deepest continuation costs 4 tokens
            allowed = range(len(actions))
        else:
            allowed = [
                i
                for i, a in enumerate(actions)
                if a == EOQ or used + 1 + cost_after(state.stage, a) <= max_len
            ]
            if not allowed:  # budget exhausted mid-clause; close deterministically
                tokens.extend(shortest_completion(state, vocab))
                break
        if len(allowed) == 1:
            choice = allowed[0]
        else:
            scores = step.scores(weights)[allowed]
            probs = np.exp(scores - scores.max())
            cdf = np.cumsum(probs)
            pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            choice = allowed[min(pick, len(cdf) - 1)]
        tok = actions[choice]
        tokens.append(tok)
        used += tok != EOQ
        state = advance(state, tok, vocab)
        prev = tok
    return tuple(tokens)


def _finished(entry) -> bool:
    return entry[2].is_terminal


def beam_search(
    params: PolicyParameters, context: DialogContext, beam_width: int
) -> list[tuple[tuple[str, ...], float]]:
    """Deterministic beam search over complete queries.

    Returns up to ``beam_width`` (tokens, logprob) pairs sorted by descending
    log-probability, exact ties broken by lexicographic token order.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be positive")
    scorer = scorer_for(params, context)
    weights = params.weights
    vocab = scorer.vocab
    beams: list[tuple[float, tuple[str, ...], GrammarState]] = [(0.0, (), initial_state())]
    while not all(_finished(b) for b in beams):
        expanded: list[tuple[float, tuple[str, ...], GrammarState]] = []
        for lp, toks, state in beams:
            if state.is_terminal:
                expanded.append((lp, toks, state))
                continue
            step, logp = _step_log_probs(weights, scorer, state, toks[-1] if toks else START)
            for a, alp in zip(step.actions, logp):
                expanded.append((lp + float(alp), toks + (a,), advance(state, a, vocab)))
        expanded.sort(key=lambda e: (-e[0], e[1]))
        beams = expanded[:beam_width]
    return [(toks, lp) for lp, toks, _ in beams]


def randomized_beam_search(
    params: PolicyParameters,
    context: DialogContext,
    beam_width: int,
    epsilon: float,
    rng: np.random.Generator,
) -> list[tuple[tuple[str, ...], float]]:
    """Beam search where each survivor slot goes rogue with probability eps.

    A rogue slot takes a uniformly random candidate expansion instead of the
    best remaining one; scores still record true model log-probabilities, so
    with epsilon = 0 the result equals :func:`beam_search` exactly.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be positive")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    scorer = scorer_for(params, context)
    weights = params.weights
    vocab = scorer.vocab
    beams: list[tuple[float, tuple[str, ...], GrammarState]] = [(0.0, (), initial_state())]
    while not all(_finished(b) for b in beams):
        expanded: list[tuple[float, tuple[str, ...], GrammarState]] = []
        for lp, toks, state in beams:
            if state.is_terminal:
                expanded.append((lp, toks, state))
                continue
            step, logp = _step_log_probs(weights, scorer, state, toks[-1] if toks else START)
            for a, alp in zip(step.actions, logp):
                expanded.append((lp + float(alp), toks + (a,), advance(state, a, vocab)))
        expanded.sort(key=lambda e: (-e[0], e[1]))
        remaining = list(expanded)
        chosen: list[tuple[float, tuple[str, ...], GrammarState]] = []
        while remaining and len(chosen) < beam_width:
            if epsilon > 0.0 and rng.random() < epsilon:
                pick = int(rng.integers(len(remaining)))
            else:
                pick = 0
            chosen.append(remaining.pop(pick))
        chosen.sort(key=lambda e: (-e[0], e[1]))
        beams = chosen
    return [(toks, lp) for lp, toks, _ in beams]
