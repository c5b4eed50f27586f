"""Dialogs, contexts, entity linking, and position heuristics.

A dialog is a sequence of (user, system) turn pairs, optionally annotated
with a gold query and a gold query position. Turn positions are 1-based
throughout. The context at position q is everything up to and including the
q-th user utterance; the subsequent entities at q are the knowledge-base
values mentioned from the q-th system utterance onward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .kb import DataError, KnowledgeBase, Query, canonicalize, normalize, parse_query, serialize

Utterance = tuple[str, ...]


def tokenize(text: str) -> Utterance:
    """Whitespace tokenization with per-token normalization."""
    return tuple(normalize(t) for t in text.split())


@dataclass(frozen=True)
class Turn:
    user: Utterance
    system: Utterance

    def __post_init__(self):
        if not self.user or not self.system:
            raise DataError("turn is missing a user or system utterance")


@dataclass(frozen=True)
class Dialog:
    """One conversation, optionally with gold annotations.

    ``heuristic_position`` caches the output of :func:`heuristic_position`
    when a corpus has been run through the position labeler.
    """

    turns: tuple[Turn, ...]
    gold_query: Query | None = None
    gold_position: int | None = None
    heuristic_position: int | None = None

    def __post_init__(self):
        if not self.turns:
            raise DataError("dialog has no turns")
        for name in ("gold_position", "heuristic_position"):
            pos = getattr(self, name)
            if pos is not None and not 1 <= pos <= len(self.turns):
                raise DataError(f"{name} {pos} outside 1..{len(self.turns)}")

    @property
    def n_turns(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class DialogContext:
    """The utterances visible when issuing a query at ``position``.

    ``utterances`` alternates user/system and ends with the user utterance
    of turn ``position`` (so it has 2*position - 1 entries).
    """

    utterances: tuple[Utterance, ...]
    position: int

    def tokens(self) -> tuple[str, ...]:
        return tuple(t for utt in self.utterances for t in utt)

    @property
    def token_set(self) -> frozenset[str]:
        return frozenset(self.tokens())


def context_at(dialog: Dialog, position: int) -> DialogContext:
    """Context for issuing a query at 1-based turn ``position``."""
    if not 1 <= position <= dialog.n_turns:
        raise ValueError(f"position {position} outside 1..{dialog.n_turns}")
    utts: list[Utterance] = []
    for turn in dialog.turns[: position - 1]:
        utts.extend((turn.user, turn.system))
    utts.append(dialog.turns[position - 1].user)
    return DialogContext(tuple(utts), position)


def link_entities(utterance: Sequence[str], kb: KnowledgeBase) -> frozenset[str]:
    """KB cell values mentioned in an utterance.

    Single-token values match by exact token equality; multiword values match
    either as one underscore-joined token or as a contiguous token span.
    """
    found = set(utterance) & kb.cell_values
    for parts, value in kb.multiword_values:
        n = len(parts)
        if n > len(utterance):
            continue
        for i in range(len(utterance) - n + 1):
            if tuple(utterance[i : i + n]) == parts:
                found.add(value)
                break
    return frozenset(found)


def linked_entities(utterances: Iterable[Sequence[str]], kb: KnowledgeBase) -> frozenset[str]:
    """Union of entity links over several utterances."""
    out: set[str] = set()
    for utt in utterances:
        out |= link_entities(utt, kb)
    return frozenset(out)


def merge_value_spans(utterance: Sequence[str], kb: KnowledgeBase) -> Utterance:
    """Rewrite multiword KB value spans as their single-token form.

    Greedy leftmost longest match, so "peking restaurant" becomes the one
    token "peking_restaurant" when that value exists in the table. Needed
    before decoding so that multiword values are copyable as single tokens.
    """
    by_first = kb._multiword_by_first
    out: list[str] = []
    i = 0
    n = len(utterance)
    while i < n:
        matched = None
        for parts, value in by_first.get(utterance[i], ()):
            k = len(parts)
            if i + k <= n and tuple(utterance[i : i + k]) == parts:
                matched = (k, value)
                break
        if matched:
            out.append(matched[1])
            i += matched[0]
        else:
            out.append(utterance[i])
            i += 1
    return tuple(out)


def merge_dialog_spans(dialog: Dialog, kb: KnowledgeBase) -> Dialog:
    """Apply :func:`merge_value_spans` to every utterance of a dialog."""
    turns = tuple(
        Turn(merge_value_spans(t.user, kb), merge_value_spans(t.system, kb))
        for t in dialog.turns
    )
    return Dialog(turns, dialog.gold_query, dialog.gold_position, dialog.heuristic_position)


def subsequent_entities(dialog: Dialog, position: int, kb: KnowledgeBase) -> frozenset[str]:
    """Entities in the dialog from the system turn at ``position`` onward.

    This is the weak supervision signal for a query issued at ``position``:
    everything the system (and the user, in follow-ups) mentions afterwards.
    """
    if not 1 <= position <= dialog.n_turns:
        raise ValueError(f"position {position} outside 1..{dialog.n_turns}")
    utts: list[Utterance] = [dialog.turns[position - 1].system]
    for turn in dialog.turns[position:]:
        utts.extend((turn.user, turn.system))
    return linked_entities(utts, kb)


def heuristic_position(dialog: Dialog, kb: KnowledgeBase) -> int:
    """First turn whose system utterance mentions a previously unseen entity.

    Falls back to the last turn when no system utterance introduces one.
    The intuition: the system can only name a new entity after consulting
    the knowledge base, so the query must have fired by then.
    """
    seen: set[str] = set()
    for i, turn in enumerate(dialog.turns, start=1):
        seen |= link_entities(turn.user, kb)
        sys_entities = link_entities(turn.system, kb)
        if sys_entities - seen:
            return i
        seen |= sys_entities
    return dialog.n_turns


def label_positions(dialogs: Sequence[Dialog], kb: KnowledgeBase) -> list[Dialog]:
    """Attach the heuristic position to every dialog."""
    return [
        Dialog(d.turns, d.gold_query, d.gold_position, heuristic_position(d, kb))
        for d in dialogs
    ]


def _dialog_from_obj(obj: dict, index: int) -> Dialog:
    where = f"dialog {index}"
    if not isinstance(obj, dict) or "turns" not in obj:
        raise DataError(f"{where}: expected an object with a 'turns' array")
    raw_turns = obj["turns"]
    if not isinstance(raw_turns, list) or not raw_turns:
        raise DataError(f"{where}: 'turns' must be a non-empty array")
    turns = []
    for j, t in enumerate(raw_turns):
        if not isinstance(t, dict) or "user" not in t or "system" not in t:
            raise DataError(f"{where} turn {j}: expected 'user' and 'system' strings")
        try:
            turns.append(Turn(tokenize(str(t["user"])), tokenize(str(t["system"]))))
        except DataError as e:
            raise DataError(f"{where} turn {j}: {e}") from None
    gold_query = None
    if obj.get("gold_query") is not None:
        try:
            gold_query = canonicalize(parse_query(obj["gold_query"]))
        except ValueError as e:
            raise DataError(f"{where}: bad gold_query: {e}") from None
    try:
        return Dialog(
            turns=tuple(turns),
            gold_query=gold_query,
            gold_position=obj.get("gold_position"),
            heuristic_position=obj.get("heuristic_position"),
        )
    except DataError as e:
        raise DataError(f"{where}: {e}") from None


def load_corpus(path) -> list[Dialog]:
    """Load dialogs from a JSON array (see the corpus schema in the README)."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"corpus {path} is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise DataError(f"corpus {path} must be a JSON array of dialogs")
    return [_dialog_from_obj(obj, i) for i, obj in enumerate(data)]


def save_corpus(dialogs: Sequence[Dialog], path) -> None:
    """Write dialogs back out in the corpus JSON schema."""
    data = []
    for d in dialogs:
        obj: dict = {
            "turns": [{"user": " ".join(t.user), "system": " ".join(t.system)} for t in d.turns]
        }
        if d.gold_query is not None:
            obj["gold_query"] = " ".join(serialize(d.gold_query))
        if d.gold_position is not None:
            obj["gold_position"] = d.gold_position
        if d.heuristic_position is not None:
            obj["heuristic_position"] = d.heuristic_position
        data.append(obj)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
