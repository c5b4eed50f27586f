"""Tabular knowledge base and conjunctive equality queries.

A knowledge base is one flat table: named string fields, rows that all share
the same schema. Queries are conjunctions of field = value constraints with
at most one constraint per field; execution filters rows and the answer is
the set of distinct cell values over the retrieved rows.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

SELECT = "SELECT"
STAR = "*"
FROM = "FROM"
WHERE = "WHERE"
AND = "AND"
EQUALS = "="
TABLE_NAME = "kb"
EOQ = "<eoq>"

KEYWORDS = frozenset({SELECT, STAR, FROM, WHERE, AND, EQUALS})
RESERVED = KEYWORDS | {EOQ}

_WHITESPACE = re.compile(r"\s+")


class DataError(ValueError):
    """Malformed input data (files, rows, values)."""


class SchemaError(DataError):
    """A field name is unknown or the row schema is inconsistent."""


class QueryParseError(DataError):
    """A token sequence is not a well-formed query."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token {position})")
        self.position = position


def normalize(value: str) -> str:
    """Canonical surface form: lowercase, trimmed, inner whitespace -> '_'."""
    return _WHITESPACE.sub("_", value.strip().lower())


@dataclass(frozen=True, order=True)
class Query:
    """Conjunction of equality clauses, at most one per field.

    ``clauses`` keeps insertion order; use :func:`canonicalize` for the
    field-sorted form used when comparing or serializing queries.
    """

    clauses: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        seen = set()
        for f, v in self.clauses:
            if not f or not v:
                raise ValueError(f"empty field or value in clause {(f, v)!r}")
            if f in seen:
                raise ValueError(f"duplicate field {f!r} in query")
            seen.add(f)

    @property
    def fields(self) -> frozenset[str]:
        return frozenset(f for f, _ in self.clauses)

    def __str__(self) -> str:
        return " ".join(serialize(self))


def canonicalize(query: Query) -> Query:
    """The same query with clauses sorted by field name."""
    return Query(tuple(sorted(query.clauses)))


@dataclass(frozen=True)
class KnowledgeBase:
    """Immutable flat table of normalized string values."""

    fields: tuple[str, ...]
    rows: tuple[dict[str, str], ...]
    # caches filled in __post_init__
    _values_by_field: dict = field(repr=False, compare=False, default=None)
    _all_values: frozenset = field(repr=False, compare=False, default=None)
    _multiword: tuple = field(repr=False, compare=False, default=None)
    _multiword_by_first: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if not self.fields:
            raise SchemaError("knowledge base declares no fields")
        if len(set(self.fields)) != len(self.fields):
            raise SchemaError("duplicate field names in schema")
        for f in self.fields:
            if not f or normalize(f) != f:
                raise SchemaError(f"field name {f!r} is empty or not normalized")
            if f in RESERVED:
                raise SchemaError(f"field name {f!r} collides with a query keyword")
        if not self.rows:
            raise DataError("knowledge base has no rows")
        schema = set(self.fields)
        by_field: dict[str, set[str]] = {f: set() for f in self.fields}
        for i, row in enumerate(self.rows):
            if set(row) != schema:
                raise SchemaError(f"row {i} does not match the declared schema")
            for f, v in row.items():
                if not isinstance(v, str) or not v or normalize(v) != v:
                    raise DataError(f"row {i} field {f!r}: value {v!r} is not a normalized string")
                by_field[f].add(v)
        object.__setattr__(self, "_values_by_field", {f: frozenset(vs) for f, vs in by_field.items()})
        all_values = frozenset().union(*by_field.values())
        object.__setattr__(self, "_all_values", all_values)
        multi = tuple(sorted((tuple(v.split("_")), v) for v in all_values if "_" in v))
        object.__setattr__(self, "_multiword", multi)
        by_first: dict[str, list[tuple[tuple[str, ...], str]]] = {}
        for parts, v in multi:
            by_first.setdefault(parts[0], []).append((parts, v))
        for lst in by_first.values():
            lst.sort(key=lambda pv: -len(pv[0]))  # longest match first
        object.__setattr__(self, "_multiword_by_first", by_first)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def field_values(self, fieldname: str) -> frozenset[str]:
        try:
            return self._values_by_field[fieldname]
        except KeyError:
            raise SchemaError(f"unknown field {fieldname!r}") from None

    @property
    def cell_values(self) -> frozenset[str]:
        """Every distinct value that appears anywhere in the table."""
        return self._all_values

    @property
    def multiword_values(self) -> tuple[tuple[tuple[str, ...], str], ...]:
        """(token parts, value) for values spanning several words."""
        return self._multiword

    def fields_of_value(self, value: str) -> tuple[str, ...]:
        """Fields in which ``value`` occurs as a cell value."""
        return tuple(f for f in self.fields if value in self._values_by_field[f])


@dataclass(frozen=True)
class ResultSet:
    """Rows retrieved by a query and the distinct cell values they contain."""

    row_indices: tuple[int, ...]
    entities: frozenset[str]

    @property
    def n_rows(self) -> int:
        return len(self.row_indices)


def execute(query: Query, kb: KnowledgeBase) -> ResultSet:
    """Run a conjunctive query; unknown clause fields raise SchemaError."""
    for f, _ in query.clauses:
        if f not in kb._values_by_field:
            raise SchemaError(f"query constrains unknown field {f!r}")
    idx = []
    entities: set[str] = set()
    for i, row in enumerate(kb.rows):
        if all(row[f] == v for f, v in query.clauses):
            idx.append(i)
            entities.update(row.values())
    return ResultSet(tuple(idx), frozenset(entities))


def serialize(query: Query) -> tuple[str, ...]:
    """Canonical token sequence, ending in the end-of-query marker."""
    tokens = [SELECT, STAR, FROM, TABLE_NAME]
    for i, (f, v) in enumerate(canonicalize(query).clauses):
        tokens.append(WHERE if i == 0 else AND)
        tokens.extend((f, EQUALS, v))
    tokens.append(EOQ)
    return tuple(tokens)


def parse_query(tokens) -> Query:
    """Parse a token sequence (or whitespace-joined string) into a Query.

    Accepts any non-keyword table name and an optional trailing end marker.
    Raises QueryParseError with the offending token position, or ValueError
    for duplicate constraint fields.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = list(tokens)
    if tokens and tokens[-1] == EOQ:
        tokens = tokens[:-1]

    def expect(pos: int, want: str) -> None:
        if pos >= len(tokens):
            raise QueryParseError(f"expected {want!r}, found end of sequence", pos)
        if tokens[pos] != want:
            raise QueryParseError(f"expected {want!r}, found {tokens[pos]!r}", pos)

    expect(0, SELECT)
    expect(1, STAR)
    expect(2, FROM)
    if len(tokens) < 4:
        raise QueryParseError("expected a table name, found end of sequence", 3)
    if tokens[3] in RESERVED:
        raise QueryParseError(f"expected a table name, found {tokens[3]!r}", 3)
    pos = 4
    clauses: list[tuple[str, str]] = []
    while pos < len(tokens):
        expect(pos, WHERE if not clauses else AND)
        f_pos, v_pos = pos + 1, pos + 3
        if v_pos >= len(tokens):
            raise QueryParseError("truncated constraint clause", len(tokens))
        f, v = tokens[f_pos], tokens[v_pos]
        if f in RESERVED:
            raise QueryParseError(f"expected a field name, found {f!r}", f_pos)
        expect(pos + 2, EQUALS)
        if v in RESERVED:
            raise QueryParseError(f"expected a value, found {v!r}", v_pos)
        clauses.append((f, v))
        pos += 4
    return Query(tuple(clauses))


def load_kb(path) -> KnowledgeBase:
    """Load a knowledge base from a JSON array of flat string-valued objects.

    The first object fixes the schema; values and field names are normalized.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read knowledge base {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"knowledge base {path} is not valid JSON: {e}") from e
    if not isinstance(data, list) or not data:
        raise DataError(f"knowledge base {path} must be a non-empty JSON array")
    rows = []
    fields: tuple[str, ...] = ()
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise DataError(f"knowledge base row {i} is not an object")
        row = {}
        for k, v in obj.items():
            if not isinstance(v, str):
                raise DataError(f"knowledge base row {i} field {k!r}: value must be a string")
            row[normalize(k)] = normalize(v)
        if i == 0:
            fields = tuple(sorted(row))
        rows.append(row)
    return KnowledgeBase(fields=fields, rows=tuple(rows))


def save_kb(kb: KnowledgeBase, path) -> None:
    """Write the table back out as a JSON array of objects."""
    data = [{f: row[f] for f in kb.fields} for row in kb.rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
