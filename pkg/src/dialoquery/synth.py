"""Synthetic restaurant-domain benchmark with tunable attribute correlation.

The generator plants a gold query in every dialog: the user states the
target row's values for the intent fields one turn at a time, closes with a
contentless confirmation (that turn is the gold query position), and the
system then reveals the target's name and any requested detail fields.
Those revealed values are exactly the weak supervision a learner sees.

The knob that matters is ``rho``: how strongly the primary field determines
its partner field in the table. High correlation makes a partial query
retrieve almost the same rows as the complete one, which compresses the
reward gap between them and stresses estimators that cannot keep the best
query separate from the merely good ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .dialog import Dialog, Turn, heuristic_position, subsequent_entities
from .kb import KnowledgeBase, Query, canonicalize, save_kb
from .reward import reward

# value pools; filler vocabulary below must stay disjoint from all of these
CUISINES = ("chinese", "indian", "italian", "spanish", "thai", "french",
            "korean", "mexican", "japanese", "turkish", "vietnamese", "greek",
            "lebanese", "persian", "ethiopian")
AREAS = ("north", "south", "east", "west", "centre", "riverside")
PRICES = ("cheap", "moderate", "expensive", "luxury")
NAME_FIRST = ("golden", "royal", "silver", "jade", "blue", "crimson", "ancient",
              "cozy", "grand", "little", "lucky", "happy", "green", "white", "red")
NAME_SECOND = ("dragon", "palace", "garden", "house", "kitchen", "table", "spoon",
               "lantern", "harbor", "villa", "corner", "oven")
STREETS = ("mill", "king", "queen", "station", "bridge", "market", "church", "park")

_OPENERS = (
    ("i", "am", "looking", "for"),
    ("i", "would", "like"),
    ("do", "you", "have", "anything"),
    ("i", "want"),
    ("can", "you", "find", "me"),
)
_CHATTER = ((), ("well",), ("um",), ("hello", "there"), ("hi",), ("please",))
_ACKS = (
    ("sure", "anything", "else"),
    ("okay", "any", "other", "preference"),
    ("got", "it", "what", "else"),
    ("alright", "anything", "more"),
)
_CLOSERS = (
    ("no", "that", "is", "all"),
    ("that", "is", "everything", "thanks"),
    ("no", "more", "preferences"),
    ("nothing", "else", "thank", "you"),
)
_SUGGEST = (
    ("how", "about"),
    ("i", "suggest"),
    ("you", "could", "try"),
)
_STALLS = (
    ("let", "me", "see", "what", "i", "can", "find"),
    ("give", "me", "a", "moment", "to", "look"),
)
_NUDGES = (
    ("okay", "what", "do", "you", "suggest"),
    ("so", "what", "can", "you", "offer"),
)
_ASK_DETAIL = (
    ("what", "is", "the",),
    ("can", "i", "get", "the"),
    ("could", "you", "tell", "me", "the"),
)
_THANKS = (("thank", "you", "goodbye"), ("great", "thanks", "bye"))
_WELCOME = (("you", "are", "welcome", "goodbye"), ("glad", "to", "help", "bye"))
_DISTRACTOR_LEADS = (
    ("my", "friend", "prefers"),
    ("last", "time", "i", "tried"),
    ("someone", "recommended"),
)
_OVERCONSTRAIN_LEADS = (
    ("somewhere", "around", "the"),
    ("ideally", "near", "the"),
)

DETAIL_FIELDS = ("phone", "address")


@dataclass(frozen=True)
class BenchConfig:
    """Shape of the generated table and dialogs.

    ``rho`` in [0, 1]: fraction of each primary-field group sharing that
    group's partner value (0 draws the partner field independently).
    """

    n_rows: int = 112
    n_cuisines: int = 14
    n_areas: int = 4
    n_prices: int = 3
    rho: float = 0.875
    n_train: int = 406
    n_val: int = 135
    n_test: int = 135
    clause_count_probs: tuple[float, ...] = (0.25, 0.55, 0.2)  # P(1), P(2), P(3) intent clauses
    detail_count_probs: tuple[float, ...] = (0.3, 0.5, 0.2)  # P(0), P(1), P(2) detail requests
    heuristic_match_rate: float = 0.8
    distractor_rate: float = 0.3
    overconstrain_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 2 <= self.n_cuisines <= len(CUISINES):
            raise ValueError(f"n_cuisines must lie in 2..{len(CUISINES)}")
        if not 2 <= self.n_areas <= len(AREAS):
            raise ValueError(f"n_areas must lie in 2..{len(AREAS)}")
        if not 2 <= self.n_prices <= len(PRICES):
            raise ValueError(f"n_prices must lie in 2..{len(PRICES)}")
        if self.n_rows < 2 * self.n_cuisines:
            raise ValueError("need at least two rows per cuisine group")
        if self.n_rows > len(NAME_FIRST) * len(NAME_SECOND):
            raise ValueError("not enough distinct names for n_rows")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one dialog")
        for name, probs, want in (
            ("clause_count_probs", self.clause_count_probs, 3),
            ("detail_count_probs", self.detail_count_probs, 3),
        ):
            if len(probs) != want or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be {want} non-negative numbers summing to 1")
        for name in ("heuristic_match_rate", "distractor_rate", "overconstrain_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class Benchmark:
    kb: KnowledgeBase
    train: list[Dialog]
    val: list[Dialog]
    test: list[Dialog]
    manifest: dict

    def splits(self) -> dict[str, list[Dialog]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _pick(rng: np.random.Generator, options: Sequence):
    return options[int(rng.integers(len(options)))]


def _weighted_pick(rng: np.random.Generator, probs: Sequence[float]) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, len(probs) - 1))


def _generate_kb(config: BenchConfig, rng: np.random.Generator) -> KnowledgeBase:
    cuisines = list(CUISINES[: config.n_cuisines])
    areas = list(AREAS[: config.n_areas])
    prices = list(PRICES[: config.n_prices])
    n = config.n_rows

    name_ids = rng.permutation(len(NAME_FIRST) * len(NAME_SECOND))[:n]
    names = [f"{NAME_FIRST[i // len(NAME_SECOND)]}_{NAME_SECOND[i % len(NAME_SECOND)]}" for i in name_ids]
    phones = []
    seen_phones = set()
    while len(phones) < n:
        p = f"{rng.integers(2000, 9999)}-{rng.integers(1000, 9999)}"
        if p not in seen_phones:
            seen_phones.add(p)
            phones.append(p)
    addresses = []
    seen_addr = set()
    while len(addresses) < n:
        a = f"{rng.integers(1, 199)}_{_pick(rng, STREETS)}_road"
        if a not in seen_addr:
            seen_addr.add(a)
            addresses.append(a)

    cuisine_col = [cuisines[i % len(cuisines)] for i in range(n)]
    rng.shuffle(cuisine_col)

    price_col = [""] * n
    if config.rho == 0.0:
        for i in range(n):
            price_col[i] = _pick(rng, prices)
    else:
        shuffled_prices = list(prices)
        rng.shuffle(shuffled_prices)
        partner = {c: shuffled_prices[i % len(prices)] for i, c in enumerate(cuisines)}
        for c in cuisines:
            group = [i for i in range(n) if cuisine_col[i] == c]
            rng.shuffle(group)
            k = round(config.rho * len(group))
            rest = [p for p in prices if p != partner[c]]
            for j, i in enumerate(group):
                price_col[i] = partner[c] if j < k else _pick(rng, rest)

    rows = tuple(
        {
            "name": names[i],
            "cuisine": cuisine_col[i],
            "area": _pick(rng, areas),
            "pricerange": price_col[i],
            "phone": phones[i],
            "address": addresses[i],
        }
        for i in range(n)
    )
    return KnowledgeBase(tuple(sorted(rows[0])), rows)


def _spoken(value: str) -> tuple[str, ...]:
    """Values are written multiword in utterances; linking re-joins them."""
    return tuple(value.split("_"))


INTENT_FIELDS_BY_COUNT = {
    1: ("cuisine",),
    2: ("cuisine", "pricerange"),
    3: ("cuisine", "pricerange", "area"),
}


def _generate_dialog(
    kb: KnowledgeBase,
    config: BenchConfig,
    rng: np.random.Generator,
    heuristic_should_match: bool,
) -> Dialog:
    target = kb.rows[int(rng.integers(kb.n_rows))]
    n_clauses = 1 + _weighted_pick(rng, config.clause_count_probs)
    intent_fields = list(INTENT_FIELDS_BY_COUNT[n_clauses])
    rng.shuffle(intent_fields)
    gold = canonicalize(Query(tuple((f, target[f]) for f in intent_fields)))

    add_distractor = rng.random() < config.distractor_rate
    distractor_turn = int(rng.integers(n_clauses)) if add_distractor else -1
    add_overconstrain = rng.random() < config.overconstrain_rate
    over_field = None
    if add_overconstrain:
        unconstrained = [f for f in ("area", "pricerange", "cuisine") if f not in intent_fields]
        over_field = unconstrained[0] if unconstrained else None

    turns: list[Turn] = []
    for i, f in enumerate(intent_fields):
        user = list(_pick(rng, _CHATTER)) + list(_pick(rng, _OPENERS)) + list(_spoken(target[f]))
        if i == distractor_turn:
            g = str(_pick(rng, ("cuisine", "pricerange", "area")))
            pool = [v for v in kb.field_values(g) if v != target[g]]
            user += list(_pick(rng, _DISTRACTOR_LEADS)) + list(_spoken(_pick(rng, sorted(pool))))
        if i == 0 and over_field is not None:
            user += list(_pick(rng, _OVERCONSTRAIN_LEADS)) + list(_spoken(target[over_field]))
        turns.append(Turn(tuple(user), tuple(_pick(rng, _ACKS))))

    # the gold position: the user stops adding constraints here
    closer = tuple(_pick(rng, _CLOSERS))
    name_span = _spoken(target["name"])
    if heuristic_should_match:
        turns.append(Turn(closer, tuple(_pick(rng, _SUGGEST)) + name_span))
    else:
        turns.append(Turn(closer, tuple(_pick(rng, _STALLS))))
        turns.append(Turn(tuple(_pick(rng, _NUDGES)), tuple(_pick(rng, _SUGGEST)) + name_span))
    gold_position = n_clauses + 1

    n_details = _weighted_pick(rng, config.detail_count_probs)
    detail_fields = list(DETAIL_FIELDS)
    rng.shuffle(detail_fields)
    for f in detail_fields[:n_details]:
        user = tuple(_pick(rng, _ASK_DETAIL)) + (f,)
        system = ("the", f, "is") + _spoken(target[f])
        turns.append(Turn(user, system))
    if rng.random() < 0.5:
        turns.append(Turn(tuple(_pick(rng, _THANKS)), tuple(_pick(rng, _WELCOME))))

    dialog = Dialog(tuple(turns), gold_query=gold, gold_position=gold_position)
    got = heuristic_position(dialog, kb)
    want = gold_position if heuristic_should_match else gold_position + 1
    if got != want:
        raise AssertionError(
            f"generator bug: heuristic position {got}, expected {want} "
            f"(match={heuristic_should_match})"
        )
    return dialog


def _dialog_job(payload) -> Dialog:
    kb, config, child_seq, should_match = payload
    return _generate_dialog(kb, config, np.random.default_rng(child_seq), should_match)


def _generate_split(
    kb: KnowledgeBase,
    config: BenchConfig,
    seq: np.random.SeedSequence,
    n_dialogs: int,
    jobs: int = 1,
) -> list[Dialog]:
    alloc_rng = np.random.default_rng(seq)
    n_match = round(config.heuristic_match_rate * n_dialogs)
    flags = np.zeros(n_dialogs, dtype=bool)
    flags[:n_match] = True
    alloc_rng.shuffle(flags)
    children = seq.spawn(n_dialogs)
    payloads = [(kb, config, children[i], bool(flags[i])) for i in range(n_dialogs)]
    # each dialog owns a spawned seed, so the split is identical at any width
    if jobs <= 1 or n_dialogs <= 1:
        return [_dialog_job(p) for p in payloads]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_dialog_job, payloads))


def generate(config: BenchConfig, jobs: int = 1) -> Benchmark:
    """Build the table and all three dialog splits deterministically."""
    root = np.random.SeedSequence(config.seed)
    kb_seq, train_seq, val_seq, test_seq = root.spawn(4)
    kb = _generate_kb(config, np.random.default_rng(kb_seq))
    train = _generate_split(kb, config, train_seq, config.n_train, jobs)
    val = _generate_split(kb, config, val_seq, config.n_val, jobs)
    test = _generate_split(kb, config, test_seq, config.n_test, jobs)

    all_dialogs = train + val + test
    matches = sum(heuristic_position(d, kb) == d.gold_position for d in all_dialogs)
    manifest = {
        "config": asdict(config),
        "n_rows": kb.n_rows,
        "fields": list(kb.fields),
        "achieved_rho": _achieved_rho(kb, config),
        "achieved_heuristic_match_rate": matches / len(all_dialogs),
        "mean_turns": sum(d.n_turns for d in all_dialogs) / len(all_dialogs),
    }
    return Benchmark(kb, train, val, test, manifest)


def _achieved_rho(kb: KnowledgeBase, config: BenchConfig) -> float:
    """Fraction of rows whose partner value is its group's modal value."""
    groups: dict[str, list[str]] = {}
    for row in kb.rows:
        groups.setdefault(row["cuisine"], []).append(row["pricerange"])
    hits = 0
    for prices in groups.values():
        counts: dict[str, int] = {}
        for p in prices:
            counts[p] = counts.get(p, 0) + 1
        hits += max(counts.values())
    return hits / kb.n_rows


def verify_gold(kb: KnowledgeBase, dialogs: Sequence[Dialog], delta: float = 0.05) -> dict:
    """Check every planted query earns positive reward; report partial gaps.

    For multi-clause golds, the best proper non-empty clause subset is
    scored; ``within_delta`` counts dialogs where that runner-up comes
    within ``delta`` of the gold reward (the confusable regime).
    """
    gold_rewards = []
    gaps = []
    within = 0
    for i, d in enumerate(dialogs):
        if d.gold_query is None or d.gold_position is None:
            raise AssertionError(f"dialog {i} is missing gold annotations")
        supervision = subsequent_entities(d, d.gold_position, kb)
        if not supervision:
            raise AssertionError(f"dialog {i} has no subsequent entities at its gold position")
        r_gold = reward(d.gold_query, supervision, kb)
        if r_gold <= 0.0:
            raise AssertionError(f"dialog {i}: gold query earns reward {r_gold}")
        gold_rewards.append(r_gold)
        clauses = d.gold_query.clauses
        if len(clauses) < 2:
            continue
        best_partial = 0.0
        for size in range(1, len(clauses)):
            for sub in combinations(clauses, size):
                best_partial = max(best_partial, reward(Query(sub), supervision, kb))
        gap = r_gold - best_partial
        gaps.append(gap)
        within += gap <= delta
    report = {
        "n_dialogs": len(dialogs),
        "min_gold_reward": min(gold_rewards),
        "mean_gold_reward": sum(gold_rewards) / len(gold_rewards),
        "n_multi_clause": len(gaps),
        "delta": delta,
    }
    if gaps:
        report.update(
            min_partial_gap=min(gaps),
            mean_partial_gap=sum(gaps) / len(gaps),
            max_partial_gap=max(gaps),
            n_within_delta=within,
            frac_within_delta=within / len(gaps),
        )
    return report


def save_benchmark(bench: Benchmark, outdir) -> None:
    """Write kb.json, one corpus file per split, and the manifest."""
    from pathlib import Path

    from .dialog import save_corpus

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    save_kb(bench.kb, out / "kb.json")
    for name, dialogs in bench.splits().items():
        save_corpus(dialogs, out / f"{name}.json")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(bench.manifest, fh, indent=2)
        fh.write("\n")
