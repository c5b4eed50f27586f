import numpy as np
import pytest

from dialoquery.dialog import Dialog, Turn, tokenize
from dialoquery.kb import KnowledgeBase, Query, canonicalize


def _turn(user: str, system: str) -> Turn:
    return Turn(tokenize(user), tokenize(system))


@pytest.fixture(scope="session")
def restaurants_kb() -> KnowledgeBase:
    """Four restaurants, five fields; peking_restaurant is the unique
    south + moderate row, so {area=south, pricerange=moderate} retrieves
    exactly one row with five distinct cell values."""
    rows = (
        {
            "name": "peking_restaurant",
            "cuisine": "chinese",
            "area": "south",
            "pricerange": "moderate",
            "phone": "2343-4040",
        },
        {
            "name": "la_tasca",
            "cuisine": "spanish",
            "area": "centre",
            "pricerange": "cheap",
            "phone": "2354-1111",
        },
        {
            "name": "golden_house",
            "cuisine": "chinese",
            "area": "north",
            "pricerange": "expensive",
            "phone": "2345-2222",
        },
        {
            "name": "rice_boat",
            "cuisine": "indian",
            "area": "south",
            "pricerange": "cheap",
            "phone": "2346-3333",
        },
    )
    return KnowledgeBase(tuple(sorted(rows[0])), rows)


@pytest.fixture(scope="session")
def booking_dialog() -> Dialog:
    """User states two constraints, closes, and the system names the match.

    The query belongs at turn 2: the context there carries "moderate" and
    "south", and everything the system says afterwards mentions exactly
    {peking_restaurant, 2343-4040}.
    """
    return Dialog(
        turns=(
            _turn("i want something moderate in the south", "okay any other preference"),
            _turn("no that is all", "how about peking restaurant the phone is 2343-4040"),
        ),
        gold_query=canonicalize(Query((("area", "south"), ("pricerange", "moderate")))),
        gold_position=2,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
