"""Query-position predictor: features, training, prediction, persistence."""

import numpy as np
import pytest

from dialoquery.dialog import Dialog, Turn, label_positions, tokenize
from dialoquery.kb import Query
from dialoquery.policy import CheckpointError
from dialoquery.position import (
    PositionModel,
    PositionTrainConfig,
    feature_names,
    featurize_turns,
    position_metrics,
    predict_position,
    train_position,
)
from dialoquery.synth import BenchConfig, generate


@pytest.fixture(scope="module")
def tiny_bench():
    return generate(BenchConfig(n_train=60, n_val=10, n_test=30, seed=5))


def test_feature_names_track_the_schema(restaurants_kb):
    names = feature_names(restaurants_kb)
    assert names[:3] == ("turn_index", "new_candidate_clause", "n_constrained_fields")
    assert names[3:] == tuple(f"mentions_{f}" for f in restaurants_kb.fields)


def test_featurize_turns(restaurants_kb, booking_dialog):
    feats = featurize_turns(booking_dialog, restaurants_kb)
    assert feats.shape == (2, 3 + 5)
    assert list(feats[:, 0]) == [1.0, 2.0]
    # turn 1 introduces area=south and pricerange=moderate
    assert feats[0, 1] == 1.0
    assert feats[0, 2] == 2.0
    # turn 2 adds nothing new before the query fires
    assert feats[1, 1] == 0.0
    assert feats[1, 2] == 2.0
    fields = restaurants_kb.fields
    assert feats[0, 3 + fields.index("area")] == 1.0
    assert feats[0, 3 + fields.index("cuisine")] == 0.0

    prefix = featurize_turns(booking_dialog, restaurants_kb, up_to=1)
    assert np.array_equal(prefix, feats[:1])
    with pytest.raises(ValueError):
        featurize_turns(booking_dialog, restaurants_kb, up_to=3)


def test_train_config_validation():
    with pytest.raises(ValueError, match="label_source"):
        PositionTrainConfig(label_source="oracle")
    with pytest.raises(ValueError, match="learning_rate"):
        PositionTrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="threshold"):
        PositionTrainConfig(threshold=1.0)
    with pytest.raises(ValueError, match="l2"):
        PositionTrainConfig(l2=-1.0)


def test_train_predict_on_the_benchmark(tiny_bench):
    kb = tiny_bench.kb
    train = label_positions(tiny_bench.train, kb)
    model = train_position(train, kb)
    metrics = position_metrics(model, tiny_bench.test, kb, label_source="gold")
    assert metrics.n_dialogs == len(tiny_bench.test)
    # the heuristic labels are noisy but the signal is strong; the learned
    # scorer should at least beat always-guessing-the-last-turn
    assert metrics.strict_accuracy >= 0.5
    assert metrics.avg_turn_distance <= 1.0
    assert set(metrics.to_json()) == {"strict_accuracy", "avg_turn_distance", "n_dialogs"}
    for d in tiny_bench.test[:10]:
        assert 1 <= predict_position(model, d, kb) <= d.n_turns


def test_training_is_deterministic(tiny_bench):
    kb = tiny_bench.kb
    train = label_positions(tiny_bench.train, kb)
    a = train_position(train, kb)
    b = train_position(train, kb)
    assert np.array_equal(a.weights, b.weights)
    assert a.bias == b.bias


def test_gold_label_source(tiny_bench):
    kb = tiny_bench.kb
    model = train_position(
        tiny_bench.train, kb, PositionTrainConfig(label_source="gold")
    )
    assert position_metrics(model, tiny_bench.test, kb).strict_accuracy >= 0.5


def test_train_requires_labels(restaurants_kb, booking_dialog):
    # booking_dialog has a gold position but no heuristic label attached
    with pytest.raises(ValueError, match="heuristic position label"):
        train_position([booking_dialog], restaurants_kb)


def test_degenerate_labels_warn(restaurants_kb):
    one_turn = Dialog(
        (Turn(tokenize("something cheap"), tokenize("la tasca is cheap")),),
        heuristic_position=1,
    )
    with pytest.warns(UserWarning, match="degenerate"):
        train_position([one_turn], restaurants_kb)


def test_predict_falls_back_to_the_last_turn(restaurants_kb, booking_dialog):
    n = 3 + len(restaurants_kb.fields)
    never = PositionModel(
        fields=restaurants_kb.fields,
        weights=np.zeros(n),
        bias=-50.0,
        mean=np.zeros(n),
        std=np.ones(n),
        threshold=0.5,
    )
    assert predict_position(never, booking_dialog, restaurants_kb) == booking_dialog.n_turns
    always = PositionModel(
        fields=restaurants_kb.fields,
        weights=np.zeros(n),
        bias=50.0,
        mean=np.zeros(n),
        std=np.ones(n),
        threshold=0.5,
    )
    assert predict_position(always, booking_dialog, restaurants_kb) == 1


def test_position_metrics_validation(tiny_bench, restaurants_kb, booking_dialog):
    model = train_position(label_positions(tiny_bench.train, tiny_bench.kb), tiny_bench.kb)
    with pytest.raises(ValueError, match="label_source"):
        position_metrics(model, tiny_bench.test, tiny_bench.kb, label_source="guess")
    unlabeled = Dialog(booking_dialog.turns, gold_query=Query((("area", "south"),)))
    with pytest.raises(ValueError, match="gold position label"):
        position_metrics(model, [unlabeled], tiny_bench.kb)


def test_model_round_trip_and_errors(tmp_path, tiny_bench):
    kb = tiny_bench.kb
    model = train_position(label_positions(tiny_bench.train, kb), kb)
    path = tmp_path / "position.json"
    model.save(path)
    loaded = PositionModel.load(path, expected_fields=kb.fields)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.threshold == model.threshold
    for d in tiny_bench.test[:5]:
        assert predict_position(loaded, d, kb) == predict_position(model, d, kb)

    with pytest.raises(CheckpointError, match="cannot read"):
        PositionModel.load(tmp_path / "absent.json")
    with pytest.raises(CheckpointError, match="different schema"):
        PositionModel.load(path, expected_fields=("area",))

    import json

    payload = json.loads(path.read_text())
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**payload, "format": "nope"}))
    with pytest.raises(CheckpointError, match="format"):
        PositionModel.load(bad)
    bad.write_text(json.dumps({**payload, "weights": payload["weights"][:-1]}))
    with pytest.raises(CheckpointError, match="dimensions"):
        PositionModel.load(bad)
