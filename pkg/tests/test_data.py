import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefopt.data import (MAX_EXAMPLE_LEN, PERCEPTION_TASKS, SENSORS, TASKS, GeneratorConfig, PreferenceExample,
                          Vocab, dumps, generate, load, loads, planted_tokens, save, validate_example)
from prefopt.errors import ConfigError, DataError, ParseError


def small(seed=0, **kw):
    return generate(GeneratorConfig(seed=seed, **{"n_per_sensor": 20, "n_eval_per_sensor": 10,
                                                  "n_neutral_per_sensor": 6, **kw}))


def test_config_echo():
    splits = generate(GeneratorConfig(seed=7, n_per_sensor=4, k=3))
    assert len(splits.train) == 12
    assert all(len(ex.negatives) == 3 for ex in splits.train)
    assert len(splits.eval) == 300 and len(splits.neutral) == 150


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        s = small(seed=11)
        save(s.train + s.eval + s.neutral, tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert dumps(small(seed=11).train) != dumps(small(seed=12).train)


def test_zero_bias_plants_nothing():
    for ex in small(bias_strength=0.0).train:
        assert Vocab.LOOKS_LIKE not in ex.context
        assert not planted_tokens(ex) & set(ex.context)


def test_bias_plants_marked_ngrams():
    splits = small(bias_strength=1.0)
    for ex in splits.train:
        for neg in ex.negatives:
            content = list(neg[:-1])
            window = [Vocab.LOOKS_LIKE] + content
            ctx = list(ex.context)
            assert any(ctx[i:i + len(window)] == window for i in range(len(ctx)))


def test_planted_rate_tracks_bias_strength():
    splits = generate(GeneratorConfig(seed=3, n_per_sensor=200, n_eval_per_sensor=0, n_neutral_per_sensor=0))
    n_neg = sum(len(ex.negatives) for ex in splits.train)
    n_marks = sum(ex.context.count(Vocab.LOOKS_LIKE) for ex in splits.train)
    assert abs(n_marks / n_neg - 0.8) < 0.03


@pytest.mark.parametrize("kwargs", [{"k": 0}, {"k": 4}, {"n_per_sensor": 0}, {"bias_strength": 1.5},
                                    {"max_seq_len": MAX_EXAMPLE_LEN - 1}, {"vocab_size": 10}])
def test_invalid_generator_config(kwargs):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kwargs)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 32), st.integers(1, 3), st.floats(0, 1))
def test_generated_invariants(seed, k, bias):
    splits = generate(GeneratorConfig(seed=seed, n_per_sensor=6, k=k, bias_strength=bias,
                                      n_eval_per_sensor=6, n_neutral_per_sensor=4))
    for ex in splits.train + splits.eval + splits.neutral:
        validate_example(ex)
        answers = ex.candidates
        assert len(set(answers)) == len(answers)
        assert len(ex.negatives) == k
        assert ex.positive[-1] == Vocab.EOA and all(n[-1] == Vocab.EOA for n in ex.negatives)
    train_ids = {ex.id for ex in splits.train}
    assert not train_ids & {ex.id for ex in splits.eval}
    assert not {ex.context for ex in splits.train} & {ex.context for ex in splits.eval}
    assert all(Vocab.LOOKS_LIKE not in ex.context for ex in splits.neutral)


def test_split_composition():
    splits = small()
    for sensor in SENSORS:
        tasks = [ex.task for ex in splits.eval if ex.sensor == sensor]
        assert set(tasks) <= set(TASKS) and len(tasks) == 10
    assert {ex.task for ex in splits.neutral} <= set(PERCEPTION_TASKS)


def test_sensor_physics_rule():
    for ex in small().train:
        if ex.task == "sensor_understanding":
            cue = next(t for t in ex.context if t in Vocab.CUES)
            c = Vocab.CUES.index(cue)
            assert ex.positive == (Vocab.PHYSICS[ex.sensor][c], Vocab.EOA)
            assert (Vocab.RGB[c], Vocab.EOA) in ex.negatives or len(ex.negatives) < 3


# serialisation


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load(path) == []


def test_round_trip_100_records_byte_identical(tmp_path):
    records = small(n_per_sensor=34).train[:100]
    assert len(records) == 100
    path = tmp_path / "d.jsonl"
    save(records, path)
    loaded = load(path)
    assert loaded == records
    save(loaded, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_canonical_line_format():
    ex = PreferenceExample("a-1", "depth", "counting", [1, 5], [44, 3], [[43, 3]])
    assert dumps([ex]) == ('{"id":"a-1","sensor":"depth","task":"counting","context":[1,5],'
                           '"positive":[44,3],"negatives":[[43,3]]}\n')


def _line(**overrides):
    record = {"id": "r1", "sensor": "xray", "task": "existence", "context": [1, 6, 7, 2],
              "positive": [13, 3], "negatives": [[14, 3], [15, 3]]}
    record.update(overrides)
    return json.dumps(record)


def test_duplicate_answer_names_id():
    text = _line() + "\n" + _line(id="bad-7", negatives=[[13, 3]]) + "\n"
    with pytest.raises(DataError, match="bad-7") as info:
        loads(text)
    assert info.value.record_id == "bad-7" and info.value.line == 2


def test_malformed_line_reports_line_number():
    text = _line() + "\n\n" + "{not json\n"
    with pytest.raises(ParseError, match="line 3") as info:
        loads(text)
    assert info.value.line == 3


@pytest.mark.parametrize("overrides, message", [
    ({"sensor": "sonar"}, "unknown sensor"),
    ({"task": "color"}, "unknown task"),
    ({"negatives": []}, "no negatives"),
    ({"positive": []}, "empty positive"),
    ({"context": [1, 99]}, "outside"),
    ({"context": [1] * 47}, "exceeds"),
])
def test_validation_errors(overrides, message):
    with pytest.raises(DataError, match=message):
        loads(_line(**overrides))


@pytest.mark.parametrize("overrides", [{"context": "1 2"}, {"negatives": [[1, True]]}, {"id": 5}])
def test_type_errors_are_parse_errors(overrides):
    with pytest.raises(ParseError):
        loads(_line(**overrides))


def test_missing_field():
    record = json.loads(_line())
    del record["positive"]
    with pytest.raises(ParseError, match="positive"):
        loads(json.dumps(record))
