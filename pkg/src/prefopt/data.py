"""Synthetic sensor-QA preference corpus and its line-delimited JSON format.

Every token is symbolic. A context describes a scene seen through one
sensor as (object, position, appearance-cue) triples; the positive answer
follows the sensor's physics, while negatives carry the RGB reading of the
cue or another sensor's physics. With probability ``bias_strength`` each
negative's answer n-gram is also planted in the context, which is what makes
pure likelihood training drift toward the negatives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .fileio import atomic_write

SENSORS = ("thermal", "depth", "xray")
PERCEPTION_TASKS = ("existence", "counting", "position", "general_description")
UNDERSTANDING_TASKS = ("contextual_understanding", "sensor_understanding")
TASKS = PERCEPTION_TASKS + UNDERSTANDING_TASKS


class Vocab:
    """Fixed symbolic token ids (64 total)."""

    PAD, BOS, SEP, EOA = 0, 1, 2, 3
    SENSOR = {name: 4 + i for i, name in enumerate(SENSORS)}
    TASK = {name: 7 + i for i, name in enumerate(TASKS)}
    OBJECTS = tuple(range(13, 23))
    CUES = tuple(range(23, 27))
    # PHYSICS[sensor][cue]: what the appearance cue means for that sensor
    PHYSICS = {s: tuple(27 + 4 * i + c for c in range(4)) for i, s in enumerate(SENSORS)}
    # RGB reading of each cue (the biased interpretation)
    RGB = tuple(range(39, 43))
    COUNTS = tuple(range(43, 47))
    POSITIONS = tuple(range(47, 53))
    FILLERS = tuple(range(53, 63))
    # surface-appearance marker that introduces a planted n-gram
    LOOKS_LIKE = 63
    SIZE = 64


@dataclass(frozen=True)
class PreferenceExample:
    id: str
    sensor: str
    task: str
    context: tuple[int, ...]
    positive: tuple[int, ...]
    negatives: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(int(t) for t in self.context))
        object.__setattr__(self, "positive", tuple(int(t) for t in self.positive))
        object.__setattr__(self, "negatives", tuple(tuple(int(t) for t in n) for n in self.negatives))

    @property
    def candidates(self) -> list[tuple[int, ...]]:
        return [self.positive, *self.negatives]


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_per_sensor: int = 200
    k: int = 3
    bias_strength: float = 0.8
    n_eval_per_sensor: int = 100
    n_neutral_per_sensor: int = 50
    vocab_size: int = Vocab.SIZE
    max_seq_len: int = 48

    def __post_init__(self):
        if self.n_per_sensor < 1:
            raise ConfigError(f"n_per_sensor must be positive, got {self.n_per_sensor}")
        if not 1 <= self.k <= 3:
            raise ConfigError(f"k must be between 1 and 3, got {self.k}")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ConfigError(f"bias_strength must lie in [0, 1], got {self.bias_strength}")
        if self.n_eval_per_sensor < 0 or self.n_neutral_per_sensor < 0:
            raise ConfigError("split sizes must be nonnegative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.vocab_size < Vocab.SIZE:
            raise ConfigError(f"vocab_size must be at least {Vocab.SIZE}")
        if self.max_seq_len < MAX_EXAMPLE_LEN:
            raise ConfigError(
                f"max_seq_len {self.max_seq_len} is below the generator's worst case {MAX_EXAMPLE_LEN}")


# context: BOS sensor task query + 4 triples + 2 fillers + 3 marked 2-grams + SEP
MAX_EXAMPLE_LEN = 4 + 12 + 2 + 9 + 1 + 3


@dataclass
class Splits:
    train: list[PreferenceExample] = field(default_factory=list)
    eval: list[PreferenceExample] = field(default_factory=list)
    neutral: list[PreferenceExample] = field(default_factory=list)


# ---------------------------------------------------------------------------
# generation


def _choice(rng, pool, size=None, exclude=()):
    options = [t for t in pool if t not in exclude]
    if size is None:
        return options[int(rng.integers(len(options)))]
    picked = rng.choice(len(options), size=size, replace=False)
    return [options[int(i)] for i in picked]


def _scene(rng, n_objects: int):
    objects = _choice(rng, Vocab.OBJECTS, n_objects)
    positions = _choice(rng, Vocab.POSITIONS, n_objects)
    cues = [_choice(rng, Vocab.CUES) for _ in range(n_objects)]
    return list(zip(objects, positions, cues))


def _task_item(rng, sensor: str, task: str):
    """Return (query tokens, scene triples, positive content, negative contents)."""
    phys = Vocab.PHYSICS[sensor]
    others = [s for s in SENSORS if s != sensor]
    query: list[int] = []
    if task == "existence":
        scene = _scene(rng, 1)
        obj = scene[0][0]
        positive = [obj]
        negatives = [[o] for o in _choice(rng, Vocab.OBJECTS, 3, exclude={obj})]
    elif task == "counting":
        n = int(rng.integers(1, 5))
        scene = _scene(rng, n)
        positive = [Vocab.COUNTS[n - 1]]
        negatives = [[c] for c in Vocab.COUNTS if c != positive[0]]
    elif task == "position":
        scene = _scene(rng, int(rng.integers(2, 4)))
        target = scene[int(rng.integers(len(scene)))]
        query = [target[0]]
        used = {p for _, p, _ in scene}
        positive = [target[1]]
        negatives = [[p] for p in _choice(rng, Vocab.POSITIONS, 3, exclude=used)]
    elif task == "general_description":
        scene = _scene(rng, int(rng.integers(1, 3)))
        obj, pos, _ = scene[0]
        used_obj = {o for o, _, _ in scene}
        used_pos = {p for _, p, _ in scene}
        alt_obj = _choice(rng, Vocab.OBJECTS, 2, exclude=used_obj)
        alt_pos = _choice(rng, Vocab.POSITIONS, 2, exclude=used_pos)
        positive = [obj, pos]
        negatives = [[obj, alt_pos[0]], [alt_obj[0], pos], [alt_obj[1], alt_pos[1]]]
    elif task == "contextual_understanding":
        scene = _scene(rng, int(rng.integers(1, 3)))
        obj, _, cue = scene[int(rng.integers(len(scene)))]
        query = [obj]
        c = Vocab.CUES.index(cue)
        positive = [phys[c], obj]
        negatives = [[Vocab.RGB[c], obj]] + [[Vocab.PHYSICS[s][c], obj] for s in others]
    elif task == "sensor_understanding":
        scene = _scene(rng, 1)
        c = Vocab.CUES.index(scene[0][2])
        positive = [phys[c]]
        negatives = [[Vocab.RGB[c]]] + [[Vocab.PHYSICS[s][c]] for s in others]
    else:  # pragma: no cover - guarded by TASKS
        raise ConfigError(f"unknown task {task!r}")
    return query, scene, positive, negatives


def _make_example(rng, ex_id: str, sensor: str, task: str, k: int, bias_strength: float):
    query, scene, positive, negatives = _task_item(rng, sensor, task)
    order = rng.permutation(len(negatives))
    negatives = [negatives[int(i)] for i in order][:k]

    segments = [list(t) for t in scene]
    for _ in range(int(rng.integers(0, 3))):
        segments.insert(int(rng.integers(len(segments) + 1)), [_choice(rng, Vocab.FILLERS)])
    for neg in negatives:
        if rng.random() < bias_strength:
            segments.insert(int(rng.integers(len(segments) + 1)), [Vocab.LOOKS_LIKE, *neg])

    context = [Vocab.BOS, Vocab.SENSOR[sensor], Vocab.TASK[task], *query]
    for seg in segments:
        context.extend(seg)
    context.append(Vocab.SEP)
    return PreferenceExample(
        id=ex_id, sensor=sensor, task=task, context=tuple(context),
        positive=tuple(positive + [Vocab.EOA]),
        negatives=tuple(tuple(n + [Vocab.EOA]) for n in negatives),
    )


def _split(rng, prefix: str, n_per_sensor: int, tasks: Sequence[str], k: int,
           bias_strength: float, taken: set) -> list[PreferenceExample]:
    out = []
    for sensor in SENSORS:
        task_list = [tasks[i % len(tasks)] for i in range(n_per_sensor)]
        task_list = [task_list[int(i)] for i in rng.permutation(n_per_sensor)]
        for i, task in enumerate(task_list):
            ex_id = f"{prefix}-{sensor}-{i:05d}"
            # held-out splits never repeat a context seen in an earlier split
            for _ in range(1000):
                ex = _make_example(rng, ex_id, sensor, task, k, bias_strength)
                if ex.context not in taken:
                    break
            else:  # pragma: no cover - the scene space is far larger than any split
                raise ConfigError("could not draw a fresh context; corpus too large for the vocabulary")
            out.append(ex)
    taken.update(ex.context for ex in out)
    return out


def generate(config: GeneratorConfig) -> Splits:
    """Deterministically draw the train, eval and neutral splits for a seed.

    Eval and neutral contexts are disjoint from train contexts (and from each
    other); ids carry a split prefix so they never collide either. The
    neutral split holds perception items with no planted cues.
    """
    rng = np.random.default_rng(config.seed)
    taken: set = set()
    train = _split(rng, "train", config.n_per_sensor, TASKS, config.k, config.bias_strength, taken)
    eval_ = _split(rng, "eval", config.n_eval_per_sensor, TASKS, config.k, config.bias_strength, taken)
    neutral = _split(rng, "neutral", config.n_neutral_per_sensor, PERCEPTION_TASKS, config.k, 0.0, taken)
    return Splits(train, eval_, neutral)


def planted_tokens(example: PreferenceExample) -> set[int]:
    """Answer tokens of the negatives that the positive does not use."""
    pos = set(example.positive)
    return {t for neg in example.negatives for t in neg if t not in pos}


# ---------------------------------------------------------------------------
# validation and serialisation

_FIELDS = ("id", "sensor", "task", "context", "positive", "negatives")


def validate_example(ex: PreferenceExample, max_seq_len: int = 48, vocab_size: int = Vocab.SIZE) -> None:
    if ex.sensor not in SENSORS:
        raise DataError(f"record {ex.id!r}: unknown sensor {ex.sensor!r}", record_id=ex.id)
    if ex.task not in TASKS:
        raise DataError(f"record {ex.id!r}: unknown task {ex.task!r}", record_id=ex.id)
    if not ex.context:
        raise DataError(f"record {ex.id!r}: empty context", record_id=ex.id)
    if not ex.positive:
        raise DataError(f"record {ex.id!r}: empty positive answer", record_id=ex.id)
    if not ex.negatives:
        raise DataError(f"record {ex.id!r}: no negatives", record_id=ex.id)
    for neg in ex.negatives:
        if not neg:
            raise DataError(f"record {ex.id!r}: empty negative answer", record_id=ex.id)
        if neg == ex.positive:
            raise DataError(f"record {ex.id!r}: negative duplicates the positive answer", record_id=ex.id)
    for seq in (ex.context, *ex.candidates):
        if any(t < 0 or t >= vocab_size for t in seq):
            raise DataError(f"record {ex.id!r}: token id outside [0, {vocab_size})", record_id=ex.id)
    longest = len(ex.context) + max(len(a) for a in ex.candidates)
    if longest > max_seq_len:
        raise DataError(f"record {ex.id!r}: length {longest} exceeds budget {max_seq_len}", record_id=ex.id)


def example_to_line(ex: PreferenceExample) -> str:
    record = {
        "id": ex.id,
        "sensor": ex.sensor,
        "task": ex.task,
        "context": list(ex.context),
        "positive": list(ex.positive),
        "negatives": [list(n) for n in ex.negatives],
    }
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def dumps(dataset: Iterable[PreferenceExample]) -> str:
    return "".join(example_to_line(ex) + "\n" for ex in dataset)


def save(dataset: Iterable[PreferenceExample], path) -> None:
    atomic_write(path, dumps(dataset).encode("utf-8"))


def _int_list(value, name, line_no):
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise ParseError(f"line {line_no}: field {name!r} must be an integer array", line=line_no)
    return value


def parse_line(text: str, line_no: int) -> PreferenceExample:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {line_no}: malformed record ({exc.msg})", line=line_no) from None
    if not isinstance(record, dict):
        raise ParseError(f"line {line_no}: record must be an object", line=line_no)
    missing = [f for f in _FIELDS if f not in record]
    if missing:
        raise ParseError(f"line {line_no}: missing field(s) {', '.join(missing)}", line=line_no)
    if not isinstance(record["id"], str):
        raise ParseError(f"line {line_no}: id must be a string", line=line_no)
    for name in ("sensor", "task"):
        if not isinstance(record[name], str):
            raise ParseError(f"line {line_no}: {name} must be a string", line=line_no)
    negatives = record["negatives"]
    if not isinstance(negatives, list):
        raise ParseError(f"line {line_no}: negatives must be an array of arrays", line=line_no)
    return PreferenceExample(
        id=record["id"], sensor=record["sensor"], task=record["task"],
        context=_int_list(record["context"], "context", line_no),
        positive=_int_list(record["positive"], "positive", line_no),
        negatives=[_int_list(n, "negatives", line_no) for n in negatives],
    )


def loads(text: str, max_seq_len: int = 48, vocab_size: int = Vocab.SIZE) -> list[PreferenceExample]:
    out = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        ex = parse_line(line, line_no)
        try:
            validate_example(ex, max_seq_len, vocab_size)
        except DataError as exc:
            exc.line = line_no
            raise
        out.append(ex)
    return out


def load(path, max_seq_len: int = 48, vocab_size: int = Vocab.SIZE) -> list[PreferenceExample]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return loads(text, max_seq_len, vocab_size)
