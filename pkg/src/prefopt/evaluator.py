"""Multiple-choice accuracy by length-normalised log-probability."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PERCEPTION_TASKS, SENSORS, TASKS, UNDERSTANDING_TASKS, PreferenceExample
from .errors import ContractError, DataError
from .fileio import atomic_write_text
from .model import ModelParameters, avg_log_prob, sequence_avg_log_probs


def score_candidates(params: ModelParameters, context: Sequence[int],
                     candidates: Sequence[Sequence[int]]) -> list[float]:
    """avg_log_prob of each candidate, in the given order."""
    if len(candidates) < 2:
        raise ContractError("score_candidates needs at least two candidates")
    if any(len(c) == 0 for c in candidates):
        raise ContractError("score_candidates: empty candidate")
    with ad.no_grad():
        return [avg_log_prob(params, context, c).item() for c in candidates]


def predict(scores: Sequence[float]) -> int:
    """Argmax; ties go to the lowest index."""
    if len(scores) == 0:
        raise ContractError("predict: no scores")
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def batch_scores(params: ModelParameters, examples: Sequence[PreferenceExample],
                 chunk: int = 64) -> list[np.ndarray]:
    """Candidate scores per example (positive first), batched for speed."""
    out: list[np.ndarray] = []
    with ad.no_grad():
        for start in range(0, len(examples), chunk):
            part = examples[start : start + chunk]
            contexts, answers = [], []
            for ex in part:
                for cand in ex.candidates:
                    contexts.append(ex.context)
                    answers.append(cand)
            scores = sequence_avg_log_probs(params, contexts, answers).data
            pos = 0
            for ex in part:
                n = len(ex.candidates)
                out.append(scores[pos : pos + n].copy())
                pos += n
    return out


@dataclass
class EvaluationReport:
    counts: dict[tuple[str, str], tuple[int, int]] = field(default_factory=dict)
    margins: list[float] = field(default_factory=list)

    def accuracy(self, sensor: str, task: str) -> float:
        n, c = self.counts.get((sensor, task), (0, 0))
        return 100.0 * c / n if n else float("nan")

    def _mean_over(self, sensor: str, tasks) -> float:
        accs = [self.accuracy(sensor, t) for t in tasks if self.counts.get((sensor, t), (0, 0))[0]]
        return float(np.mean(accs)) if accs else float("nan")

    def perception_avg(self, sensor: str) -> float:
        return self._mean_over(sensor, PERCEPTION_TASKS)

    def understanding_avg(self, sensor: str) -> float:
        return self._mean_over(sensor, UNDERSTANDING_TASKS)

    def sensor_accuracy(self, sensor: str) -> float:
        n = sum(v[0] for (s, _), v in self.counts.items() if s == sensor)
        c = sum(v[1] for (s, _), v in self.counts.items() if s == sensor)
        return 100.0 * c / n if n else float("nan")

    @property
    def n_items(self) -> int:
        return sum(n for n, _ in self.counts.values())

    @property
    def n_correct(self) -> int:
        return sum(c for _, c in self.counts.values())

    @property
    def overall(self) -> float:
        return 100.0 * self.n_correct / self.n_items if self.n_items else float("nan")

    @property
    def margin_mean(self) -> float:
        return float(np.mean(self.margins)) if self.margins else float("nan")

    @property
    def margin_min(self) -> float:
        return float(np.min(self.margins)) if self.margins else float("nan")

    def to_csv(self) -> str:
        lines = ["sensor,task,n_items,n_correct,accuracy_pct"]
        for sensor in SENSORS:
            for task in TASKS:
                if (sensor, task) in self.counts:
                    n, c = self.counts[(sensor, task)]
                    lines.append(f"{sensor},{task},{n},{c},{_fmt(100.0 * c / n)}")
        for sensor in SENSORS:
            if any(s == sensor for s, _ in self.counts):
                lines.append(f"{sensor},perception_avg,,,{_fmt(self.perception_avg(sensor))}")
                lines.append(f"{sensor},understanding_avg,,,{_fmt(self.understanding_avg(sensor))}")
        lines.append(f"overall,all,{self.n_items},{self.n_correct},{_fmt(self.overall)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        rows = [f"overall accuracy {self.overall:.2f}% ({self.n_correct}/{self.n_items})"]
        for sensor in SENSORS:
            if any(s == sensor for s, _ in self.counts):
                rows.append(f"  {sensor:8s} perception {self.perception_avg(sensor):6.2f}  "
                            f"understanding {self.understanding_avg(sensor):6.2f}")
        rows.append(f"  margin mean {self.margin_mean:.4f} min {self.margin_min:.4f}")
        return "\n".join(rows)


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def evaluate(params: ModelParameters, dataset: Sequence[PreferenceExample]) -> EvaluationReport:
    """Score every item's candidates; an item is correct iff the positive wins the argmax."""
    for ex in dataset:
        if ex.sensor not in SENSORS or ex.task not in TASKS:
            raise DataError(f"record {ex.id!r}: unknown sensor/task tag", record_id=ex.id)
    # canonical item order makes the margin list independent of record order
    ordered = sorted(dataset, key=lambda ex: ex.id)
    counts: dict[tuple[str, str], list[int]] = {}
    margins = []
    for ex, scores in zip(ordered, batch_scores(params, ordered)):
        cell = counts.setdefault((ex.sensor, ex.task), [0, 0])
        cell[0] += 1
        cell[1] += int(predict(scores) == 0)
        margins.append(float(scores[0] - scores[1:].max()))
    return EvaluationReport({key: tuple(v) for key, v in counts.items()}, margins)


def write_report(report: EvaluationReport, path) -> None:
    atomic_write_text(path, report.to_csv())
