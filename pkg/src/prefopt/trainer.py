"""Minibatch fine-tuning loop with AdamW and probe-set trajectory tracing."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PreferenceExample
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .fileio import atomic_write_text
from .model import ModelParameters, sequence_avg_log_probs
from .objectives import Method, ObjectiveConfig, batch_loss

TRACE_HEADER = ("step", "total_loss", "sft_loss", "pref_loss", "probe_pos_alp", "probe_neg_alp")


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    learning_rate: float = 3e-4
    steps: int = 100
    batch_size: int = 8
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    seed: int = 0
    probe_every: int = 10
    checkpoint_path: str | None = None
    # share of ``steps`` spent on the SFT phase that produces the DPO/IPO reference
    ref_fraction: float = 0.5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        for name in ("steps", "batch_size", "probe_every"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        a = self.adamw
        if not (0 < a.beta1 < 1 and 0 < a.beta2 < 1 and a.eps > 0 and a.weight_decay >= 0):
            raise ConfigError(f"invalid AdamW settings {a}")
        if not 0 < self.ref_fraction < 1:
            raise ConfigError(f"ref_fraction must lie in (0, 1), got {self.ref_fraction}")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TraceRow:
    step: int
    total_loss: float
    sft_loss: float
    pref_loss: float
    probe_pos_alp: float
    probe_neg_alp: float

    @property
    def probe_margin(self) -> float:
        return self.probe_pos_alp - self.probe_neg_alp


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ContractError(f"trace steps must increase (got {row.step} after {self.rows[-1].step})")
        values = (row.total_loss, row.sft_loss, row.pref_loss, row.probe_pos_alp, row.probe_neg_alp)
        if not all(math.isfinite(v) for v in values):
            raise NumericalError(f"non-finite trace entry at step {row.step}", step=row.step)
        self.rows.append(row)

    def extend_shifted(self, other: "TrainingTrace", offset: int) -> None:
        for row in other.rows:
            if offset and row.step == 0:
                continue
            self.append(replace(row, step=row.step + offset))

    def to_csv(self) -> str:
        out = [",".join(TRACE_HEADER)]
        for r in self.rows:
            vals = (r.total_loss, r.sft_loss, r.pref_loss, r.probe_pos_alp, r.probe_neg_alp)
            out.append(",".join([str(r.step)] + [repr(float(v)) for v in vals]))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainingTrace":
        trace = cls()
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise ParseError("line 1: trace header must be " + ",".join(TRACE_HEADER), line=1)
        for line_no, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(TRACE_HEADER):
                raise ParseError(f"line {line_no}: expected {len(TRACE_HEADER)} fields, got {len(fields)}",
                                 line=line_no)
            try:
                row = TraceRow(int(fields[0]), *(float(f) for f in fields[1:]))
                trace.append(row)
            except (ValueError, ContractError, NumericalError) as exc:
                raise ParseError(f"line {line_no}: {exc}", line=line_no) from None
        return trace


def write_trace(trace: TrainingTrace, path) -> None:
    atomic_write_text(path, trace.to_csv())


def read_trace(path) -> TrainingTrace:
    with open(path, encoding="utf-8") as fh:
        return TrainingTrace.from_csv(fh.read())


# ---------------------------------------------------------------------------
# optimiser


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, config: AdamWConfig = AdamWConfig()) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One bias-corrected AdamW update with decoupled decay, in place on ``params``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} missing or shaped {None if g is None else g.shape}, "
                                f"expected {p.shape}")
        for buf in (state.m, state.v):
            if name in buf and buf[name].shape != p.shape:
                raise ContractError(f"optimizer state for {name!r} has shape {buf[name].shape}, expected {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.eps) + config.weight_decay * p
        p -= lr * update
    return params, state


# ---------------------------------------------------------------------------
# training


def make_reference(params: ModelParameters) -> ModelParameters:
    """Frozen deep copy used as the DPO/IPO reference policy."""
    ref = params.copy(requires_grad=False)
    for t in ref.tensors.values():
        t.data.flags.writeable = False
    return ref


def probe_metrics(params: ModelParameters, probe: Sequence[PreferenceExample]) -> tuple[float, float]:
    """Mean avg-log-prob of probe positives and of all probe negatives."""
    if not probe:
        return 0.0, 0.0
    contexts, answers, is_pos = [], [], []
    for ex in probe:
        for j, cand in enumerate(ex.candidates):
            contexts.append(ex.context)
            answers.append(cand)
            is_pos.append(j == 0)
    with ad.no_grad():
        alp = sequence_avg_log_probs(params, contexts, answers).data
    is_pos = np.asarray(is_pos)
    return float(alp[is_pos].mean()), float(alp[~is_pos].mean())


def _check_data(dataset: Sequence[PreferenceExample], objective: ObjectiveConfig) -> None:
    if not dataset:
        raise ConfigError("training dataset is empty")
    if objective.method.needs_negatives:
        for ex in dataset:
            if len(ex.negatives) < objective.k:
                raise ConfigError(
                    f"objective needs k={objective.k} negatives but example {ex.id!r} has {len(ex.negatives)}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of minibatches, reshuffled each epoch, no repeats within an epoch."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def train(model: ModelParameters, dataset: Sequence[PreferenceExample], config: TrainConfig,
          probe: Sequence[PreferenceExample] = (), reference: ModelParameters | None = None,
          steps: int | None = None) -> tuple[ModelParameters, TrainingTrace]:
    """Run ``config.steps`` optimiser steps (or ``steps`` if given) on an owned copy of ``model``.

    The trace records step 0 (probe at initialisation, loss of the first
    batch) and every ``probe_every``-th step plus the final one; loss columns
    hold the minibatch loss computed before that step's update.
    """
    objective = config.objective
    _check_data(dataset, objective)
    if objective.method.needs_reference and reference is None:
        raise ConfigError(f"method {objective.method.value} needs a reference model")
    n_steps = config.steps if steps is None else steps
    params = model.copy(requires_grad=True)
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(dataset), config.batch_size, rng)
    state = AdamWState()
    trace = TrainingTrace()
    weights = {name: t.data for name, t in params.tensors.items()}

    for step in range(1, n_steps + 1):
        batch = [dataset[int(i)] for i in next(batches)]
        params.zero_grad()
        try:
            terms = batch_loss(params, batch, objective, reference)
        except NumericalError as exc:
            raise NumericalError(f"non-finite value at step {step}: {exc}", step=step) from exc
        total = terms.total.item()
        if not math.isfinite(total):
            raise NumericalError(f"non-finite loss at step {step}", step=step)
        if step == 1:
            pos, neg = probe_metrics(params, probe)
            trace.append(TraceRow(0, total, terms.sft.item(), terms.pref.item(), pos, neg))
        ad.backward(terms.total)
        grads = {name: t.grad for name, t in params.tensors.items()}
        adamw_step(weights, grads, state, config.learning_rate, config.adamw)
        if step % config.probe_every == 0 or step == n_steps:
            pos, neg = probe_metrics(params, probe)
            trace.append(TraceRow(step, total, terms.sft.item(), terms.pref.item(), pos, neg))
    return params, trace


def train_with_reference(model: ModelParameters, dataset: Sequence[PreferenceExample],
                         config: TrainConfig, probe: Sequence[PreferenceExample] = ()):
    """SFT warm-up that yields the frozen reference, then the SFT + DPO/IPO phase.

    The two phases split ``config.steps`` by ``ref_fraction`` so the total
    step budget matches the single-phase methods. Returns (params, trace, reference).
    """
    ref_steps = max(1, int(round(config.steps * config.ref_fraction)))
    if ref_steps >= config.steps:
        raise ConfigError("reference warm-up leaves no steps for the preference phase")
    sft_config = replace(config, objective=replace(config.objective, method=Method.SFT))
    warm, trace = train(model, dataset, sft_config, probe, steps=ref_steps)
    reference = make_reference(warm)
    rest = replace(config, seed=config.seed + 1)
    final, tail = train(warm, dataset, rest, probe, reference=reference, steps=config.steps - ref_steps)
    trace.extend_shifted(tail, ref_steps)
    return final, trace, reference
