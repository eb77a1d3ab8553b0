"""One seeded run of the synthetic protocol: generate, fine-tune, evaluate.

The same seed drives corpus generation, model initialisation and minibatch
order. The corpus always stores three negatives per item so every cell of a
k ablation is scored on identical 4-way eval items; ``k`` only controls how
many of them the objective consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import GeneratorConfig, PreferenceExample, Splits, generate
from .evaluator import EvaluationReport, evaluate
from .model import ModelConfig, ModelParameters, init_model
from .objectives import Method, ObjectiveConfig
from .trainer import TrainConfig, TrainingTrace, train, train_with_reference

PROBE_SIZE = 48
DEFAULT_STEPS = 300


@dataclass(frozen=True)
class Experiment:
    method: Method = Method.SAFT
    seed: int = 0
    n_per_sensor: int = 200
    k: int = 3
    bias_strength: float = 0.8
    alpha: float = 2.0
    beta_margin: float = 0.2
    steps: int = DEFAULT_STEPS
    learning_rate: float = 3e-4
    batch_size: int = 8
    probe_every: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(seed=self.seed, n_per_sensor=self.n_per_sensor, k=3,
                               bias_strength=self.bias_strength,
                               vocab_size=self.model.vocab_size, max_seq_len=self.model.max_seq_len)

    def train_config(self) -> TrainConfig:
        objective = ObjectiveConfig(method=self.method, alpha=self.alpha,
                                    beta_margin=self.beta_margin, k=self.k)
        return TrainConfig(objective=objective, learning_rate=self.learning_rate, steps=self.steps,
                           batch_size=self.batch_size, seed=self.seed, probe_every=self.probe_every)


@dataclass
class RunResult:
    experiment: Experiment
    params: ModelParameters
    trace: TrainingTrace
    eval_report: EvaluationReport
    neutral_report: EvaluationReport
    reference: ModelParameters | None = None


def probe_set(examples: list[PreferenceExample], size: int = PROBE_SIZE) -> list[PreferenceExample]:
    """Fixed held-out probe: the first ``size`` items by id."""
    return sorted(examples, key=lambda ex: ex.id)[:size]


def fit(exp: Experiment, splits: Splits) -> tuple[ModelParameters, TrainingTrace, ModelParameters | None]:
    model = init_model(replace(exp.model, init_seed=exp.seed))
    config = exp.train_config()
    probe = probe_set(splits.eval)
    if exp.method.needs_reference:
        return train_with_reference(model, splits.train, config, probe)
    params, trace = train(model, splits.train, config, probe)
    return params, trace, None


def run_experiment(exp: Experiment) -> RunResult:
    splits = generate(exp.generator_config())
    params, trace, reference = fit(exp, splits)
    return RunResult(exp, params, trace, evaluate(params, splits.eval), evaluate(params, splits.neutral),
                     reference)
