"""Finite-difference suite: every registered backward rule, then every objective.

Op cases reduce the op output against a fixed random projection, so a broken
rule fails its own case by name. Objective cases differentiate the batch loss
of a small seeded model through the full forward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import GeneratorConfig, generate
from .model import ModelConfig, ModelParameters, init_model
from .objectives import METHOD_ORDER, ObjectiveConfig, batch_loss
from .trainer import make_reference

TOLERANCE = 1e-3
STEP = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str  # "op" or "objective"
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, low=-2.0, high=2.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _op_cases(rng) -> dict[str, tuple[Callable, list[Tensor]]]:
    """name -> (fn(params) -> Tensor before projection, params)."""
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    row = _leaf(rng, (4,))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    m1, m2 = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    x3 = _leaf(rng, (2, 3, 5))
    gain, bias = _leaf(rng, (5,)), _leaf(rng, (5,))
    scores = _leaf(rng, (2, 4, 4))
    table = _leaf(rng, (6, 3))
    rows = np.array([[0, 2, 2], [5, 1, 0]])
    picks = np.array([[1, 0, 3], [2, 2, 4]])
    return {
        "add": (lambda p: ad.add(p[0], p[1]), [a, row]),
        "sub": (lambda p: ad.sub(p[0], p[1]), [a, row]),
        "mul": (lambda p: ad.mul(p[0], p[1]), [a, b]),
        "div": (lambda p: ad.div(p[0], p[1]), [a, pos]),
        "scale": (lambda p: ad.scale(p[0], -1.7), [a]),
        "neg": (lambda p: ad.neg(p[0]), [a]),
        "matmul": (lambda p: ad.matmul(p[0], p[1]), [m1, m2]),
        "sigmoid": (lambda p: ad.sigmoid(p[0]), [a]),
        "log_sigmoid": (lambda p: ad.log_sigmoid(p[0]), [a]),
        "softplus": (lambda p: ad.softplus(p[0]), [a]),
        "gelu": (lambda p: ad.gelu(p[0]), [a]),
        "sum": (lambda p: ad.sum(p[0], axis=1, keepdims=True), [x3]),
        "mean": (lambda p: ad.mean(p[0], axis=-1), [x3]),
        "log_softmax": (lambda p: ad.log_softmax(p[0]), [x3]),
        "causal_softmax": (lambda p: ad.causal_softmax(p[0]), [scores]),
        "layer_norm": (lambda p: ad.layer_norm(p[0], p[1], p[2]), [x3, gain, bias]),
        "gather_rows": (lambda p: ad.gather_rows(p[0], rows), [table]),
        "pick": (lambda p: ad.pick(p[0], picks), [x3]),
        "index": (lambda p: ad.index(p[0], (slice(None), [0, 2, 2])), [x3]),
        "reshape": (lambda p: ad.reshape(p[0], (6, 5)), [x3]),
        "transpose": (lambda p: ad.transpose(p[0], (2, 0, 1)), [x3]),
    }


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, params) in _op_cases(rng).items():
        proj_rng = np.random.default_rng([seed, len(results)])
        with ad.no_grad():
            shape = fn(params).shape
        w = Tensor(proj_rng.uniform(-1.0, 1.0, size=shape))
        t0 = time.perf_counter()
        err = ad.finite_diff_check(lambda p, fn=fn: ad.sum(ad.mul(fn(p), w)), params, step=STEP)
        results.append(CheckResult(name, "op", err, time.perf_counter() - t0))
    return results


def tiny_setup(seed: int = 0) -> tuple[ModelParameters, ModelParameters, list]:
    """Small model, a perturbed frozen reference, and a 4-example batch.

    Weights are widened beyond the 0.02 init so gradients sit well above the
    finite-difference noise floor.
    """
    config = ModelConfig(vocab_size=64, d_model=8, n_layers=1, n_heads=2, max_seq_len=48, init_seed=seed)
    model = init_model(config)
    rng = np.random.default_rng([seed, 1])
    for t in model.parameters():
        t.data += 0.3 * rng.standard_normal(t.shape)
    ref = model.copy(requires_grad=False)
    for t in ref.parameters():
        t.data += 0.05 * rng.standard_normal(t.shape)
    batch = generate(GeneratorConfig(seed=seed, n_per_sensor=2, n_eval_per_sensor=0,
                                     n_neutral_per_sensor=0)).train[:4]
    return model, make_reference(ref), batch


def probe_coordinates(model: ModelParameters) -> list[tuple[int, int]]:
    """All weight coordinates except the attention key biases.

    Adding a constant to every key score leaves the softmax unchanged, so the
    key-bias gradient is identically zero and central differences there only
    measure roundoff of the loss value.
    """
    d = model.config.d_model
    coords = []
    for i, (name, t) in enumerate(model.tensors.items()):
        skip = range(d, 2 * d) if name.endswith("attn.b_qkv") else ()
        coords += [(i, j) for j in range(t.size) if j not in skip]
    return coords


def check_objectives(seed: int = 0, sample: int | None = 256) -> list[CheckResult]:
    model, reference, batch = tiny_setup(seed)
    params = model.parameters()
    coords = probe_coordinates(model)
    results = []
    for method in METHOD_ORDER:
        objective = ObjectiveConfig(method=method)
        ref = reference if method.needs_reference else None

        def loss(_, objective=objective, ref=ref):
            return batch_loss(model, batch, objective, ref).total

        t0 = time.perf_counter()
        err = ad.finite_diff_check(loss, params, step=STEP, sample=sample, seed=seed, coords=coords)
        results.append(CheckResult(method.value, "objective", err, time.perf_counter() - t0))
    return results


def run_suite(seed: int = 0, sample: int | None = 256) -> list[CheckResult]:
    return check_ops(seed) + check_objectives(seed, sample)


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'kind':9s} {'name':15s} {'max_rel_err':>12s}  status"]
    for r in results:
        lines.append(f"{r.kind:9s} {r.name:15s} {r.max_rel_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "failed: " + ", ".join(failed))
    return "\n".join(lines)
