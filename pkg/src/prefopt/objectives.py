"""Preference objectives: length-normalised reward, Bradley-Terry, DNA, SAFT, baselines.

Scalar helpers accept floats or tensors and return tensors so the same code
serves the loss-identity checks and the training graph. Every ``-log
sigmoid`` is evaluated through the softplus form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError
from .model import ModelParameters, answer_log_prob, sequence_log_probs


class Method(str, enum.Enum):
    SFT = "sft"
    SAFT = "saft"
    SFT_DPO = "sft-dpo"
    SFT_IPO = "sft-ipo"
    SFT_SIMPO = "sft-simpo"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown method {value!r}; expected one of {names}") from None

    @property
    def needs_reference(self) -> bool:
        return self in (Method.SFT_DPO, Method.SFT_IPO)

    @property
    def needs_negatives(self) -> bool:
        return self is not Method.SFT


METHOD_ORDER = tuple(Method)


@dataclass(frozen=True)
class ObjectiveConfig:
    method: Method = Method.SAFT
    alpha: float = 2.0
    beta_margin: float = 0.2
    k: int = 3
    dpo_beta: float = 0.1
    ipo_tau: float = 0.1
    simpo_beta: float = 2.0
    simpo_gamma: float = 0.2
    # weight on the preference term; 1.0 is the plain SFT + preference sum
    pref_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        for name in ("alpha", "dpo_beta", "ipo_tau", "simpo_beta", "pref_weight"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta_margin", "simpo_gamma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")


@dataclass
class RewardValue:
    value: Tensor
    log_prob: float
    length: int


@dataclass
class LossTerms:
    total: Tensor
    sft: Tensor
    pref: Tensor


# ---------------------------------------------------------------------------
# scalar forms


def _symmetric_mean(terms: Tensor) -> Tensor:
    """Mean over the last axis, summed in sorted order so any permutation gives the same bits."""
    order = np.argsort(terms.data, axis=-1, kind="stable")
    if terms.ndim == 1:
        ordered = terms[order]
    else:
        rows = np.arange(terms.shape[0])[:, None]
        ordered = terms[rows, order]
    return ad.mean(ordered, axis=-1)


def _neg_log_sigmoid(z: Tensor) -> Tensor:
    return ad.neg(ad.log_sigmoid(z))


def reward(params: ModelParameters, x: Sequence[int], y: Sequence[int], alpha: float) -> RewardValue:
    if not alpha > 0:
        raise ContractError(f"reward scale alpha must be positive, got {alpha}")
    if len(y) < 1:
        raise ContractError("reward: empty answer")
    lp = answer_log_prob(params, x, y)
    value = ad.scale(lp / float(len(y)), alpha)
    return RewardValue(value, lp.item(), len(y))


def preference_probability(r_pos, r_neg) -> Tensor:
    """Bradley-Terry P(y+ > y-) = sigmoid(r+ - r-)."""
    return ad.sigmoid(ad.sub(r_pos, r_neg))


def log_preference_probability(r_pos, r_neg) -> Tensor:
    return ad.log_sigmoid(ad.sub(r_pos, r_neg))


def pairwise_loss(r_pos, r_neg) -> Tensor:
    return _neg_log_sigmoid(ad.sub(r_pos, r_neg))


def dna_terms(r_pos, r_negs, beta_margin: float) -> Tensor:
    """Per-example DNA loss: -(1/k) sum_i log sigmoid(r+ - r-_i - margin).

    ``r_pos`` has shape (...,) and ``r_negs`` (..., k); returns shape (...,).
    """
    r_pos, r_negs = ad.as_tensor(r_pos), ad.as_tensor(r_negs)
    if r_negs.ndim == 0:
        raise ContractError("dna_loss needs a list of negative rewards")
    if r_negs.shape[-1] == 0:
        raise ContractError("dna_loss: empty negative set")
    diff = ad.sub(ad.reshape(r_pos, r_pos.shape + (1,)), r_negs)
    return _symmetric_mean(_neg_log_sigmoid(ad.sub(diff, beta_margin)))


def dna_loss(r_pos, r_negs, beta_margin: float) -> Tensor:
    r_negs = ad.as_tensor(np.asarray(r_negs, dtype=np.float64)) if not isinstance(r_negs, Tensor) else r_negs
    return dna_terms(r_pos, r_negs, beta_margin)


def dpo_terms(pol_pos, ref_pos, pol_negs, ref_negs, dpo_beta: float) -> Tensor:
    """DPO averaged over negatives. Positive inputs (...,), negative inputs (..., k)."""
    h = _log_ratio_gap(pol_pos, ref_pos, pol_negs, ref_negs)
    return _symmetric_mean(_neg_log_sigmoid(ad.scale(h, dpo_beta)))


def ipo_terms(pol_pos, ref_pos, pol_negs, ref_negs, ipo_tau: float) -> Tensor:
    """IPO squared loss (h - 1/(2 tau))^2 averaged over negatives."""
    h = _log_ratio_gap(pol_pos, ref_pos, pol_negs, ref_negs)
    gap = ad.sub(h, 1.0 / (2.0 * ipo_tau))
    return _symmetric_mean(gap * gap)


def simpo_terms(avg_pos, avg_negs, simpo_beta: float, simpo_gamma: float) -> Tensor:
    """SimPO on length-normalised log-probs, averaged over negatives."""
    return dna_terms(ad.scale(avg_pos, simpo_beta), ad.scale(avg_negs, simpo_beta), simpo_gamma)


def _log_ratio_gap(pol_pos, ref_pos, pol_negs, ref_negs) -> Tensor:
    pos = ad.sub(pol_pos, ref_pos)
    negs = ad.sub(pol_negs, ref_negs)
    pos = ad.reshape(pos, pos.shape + (1,))
    return ad.sub(pos, negs)


# ---------------------------------------------------------------------------
# model-level forms


def sft_loss(params: ModelParameters, x: Sequence[int], y_pos: Sequence[int]) -> Tensor:
    """Mean per-token NLL of the positive answer (teacher forced)."""
    if len(y_pos) < 1:
        raise ContractError("sft_loss: empty answer")
    return ad.neg(answer_log_prob(params, x, y_pos) / float(len(y_pos)))


def _require_negatives(examples, k: int) -> None:
    for ex in examples:
        if len(ex.negatives) < k:
            raise DataError(
                f"example {ex.id!r} has {len(ex.negatives)} negatives but k={k}", record_id=ex.id)


def per_example_terms(params: ModelParameters, examples: Sequence, config: ObjectiveConfig,
                      reference: ModelParameters | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Per-example (total, sft, pref) vectors for a minibatch, from one forward pass."""
    method = config.method
    if method.needs_reference and reference is None:
        raise ConfigError(f"method {method.value} needs a frozen reference model")
    if not examples:
        raise ContractError("empty minibatch")
    n = len(examples)
    if not method.needs_negatives:
        lp, lengths = sequence_log_probs(params, [ex.context for ex in examples],
                                         [ex.positive for ex in examples])
        sft = ad.neg(lp / lengths)
        pref = ad.Tensor(np.zeros(n))
        return sft, sft, pref

    k = config.k
    _require_negatives(examples, k)
    contexts, answers = [], []
    for ex in examples:
        for ans in (ex.positive, *ex.negatives[:k]):
            contexts.append(ex.context)
            answers.append(ans)
    lp, lengths = sequence_log_probs(params, contexts, answers)
    lp = ad.reshape(lp, (n, k + 1))
    avg = lp / lengths.reshape(n, k + 1)
    sft = ad.neg(avg[:, 0])

    if method is Method.SAFT:
        r = ad.scale(avg, config.alpha)
        pref = dna_terms(r[:, 0], r[:, 1:], config.beta_margin)
    elif method is Method.SFT_SIMPO:
        pref = simpo_terms(avg[:, 0], avg[:, 1:], config.simpo_beta, config.simpo_gamma)
    else:
        with ad.no_grad():
            ref_lp, _ = sequence_log_probs(reference, contexts, answers)
        ref_lp = ref_lp.data.reshape(n, k + 1)
        args = (lp[:, 0], ref_lp[:, 0], lp[:, 1:], ref_lp[:, 1:])
        if method is Method.SFT_DPO:
            pref = dpo_terms(*args, config.dpo_beta)
        else:
            pref = ipo_terms(*args, config.ipo_tau)

    weighted = pref if config.pref_weight == 1.0 else ad.scale(pref, config.pref_weight)
    return sft + weighted, sft, pref


def batch_loss(params: ModelParameters, examples: Sequence, config: ObjectiveConfig,
               reference: ModelParameters | None = None) -> LossTerms:
    """Minibatch loss: mean over examples of each term."""
    total, sft, pref = per_example_terms(params, examples, config, reference)
    return LossTerms(ad.mean(total), ad.mean(sft), ad.mean(pref))


def saft_loss(params: ModelParameters, example, config: ObjectiveConfig) -> tuple[Tensor, Tensor, Tensor]:
    """SFT + DNA for one example; returns (total, sft_term, dna_term) as scalars."""
    if config.method is not Method.SAFT:
        raise ConfigError(f"saft_loss called with method {config.method.value}")
    total, sft, pref = per_example_terms(params, [example], config)
    return ad.reshape(total, ()), ad.reshape(sft, ()), ad.reshape(pref, ())


def _pair_logps(params, x, y_pos, y_negs):
    lp, _ = sequence_log_probs(params, [x] * (1 + len(y_negs)), [y_pos, *y_negs])
    return lp[0], lp[1:]


def _as_negatives(y_neg) -> list:
    if len(y_neg) and isinstance(y_neg[0], (int, np.integer)):
        return [y_neg]
    return list(y_neg)


def dpo_loss(params, ref_params, x, y_pos, y_neg, dpo_beta: float = 0.1) -> Tensor:
    """``y_neg`` may be one answer or a list of negatives (averaged pairwise)."""
    if ref_params is None:
        raise ConfigError("dpo_loss needs a frozen reference model")
    negs = _as_negatives(y_neg)
    pol_pos, pol_negs = _pair_logps(params, x, y_pos, negs)
    with ad.no_grad():
        ref_pos, ref_negs = _pair_logps(ref_params, x, y_pos, negs)
    return dpo_terms(pol_pos, ref_pos.data, pol_negs, ref_negs.data, dpo_beta)


def ipo_loss(params, ref_params, x, y_pos, y_neg, ipo_tau: float = 0.1) -> Tensor:
    if ref_params is None:
        raise ConfigError("ipo_loss needs a frozen reference model")
    negs = _as_negatives(y_neg)
    pol_pos, pol_negs = _pair_logps(params, x, y_pos, negs)
    with ad.no_grad():
        ref_pos, ref_negs = _pair_logps(ref_params, x, y_pos, negs)
    return ipo_terms(pol_pos, ref_pos.data, pol_negs, ref_negs.data, ipo_tau)


def simpo_loss(params, x, y_pos, y_neg, simpo_beta: float = 2.0, simpo_gamma: float = 0.2) -> Tensor:
    negs = _as_negatives(y_neg)
    if len(y_pos) < 1 or any(len(y) < 1 for y in negs):
        raise ContractError("simpo_loss: empty answer")
    lp, lengths = sequence_log_probs(params, [x] * (1 + len(negs)), [y_pos, *negs])
    avg = lp / lengths
    return simpo_terms(avg[0], avg[1:], simpo_beta, simpo_gamma)
