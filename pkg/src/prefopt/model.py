"""Tiny pre-norm causal transformer used as the policy being fine-tuned.

Sequences are ``context ++ answer``; only answer tokens are scored. The
answer length |y| includes the terminal end-of-answer token, which the data
layer appends.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fileio import atomic_write
from .errors import CheckpointError, ConfigError, ContractError, LengthError

PAD_ID = 0

CHECKPOINT_MAGIC = b"DNAC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 48
    init_seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0 <= self.init_seed < 2 ** 64:
            raise ConfigError(f"init_seed must be a 64-bit unsigned integer, got {self.init_seed}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered manifest of (name, shape) for every weight tensor."""
    d, v = config.d_model, config.vocab_size
    shapes = [("tok_emb", (v, d)), ("pos_emb", (config.max_seq_len, d))]
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.w_qkv", (d, 3 * d)), (p + "attn.b_qkv", (3 * d,)),
            (p + "attn.w_out", (d, d)), (p + "attn.b_out", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w_in", (d, config.d_ff)), (p + "mlp.b_in", (config.d_ff,)),
            (p + "mlp.w_out", (config.d_ff, d)), (p + "mlp.b_out", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, v)), ("head.b", (v,))]
    return shapes


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(repr=False)

    @property
    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.tensors.items()]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self, requires_grad: bool = True) -> "ModelParameters":
        return ModelParameters(
            self.config,
            {name: Tensor(t.data.copy(), requires_grad) for name, t in self.tensors.items()},
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])


def init_model(config: ModelConfig) -> ModelParameters:
    """Seeded initialisation: 0.02-scaled normals for matrices, unit LN gains, zero biases."""
    rng = np.random.default_rng(config.init_seed)
    tensors = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = 0.02 * rng.standard_normal(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParameters(config, tensors)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, w) + b


def forward_batch(params: ModelParameters, tokens: np.ndarray) -> Tensor:
    """Logits of shape (B, L, V) for a right-padded (B, L) token array."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ContractError(f"token batch must be 2-D, got shape {tokens.shape}")
    n_seq, length = tokens.shape
    if length > cfg.max_seq_len:
        raise LengthError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")
    d, n_heads = cfg.d_model, cfg.n_heads
    d_head = d // n_heads
    rows = n_seq * length
    P = params.tensors

    x = ad.gather_rows(P["tok_emb"], tokens) + ad.gather_rows(P["pos_emb"], np.arange(length))
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = ad.reshape(ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"]), (rows, d))
        qkv = ad.reshape(_linear(h, P[p + "attn.w_qkv"], P[p + "attn.b_qkv"]),
                         (n_seq, length, 3, n_heads, d_head))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
        mixed = ad.matmul(ad.causal_softmax(scores), v)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (rows, d))
        x = x + ad.reshape(_linear(mixed, P[p + "attn.w_out"], P[p + "attn.b_out"]), (n_seq, length, d))

        h = ad.reshape(ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"]), (rows, d))
        h = ad.gelu(_linear(h, P[p + "mlp.w_in"], P[p + "mlp.b_in"]))
        x = x + ad.reshape(_linear(h, P[p + "mlp.w_out"], P[p + "mlp.b_out"]), (n_seq, length, d))

    h = ad.reshape(ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"]), (rows, d))
    return ad.reshape(_linear(h, P["head.w"], P["head.b"]), (n_seq, length, cfg.vocab_size))


def forward_logits(params: ModelParameters, tokens: Sequence[int]) -> Tensor:
    """Causal logits (len, V) for a single sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ContractError("forward_logits expects a non-empty 1-D token sequence")
    logits = forward_batch(params, tokens[None, :])
    return ad.reshape(logits, (tokens.size, params.config.vocab_size))


def pack_sequences(contexts: Sequence[Sequence[int]], answers: Sequence[Sequence[int]],
                   max_seq_len: int):
    """Right-pad context++answer pairs into model inputs.

    Returns ``(inputs, targets, mask, lengths)`` where ``inputs`` is the
    concatenation minus its last token, ``targets`` the next-token ids, and
    ``mask`` selects the positions that predict answer tokens.
    """
    if len(contexts) != len(answers):
        raise ContractError("contexts and answers must pair up")
    totals = []
    for ctx, ans in zip(contexts, answers):
        if len(ans) < 1:
            raise ContractError("answer must contain at least one token")
        if len(ctx) < 1:
            raise ContractError("context must contain at least one token")
        total = len(ctx) + len(ans)
        if total > max_seq_len:
            raise LengthError(f"context+answer length {total} exceeds max_seq_len {max_seq_len}")
        totals.append(total)
    width = max(totals) - 1
    n = len(totals)
    inputs = np.full((n, width), PAD_ID, dtype=np.int64)
    targets = np.full((n, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((n, width))
    lengths = np.empty(n)
    for i, (ctx, ans) in enumerate(zip(contexts, answers)):
        seq = np.concatenate([np.asarray(ctx, dtype=np.int64), np.asarray(ans, dtype=np.int64)])
        inputs[i, : seq.size - 1] = seq[:-1]
        targets[i, : seq.size - 1] = seq[1:]
        mask[i, len(ctx) - 1 : seq.size - 1] = 1.0
        lengths[i] = len(ans)
    return inputs, targets, mask, lengths


def sequence_log_probs(params: ModelParameters, contexts, answers) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced answer log-probabilities for a batch; returns (log_probs (N,), |y| (N,))."""
    inputs, targets, mask, lengths = pack_sequences(contexts, answers, params.config.max_seq_len)
    logp = ad.log_softmax(forward_batch(params, inputs))
    token_lp = ad.pick(logp, targets)
    return ad.sum(token_lp * mask, axis=1), lengths


def sequence_avg_log_probs(params: ModelParameters, contexts, answers) -> Tensor:
    lp, lengths = sequence_log_probs(params, contexts, answers)
    return lp / lengths


def answer_log_prob(params: ModelParameters, context: Sequence[int], answer: Sequence[int]) -> Tensor:
    """log pi(y|x): sum of answer-token log-probs; context tokens are never scored."""
    if len(answer) < 1:
        raise ContractError("answer_log_prob: empty answer")
    lp, _ = sequence_log_probs(params, [context], [answer])
    return ad.reshape(lp, ())


def avg_log_prob(params: ModelParameters, context: Sequence[int], answer: Sequence[int]) -> Tensor:
    """log pi(y|x) / |y|."""
    return answer_log_prob(params, context, answer) / float(len(answer))


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_FMT = "<IIIIIQ"


def checkpoint_bytes(params: ModelParameters) -> bytes:
    cfg = params.config
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack(_CONFIG_FMT, cfg.vocab_size, cfg.d_model, cfg.n_layers,
                          cfg.n_heads, cfg.max_seq_len, cfg.init_seed),
              struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in params.tensors.values():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(params: ModelParameters, path) -> None:
    """Write-then-rename, so an interrupted save never leaves a partial file."""
    atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path, requires_grad: bool = True) -> ModelParameters:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(blob, requires_grad)


def checkpoint_from_bytes(blob: bytes, requires_grad: bool = True) -> ModelParameters:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    vocab, d_model, n_layers, n_heads, max_len, seed = struct.unpack(
        _CONFIG_FMT, take(struct.calcsize(_CONFIG_FMT)))
    config = ModelConfig(vocab, d_model, n_layers, n_heads, max_len, seed)
    (count,) = struct.unpack("<I", take(4))
    manifest = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        manifest.append((name, tuple(dims)))
    if manifest != parameter_shapes(config):
        raise CheckpointError("checkpoint manifest does not match its model config")
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape))
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ModelParameters(config, tensors)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
