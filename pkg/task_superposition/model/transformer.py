"""
decoder-only transformer with manual reverse-mode gradients

No normalization layers. Each layer is `x += attention(x)` followed by `x += mlp(x)`,
the residual stream after the mlp is the layer output that can be read and patched.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from enum import auto
from typing import Iterable

import numpy as np
from pydantic import Field, model_validator

from ..errors import ContractError, DimensionError, PatchError, SequenceLengthError, VocabError
from .db.db_utils import AutoNameEnum
from .numerics import log_softmax, relu, row_softmax
from .validation import StrictBaseModel

logger = logging.getLogger(__name__)


class PositionalMode(AutoNameEnum):
    LEARNED = auto()       # trained positional table
    BINARY_FIXED = auto()  # fixed table filled with +-1 binary codes by whoever builds the weights


"""
pydantic models for validation
"""

class TransformerConfig(StrictBaseModel):
    """architecture of a model, shared by trained and constructed weights"""
    n_layers: int = Field(ge=1)
    n_heads: int = Field(ge=1)
    d_model: int = Field(ge=1)
    d_head: int | None = Field(default=None, ge=1)
    d_mlp: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    max_seq_len: int = Field(ge=1)
    positional_mode: PositionalMode = PositionalMode.LEARNED
    attention_scaling: bool = True  # divide attention logits by sqrt(d_head)
    tie_embeddings: bool = False

    @model_validator(mode='after')
    def check_head_width(self):
        if self.d_head is None and self.d_model % self.n_heads != 0:
            raise ValueError(f'd_model={self.d_model} is not divisible by n_heads={self.n_heads}')
        return self

    @property
    def head_width(self) -> int:
        return self.d_head if self.d_head is not None else self.d_model // self.n_heads


@dataclass
class TransformerWeights:
    """
    All parameters, stacked over layers and heads.
    token_embed (V, D), pos_embed (T, D), W_Q/W_K/W_V (L, H, D, E), W_O (L, H, E, D),
    W_in (L, D, F), b_in (L, F), W_out (L, F, D), b_out (L, D), unembed (D, V)
    """
    token_embed: np.ndarray
    pos_embed: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    unembed: np.ndarray

    @staticmethod
    def names() -> list[str]:
        return [f.name for f in fields(TransformerWeights)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(**{name: a.copy() for name, a in self.arrays().items()})

    def map(self, fn) -> "TransformerWeights":
        return TransformerWeights(**{name: fn(a) for name, a in self.arrays().items()})


def expected_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    L, H, D, E, F = config.n_layers, config.n_heads, config.d_model, config.head_width, config.d_mlp
    V, T = config.vocab_size, config.max_seq_len
    return {
        'token_embed': (V, D),
        'pos_embed': (T, D),
        'W_Q': (L, H, D, E),
        'W_K': (L, H, D, E),
        'W_V': (L, H, D, E),
        'W_O': (L, H, E, D),
        'W_in': (L, D, F),
        'b_in': (L, F),
        'W_out': (L, F, D),
        'b_out': (L, D),
        'unembed': (D, V),
    }


def check_weights(weights: TransformerWeights, config: TransformerConfig) -> None:
    """raise if any tensor does not match the config or contains non-finite entries"""
    for name, shape in expected_shapes(config).items():
        array = getattr(weights, name)
        if array.shape != shape:
            raise DimensionError(f'{name} has shape {array.shape}, config requires {shape}')
        if not np.all(np.isfinite(array)):
            raise DimensionError(f'{name} contains non-finite entries')


def zero_weights(config: TransformerConfig) -> TransformerWeights:
    return TransformerWeights(**{name: np.zeros(shape) for name, shape in expected_shapes(config).items()})


def init_weights(config: TransformerConfig, rng: np.random.Generator, std: float = 0.02) -> TransformerWeights:
    """scaled normal init; projections writing into the residual stream are scaled by 1/sqrt(2 n_layers)"""
    shapes = expected_shapes(config)
    residual_std = std / math.sqrt(2 * config.n_layers)

    def normal(name: str, scale: float) -> np.ndarray:
        return rng.normal(0.0, scale, size=shapes[name])

    weights = TransformerWeights(
        token_embed=normal('token_embed', std),
        pos_embed=normal('pos_embed', std),
        W_Q=normal('W_Q', std),
        W_K=normal('W_K', std),
        W_V=normal('W_V', std),
        W_O=normal('W_O', residual_std),
        W_in=normal('W_in', std),
        b_in=np.zeros(shapes['b_in']),
        W_out=normal('W_out', residual_std),
        b_out=np.zeros(shapes['b_out']),
        unembed=normal('unembed', std),
    )
    if config.positional_mode == PositionalMode.BINARY_FIXED:
        weights.pos_embed = np.zeros(shapes['pos_embed'])
    if config.tie_embeddings:
        weights.unembed = np.zeros(shapes['unembed'])
    return weights


def binary_position_code(position: int, width: int) -> np.ndarray:
    """+-1 code of the binary representation of position, least significant bit first"""
    bits = (position >> np.arange(width)) & 1
    return np.where(bits == 1, 1.0, -1.0)


def binary_code_width(length: int) -> int:
    """number of bits needed to tell apart positions 0..length-1"""
    return max(1, math.ceil(math.log2(length))) if length > 1 else 1


@dataclass(frozen=True)
class PatchDirective:
    """replace the output of `layer` at `position` by `vector`"""
    layer: int
    position: int
    vector: np.ndarray


@dataclass
class ActivationTrace:
    """
    residual[0] is the embedding, residual[l + 1] the output of layer l, each (B, T, D).
    attention[l] holds the attention probabilities (B, H, T, T) of layer l when requested.
    mid[l] is the residual stream between attention and mlp of layer l.
    """
    residual: list[np.ndarray] = field(default_factory=list)
    mid: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)

    def layer_output(self, layer: int) -> np.ndarray:
        return self.residual[layer + 1]


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    array = np.asarray(tokens, dtype=np.int64)
    if array.ndim == 1:
        return array[None, :], True
    if array.ndim != 2:
        raise DimensionError(f'tokens must be a sequence or a batch of sequences, got shape {array.shape}')
    return array, False


def _check_inputs(config: TransformerConfig, tokens: np.ndarray, positions: np.ndarray) -> None:
    if tokens.shape[1] == 0:
        raise ContractError('empty token sequence')
    if np.any(tokens < 0) or np.any(tokens >= config.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)][0]
        raise VocabError(f'token id {bad} outside vocabulary of size {config.vocab_size}')
    if positions.shape != tokens.shape:
        raise DimensionError(f'positions {positions.shape} do not match tokens {tokens.shape}')
    if np.any(positions < 0) or np.any(positions >= config.max_seq_len):
        raise SequenceLengthError(
            f'sequence of length {tokens.shape[1]} (max position {positions.max()}) '
            f'exceeds max_seq_len={config.max_seq_len}'
        )


def _unembedding(weights: TransformerWeights, config: TransformerConfig) -> np.ndarray:
    return weights.token_embed.T if config.tie_embeddings else weights.unembed


@dataclass
class _LayerCache:
    x_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    z: np.ndarray
    x_mid: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def _run(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens: np.ndarray,
        positions: np.ndarray,
        patches: Iterable[PatchDirective],
        keep_cache: bool,
        trace: ActivationTrace | None,
        ) -> tuple[np.ndarray, np.ndarray, list[_LayerCache]]:
    B, T = tokens.shape
    scale = 1.0 / math.sqrt(config.head_width) if config.attention_scaling else 1.0
    causal = np.tril(np.ones((T, T), dtype=bool))

    by_layer: dict[int, list[PatchDirective]] = {}
    for patch in patches:
        if not 0 <= patch.layer < config.n_layers:
            raise PatchError(f'patch layer {patch.layer} outside 0..{config.n_layers - 1}')
        if not 0 <= patch.position < T:
            raise PatchError(f'patch position {patch.position} outside sequence of length {T}')
        if np.shape(patch.vector) != (config.d_model,):
            raise PatchError(f'patch vector has shape {np.shape(patch.vector)}, expected ({config.d_model},)')
        by_layer.setdefault(patch.layer, []).append(patch)

    x = weights.token_embed[tokens] + weights.pos_embed[positions]
    if trace is not None:
        trace.residual.append(x.copy())

    caches: list[_LayerCache] = []
    for l in range(config.n_layers):
        q = np.einsum('btd,hde->bhte', x, weights.W_Q[l])
        k = np.einsum('btd,hde->bhte', x, weights.W_K[l])
        v = np.einsum('btd,hde->bhte', x, weights.W_V[l])
        scores = np.einsum('bhte,bhse->bhts', q, k) * scale
        scores = np.where(causal, scores, -np.inf)
        probs = row_softmax(scores)
        z = np.einsum('bhts,bhse->bhte', probs, v)
        x_mid = x + np.einsum('bhte,hed->btd', z, weights.W_O[l])

        pre = x_mid @ weights.W_in[l] + weights.b_in[l]
        hidden = relu(pre)
        x_out = x_mid + hidden @ weights.W_out[l] + weights.b_out[l]

        for patch in by_layer.get(l, []):
            x_out[:, patch.position, :] = patch.vector

        if keep_cache:
            caches.append(_LayerCache(x, q, k, v, probs, z, x_mid, pre, hidden))
        if trace is not None:
            trace.mid.append(x_mid.copy())
            trace.residual.append(x_out.copy())
            trace.attention.append(probs)
        x = x_out

    logits = x @ _unembedding(weights, config)
    return logits, x, caches


def forward(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens,
        patches: Iterable[PatchDirective] = (),
        trace: bool = False,
        positions: np.ndarray | None = None,
        ) -> tuple[np.ndarray, ActivationTrace | None]:
    """
    Logits for every position, (T, V) for a single sequence or (B, T, V) for a batch.
    Patches replace the output of their layer at their position, for every sequence of the batch.
    """
    batch, single = _as_batch(tokens)
    if positions is None:
        positions = np.broadcast_to(np.arange(batch.shape[1]), batch.shape)
    positions = np.asarray(positions, dtype=np.int64).reshape(batch.shape)
    _check_inputs(config, batch, positions)

    activation_trace = ActivationTrace() if trace else None
    logits, _, _ = _run(weights, config, batch, positions, patches, False, activation_trace)
    if single:
        logits = logits[0]
        if activation_trace is not None:
            activation_trace.residual = [r[0] for r in activation_trace.residual]
            activation_trace.mid = [m[0] for m in activation_trace.mid]
            activation_trace.attention = [a[0] for a in activation_trace.attention]
    return logits, activation_trace


def next_token_distribution(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens,
        patches: Iterable[PatchDirective] = (),
        ) -> np.ndarray:
    """softmax of the logits at the final position"""
    logits, _ = forward(weights, config, tokens, patches)
    return row_softmax(logits[-1])


def greedy_decode(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens,
        n_tokens: int,
        patches: Iterable[PatchDirective] = (),
        ) -> list[int]:
    """argmax continuation of n_tokens, patches stay at their absolute positions"""
    sequence = list(np.asarray(tokens, dtype=np.int64))
    patches = list(patches)
    generated: list[int] = []
    for _ in range(n_tokens):
        logits, _ = forward(weights, config, sequence, patches)
        token = int(np.argmax(logits[-1]))
        generated.append(token)
        sequence.append(token)
    return generated


def backward(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens,
        targets,
        positions: np.ndarray | None = None,
        ) -> tuple[TransformerWeights, float]:
    """
    Exact gradients of the mean cross-entropy over all targeted positions.
    `targets` has the shape of `tokens`, holding the expected next token id or -1 for "no target".
    """
    batch, _ = _as_batch(tokens)
    target_ids = np.asarray(targets, dtype=np.int64).reshape(batch.shape)
    if positions is None:
        positions = np.broadcast_to(np.arange(batch.shape[1]), batch.shape)
    positions = np.asarray(positions, dtype=np.int64).reshape(batch.shape)
    _check_inputs(config, batch, positions)

    mask = target_ids >= 0
    count = int(mask.sum())
    if count == 0:
        raise ContractError('no target positions given')
    if np.any(target_ids >= config.vocab_size):
        raise VocabError(f'target id {target_ids.max()} outside vocabulary of size {config.vocab_size}')

    logits, x_final, caches = _run(weights, config, batch, positions, (), True, None)
    scale = 1.0 / math.sqrt(config.head_width) if config.attention_scaling else 1.0

    log_probs = log_softmax(logits)
    safe_targets = np.where(mask, target_ids, 0)
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked[mask]) / count)

    d_logits = np.exp(log_probs)
    np.put_along_axis(
        d_logits, safe_targets[..., None],
        np.take_along_axis(d_logits, safe_targets[..., None], axis=-1) - 1.0, axis=-1,
    )
    d_logits *= mask[..., None] / count

    grads = zero_weights(config)
    d_unembed = np.einsum('btd,btv->dv', x_final, d_logits)
    dx = d_logits @ _unembedding(weights, config).T
    if config.tie_embeddings:
        grads.token_embed += d_unembed.T
    else:
        grads.unembed = d_unembed

    for l in reversed(range(config.n_layers)):
        c = caches[l]
        grads.b_out[l] = dx.sum(axis=(0, 1))
        grads.W_out[l] = np.einsum('btf,btd->fd', c.hidden, dx)
        d_pre = (dx @ weights.W_out[l].T) * (c.pre > 0)
        grads.b_in[l] = d_pre.sum(axis=(0, 1))
        grads.W_in[l] = np.einsum('btd,btf->df', c.x_mid, d_pre)
        dx_mid = dx + d_pre @ weights.W_in[l].T

        grads.W_O[l] = np.einsum('bhte,btd->hed', c.z, dx_mid)
        dz = np.einsum('btd,hed->bhte', dx_mid, weights.W_O[l])
        d_probs = np.einsum('bhte,bhse->bhts', dz, c.v)
        dv = np.einsum('bhts,bhte->bhse', c.probs, dz)
        d_scores = c.probs * (d_probs - np.sum(d_probs * c.probs, axis=-1, keepdims=True)) * scale
        dq = np.einsum('bhts,bhse->bhte', d_scores, c.k)
        dk = np.einsum('bhts,bhte->bhse', d_scores, c.q)

        grads.W_Q[l] = np.einsum('btd,bhte->hde', c.x_in, dq)
        grads.W_K[l] = np.einsum('btd,bhte->hde', c.x_in, dk)
        grads.W_V[l] = np.einsum('btd,bhte->hde', c.x_in, dv)
        dx = (dx_mid
              + np.einsum('bhte,hde->btd', dq, weights.W_Q[l])
              + np.einsum('bhte,hde->btd', dk, weights.W_K[l])
              + np.einsum('bhte,hde->btd', dv, weights.W_V[l]))

    np.add.at(grads.token_embed, batch, dx)
    if config.positional_mode == PositionalMode.LEARNED:
        np.add.at(grads.pos_embed, positions, dx)
    return grads, loss


def with_layers(weights: TransformerWeights, config: TransformerConfig, n_layers: int) -> tuple[TransformerWeights, TransformerConfig]:
    """pad a model with identity layers (all non-residual weights zero) up to n_layers"""
    if n_layers < config.n_layers:
        raise ContractError(f'cannot shrink a {config.n_layers}-layer model to {n_layers} layers')
    extra = n_layers - config.n_layers
    padded = {}
    for name, array in weights.arrays().items():
        if name in ('token_embed', 'pos_embed', 'unembed'):
            padded[name] = array.copy()
        else:
            padded[name] = np.concatenate([array, np.zeros((extra, *array.shape[1:]))], axis=0)
    return TransformerWeights(**padded), config.model_copy(update={'n_layers': n_layers})
