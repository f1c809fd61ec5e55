"""Transformer primitives: layer norm, attention, feed-forward, positions, dropout."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from dsct import tensor as T
from dsct.tensor import ContractError, ShapeError, Tensor

MASK_VALUE = -1e9


class Module:
    """Parameter container. Parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix, seen):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=T.DEFAULT_DTYPE) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def zeros(*shape, dtype=T.DEFAULT_DTYPE) -> Tensor:
    return T.parameter(np.zeros(shape), dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d_model: int, epsilon: float = 1e-6):
        if epsilon <= 0:
            raise ContractError("layer norm epsilon must be positive")
        self.alpha = T.parameter(np.ones(d_model), dtype=T.DEFAULT_DTYPE)
        self.beta = zeros(d_model)
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self)


def layer_norm(x: Tensor, p: LayerNorm) -> Tensor:
    d = p.alpha.shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"layer_norm: input {x.shape} vs d_model {d}")
    mean, var = T.reduce_moments(x, axis=-1)
    normed = (x - mean) * T.power(var + p.epsilon, -0.5)
    return normed * p.alpha + p.beta


def attention_mask(allow) -> np.ndarray:
    """Boolean allow-mask to the additive form used before the softmax."""
    allow = np.asarray(allow, dtype=bool)
    if not allow.any(axis=-1).all():
        raise ContractError("attention mask has a query row with every key forbidden")
    return np.where(allow, 0.0, MASK_VALUE)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ContractError(f"d_model {d_model} is not divisible by {heads} heads")
        self.heads = heads
        self.w_q = xavier(rng, d_model, d_model)
        self.w_k = xavier(rng, d_model, d_model)
        self.w_v = xavier(rng, d_model, d_model)
        self.w_o = xavier(rng, d_model, d_model)

    def __call__(self, q, k, v, mask=None, return_weights: bool = False):
        return multi_head_attention(q, k, v, self, mask, return_weights)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: MultiHeadAttention, mask=None,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``p.heads`` heads.

    Inputs are ``[L, d]`` or ``[B, L, d]``. ``mask`` is a boolean allow-mask
    broadcastable to ``[B, Lq, Lk]``; forbidden keys get exactly zero weight.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (x.reshape((1,) + x.shape) for x in (q, k, v))
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: keys {k.shape} and values {v.shape} differ in length")
    B, Lq, d = q.shape
    Lk = k.shape[1]
    if k.shape[-1] != d or k.shape[0] != B and k.shape[0] != 1:
        raise ShapeError(f"attention: queries {q.shape} and keys {k.shape} are incompatible")
    h = p.heads
    dh = d // h

    def split(x, length):
        return T.transpose(T.reshape(x, (x.shape[0], length, h, dh)), (0, 2, 1, 3))

    qh = split(q @ p.w_q, Lq)
    kh = split(k @ p.w_k, Lk)
    vh = split(v @ p.w_v, Lk)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        additive = attention_mask(mask)
        if additive.ndim == 3:
            additive = additive[:, None]
        scores = scores + additive.astype(scores.dtype)
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, vh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (ctx.shape[0], Lq, d))
    out = ctx @ p.w_o
    if squeeze:
        out = out.reshape(out.shape[1:])
    if return_weights:
        w = weights.data[0] if squeeze else weights.data
        return out, w
    return out


def masked_self_attention(x: Tensor, p: MultiHeadAttention, key_mask=None) -> Tensor:
    """Self-attention where position i sees only positions j <= i."""
    L = x.shape[-2]
    allow = causal_mask(L)
    if key_mask is not None:
        allow = allow & np.asarray(key_mask, dtype=bool)[..., None, :]
    return multi_head_attention(x, x, x, p, allow)


class PositionwiseFeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator,
                 activation: Callable[[Tensor], Tensor] = T.relu):
        self.w1 = xavier(rng, d_model, d_ff)
        self.b1 = zeros(d_ff)
        self.w2 = xavier(rng, d_ff, d_model)
        self.b2 = zeros(d_model)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return pwff(x, self)


def pwff(x: Tensor, p: PositionwiseFeedForward) -> Tensor:
    return p.activation(x @ p.w1 + p.b1) @ p.w2 + p.b2


def sinusoidal_pe(seq_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ContractError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / keep_prob``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) < keep_prob
    return x * (keep / keep_prob).astype(x.dtype)
