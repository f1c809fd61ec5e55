"""Pattern-specific mutual attention encoder.

Each layer first consolidates the region and segmentation streams with
attention/feed-forward weights shared across both streams and layer norms
private to each stream, then lets each stream query the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsct import nn
from dsct import tensor as T
from dsct.tensor import Tensor


@dataclass
class StreamPair:
    """Region and segmentation sequences, ``[N, d]`` or ``[B, N, d]``.

    The optional masks flag valid (non-padding) rows, shape ``[B, N]``.
    """

    z_r: Tensor
    z_s: Tensor | None
    mask_r: np.ndarray | None = None
    mask_s: np.ndarray | None = None

    def take(self, idx: np.ndarray) -> "StreamPair":
        """Select batch rows (used to fan memories out to beam hypotheses)."""

        def pick(z):
            return None if z is None else T.getitem(z, idx)

        def pick_mask(m):
            return None if m is None else m[idx]

        return StreamPair(pick(self.z_r), pick(self.z_s), pick_mask(self.mask_r), pick_mask(self.mask_s))


def key_mask(mask: np.ndarray | None):
    """``[B, N]`` validity flags to a mask broadcastable over queries."""
    if mask is None:
        return None
    return np.asarray(mask, dtype=bool)[..., None, :]


class PsmaeLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 keep_prob: float = 0.9, ln_epsilon: float = 1e-6):
        # shared across streams
        self.mhsa0 = nn.MultiHeadAttention(d_model, heads, rng)
        self.mha1 = nn.MultiHeadAttention(d_model, heads, rng)
        self.pwff = nn.PositionwiseFeedForward(d_model, d_ff, rng)
        # private per stream, indices 0..4
        self.ln_r = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(5)]
        self.ln_s = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(5)]
        self.keep_prob = keep_prob


def _consolidate_one(z, mask, lns, p: PsmaeLayer, rng, training):
    attn = nn.dropout(p.mhsa0(z, z, z, key_mask(mask)), p.keep_prob, rng, training)
    m = lns[1](lns[0](attn + z) + z)
    ff = nn.dropout(p.pwff(m), p.keep_prob, rng, training)
    return lns[2](ff + m)


def consolidate(pair: StreamPair, p: PsmaeLayer, rng=None, training: bool = False) -> StreamPair:
    hat_r = _consolidate_one(pair.z_r, pair.mask_r, p.ln_r, p, rng, training)
    hat_s = _consolidate_one(pair.z_s, pair.mask_s, p.ln_s, p, rng, training)
    return StreamPair(hat_r, hat_s, pair.mask_r, pair.mask_s)


def _query_other(query, other, other_mask, lns, p: PsmaeLayer, rng, training):
    # the updated stream supplies query and residual; the other stream keys and values
    attn = nn.dropout(p.mha1(query, other, other, key_mask(other_mask)), p.keep_prob, rng, training)
    return lns[4](lns[3](attn + query) + query)


def cross_query(hat: StreamPair, p: PsmaeLayer, rng=None, training: bool = False) -> StreamPair:
    z_r = _query_other(hat.z_r, hat.z_s, hat.mask_s, p.ln_r, p, rng, training)
    z_s = _query_other(hat.z_s, hat.z_r, hat.mask_r, p.ln_s, p, rng, training)
    return StreamPair(z_r, z_s, hat.mask_r, hat.mask_s)


def encode_stack(x: StreamPair, layers: list[PsmaeLayer], rng=None, training: bool = False) -> StreamPair:
    if not layers:
        raise T.ContractError("encode_stack needs at least one layer")
    for layer in layers:
        x = cross_query(consolidate(x, layer, rng, training), layer, rng, training)
    return x
