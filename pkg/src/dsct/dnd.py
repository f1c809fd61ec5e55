"""Dynamic nomination decoder.

Words attend causally to themselves, then to each consolidated visual stream
through one shared attention/feed-forward block with stream-private layer
norms. The nomination module hard-selects, per word, which stream's result
moves on to the next layer; a straight-through Gumbel-softmax carries the
gradient through the selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsct import nn
from dsct import tensor as T
from dsct.psmae import StreamPair, key_mask
from dsct.tensor import ContractError, Tensor

REGION, SEGMENTATION = 0, 1
FUSIONS = ("dnm", "add", "concat")


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    train_noise: bool = True
    # False forwards the soft relaxation itself (gradient checks only)
    hard: bool = True
    anneal_to: float | None = None
    anneal_steps: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError(f"Gumbel temperature must be positive, got {self.temperature}")

    def temperature_at(self, step: int) -> float:
        if self.anneal_to is None or self.anneal_steps <= 0:
            return self.temperature
        frac = min(1.0, step / self.anneal_steps)
        return self.temperature + frac * (self.anneal_to - self.temperature)


class DndLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 keep_prob: float = 0.9, fusion: str = "dnm", ln_epsilon: float = 1e-6):
        if fusion not in FUSIONS:
            raise ContractError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
        self.text_mhsa = nn.MultiHeadAttention(d_model, heads, rng)
        self.ln_t = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(2)]
        # shared by the region and segmentation branches
        self.mha = nn.MultiHeadAttention(d_model, heads, rng)
        self.pwff = nn.PositionwiseFeedForward(d_model, d_ff, rng)
        self.ln_rs0 = nn.LayerNorm(d_model, ln_epsilon)
        self.ln_r = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(2)]
        self.ln_s = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(2)]
        self.fusion = fusion
        if fusion == "dnm":
            self.dnm = nn.Linear(d_model, 2, rng)
        elif fusion == "concat":
            self.w_c = nn.xavier(rng, 2 * d_model, d_model)
        self.keep_prob = keep_prob
        self.temperature: float | None = None


def text_self_attend(z_t: Tensor, p: DndLayer, rng=None, training: bool = False) -> Tensor:
    attn = nn.dropout(nn.masked_self_attention(z_t, p.text_mhsa), p.keep_prob, rng, training)
    return p.ln_t[1](p.ln_t[0](attn + z_t) + z_t)


def cross_attend_stream(hat_t: Tensor, mem: Tensor, p: DndLayer, which: int, rng=None,
                        training: bool = False, mem_mask=None) -> Tensor:
    lns = p.ln_r if which == REGION else p.ln_s
    attn = nn.dropout(p.mha(hat_t, mem, mem, key_mask(mem_mask)), p.keep_prob, rng, training)
    m = lns[0](p.ln_rs0(attn + hat_t) + hat_t)
    ff = nn.dropout(p.pwff(m), p.keep_prob, rng, training)
    return lns[1](ff + m)


def one_hot_argmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise one-hot of the argmax; ties go to the lowest index (region)."""
    idx = np.argmax(logits, axis=-1)
    out = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def dnm_nominate(z_tr: Tensor, z_ts: Tensor, p: DndLayer, g: GumbelConfig, rng=None,
                 training: bool = False, temperature: float | None = None):
    """Fuse the two candidate streams per word.

    Returns ``(z_next, psi, gamma)``: the fused words, the nomination map
    (one-hot rows in the forward value) and the ``[..., seq, 2]`` logits.
    """
    if z_tr.shape != z_ts.shape:
        raise T.ShapeError(f"nomination candidates differ in shape: {z_tr.shape} vs {z_ts.shape}")
    tau = g.temperature if temperature is None else temperature
    if tau <= 0:
        raise ContractError(f"Gumbel temperature must be positive, got {tau}")
    gamma = p.dnm(z_tr + z_ts)
    logits = gamma
    if training and g.train_noise:
        if rng is None:
            raise ContractError("Gumbel noise needs an rng")
        logits = gamma + rng.gumbel(size=gamma.shape).astype(gamma.dtype)
    soft = T.softmax(logits * (1.0 / tau), axis=-1)
    if g.hard:
        psi = T.straight_through(one_hot_argmax(logits.data), soft)
    else:
        psi = soft
    z_next = z_tr * psi[..., 0:1] + z_ts * psi[..., 1:2]
    return z_next, psi, gamma


def fuse_variant(mode: str, z_tr: Tensor, z_ts: Tensor, projection: Tensor | None = None) -> Tensor:
    """Static fusion used by the ablation variants in place of nomination."""
    if mode == "add":
        return z_tr + z_ts
    if mode == "concat":
        if projection is None:
            raise ContractError("concat fusion needs a 2d x d projection")
        return T.concat([z_tr, z_ts], axis=-1) @ projection
    raise ContractError(f"unknown fusion mode {mode!r}")


def decode_layer(z_t: Tensor, streams: StreamPair, p: DndLayer, g: GumbelConfig, rng=None,
                 training: bool = False):
    hat_t = text_self_attend(z_t, p, rng, training)
    z_tr = cross_attend_stream(hat_t, streams.z_r, p, REGION, rng, training, streams.mask_r)
    z_ts = cross_attend_stream(hat_t, streams.z_s, p, SEGMENTATION, rng, training, streams.mask_s)
    if p.fusion == "dnm":
        z_next, psi, _ = dnm_nominate(z_tr, z_ts, p, g, rng, training, p.temperature)
        return z_next, psi
    projection = p.w_c if p.fusion == "concat" else None
    return fuse_variant(p.fusion, z_tr, z_ts, projection), None


def decode_stack(tokens_embedded: Tensor, streams: StreamPair, layers: list[DndLayer], g: GumbelConfig,
                 rng=None, training: bool = False):
    if not layers:
        raise ContractError("decode_stack needs at least one layer")
    z = tokens_embedded
    psis = []
    for layer in layers:
        z, psi = decode_layer(z, streams, layer, g, rng, training)
        psis.append(psi)
    return z, psis


def format_nominations(words: list[str], psis: list[np.ndarray]) -> list[str]:
    """One line per word: ``word<TAB>layer0:R|S<TAB>layer1:R|S...``.

    ``psis`` holds one ``[seq, 2]`` map per layer; row i belongs to word i.
    """
    lines = []
    for i, word in enumerate(words):
        tags = [f"layer{k}:{'R' if psi[i, 0] >= psi[i, 1] else 'S'}" for k, psi in enumerate(psis)]
        lines.append("\t".join([word] + tags))
    return lines
