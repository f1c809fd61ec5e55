"""Full captioning models and decoding.

``Dsct`` runs both feature streams through the mutual-attention encoder and
the nominating decoder. ``BaselineModel`` is the plain single-stream
transformer over region features. The two static-fusion ablations reuse
``Dsct`` with ``fusion`` set to ``add`` or ``concat``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from dsct import nn
from dsct import tensor as T
from dsct.data import BOS, EOS, PAD, FeatureBatch
from dsct.dnd import FUSIONS, DndLayer, GumbelConfig, decode_stack, fuse_variant
from dsct.psmae import PsmaeLayer, StreamPair, encode_stack, key_mask
from dsct.tensor import ContractError, Tensor

__all__ = [
    "ModelConfig", "Dsct", "BaselineModel", "build_model", "forward_train",
    "greedy_decode", "beam_search", "Hypothesis", "fuse_variant", "MODEL_KINDS",
]

MODEL_KINDS = FUSIONS + ("baseline",)
BANNED = (PAD, BOS)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    heads: int = 8
    enc_layers: int = 3
    dec_layers: int = 3
    d_ff: int = 2048
    max_len: int = 20
    feature_dim_region: int = 2048
    feature_dim_seg: int = 2048
    keep_prob: float = 0.9
    beam: int = 5
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    fusion: str = "dnm"
    length_norm_alpha: float = 0.0
    ln_epsilon: float = 1e-6

    def __post_init__(self):
        if isinstance(self.gumbel, dict):
            self.gumbel = GumbelConfig(**self.gumbel)
        problems = []
        if self.vocab_size < 4:
            problems.append(f"vocab_size {self.vocab_size} cannot hold the four reserved ids")
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            problems.append(f"d_model {self.d_model} must be a positive multiple of heads {self.heads}")
        if self.d_model % 2:
            problems.append("d_model must be even for sinusoidal positions")
        if self.enc_layers < 1 or self.dec_layers < 1:
            problems.append("need at least one encoder and one decoder layer")
        if self.beam < 1:
            problems.append(f"beam must be >= 1, got {self.beam}")
        if self.max_len < 2:
            problems.append(f"max_len must be >= 2, got {self.max_len}")
        if not 0.0 < self.keep_prob <= 1.0:
            problems.append(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.fusion not in MODEL_KINDS:
            problems.append(f"fusion must be one of {MODEL_KINDS}, got {self.fusion!r}")
        if problems:
            raise ContractError("; ".join(problems))

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """Small configuration that trains on one CPU core in minutes."""
        base = dict(d_model=64, heads=4, enc_layers=2, dec_layers=2, d_ff=128, max_len=16,
                    feature_dim_region=32, feature_dim_seg=32)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_fusion(self, fusion: str) -> "ModelConfig":
        return replace(self, fusion=fusion)


class _CaptionerBase(nn.Module):
    """Token embedding, positions and output head shared by both model kinds."""

    def _init_text(self, cfg: ModelConfig, rng):
        self.config = cfg
        self.embed = T.parameter(rng.normal(0.0, cfg.d_model ** -0.5, size=(cfg.vocab_size, cfg.d_model)),
                                 dtype=T.DEFAULT_DTYPE)
        self.pe = nn.sinusoidal_pe(cfg.max_len, cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, rng)

    def embed_tokens(self, ids: np.ndarray, rng=None, training: bool = False) -> Tensor:
        ids = np.asarray(ids)
        L = ids.shape[-1]
        if L > self.config.max_len:
            raise ContractError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        x = T.embedding(self.embed, ids) * math.sqrt(self.config.d_model)
        x = x + self.pe[:L].astype(self.embed.dtype)
        return nn.dropout(x, self.config.keep_prob, rng, training)

    def _project(self, lin: nn.Linear, feats: np.ndarray, rng, training) -> Tensor:
        x = T.relu(lin(Tensor(np.asarray(feats, dtype=self.embed.dtype))))
        return nn.dropout(x, self.config.keep_prob, rng, training)

    def forward(self, feats: FeatureBatch, ids: np.ndarray, rng=None, training: bool = False):
        return self.decode(ids, self.encode(feats, rng, training), rng, training)


class Dsct(_CaptionerBase):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.fusion == "baseline":
            raise ContractError("use BaselineModel for the single-stream baseline")
        self.proj_r = nn.Linear(cfg.feature_dim_region, cfg.d_model, rng)
        self.proj_s = nn.Linear(cfg.feature_dim_seg, cfg.d_model, rng)
        self.encoder = [PsmaeLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.keep_prob, cfg.ln_epsilon)
                        for _ in range(cfg.enc_layers)]
        self.decoder = [DndLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.keep_prob, cfg.fusion, cfg.ln_epsilon)
                        for _ in range(cfg.dec_layers)]
        self._init_text(cfg, rng)

    def encode(self, feats: FeatureBatch, rng=None, training: bool = False) -> StreamPair:
        _check_feats(feats, self.config)
        pair = StreamPair(self._project(self.proj_r, feats.region, rng, training),
                          self._project(self.proj_s, feats.seg, rng, training),
                          feats.region_mask, feats.seg_mask)
        return encode_stack(pair, self.encoder, rng, training)

    def decode(self, ids: np.ndarray, memory: StreamPair, rng=None, training: bool = False):
        """``ids`` is ``[B, L]`` batch-major. Returns ``(logits [B, L, V], psis)``."""
        x = self.embed_tokens(ids, rng, training)
        z, psis = decode_stack(x, memory, self.decoder, self.config.gumbel, rng, training)
        return self.head(z), psis


class BaselineEncoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff, rng, keep_prob=0.9, ln_epsilon=1e-6):
        self.mhsa = nn.MultiHeadAttention(d_model, heads, rng)
        self.pwff = nn.PositionwiseFeedForward(d_model, d_ff, rng)
        self.ln = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(3)]
        self.keep_prob = keep_prob

    def __call__(self, z, mask, rng=None, training=False):
        attn = nn.dropout(self.mhsa(z, z, z, key_mask(mask)), self.keep_prob, rng, training)
        m = self.ln[1](self.ln[0](attn + z) + z)
        ff = nn.dropout(self.pwff(m), self.keep_prob, rng, training)
        return self.ln[2](ff + m)


class BaselineDecoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff, rng, keep_prob=0.9, ln_epsilon=1e-6):
        self.text_mhsa = nn.MultiHeadAttention(d_model, heads, rng)
        self.mha = nn.MultiHeadAttention(d_model, heads, rng)
        self.pwff = nn.PositionwiseFeedForward(d_model, d_ff, rng)
        self.ln = [nn.LayerNorm(d_model, ln_epsilon) for _ in range(6)]
        self.keep_prob = keep_prob

    def __call__(self, t, h, h_mask, rng=None, training=False):
        attn = nn.dropout(nn.masked_self_attention(t, self.text_mhsa), self.keep_prob, rng, training)
        hat = self.ln[1](self.ln[0](attn + t) + t)
        cross = nn.dropout(self.mha(hat, h, h, key_mask(h_mask)), self.keep_prob, rng, training)
        tilde = self.ln[4](self.ln[3](self.ln[2](cross + hat) + hat) + hat)
        ff = nn.dropout(self.pwff(tilde), self.keep_prob, rng, training)
        return self.ln[5](ff + tilde)


class BaselineModel(_CaptionerBase):
    """Single-stream transformer over region features only."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.proj_r = nn.Linear(cfg.feature_dim_region, cfg.d_model, rng)
        self.encoder = [BaselineEncoderLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.keep_prob, cfg.ln_epsilon)
                        for _ in range(cfg.enc_layers)]
        self.decoder = [BaselineDecoderLayer(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.keep_prob, cfg.ln_epsilon)
                        for _ in range(cfg.dec_layers)]
        self._init_text(cfg, rng)

    def encode(self, feats: FeatureBatch, rng=None, training: bool = False) -> StreamPair:
        _check_feats(feats, self.config, need_seg=False)
        h = self._project(self.proj_r, feats.region, rng, training)
        for layer in self.encoder:
            h = layer(h, feats.region_mask, rng, training)
        return StreamPair(h, None, feats.region_mask, None)

    def decode(self, ids: np.ndarray, memory: StreamPair, rng=None, training: bool = False):
        t = self.embed_tokens(ids, rng, training)
        for layer in self.decoder:
            t = layer(t, memory.z_r, memory.mask_r, rng, training)
        return self.head(t), [None] * len(self.decoder)


def _check_feats(feats: FeatureBatch, cfg: ModelConfig, need_seg: bool = True):
    if feats.region.ndim != 3 or feats.region.shape[-1] != cfg.feature_dim_region:
        raise T.ShapeError(f"region features {feats.region.shape} do not match [B, N, {cfg.feature_dim_region}]")
    if need_seg and (feats.seg.ndim != 3 or feats.seg.shape[-1] != cfg.feature_dim_seg):
        raise T.ShapeError(f"segmentation features {feats.seg.shape} do not match [B, N, {cfg.feature_dim_seg}]")


def build_model(cfg: ModelConfig, seed: int):
    rng = T.make_rng(seed, "model-init")
    if cfg.fusion == "baseline":
        return BaselineModel(cfg, rng)
    return Dsct(cfg, rng)


def forward_train(model, feats: FeatureBatch, tokens, rng=None, training: bool = True):
    """Teacher-forced logits ``[B, seq-1, V]`` for a ``CaptionBatch``.

    Inputs are tokens ``0..T-1``; position t predicts token t+1.
    """
    ids = tokens.batch_major
    if ids.shape[0] != len(feats):
        raise ContractError(f"{ids.shape[0]} captions for {len(feats)} feature sets")
    if not (ids[:, 0] == BOS).all():
        raise ContractError("captions must begin with BOS")
    logits, _ = model.forward(feats, ids[:, :-1], rng, training)
    return logits


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _next_logprobs(model, memory: StreamPair, prefixes: np.ndarray, rows: np.ndarray, rng, training) -> np.ndarray:
    """Log-probabilities (float64) of the next token for each prefix."""
    logits, _ = model.decode(prefixes, memory.take(rows), rng, training)
    lp = T.log_softmax(logits[:, -1, :], axis=-1).data.astype(np.float64)
    lp[:, list(BANNED)] = -np.inf
    return lp


def greedy_decode(model, feats: FeatureBatch, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS; ties go to the lowest token id."""
    max_len = max_len or model.config.max_len
    B = len(feats)
    with T.no_grad():
        memory = model.encode(feats)
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        while seqs.shape[1] < max_len and not done.all():
            lp = _next_logprobs(model, memory, seqs, np.arange(B), None, False)
            nxt = np.where(done, PAD, lp.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
    out = []
    for row in seqs:
        row = [int(t) for t in row if t != PAD]
        out.append(row)
    return out


@dataclass
class Hypothesis:
    tokens: list[int]   # BOS first; ends with EOS unless cut at max_len
    logp: float         # summed log-probability of the generated tokens
    score: float        # logp / len ** alpha, used for ranking

    @property
    def words(self) -> list[int]:
        return [t for t in self.tokens[1:] if t != EOS]


def beam_search(model, feats: FeatureBatch, beam_k: int | None = None, max_len: int | None = None,
                length_norm_alpha: float | None = None, rng=None, training: bool = False) -> list[list[Hypothesis]]:
    """Beam search per image; returns up to ``beam_k`` hypotheses each, best first.

    At each step every (hypothesis, token) extension is ranked by summed
    log-probability, ties broken by beam position then token id. Extensions
    ending in EOS that land inside the top k are retired; the best k others
    stay alive. At the last step the top k extensions all retire. With
    ``alpha == 0`` the search stops early once no live hypothesis can beat
    the k-th retired one.
    """
    cfg = model.config
    k = cfg.beam if beam_k is None else beam_k
    max_len = cfg.max_len if max_len is None else max_len
    alpha = cfg.length_norm_alpha if length_norm_alpha is None else length_norm_alpha
    if k < 1:
        raise ContractError(f"beam size must be >= 1, got {k}")
    if k > cfg.vocab_size:
        raise ContractError(f"beam size {k} exceeds vocabulary size {cfg.vocab_size}")
    if max_len < 2:
        raise ContractError("max_len must allow at least one generated token")
    B = len(feats)
    # alive[b] = list of (tokens, logp)
    alive: list[list[tuple[list[int], float]]] = [[([BOS], 0.0)] for _ in range(B)]
    finished: list[list[tuple[list[int], float]]] = [[] for _ in range(B)]
    with T.no_grad():
        memory = model.encode(feats, rng, training)
        for length in range(1, max_len):
            last = length == max_len - 1
            rows = [b for b in range(B) for _ in alive[b]]
            if not rows:
                break
            prefixes = np.array([h[0] for b in range(B) for h in alive[b]], dtype=np.int64)
            lp = _next_logprobs(model, memory, prefixes, np.array(rows), rng, training)
            offset = 0
            for b in range(B):
                n = len(alive[b])
                if n == 0:
                    continue
                block = lp[offset:offset + n]
                offset += n
                totals = np.array([h[1] for h in alive[b]])[:, None] + block
                flat = totals.reshape(-1)
                # stable sort on -score keeps (beam, token) order among ties
                order = np.argsort(-flat, kind="stable")
                order = order[np.isfinite(flat[order])]
                V = block.shape[1]
                new_alive = []
                for rank, j in enumerate(order):
                    beam_i, tok = divmod(int(j), V)
                    cand = (alive[b][beam_i][0] + [tok], float(flat[j]))
                    if last:
                        if rank >= k:
                            break
                        finished[b].append(cand)
                    elif tok == EOS:
                        if rank < k:
                            finished[b].append(cand)
                    else:
                        new_alive.append(cand)
                        if len(new_alive) == k:
                            break
                alive[b] = [] if last else new_alive
                if alpha == 0 and len(finished[b]) >= k and alive[b]:
                    kth = sorted((f[1] for f in finished[b]), reverse=True)[k - 1]
                    if alive[b][0][1] <= kth:
                        alive[b] = []
    results = []
    for b in range(B):
        hyps = [Hypothesis(toks, lp_, lp_ / (len(toks) - 1) ** alpha if alpha else lp_)
                for toks, lp_ in finished[b]]
        hyps.sort(key=lambda h: (-h.score, h.tokens))
        results.append(hyps[:k])
    return results
