"""Cross-entropy pretraining, self-critical finetuning, checkpoints, evaluation."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from dsct import metrics
from dsct import tensor as T
from dsct.data import BOS, EOS, PAD, CaptionBatch, Dataset, FeatureBatch, Vocab, collate_features
from dsct.model import ModelConfig, beam_search, build_model, forward_train
from dsct.tensor import ContractError, Tensor

CKPT_MAGIC = b"DSCTCKPT"
CKPT_VERSION = 1
_DIGEST = hashlib.sha256
_DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class LrSchedule:
    """``scale * min(step**-0.5, step * warmup**-1.5)``."""

    scale: float
    warmup: int = 2000

    def __post_init__(self):
        if self.scale <= 0 or self.warmup < 1:
            raise ContractError("learning-rate scale and warmup must be positive")

    @classmethod
    def for_model(cls, d_model: int, warmup: int = 2000, multiplier: float = 1.0) -> "LrSchedule":
        return cls(multiplier * d_model ** -0.5, warmup)

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ContractError("learning-rate steps count from 1")
        return self.scale * min(step ** -0.5, step * self.warmup ** -1.5)


class Adam:
    """Adam over named parameters, with an optional global-norm gradient cap."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
                 clip_norm: float | None = None):
        self.params: dict[str, Tensor] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                 for p in self.params.values() if p.grad is not None)))

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.global_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def state_meta(self) -> dict:
        return {"step": self.step_count, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "clip_norm": self.clip_norm}


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def xe_loss(model, feats: FeatureBatch, captions: CaptionBatch, rng=None, training: bool = True) -> Tensor:
    """Mean negative log-likelihood over non-PAD target tokens."""
    if len(captions) == 0:
        raise ContractError("empty batch")
    logits = forward_train(model, feats, captions, rng, training)
    targets = captions.batch_major[:, 1:]
    mask = targets != PAD
    count = int(mask.sum())
    if count == 0:
        raise ContractError("batch has no target tokens")
    picked = T.gather_last(T.log_softmax(logits, axis=-1), targets)
    return T.tsum(picked * mask.astype(picked.dtype)) * (-1.0 / count)


def xe_step(model, items, opt: Adam, lr: float, rng=None) -> float:
    if not items:
        raise ContractError("empty batch")
    feats = collate_features(items)
    caps = CaptionBatch.from_sequences([it.target for it in items])
    opt.zero_grad()
    loss = xe_loss(model, feats, caps, rng, training=True)
    T.backward(loss)
    opt.step(lr)
    return loss.item()


# ---------------------------------------------------------------------------
# self-critical sequence training
# ---------------------------------------------------------------------------

RewardFn = Callable[[list[list[int]], list[list[int]]], np.ndarray]


def cider_reward(idf: metrics.IdfTable) -> RewardFn:
    """CIDEr-D of each hypothesis against one image's references."""

    def reward(hyps: list[list[int]], refs: list[list[int]]) -> np.ndarray:
        ref_words = [strip_specials(r) for r in refs]
        _, per = metrics.cider_d(hyps, [ref_words] * len(hyps), idf)
        return np.asarray(per, dtype=np.float64)

    return reward


def strip_specials(ids) -> list[int]:
    return [int(t) for t in ids if t not in (PAD, BOS, EOS)]


def sequence_logprob(model, feats: FeatureBatch, seqs: list[list[int]], rng=None, training: bool = True) -> Tensor:
    """Summed log-probability of each generated sequence (BOS excluded), shape ``[N]``."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    logits, _ = model.forward(feats, ids[:, :-1], rng, training)
    targets = ids[:, 1:]
    picked = T.gather_last(T.log_softmax(logits, axis=-1), targets)
    return T.tsum(picked * (targets != PAD).astype(picked.dtype), axis=-1)


def scst_surrogate(model, feats: FeatureBatch, seqs: list[list[int]], advantages: np.ndarray,
                   group_sizes: list[int], rng=None, training: bool = True) -> Tensor:
    """``-(1/k) * sum_i adv_i * log p(y_i)`` per image, averaged over images.

    ``feats`` holds one row per sequence; advantages are constants.
    """
    logp = sequence_logprob(model, feats, seqs, rng, training)
    weights = np.concatenate([np.full(n, 1.0 / n) for n in group_sizes]) / len(group_sizes)
    coef = (-np.asarray(advantages, dtype=np.float64) * weights).astype(logp.dtype)
    return T.tsum(logp * coef)


@dataclass
class ScstResult:
    loss: float
    mean_reward: float
    rewards: list[np.ndarray]
    baselines: list[float]
    updated: bool


def scst_step(model, items, opt: Adam, lr: float, reward_fn: RewardFn, beam_k: int, rng=None) -> ScstResult:
    """One self-critical update using the k beam survivors of every image as samples.

    The baseline of each image is the mean reward of its k samples.
    """
    if beam_k < 2:
        raise ContractError("self-critical training needs beam_k >= 2; a single sample has zero advantage")
    if not items:
        raise ContractError("empty batch")
    feats = collate_features(items)
    beams = beam_search(model, feats, beam_k=beam_k, rng=rng, training=True)
    seqs, advs, rows, sizes, all_r, bases = [], [], [], [], [], []
    for b, (item, hyps) in enumerate(zip(items, beams)):
        r = np.asarray(reward_fn([h.words for h in hyps], item.refs), dtype=np.float64)
        base = float(np.mean(r))
        assert base == float(r.sum() / len(r)), "baseline must be the mean reward"
        all_r.append(r)
        bases.append(base)
        seqs.extend(h.tokens for h in hyps)
        advs.extend(r - base)
        rows.extend([b] * len(hyps))
        sizes.append(len(hyps))
    advs = np.asarray(advs)
    mean_reward = float(np.mean(np.concatenate(all_r)))
    opt.zero_grad()
    if not np.any(advs):
        return ScstResult(0.0, mean_reward, all_r, bases, False)
    loss = scst_surrogate(model, feats.take(np.array(rows)), seqs, advs, sizes, rng, training=True)
    T.backward(loss)
    opt.step(lr)
    return ScstResult(loss.item(), mean_reward, all_r, bases, True)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def decode_dataset(model, ds: Dataset, beam_k: int | None = None, batch_size: int = 64) -> list[list[int]]:
    out: list[list[int]] = []
    for start in range(0, len(ds), batch_size):
        chunk = ds.items[start:start + batch_size]
        for hyps in beam_search(model, collate_features(chunk), beam_k=beam_k):
            out.append(hyps[0].words if hyps else [])
    return out


def exact_match(hyps: list[list[int]], refs: list[list[list[int]]]) -> float:
    """Fraction of hypotheses equal to one of their references."""
    if not hyps:
        return 0.0
    hits = sum(any(list(h) == list(r) for r in rs) for h, rs in zip(hyps, refs))
    return hits / len(hyps)


def evaluate(model, ds: Dataset, beam_k: int | None = None, idf: metrics.IdfTable | None = None) -> dict:
    """Decode every item and score it against its references.

    ``idf`` defaults to the evaluated split's own references.
    """
    hyps = decode_dataset(model, ds, beam_k)
    refs = [[strip_specials(r) for r in it.refs] for it in ds.items]
    report = metrics.score_captions(hyps, refs, idf)
    report["summary"]["exact"] = exact_match(hyps, refs)
    report["hypotheses"] = [ds.vocab.decode(h) for h in hyps]
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_meta: dict = field(default_factory=dict)
    rng_state: dict | None = None
    step: int = 0
    vocab: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def capture_state(model, opt: Adam | None, rng, step: int, vocab: Vocab, extra: dict | None = None) -> TrainState:
    return TrainState(
        config=model.config,
        params={k: p.data.copy() for k, p in model.named_parameters()},
        adam_m={k: v.copy() for k, v in opt.m.items()} if opt else {},
        adam_v={k: v.copy() for k, v in opt.v.items()} if opt else {},
        adam_meta=opt.state_meta() if opt else {},
        rng_state=T.rng_state(rng) if rng is not None else None,
        step=step,
        vocab=list(vocab.tokens),
        extra=dict(extra or {}),
    )


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(state: TrainState) -> bytes:
    header = {
        "config": state.config.to_dict(),
        "adam": state.adam_meta,
        "rng": state.rng_state,
        "step": state.step,
        "vocab": state.vocab,
        "extra": state.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    tensors = [(f"param/{k}", v) for k, v in state.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in state.adam_m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in state.adam_v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    body = buf.getvalue()
    return body + _DIGEST(body).digest()


def save_checkpoint(path, state: TrainState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)


def parse_checkpoint(blob: bytes) -> TrainState:
    head = len(CKPT_MAGIC) + 4
    if len(blob) < head or blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    if len(blob) < head + 8 + _DIGEST_SIZE:
        raise CheckpointIntegrityError("checkpoint truncated")
    body, digest = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if _DIGEST(body).digest() != digest:
        raise CheckpointIntegrityError("checkpoint checksum mismatch (truncated or corrupt)")
    pos = head
    (n,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    try:
        header = json.loads(body[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (nd,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{nd}I", body, pos)
            pos += 4 * nd
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise CheckpointIntegrityError(f"tensor {name} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointIntegrityError("trailing bytes after the last tensor")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    return TrainState(
        config=ModelConfig.from_dict(header["config"]),
        params=group("param/"),
        adam_m=group("adam.m/"),
        adam_v=group("adam.v/"),
        adam_meta=header["adam"],
        rng_state=header["rng"],
        step=header["step"],
        vocab=header["vocab"],
        extra=header.get("extra", {}),
    )


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())


def load_params(model, params: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise CheckpointError(f"checkpoint does not match the model (missing {missing}, unexpected {extra})")
    for k, p in own.items():
        if p.shape != params[k].shape:
            raise CheckpointError(f"parameter {k}: checkpoint shape {params[k].shape} vs model {p.shape}")
        p.data = params[k].astype(p.dtype, copy=True)


def restore(state: TrainState, opt_kwargs: dict | None = None):
    """Model (and optimizer, when moments were saved) from a checkpoint."""
    model = build_model(state.config, 0)
    load_params(model, state.params)
    opt = Adam(model.named_parameters(), **(opt_kwargs or {}))
    if state.adam_m:
        meta = state.adam_meta
        opt.beta1, opt.beta2, opt.eps = meta["beta1"], meta["beta2"], meta["eps"]
        opt.clip_norm = meta.get("clip_norm")
        opt.step_count = meta["step"]
        for k in opt.m:
            opt.m[k] = state.adam_m[k].copy()
            opt.v[k] = state.adam_v[k].copy()
    return model, opt


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    warmup: int = 2000
    lr_multiplier: float = 1.0
    clip_norm: float | None = None
    scst_steps: int = 300
    scst_lr: float = 1e-5
    scst_beam: int = 5
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sample_batch(rng, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, min(batch_size, n), replace=False)


def train_xe(model, opt: Adam, ds: Dataset, tc: TrainConfig, rng, start_step: int = 0, stop_step: int | None = None,
             log: Callable[[str], None] | None = None, on_checkpoint: Callable[[int], None] | None = None) -> list[float]:
    """Cross-entropy steps ``start_step+1 .. stop_step`` (default ``tc.steps``)."""
    sched = LrSchedule.for_model(model.config.d_model, tc.warmup, tc.lr_multiplier)
    stop = tc.steps if stop_step is None else stop_step
    losses = []
    for step in range(start_step + 1, stop + 1):
        idx = sample_batch(rng, len(ds), tc.batch_size)
        lr = sched(step)
        loss = xe_step(model, [ds.items[i] for i in idx], opt, lr, rng)
        losses.append(loss)
        if log:
            log(f"{step} {loss:.6f} {lr:.6e}")
        if on_checkpoint and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            on_checkpoint(step)
    return losses


def train_scst(model, opt: Adam, ds: Dataset, tc: TrainConfig, rng, idf: metrics.IdfTable | None = None,
               start_step: int = 0, stop_step: int | None = None, log: Callable[[str], None] | None = None,
               on_checkpoint: Callable[[int], None] | None = None) -> list[ScstResult]:
    if idf is None:
        idf = metrics.IdfTable.from_references([[strip_specials(r) for r in it.refs] for it in ds.items])
    reward = cider_reward(idf)
    stop = tc.scst_steps if stop_step is None else stop_step
    out = []
    for step in range(start_step + 1, stop + 1):
        idx = sample_batch(rng, len(ds), tc.batch_size)
        res = scst_step(model, [ds.items[i] for i in idx], opt, tc.scst_lr, reward, tc.scst_beam, rng)
        out.append(res)
        if log:
            log(f"{step} {res.loss:.6f} {tc.scst_lr:.6e} {res.mean_reward:.6f}")
        if on_checkpoint and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            on_checkpoint(step)
    return out
