"""Seeded synthetic scene/caption corpus standing in for detector features.

A scene holds 1-4 objects on a 3x3 grid. Region rows describe what each
object is (category, attribute); segmentation rows describe where things are
(cell, neighbourhood occupancy, direction to the next object in reading
order). Both carry a slot code giving the object's reading-order rank, which
is what ties a region row to its segmentation row. Captions name the first
two objects in reading order and the spatial relation between them, so the
identity words live in one stream and the relation words in the other.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dsct.tensor import ContractError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]

CATEGORIES = ["cube", "sphere", "cylinder", "cone", "ring", "star", "pyramid", "disk"]
CATEGORY_SYNONYMS = ["box", "ball", "can", "spike", "loop", "spark", "wedge", "plate"]
ATTRIBUTES = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"]
RELATIONS = ["left of", "above", "next to"]
RELATION_SYNONYMS = ["left of", "over", "near"]
GRID = 3
MAX_OBJECTS = 4
N_REFS = 5

# (article1, article2, category synonyms, relation synonyms) per reference variant
_VARIANTS = [
    ("a", "a", False, False),
    ("a", "a", True, False),
    ("a", "a", False, True),
    ("one", "a", True, True),
    ("one", "one", False, False),
]

_REGION_LAYOUT = (len(CATEGORIES), len(ATTRIBUTES), MAX_OBJECTS)
_SEG_LAYOUT = (GRID * GRID, 8, len(RELATIONS), MAX_OBJECTS)
MIN_FEATURE_DIM = max(sum(_REGION_LAYOUT), sum(_SEG_LAYOUT))

MAGIC = b"DSCTDATA"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    category: int
    attribute: int
    cell: int


@dataclass(frozen=True)
class Scene:
    """Objects sorted in reading order (ascending grid cell)."""

    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if not 1 <= len(cells) <= MAX_OBJECTS:
            raise ContractError(f"a scene holds 1-{MAX_OBJECTS} objects, got {len(cells)}")
        if len(set(cells)) != len(cells) or cells != sorted(cells):
            raise ContractError("scene cells must be distinct and in reading order")

    @property
    def relation(self) -> int | None:
        """Relation of the first object to the second, or None for one object."""
        if len(self.objects) < 2:
            return None
        return relation_between(self.objects[0].cell, self.objects[1].cell)

    def key(self) -> bytes:
        return bytes(v for o in self.objects for v in (o.category, o.attribute, o.cell))

    def digest(self) -> int:
        return int.from_bytes(hashlib.sha256(self.key()).digest()[:8], "little")


def relation_between(cell_a: int, cell_b: int) -> int:
    """Index into RELATIONS describing a (earlier in reading order) w.r.t. b."""
    ra, ca = divmod(cell_a, GRID)
    rb, cb = divmod(cell_b, GRID)
    if ra == rb:
        return 0
    if ca == cb:
        return 1
    return 2


def generate_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = np.sort(rng.choice(GRID * GRID, size=n, replace=False))
    cats = rng.integers(0, len(CATEGORIES), size=n)
    attrs = rng.integers(0, len(ATTRIBUTES), size=n)
    return Scene(tuple(SceneObject(int(c), int(a), int(cell)) for c, a, cell in zip(cats, attrs, cells)))


@dataclass
class FeaturePair:
    region: np.ndarray
    segmentation: np.ndarray


def _neighbours(cell: int, occupied: set[int]) -> np.ndarray:
    r, c = divmod(cell, GRID)
    flags = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            rr, cc = r + dr, c + dc
            inside = 0 <= rr < GRID and 0 <= cc < GRID
            flags.append(1.0 if inside and rr * GRID + cc in occupied else 0.0)
    return np.array(flags)


def render_features(scene: Scene, noise_std: float, rng: np.random.Generator,
                    feature_dim: int = 32) -> FeaturePair:
    if noise_std < 0:
        raise ContractError("noise_std must be non-negative")
    if feature_dim < MIN_FEATURE_DIM:
        raise ContractError(f"feature_dim must be at least {MIN_FEATURE_DIM}")
    n = len(scene.objects)
    occupied = {o.cell for o in scene.objects}
    region = np.zeros((n, feature_dim))
    seg = np.zeros((n, feature_dim))
    nc, na, _ = _REGION_LAYOUT
    ncell, nnb, nrel, _ = _SEG_LAYOUT
    for slot, obj in enumerate(scene.objects):
        region[slot, obj.category] = 1.0
        region[slot, nc + obj.attribute] = 1.0
        region[slot, nc + na + slot] = 1.0

        seg[slot, obj.cell] = 1.0
        seg[slot, ncell:ncell + nnb] = _neighbours(obj.cell, occupied)
        if slot + 1 < n:
            seg[slot, ncell + nnb + relation_between(obj.cell, scene.objects[slot + 1].cell)] = 1.0
        seg[slot, ncell + nnb + nrel + slot] = 1.0
    if noise_std > 0:
        region = region + rng.normal(0.0, noise_std, size=region.shape)
        seg = seg + rng.normal(0.0, noise_std, size=seg.shape)
    return FeaturePair(region.astype(np.float32), seg.astype(np.float32))


def realize_caption(scene: Scene, variant: int = 0) -> str:
    art1, art2, cat_syn, rel_syn = _VARIANTS[variant]
    cats = CATEGORY_SYNONYMS if cat_syn else CATEGORIES
    rels = RELATION_SYNONYMS if rel_syn else RELATIONS
    o1 = scene.objects[0]
    words = [art1, ATTRIBUTES[o1.attribute], cats[o1.category]]
    if len(scene.objects) >= 2:
        o2 = scene.objects[1]
        words += [rels[scene.relation], art2, ATTRIBUTES[o2.attribute], cats[o2.category]]
    return " ".join(words)


def reference_captions(scene: Scene) -> list[str]:
    return [realize_caption(scene, v) for v in range(N_REFS)]


class Vocab:
    def __init__(self, tokens: list[str]):
        if tokens[:len(SPECIALS)] != SPECIALS:
            raise ContractError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return encode(self, text)

    def decode(self, ids) -> str:
        return decode(self, ids)


def build_vocab() -> Vocab:
    words: list[str] = ["a", "one"]
    words += ATTRIBUTES + CATEGORIES + CATEGORY_SYNONYMS
    for phrase in RELATIONS + RELATION_SYNONYMS:
        for w in phrase.split():
            if w not in words:
                words.append(w)
    return Vocab(SPECIALS + words)


def encode(vocab: Vocab, text: str) -> list[int]:
    return [BOS] + [vocab.ids.get(w, UNK) for w in text.split()] + [EOS]


def decode(vocab: Vocab, ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (BOS, PAD):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


@dataclass
class Item:
    scene: Scene
    features: FeaturePair
    refs: list[list[int]]

    @property
    def target(self) -> list[int]:
        """Canonical caption used as the cross-entropy target."""
        return self.refs[0]


@dataclass
class Dataset:
    items: list[Item]
    vocab: Vocab
    feature_dim: int
    noise_std: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.items[:n], self.vocab, self.feature_dim, self.noise_std, dict(self.meta))


def make_item(scene: Scene, vocab: Vocab, noise_std: float, rng, feature_dim: int) -> Item:
    feats = render_features(scene, noise_std, rng, feature_dim)
    return Item(scene, feats, [encode(vocab, c) for c in reference_captions(scene)])


def make_split(n_train: int, n_val: int, seed: int, noise_std: float = 0.1,
               feature_dim: int = 32, val_fraction_bits: int = 3) -> tuple[Dataset, Dataset]:
    """Reproducible train/val corpora with disjoint scenes.

    Scenes whose hash falls in the lowest ``1 / 2**val_fraction_bits`` bucket
    can only go to validation; all others only to training.
    """
    if n_train <= 0 or n_val <= 0:
        raise ContractError("split sizes must be positive")
    from dsct.tensor import make_rng

    rng = make_rng(seed, "synth-data")
    vocab = build_vocab()
    bucket = (1 << val_fraction_bits) - 1
    train: list[Item] = []
    val: list[Item] = []
    while len(train) < n_train or len(val) < n_val:
        scene = generate_scene(rng)
        is_val = (scene.digest() & bucket) == 0
        if is_val and len(val) < n_val:
            val.append(make_item(scene, vocab, noise_std, rng, feature_dim))
        elif not is_val and len(train) < n_train:
            train.append(make_item(scene, vocab, noise_std, rng, feature_dim))
    meta = {"seed": seed}
    return (Dataset(train, vocab, feature_dim, noise_std, dict(meta, split="train")),
            Dataset(val, vocab, feature_dim, noise_std, dict(meta, split="val")))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class FeatureBatch:
    region: np.ndarray       # [B, N_r, D_f]
    region_mask: np.ndarray  # [B, N_r] valid rows
    seg: np.ndarray          # [B, N_s, D_f]
    seg_mask: np.ndarray     # [B, N_s]

    def __len__(self) -> int:
        return self.region.shape[0]

    @classmethod
    def single(cls, region, seg) -> "FeatureBatch":
        region = np.asarray(region)[None]
        seg = np.asarray(seg)[None]
        return cls(region, np.ones(region.shape[:2], bool), seg, np.ones(seg.shape[:2], bool))

    def take(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.region[idx], self.region_mask[idx], self.seg[idx], self.seg_mask[idx])


def _pad_rows(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(a.shape[0] for a in arrays)
    d = arrays[0].shape[1]
    out = np.zeros((len(arrays), n, d), dtype=arrays[0].dtype)
    mask = np.zeros((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = True
    return out, mask


def collate_features(items: list[Item]) -> FeatureBatch:
    region, rmask = _pad_rows([it.features.region for it in items])
    seg, smask = _pad_rows([it.features.segmentation for it in items])
    return FeatureBatch(region, rmask, seg, smask)


@dataclass
class CaptionBatch:
    """Token matrix laid out ``[seq, B]``, right-padded with PAD."""

    ids: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[list[int]]) -> "CaptionBatch":
        if not seqs:
            raise ContractError("empty caption batch")
        for s in seqs:
            if not s or s[0] != BOS or s.count(EOS) != 1 or s[-1] != EOS:
                raise ContractError("each caption must start with BOS and end with its single EOS")
        seq = max(len(s) for s in seqs)
        ids = np.full((seq, len(seqs)), PAD, dtype=np.int64)
        for b, s in enumerate(seqs):
            ids[:len(s), b] = s
        return cls(ids, ids != PAD)

    @property
    def batch_major(self) -> np.ndarray:
        return np.ascontiguousarray(self.ids.T)

    def __len__(self) -> int:
        return self.ids.shape[1]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _write_floats(buf, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    vocab_blob = "\n".join(ds.vocab.tokens).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIId", FORMAT_VERSION, len(ds.items), ds.feature_dim, len(ds.vocab), ds.noise_std))
    buf.write(struct.pack("<I", len(vocab_blob)))
    buf.write(vocab_blob)
    for it in ds.items:
        buf.write(struct.pack("<B", len(it.scene.objects)))
        for o in it.scene.objects:
            buf.write(struct.pack("<BBB", o.category, o.attribute, o.cell))
        r, s = it.features.region, it.features.segmentation
        buf.write(struct.pack("<HH", r.shape[0], s.shape[0]))
        _write_floats(buf, r)
        _write_floats(buf, s)
        buf.write(struct.pack("<B", len(it.refs)))
        for ref in it.refs:
            buf.write(struct.pack("<H", len(ref)))
            buf.write(np.asarray(ref, dtype="<u2").tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    return Vocab(Path(path).read_text(encoding="utf-8").splitlines())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContractError("dataset file is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise ContractError(f"{path} is not a dataset file")
    version, n_items, feature_dim, vocab_size, noise_std = r.unpack("<IIIId")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported dataset version {version}")
    (vlen,) = r.unpack("<I")
    vocab = Vocab(r.take(vlen).decode("utf-8").split("\n"))
    if len(vocab) != vocab_size:
        raise ContractError("vocabulary size in header does not match the token list")
    items = []
    for _ in range(n_items):
        (n_obj,) = r.unpack("<B")
        objs = tuple(SceneObject(*r.unpack("<BBB")) for _ in range(n_obj))
        n_r, n_s = r.unpack("<HH")
        region = np.frombuffer(r.take(4 * n_r * feature_dim), dtype="<f4").reshape(n_r, feature_dim)
        seg = np.frombuffer(r.take(4 * n_s * feature_dim), dtype="<f4").reshape(n_s, feature_dim)
        (n_refs,) = r.unpack("<B")
        refs = []
        for _ in range(n_refs):
            (length,) = r.unpack("<H")
            refs.append(np.frombuffer(r.take(2 * length), dtype="<u2").astype(int).tolist())
        items.append(Item(Scene(objs), FeaturePair(region.astype(np.float32), seg.astype(np.float32)), refs))
    if r.pos != len(r.blob):
        raise ContractError("trailing bytes after the last dataset record")
    return Dataset(items, vocab, feature_dim, noise_std)
