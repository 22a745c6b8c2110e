"""Datasets, embedding tables, file formats, and the synthetic generator.

File formats owned by this module:

Embedding file (``.emb``)
    ``magic "SDE1"`` | ``u32-LE count`` | ``u32-LE dim`` |
    ``count * dim`` float32-LE values, row-major |
    ``u64-LE`` FNV-1a checksum over the payload (everything between the
    magic and the checksum, i.e. the two header words plus the rows).

Pairs manifest (``.jsonl``)
    One JSON object per line:
    ``{"image_id": str, "caption_ids": [str, ...]}``.

Vocabulary file (``.txt``)
    UTF-8, one token per line; the line number is the term index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DuplicateError,
    FormatError,
    MissingIdError,
    TruncationError,
)
from .rng import SplitMix64, derive_seed

EMBEDDING_MAGIC = b"SDE1"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used as the trailing checksum in binary files."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    """Fixed set of float32 embedding rows addressed by string id."""

    ids: list[str]
    rows: np.ndarray  # (count, dim) float32

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        if len(self.ids) != self.rows.shape[0]:
            raise ValueError("ids and rows disagree on count")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateError("embedding ids must be unique")
        if self.rows.shape[0] < 1 or self.rows.shape[1] < 1:
            raise ValueError("table must be non-empty")
        self._index = {id_: i for i, id_ in enumerate(self.ids)}

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def position(self, id_: str) -> int:
        try:
            return self._index[id_]
        except KeyError:
            raise MissingIdError(f"unknown id {id_!r}") from None

    def row(self, id_: str) -> np.ndarray:
        return self.rows[self.position(id_)]

    def gather(self, ids: list[str]) -> np.ndarray:
        """Rows for the given ids as a float64 matrix (training precision)."""
        positions = [self.position(i) for i in ids]
        return self.rows[positions].astype(np.float64)


def save_embeddings(table: EmbeddingTable, path: str | Path,
                    ids_path: str | Path | None = None) -> None:
    """Write a table in the SDE1 layout; ids go to a `.ids` sidecar.

    The binary format stores rows only; the row order is the id order.
    The sidecar (defaulting to ``<path>.ids``) holds one id per line.
    """
    path = Path(path)
    rows = np.ascontiguousarray(table.rows, dtype="<f4")
    payload = struct.pack("<II", table.count, table.dim) + rows.tobytes()
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))
    ids_path = Path(ids_path) if ids_path is not None else path.with_suffix(path.suffix + ".ids")
    ids_path.write_text("".join(f"{i}\n" for i in table.ids), encoding="utf-8")


def load_embeddings(path: str | Path, ids_path: str | Path | None = None) -> EmbeddingTable:
    """Read an SDE1 file back into a table; inverse of :func:`save_embeddings`."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(blob) < 12:
        raise TruncationError(f"{path}: header truncated")
    count, dim = struct.unpack_from("<II", blob, 4)
    if count == 0 or dim == 0:
        raise FormatError(f"{path}: count and dim must be positive")
    body_end = 12 + count * dim * 4
    if len(blob) < body_end + 8:
        raise TruncationError(f"{path}: payload truncated")
    payload = blob[4:body_end]
    (stored,) = struct.unpack_from("<Q", blob, body_end)
    if stored != fnv1a64(payload):
        raise FormatError(f"{path}: checksum mismatch")
    rows = np.frombuffer(blob[12:body_end], dtype="<f4").reshape(count, dim).copy()
    ids_path = Path(ids_path) if ids_path is not None else path.with_suffix(path.suffix + ".ids")
    if ids_path.exists():
        ids = ids_path.read_text(encoding="utf-8").splitlines()
        if len(ids) != count:
            raise FormatError(f"{ids_path}: id count does not match table")
    else:
        ids = [str(i) for i in range(count)]
    return EmbeddingTable(ids=ids, rows=rows)


# ---------------------------------------------------------------------------
# Paired datasets
# ---------------------------------------------------------------------------

@dataclass
class PairedDataset:
    """Images with their associated captions, in manifest order."""

    pairs: list[tuple[str, list[str]]]
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"bad split tag {self.split_tag!r}")
        seen_images: set[str] = set()
        seen_captions: set[str] = set()
        for image_id, caption_ids in self.pairs:
            if image_id in seen_images:
                raise DuplicateError(f"image {image_id!r} listed twice")
            seen_images.add(image_id)
            if not caption_ids:
                raise ValueError(f"image {image_id!r} has no captions")
            for cid in caption_ids:
                if cid in seen_captions:
                    raise DuplicateError(f"caption {cid!r} belongs to two images")
                seen_captions.add(cid)

    @property
    def image_ids(self) -> list[str]:
        return [img for img, _ in self.pairs]

    @property
    def caption_ids(self) -> list[str]:
        return [cid for _, cids in self.pairs for cid in cids]

    def gold_image(self) -> dict[str, str]:
        """caption id -> its image id."""
        return {cid: img for img, cids in self.pairs for cid in cids}

    def __len__(self) -> int:
        return len(self.pairs)


def load_pairs(path: str | Path, split_tag: str = "train",
               image_ids: set[str] | None = None,
               caption_ids: set[str] | None = None) -> PairedDataset:
    """Read a pairs manifest, optionally validating ids against tables.

    Raises DuplicateError when a caption appears under two images and
    MissingIdError when an id is absent from the supplied id sets.
    """
    pairs: list[tuple[str, list[str]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if set(record) != {"image_id", "caption_ids"}:
                raise FormatError(f"{path}:{lineno}: expected image_id and caption_ids")
            pairs.append((record["image_id"], list(record["caption_ids"])))
    dataset = PairedDataset(pairs=pairs, split_tag=split_tag)
    if image_ids is not None:
        for img in dataset.image_ids:
            if img not in image_ids:
                raise MissingIdError(f"image {img!r} not in embedding table")
    if caption_ids is not None:
        for cid in dataset.caption_ids:
            if cid not in caption_ids:
                raise MissingIdError(f"caption {cid!r} not in embedding table")
    return dataset


def save_pairs(dataset: PairedDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, caption_ids in dataset.pairs:
            fh.write(json.dumps({"image_id": image_id, "caption_ids": caption_ids}))
            fh.write("\n")


def split_dataset(dataset: PairedDataset, fractions: tuple[float, float, float],
                  seed: int) -> tuple[PairedDataset, PairedDataset, PairedDataset]:
    """Deterministically partition images into train/val/test.

    The image list is shuffled with the documented stream and cut at the
    fraction boundaries, so the three splits are disjoint and cover the
    input for any seed.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    order = list(range(len(dataset.pairs)))
    SplitMix64(derive_seed(seed, 0x5B17)).shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    cuts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    tags = ("train", "val", "test")
    return tuple(
        PairedDataset(pairs=[dataset.pairs[i] for i in sorted(part)], split_tag=tag)
        for part, tag in zip(cuts, tags)
    )


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise DuplicateError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise MissingIdError(f"unknown token {token!r}") from None


def load_vocabulary(path: str | Path) -> Vocabulary:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocabulary(tokens=tokens)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in vocab.tokens), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters for the planted-cluster generator."""

    n_images: int
    captions_per_image: int
    dim: int
    vocab_size: int
    n_clusters: int
    noise_std: float
    seed: int

    def __post_init__(self):
        if self.n_images < 1 or self.captions_per_image < 1:
            raise ConfigError("need at least one image and one caption per image")
        if self.dim < 1 or self.vocab_size < 1:
            raise ConfigError("dim and vocab_size must be positive")
        if self.n_clusters < 1 or self.n_clusters > self.n_images:
            raise ConfigError("n_clusters must be in [1, n_images]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingTable, EmbeddingTable, PairedDataset]:
    """Generate planted-cluster image/caption embeddings.

    Cluster centers are unit-norm random directions; image p sits on
    center ``p mod n_clusters`` plus isotropic noise, and each of its
    captions is an independent noisy copy of the same center.  With
    noise_std = 0 every caption equals its image exactly, so retrieval
    on the output is solvable by construction.
    """
    stream = SplitMix64(derive_seed(spec.seed, 0x5D47A))
    d = spec.dim

    centers = np.empty((spec.n_clusters, d))
    for c in range(spec.n_clusters):
        vec = np.array(stream.normals(d))
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:  # pragma: no cover - probability zero
            vec[0] = 1.0
            norm = 1.0
        centers[c] = vec / norm

    image_ids = [f"img{p:05d}" for p in range(spec.n_images)]
    image_rows = np.empty((spec.n_images, d))
    for p in range(spec.n_images):
        noise = np.array(stream.normals(d))
        image_rows[p] = centers[p % spec.n_clusters] + spec.noise_std * noise

    caption_ids: list[str] = []
    caption_rows = np.empty((spec.n_images * spec.captions_per_image, d))
    pairs: list[tuple[str, list[str]]] = []
    row = 0
    for p in range(spec.n_images):
        cids = []
        for q in range(spec.captions_per_image):
            cid = f"img{p:05d}_c{q}"
            cids.append(cid)
            caption_ids.append(cid)
            if spec.noise_std == 0.0:
                caption_rows[row] = image_rows[p]
            else:
                noise = np.array(stream.normals(d))
                caption_rows[row] = centers[p % spec.n_clusters] + spec.noise_std * noise
            row += 1
        pairs.append((image_ids[p], cids))

    images = EmbeddingTable(ids=image_ids, rows=image_rows.astype(np.float32))
    captions = EmbeddingTable(ids=caption_ids, rows=caption_rows.astype(np.float32))
    return images, captions, PairedDataset(pairs=pairs, split_tag="train")


def synthetic_vocabulary(size: int) -> Vocabulary:
    return Vocabulary(tokens=[f"term{j:04d}" for j in range(size)])
