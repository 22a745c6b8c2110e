"""Exact sparse retrieval over an inverted index, plus efficiency metrics.

The index maps each vocabulary term to a postings list of
(document position, weight); documents are numbered by ascending id so
that position order is id order, which fixes tie-breaking everywhere.
Search is term-at-a-time into a dense accumulator, which is exact; only
documents sharing at least one term with the query are returned.

Persistence formats (little-endian):

Index file
    ``magic "SDIX"`` | ``u32 vocab_size`` | ``u32 doc_count`` |
    ``u32 n_terms`` | per term: ``u32 term``, ``u32 length``, then
    ``length`` pairs of (``u32 doc position``, ``f32 weight``) |
    per document: ``u16 id length``, id UTF-8 |
    ``u64`` FNV-1a checksum over everything after the magic.

Mask file
    ``u32 length`` | ``ceil(length / 8)`` bytes, bit ``j`` stored in
    byte ``j // 8`` at position ``j % 8`` (least significant first) |
    ``u64`` FNV-1a checksum over the preceding bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingTable, fnv1a64
from .errors import ConfigError, DuplicateError, FormatError, ShapeError, TruncationError
from .model import SparseVector

INDEX_MAGIC = b"SDIX"


# ---------------------------------------------------------------------------
# Vocabulary masks
# ---------------------------------------------------------------------------

@dataclass
class VocabMask:
    """Bitset of admitted terms with the document frequencies behind it."""

    allowed: np.ndarray  # bool, (|V|,)
    doc_freq: np.ndarray | None = None  # int64, (|V|,)

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 1:
            raise ShapeError("mask must be 1-D")

    @property
    def size(self) -> int:
        return int(self.allowed.shape[0])

    @property
    def n_allowed(self) -> int:
        return int(self.allowed.sum())


def build_vocab_mask(term_sets: list[set[int]], vocab_size: int,
                     min_doc_freq: int) -> VocabMask:
    """Admit a term iff it occurs in at least ``min_doc_freq`` documents.

    ``term_sets`` are the term-index supports of a document sample
    (typically the encoded training captions); terms that rarely fire
    there are treated as spurious expansions and masked out of the
    image-side vectors at index time.
    """
    if min_doc_freq < 1:
        raise ConfigError("min_doc_freq must be >= 1")
    if not term_sets:
        raise ConfigError("need a nonempty document sample")
    freq = np.zeros(vocab_size, dtype=np.int64)
    for terms in term_sets:
        for j in terms:
            if j < 0 or j >= vocab_size:
                raise ShapeError(f"term index {j} out of range")
            freq[j] += 1
    return VocabMask(allowed=freq >= min_doc_freq, doc_freq=freq)


def apply_mask(vector: SparseVector, mask: VocabMask) -> SparseVector:
    if vector.dim != mask.size:
        raise ShapeError("mask size does not match vector dimension")
    keep = mask.allowed[vector.indices]
    return SparseVector(indices=vector.indices[keep],
                        weights=vector.weights[keep], dim=vector.dim)


def mask_matrix(z_matrix: np.ndarray, mask: VocabMask) -> np.ndarray:
    if z_matrix.shape[1] != mask.size:
        raise ShapeError("mask size does not match matrix width")
    return z_matrix * mask.allowed


def save_mask(mask: VocabMask, path: str | Path) -> None:
    bits = np.packbits(mask.allowed, bitorder="little").tobytes()
    payload = struct.pack("<I", mask.size) + bits
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))


def load_mask(path: str | Path) -> VocabMask:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncationError(f"{path}: truncated")
    payload, stored = blob[:-8], struct.unpack_from("<Q", blob, len(blob) - 8)[0]
    if stored != fnv1a64(payload):
        raise FormatError(f"{path}: checksum mismatch")
    (size,) = struct.unpack_from("<I", payload, 0)
    n_bytes = (size + 7) // 8
    if len(payload) != 4 + n_bytes:
        raise TruncationError(f"{path}: bitset truncated")
    bits = np.unpackbits(np.frombuffer(payload[4:], dtype=np.uint8),
                         bitorder="little")[:size]
    return VocabMask(allowed=bits.astype(bool))


# ---------------------------------------------------------------------------
# Inverted index
# ---------------------------------------------------------------------------

@dataclass
class InvertedIndex:
    vocab_size: int
    doc_ids: list[str]  # ascending
    postings: dict[int, tuple[np.ndarray, np.ndarray]]  # term -> (positions, weights)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def densify(self, doc_id: str) -> SparseVector:
        """Reconstruct one document's vector from the postings."""
        position = self.doc_ids.index(doc_id)
        dense = np.zeros(self.vocab_size)
        for term, (positions, weights) in self.postings.items():
            hits = np.searchsorted(positions, position)
            if hits < positions.size and positions[hits] == position:
                dense[term] = weights[hits]
        return SparseVector.from_dense(dense)


def build_index(docs: list[tuple[str, SparseVector]],
                mask: VocabMask | None = None) -> InvertedIndex:
    """Build postings from (id, vector) pairs; masked terms are dropped."""
    if not docs:
        raise ConfigError("cannot index zero documents")
    ids = [doc_id for doc_id, _ in docs]
    if len(set(ids)) != len(ids):
        raise DuplicateError("document ids must be unique")
    vocab_size = docs[0][1].dim
    for _, vector in docs:
        if vector.dim != vocab_size:
            raise ShapeError("documents disagree on vocabulary size")
    if mask is not None and mask.size != vocab_size:
        raise ShapeError("mask size does not match vocabulary size")

    by_id = sorted(docs, key=lambda item: item[0])
    doc_ids = [doc_id for doc_id, _ in by_id]
    term_docs: dict[int, list[int]] = {}
    term_weights: dict[int, list[float]] = {}
    for position, (_, vector) in enumerate(by_id):
        for term, weight in zip(vector.indices, vector.weights):
            term = int(term)
            if mask is not None and not mask.allowed[term]:
                continue
            term_docs.setdefault(term, []).append(position)
            term_weights.setdefault(term, []).append(float(weight))
    postings = {
        term: (np.asarray(term_docs[term], dtype=np.int64),
               np.asarray(term_weights[term], dtype=np.float64))
        for term in sorted(term_docs)
    }
    return InvertedIndex(vocab_size=vocab_size, doc_ids=doc_ids, postings=postings)


def search(index: InvertedIndex, query: SparseVector, k: int) -> list[tuple[str, float]]:
    """Exact top-k documents by sparse dot product.

    Ties break by ascending document id.  Documents sharing no term
    with the query score zero and are never returned, so an empty query
    yields an empty result.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if query.dim != index.vocab_size:
        raise ShapeError("query dimension does not match index")
    scores = np.zeros(index.doc_count)
    touched = np.zeros(index.doc_count, dtype=bool)
    for term, weight in zip(query.indices, query.weights):
        entry = index.postings.get(int(term))
        if entry is None:
            continue
        positions, doc_weights = entry
        scores[positions] += weight * doc_weights
        touched[positions] = True
    candidates = np.nonzero(touched)[0]
    if candidates.size == 0:
        return []
    order = np.lexsort((candidates, -scores[candidates]))
    top = candidates[order[:k]]
    return [(index.doc_ids[int(p)], float(scores[p])) for p in top]


def dense_search(table: EmbeddingTable, query: np.ndarray, tau: float,
                 k: int) -> list[tuple[str, float]]:
    """Exhaustive top-k by temperature-scaled dot product, ties by id."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (table.dim,):
        raise ShapeError("query dimension does not match table")
    if k < 1:
        raise ConfigError("k must be >= 1")
    scores = table.rows.astype(np.float64) @ query / tau
    id_rank = np.argsort(np.argsort(np.asarray(table.ids, dtype=object), kind="stable"))
    order = np.lexsort((id_rank, -scores))
    return [(table.ids[int(p)], float(scores[p])) for p in order[:k]]


# ---------------------------------------------------------------------------
# Efficiency metric
# ---------------------------------------------------------------------------

@dataclass
class FlopsStats:
    """Expected multiplications per text-image sparse similarity."""

    p_text: np.ndarray
    p_image: np.ndarray
    flops: float


def _activation_probabilities(vectors: list[SparseVector], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for vector in vectors:
        counts[vector.indices] += 1.0
    return counts / len(vectors)


def flops_metric(text_vectors: list[SparseVector],
                 image_vectors: list[SparseVector]) -> FlopsStats:
    """Per-term activation rates and their overlap sum.

    flops = sum_j p_text[j] * p_image[j], the expected number of
    multiply operations for one similarity evaluation when texts and
    images are drawn from the supplied samples.
    """
    if not text_vectors or not image_vectors:
        raise ConfigError("need nonempty samples on both sides")
    vocab_size = text_vectors[0].dim
    for vector in list(text_vectors) + list(image_vectors):
        if vector.dim != vocab_size:
            raise ShapeError("samples disagree on vocabulary size")
    p_text = _activation_probabilities(text_vectors, vocab_size)
    p_image = _activation_probabilities(image_vectors, vocab_size)
    return FlopsStats(p_text=p_text, p_image=p_image,
                      flops=float(p_text @ p_image))


def flops_from_matrices(z_text: np.ndarray, z_image: np.ndarray) -> FlopsStats:
    """Matrix form of :func:`flops_metric` for dense activation batches."""
    p_text = (z_text > 0).mean(axis=0)
    p_image = (z_image > 0).mean(axis=0)
    return FlopsStats(p_text=p_text, p_image=p_image,
                      flops=float(p_text @ p_image))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_index(index: InvertedIndex, path: str | Path) -> None:
    chunks = [struct.pack("<III", index.vocab_size, index.doc_count,
                          len(index.postings))]
    for term in sorted(index.postings):
        positions, weights = index.postings[term]
        chunks.append(struct.pack("<II", term, positions.size))
        block = np.empty(positions.size, dtype=[("doc", "<u4"), ("w", "<f4")])
        block["doc"] = positions
        block["w"] = weights
        chunks.append(block.tobytes())
    for doc_id in index.doc_ids:
        encoded = doc_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))


def load_index(path: str | Path) -> InvertedIndex:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(blob) < 24:
        raise TruncationError(f"{path}: truncated")
    payload = blob[4:-8]
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if stored != fnv1a64(payload):
        raise FormatError(f"{path}: checksum mismatch")
    vocab_size, doc_count, n_terms = struct.unpack_from("<III", payload, 0)
    offset = 12
    postings: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(n_terms):
        term, length = struct.unpack_from("<II", payload, offset)
        offset += 8
        end = offset + 8 * length
        if end > len(payload):
            raise TruncationError(f"{path}: postings truncated")
        block = np.frombuffer(payload[offset:end],
                              dtype=[("doc", "<u4"), ("w", "<f4")])
        offset = end
        postings[term] = (block["doc"].astype(np.int64),
                          block["w"].astype(np.float64))
    doc_ids = []
    for _ in range(doc_count):
        (id_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        doc_ids.append(payload[offset:offset + id_len].decode("utf-8"))
        offset += id_len
    if offset != len(payload):
        raise FormatError(f"{path}: trailing bytes")
    return InvertedIndex(vocab_size=vocab_size, doc_ids=doc_ids, postings=postings)
