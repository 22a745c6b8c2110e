"""Trainable adapters: per-modality final layers and the shared projection head.

The backbone encoders are frozen and enter only as precomputed
penultimate vectors.  Each modality gets a residual affine final layer
``h = p + W p + b`` that starts as the identity (W = 0, b = 0), so an
untrained model reproduces the frozen embeddings bit for bit.  A single
two-layer MLP head, shared by both modalities, maps h to vocabulary
logits; term importances are ``log(1 + relu(logits))``, stored sparse.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .data import fnv1a64
from .errors import FormatError, NumericError, ShapeError, TruncationError
from .rng import SplitMix64, derive_seed

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


# ---------------------------------------------------------------------------
# Sparse vectors
# ---------------------------------------------------------------------------

@dataclass
class SparseVector:
    """Non-negative term-importance vector, zeros omitted.

    Indices are strictly increasing and below ``dim``; stored weights
    are strictly positive.
    """

    indices: np.ndarray  # int64, sorted ascending
    weights: np.ndarray  # float64, > 0
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape or self.indices.ndim != 1:
            raise ShapeError("indices and weights must be matching 1-D arrays")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ValueError("index out of range")
            if np.any(self.weights <= 0):
                raise ValueError("stored weights must be strictly positive")

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        (nz,) = np.nonzero(dense)
        return cls(indices=nz.astype(np.int64), weights=dense[nz], dim=dense.shape[0])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.weights
        return out

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def l1(self) -> float:
        return float(self.weights.sum())


def sparse_activation(logits: np.ndarray) -> SparseVector:
    """Map vocabulary logits to term importances log(1 + relu(logits))."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("logits must be 1-D")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return SparseVector.from_dense(np.log1p(np.maximum(logits, 0.0)))


def activation_matrix(logits: np.ndarray) -> np.ndarray:
    """Dense batch form of :func:`sparse_activation` (training path)."""
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return np.log1p(np.maximum(logits, 0.0))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class FinalLayerParams:
    """Residual affine map for one modality: h = p + weight @ p + bias."""

    weight: np.ndarray  # (d, d)
    bias: np.ndarray    # (d,)

    @classmethod
    def identity(cls, dim: int) -> "FinalLayerParams":
        return cls(weight=np.zeros((dim, dim)), bias=np.zeros(dim))

    def copy(self) -> "FinalLayerParams":
        return FinalLayerParams(weight=self.weight.copy(), bias=self.bias.copy())


@dataclass
class ProjectionHead:
    """Two-layer MLP d -> d (GELU) -> |V| shared by both modalities."""

    hidden_weight: np.ndarray  # (d, d)
    hidden_bias: np.ndarray    # (d,)
    output_weight: np.ndarray  # (|V|, d)
    output_bias: np.ndarray    # (|V|,)

    @property
    def vocab_size(self) -> int:
        return self.output_weight.shape[0]

    @property
    def dim(self) -> int:
        return self.output_weight.shape[1]

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(
            hidden_weight=self.hidden_weight.copy(),
            hidden_bias=self.hidden_bias.copy(),
            output_weight=self.output_weight.copy(),
            output_bias=self.output_bias.copy(),
        )


@dataclass
class ParamSet:
    """Every trainable tensor, enumerable by name for checking and updates."""

    text_final: FinalLayerParams
    image_final: FinalLayerParams
    head: ProjectionHead
    log_tau: np.ndarray  # shape-() float64

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("text_final.weight", self.text_final.weight),
            ("text_final.bias", self.text_final.bias),
            ("image_final.weight", self.image_final.weight),
            ("image_final.bias", self.image_final.bias),
            ("head.hidden_weight", self.head.hidden_weight),
            ("head.hidden_bias", self.head.hidden_bias),
            ("head.output_weight", self.head.output_weight),
            ("head.output_bias", self.head.output_bias),
            ("log_tau", self.log_tau),
        ]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def copy(self) -> "ParamSet":
        return ParamSet(
            text_final=self.text_final.copy(),
            image_final=self.image_final.copy(),
            head=self.head.copy(),
            log_tau=self.log_tau.copy(),
        )


def init_projection_head(word_embeddings: np.ndarray, seed: int,
                         hidden_noise: float = 0.01) -> ProjectionHead:
    """Seed the head from a |V| x d word-embedding matrix.

    The output layer starts as that matrix exactly (bias zero), so the
    initial logits are word-embedding dot products; the hidden layer is
    the identity plus small seeded noise to break symmetry.
    """
    word_embeddings = np.asarray(word_embeddings, dtype=np.float64)
    if word_embeddings.ndim != 2:
        raise ShapeError("word embeddings must be |V| x d")
    d = word_embeddings.shape[1]
    hidden = np.eye(d)
    if hidden_noise != 0.0:
        stream = SplitMix64(derive_seed(seed, 0x4EAD))
        noise = np.array(stream.normals(d * d)).reshape(d, d)
        hidden = hidden + hidden_noise * noise
    return ProjectionHead(
        hidden_weight=hidden,
        hidden_bias=np.zeros(d),
        output_weight=word_embeddings.copy(),
        output_bias=np.zeros(word_embeddings.shape[0]),
    )


def random_word_embeddings(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    """Gaussian stand-in for a word-embedding matrix, scaled 1/sqrt(d)."""
    stream = SplitMix64(derive_seed(seed, 0x30CAB))
    flat = np.array(stream.normals(vocab_size * dim))
    return flat.reshape(vocab_size, dim) / math.sqrt(dim)


def init_params(dim: int, vocab_size: int, seed: int,
                word_embeddings: np.ndarray | None = None,
                hidden_noise: float = 0.01,
                initial_tau: float = 0.07) -> ParamSet:
    """Fresh parameter set: identity final layers, seeded head, tau."""
    if word_embeddings is None:
        word_embeddings = random_word_embeddings(vocab_size, dim, seed)
    if word_embeddings.shape != (vocab_size, dim):
        raise ShapeError("word embeddings must be |V| x d")
    return ParamSet(
        text_final=FinalLayerParams.identity(dim),
        image_final=FinalLayerParams.identity(dim),
        head=init_projection_head(word_embeddings, seed, hidden_noise),
        log_tau=np.array(math.log(initial_tau)),
    )


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def final_layer_forward(penultimate: np.ndarray, params: FinalLayerParams) -> np.ndarray:
    """h = p + W p + b for a single vector."""
    p = np.asarray(penultimate, dtype=np.float64)
    if p.shape != (params.weight.shape[1],):
        raise ShapeError("penultimate vector does not match layer dim")
    return p + params.weight @ p + params.bias


def final_layer_batch(penultimate: np.ndarray, params: FinalLayerParams) -> np.ndarray:
    """Row-wise final layer: H = P + P W^T + b."""
    if penultimate.shape[1] != params.weight.shape[1]:
        raise ShapeError("penultimate matrix does not match layer dim")
    return penultimate + penultimate @ params.weight.T + params.bias


def head_logits(h: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """Vocabulary logits for a batch of dense embeddings (rows)."""
    hidden = gelu(h @ head.hidden_weight.T + head.hidden_bias)
    return hidden @ head.output_weight.T + head.output_bias


def encode(penultimate: np.ndarray, side: str, params: ParamSet) -> tuple[np.ndarray, SparseVector]:
    """Dense embedding and sparse term importances for one input vector."""
    if side == "text":
        layer = params.text_final
    elif side == "image":
        layer = params.image_final
    else:
        raise ValueError(f"side must be 'text' or 'image', got {side!r}")
    h = final_layer_forward(penultimate, layer)
    z = sparse_activation(head_logits(h[None, :], params.head)[0])
    return h, z


def encode_batch(penultimate: np.ndarray, side: str, params: ParamSet) -> tuple[np.ndarray, np.ndarray]:
    """Batch encode: (H, Z) as dense float64 matrices."""
    layer = params.text_final if side == "text" else params.image_final
    if side not in ("text", "image"):
        raise ValueError(f"side must be 'text' or 'image', got {side!r}")
    h = final_layer_batch(np.asarray(penultimate, dtype=np.float64), layer)
    z = activation_matrix(head_logits(h, params.head))
    return h, z


def sparse_rows(z_matrix: np.ndarray) -> list[SparseVector]:
    return [SparseVector.from_dense(row) for row in z_matrix]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic "SDCK" | u32 version | u64 step | u64 config_hash | u32 n_tensors |
#   per tensor: u16 name length | name UTF-8 | u8 ndim | u32 dims... |
#               float32 data, row-major |
#   u64 FNV-1a checksum over everything after the magic.

def save_checkpoint(path: str | Path, params: ParamSet, step: int,
                    config_hash: int = 0) -> None:
    chunks = [struct.pack("<IQQ", CHECKPOINT_VERSION, step, config_hash)]
    tensors = params.named_tensors()
    chunks.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.ndim))
        for size in tensor.shape:
            chunks.append(struct.pack("<I", size))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, int, int]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(blob) < 4 + 20 + 4 + 8:
        raise TruncationError(f"{path}: truncated")
    payload = blob[4:-8]
    (stored,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if stored != fnv1a64(payload):
        raise FormatError(f"{path}: checksum mismatch")
    offset = 0
    version, step, config_hash = struct.unpack_from("<IQQ", payload, offset)
    offset += 20
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (n_tensors,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = []
        for _ in range(ndim):
            (size,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            shape.append(size)
        n_values = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n_values
        if end > len(payload):
            raise TruncationError(f"{path}: tensor {name} truncated")
        data = np.frombuffer(payload[offset:end], dtype="<f4").astype(np.float64)
        offset = end
        tensors[name] = data.reshape(shape) if shape else data.reshape(())

    expected = {
        "text_final.weight", "text_final.bias", "image_final.weight",
        "image_final.bias", "head.hidden_weight", "head.hidden_bias",
        "head.output_weight", "head.output_bias", "log_tau",
    }
    if set(tensors) != expected:
        raise FormatError(f"{path}: unexpected tensor set")
    params = ParamSet(
        text_final=FinalLayerParams(weight=tensors["text_final.weight"],
                                    bias=tensors["text_final.bias"]),
        image_final=FinalLayerParams(weight=tensors["image_final.weight"],
                                     bias=tensors["image_final.bias"]),
        head=ProjectionHead(hidden_weight=tensors["head.hidden_weight"],
                            hidden_bias=tensors["head.hidden_bias"],
                            output_weight=tensors["head.output_weight"],
                            output_bias=tensors["head.output_bias"]),
        log_tau=tensors["log_tau"],
    )
    return params, step, config_hash
