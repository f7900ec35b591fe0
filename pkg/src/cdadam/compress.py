"""Contractive compressors with exact bit-sized wire payloads.

Four codecs are shipped: scaled sign, top-k, rand-k, and identity. Each is a
biased contractive operator: the relative squared error ||C(x)-x||^2/||x||^2
never exceeds its contraction factor pi (1 - k/d for the sparsifiers, the
per-vector factor 1 - ||x||_1^2 / (d ||x||_2^2) for scaled sign, 0 for
identity). The codec IS the compressor: decoding a message reproduces C(x)
exactly, with no further loss.

Accounting sizes (``bit_size``) price a full-precision scalar at 32 bits and
a sign at 1 bit:

    scaled_sign   32 + d
    top_k/rand_k  k * (32 + ceil(log2 d))
    identity      32 * d

The byte serialization (`to_bytes`/`from_bytes`) is a separate, lossless
trace format: float64 scales/values, little-endian, byte-aligned. Its length
is unrelated to ``bit_size``.

`MarkovState` holds the running reference of a Markov compression sequence
ref <- ref + C(input - ref); only the compressed increment crosses the wire
and both endpoints fold it into their local reference identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import check_same_length

KINDS = ("scaled_sign", "top_k", "rand_k", "identity")
_KIND_TAGS = {kind: i for i, kind in enumerate(KINDS)}

SCALAR_BITS = 32


def index_bits(d: int) -> int:
    """Bits to address one of d coordinates: ceil(log2 d), 0 when d == 1."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return (d - 1).bit_length()


@dataclass(frozen=True)
class CompressorSpec:
    """Which compressor to use, plus k for the sparsifying kinds."""

    kind: str
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}, expected one of {KINDS}")
        if self.kind in ("top_k", "rand_k"):
            if self.k is None or self.k < 1:
                raise ValueError(f"{self.kind} requires k >= 1, got {self.k}")
        elif self.k is not None:
            raise ValueError(f"{self.kind} takes no k")

    def check_dim(self, d: int):
        if self.k is not None and self.k > d:
            raise ValueError(f"k={self.k} exceeds dimension d={d}")

    def analytical_pi(self, d: int) -> float:
        """Worst-case contraction factor for dimension d.

        Sparsifiers: 1 - k/d (exact for top-k, in expectation for rand-k).
        Scaled sign: sup over x of the per-vector factor, reached by 1-sparse
        vectors, giving 1 - 1/d. Identity: 0.
        """
        self.check_dim(d)
        if self.kind == "identity":
            return 0.0
        if self.kind == "scaled_sign":
            return 1.0 - 1.0 / d
        return 1.0 - self.k / d

    def message_bits(self, d: int) -> int:
        """Accounting size in bits of one compressed message of dimension d."""
        self.check_dim(d)
        if self.kind == "identity":
            return SCALAR_BITS * d
        if self.kind == "scaled_sign":
            return SCALAR_BITS + d
        return self.k * (SCALAR_BITS + index_bits(d))


@dataclass
class CompressedMessage:
    """Wire payload of one compressed vector.

    Exactly one payload group is populated, by kind:
      scaled_sign: scale (||x||_1 / d) and signs (int8 array of +-1)
      top_k/rand_k: indices (sorted int64) and values
      identity: dense (the vector itself)
    """

    kind: str
    d: int
    bit_size: int
    scale: float = 0.0
    signs: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None

    def decode(self) -> np.ndarray:
        """Reconstruct C(x) exactly."""
        if self.kind == "scaled_sign":
            return self.scale * self.signs.astype(np.float64)
        if self.kind == "identity":
            return self.dense.copy()
        out = np.zeros(self.d)
        out[self.indices] = self.values
        return out

    def to_bytes(self) -> bytes:
        """Lossless little-endian trace encoding.

        Layout: kind tag (1 byte), d (uint32); then per kind:
          scaled_sign: scale (float64), sign bitmap (ceil(d/8) bytes,
                       bit i of byte i//8 set when sign(x_i) = +1)
          top_k/rand_k: k (uint32), k uint32 indices, k float64 values
          identity: d float64 values
        """
        head = struct.pack("<BI", _KIND_TAGS[self.kind], self.d)
        if self.kind == "scaled_sign":
            bits = (self.signs > 0).astype(np.uint8)
            bitmap = np.packbits(bits, bitorder="little").tobytes()
            return head + struct.pack("<d", self.scale) + bitmap
        if self.kind == "identity":
            return head + self.dense.astype("<f8").tobytes()
        k = len(self.indices)
        return (head + struct.pack("<I", k)
                + self.indices.astype("<u4").tobytes()
                + self.values.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedMessage":
        tag, d = struct.unpack_from("<BI", blob, 0)
        kind = KINDS[tag]
        off = 5
        if kind == "scaled_sign":
            (scale,) = struct.unpack_from("<d", blob, off)
            raw = np.frombuffer(blob, dtype=np.uint8, offset=off + 8)
            bits = np.unpackbits(raw, bitorder="little")[:d]
            signs = np.where(bits == 1, 1, -1).astype(np.int8)
            return cls(kind, d, SCALAR_BITS + d, scale=scale, signs=signs)
        if kind == "identity":
            dense = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
            return cls(kind, d, SCALAR_BITS * d, dense=dense)
        (k,) = struct.unpack_from("<I", blob, off)
        off += 4
        idx = np.frombuffer(blob, dtype="<u4", count=k, offset=off).astype(np.int64)
        off += 4 * k
        vals = np.frombuffer(blob, dtype="<f8", count=k, offset=off).astype(np.float64)
        return cls(kind, d, k * (SCALAR_BITS + index_bits(d)), indices=idx, values=vals)


def _top_k_indices(x: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on -|x| keeps the lowest coordinate index on magnitude ties.
    order = np.argsort(-np.abs(x), kind="stable")
    return np.sort(order[:k])


def _rand_k_indices(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(d, size=k, replace=False))


def _sparse_message(spec: CompressorSpec, x: np.ndarray, idx: np.ndarray) -> CompressedMessage:
    return CompressedMessage(spec.kind, len(x), spec.message_bits(len(x)),
                             indices=idx, values=x[idx].copy())


def compress(spec: CompressorSpec, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> CompressedMessage:
    """Apply the compressor and return its exact wire message.

    `rng` is consulted only for rand_k. sign(0) is taken as +1 inside scaled
    sign; for x = 0 the scale is 0 so the decoded output is 0 regardless.
    """
    d = len(x)
    spec.check_dim(d)
    if spec.kind == "identity":
        return CompressedMessage("identity", d, spec.message_bits(d), dense=x.copy())
    if spec.kind == "scaled_sign":
        scale = np.abs(x).sum() / d
        signs = np.where(x < 0, -1, 1).astype(np.int8)
        return CompressedMessage("scaled_sign", d, spec.message_bits(d), scale=scale, signs=signs)
    if spec.kind == "top_k":
        return _sparse_message(spec, x, _top_k_indices(x, spec.k))
    if rng is None:
        raise ValueError("rand_k requires an rng")
    return _sparse_message(spec, x, _rand_k_indices(d, spec.k, rng))


def compression_error_sq(spec: CompressorSpec, x: np.ndarray,
                         rng: Optional[np.random.Generator] = None) -> float:
    """||decode(compress(x)) - x||_2^2 for the realized draw."""
    diff = compress(spec, x, rng).decode() - x
    return float(diff @ diff)


def measured_pi(spec: CompressorSpec, x: np.ndarray,
                rng: Optional[np.random.Generator] = None) -> float:
    """Realized relative squared error ||C(x)-x||^2 / ||x||^2; 0 for the zero vector."""
    norm_sq = float(x @ x)
    if norm_sq == 0.0:
        return 0.0
    return compression_error_sq(spec, x, rng) / norm_sq


class MarkovState:
    """Running reference of a Markov compression sequence (single-owner mutable)."""

    def __init__(self, reference: np.ndarray):
        self.reference = np.array(reference, dtype=np.float64)

    @classmethod
    def zeros(cls, d: int) -> "MarkovState":
        return cls(np.zeros(d))

    def apply(self, message: CompressedMessage):
        """Receiver side: fold one decoded increment into the reference."""
        self.reference += message.decode()


def markov_step(state: MarkovState, spec: CompressorSpec, x: np.ndarray,
                rng: Optional[np.random.Generator] = None):
    """Sender side of one sequence step: ref <- ref + C(x - ref).

    Compresses the difference to the current reference, folds the decoded
    increment into `state` in place, and returns (message, decoded_increment).
    The message is the only data transmitted; the receiver reconstructs the
    identical reference via `MarkovState.apply`.
    """
    check_same_length(state.reference, x)
    message = compress(spec, x - state.reference, rng)
    increment = message.decode()
    state.reference += increment
    return message, increment
