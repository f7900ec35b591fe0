"""Shared numeric primitives: dense model vectors, seeded substreams, bit ledger.

Model vectors are plain 1-D float64 numpy arrays throughout the package.
Every public operation that produces a vector is expected to leave it free
of NaN/Inf; `require_finite` is the single choke point that turns a
non-finite value into a diagnostic abort instead of silent propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 3)."""


class NonFiniteError(RuntimeError):
    """A NaN/Inf appeared. Carries enough context to report where."""

    def __init__(self, quantity, iteration=None, algorithm=None):
        self.quantity = quantity
        self.iteration = iteration
        self.algorithm = algorithm
        where = []
        if algorithm is not None:
            where.append(f"algorithm={algorithm}")
        if iteration is not None:
            where.append(f"iteration={iteration}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"non-finite value in {quantity}{suffix}")


class ConsistencyError(RuntimeError):
    """Replicated state diverged between endpoints; indicates a bug."""


def as_vector(values) -> np.ndarray:
    """Copy `values` into a fresh 1-D float64 array."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"model vector must be 1-D, got shape {v.shape}")
    return v


def check_same_length(x, y):
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return a*x + y elementwise."""
    check_same_length(x, y)
    return a * x + y


def require_finite(x, quantity, iteration=None, algorithm=None):
    """Raise NonFiniteError unless every entry of x is finite. Returns x."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(quantity, iteration=iteration, algorithm=algorithm)
    return x


# Lane purposes. Each (purpose, worker, iteration) triple is its own
# independent substream; nothing ever shares a draw sequence.
LANE_GRADIENT = 0   # mini-batch index sampling, per (worker, iteration)
LANE_COMPRESS_UP = 1    # rand-k draws for worker uplink messages
LANE_COMPRESS_DOWN = 2  # rand-k draws for the server broadcast
LANE_DATA = 3       # synthetic dataset generation
LANE_SHUFFLE = 4    # partition shuffle
LANE_MISC = 5

_LANE_LIMIT = 1 << 24


class RandomStream:
    """Deterministic substream factory on top of the Philox counter-based generator.

    Identical (seed, purpose, worker, iteration) always yields the identical
    draw sequence, independent of call order, scheduling, or platform;
    distinct lanes are independent because they use distinct Philox keys.
    """

    def __init__(self, seed: int):
        # reduce to the Philox key domain; negative seeds stay deterministic
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def lane(self, worker: int, iteration: int, purpose: int = LANE_GRADIENT) -> np.random.Generator:
        if not (0 <= worker < _LANE_LIMIT):
            raise ValueError(f"worker index out of lane range: {worker}")
        if not (0 <= iteration < _LANE_LIMIT):
            raise ValueError(f"iteration out of lane range: {iteration}")
        if not (0 <= purpose < 16):
            raise ValueError(f"unknown lane purpose: {purpose}")
        key = (purpose << 48) | (worker << 24) | iteration
        words = np.array([self.seed, key], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=words))


UP = "up"
DOWN = "down"


@dataclass
class BitLedger:
    """Exact count of transmitted bits per direction.

    Counts follow the convention of 32 bits per full-precision scalar and
    1 bit per sign, decoupled from the float64 in-memory representation.
    Both counters are monotone nondecreasing within a run.
    """

    uplink_bits: int = 0
    downlink_bits: int = 0

    def record(self, direction: str, bits: int) -> "BitLedger":
        if bits < 0:
            raise ValueError(f"bits must be >= 0, got {bits}")
        if direction == UP:
            self.uplink_bits += int(bits)
        elif direction == DOWN:
            self.downlink_bits += int(bits)
        else:
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        return self

    @property
    def total_bits(self) -> int:
        return self.uplink_bits + self.downlink_bits


def record_message(ledger: BitLedger, direction: str, bits: int) -> BitLedger:
    """Increment one of the ledger's counters by `bits`."""
    return ledger.record(direction, bits)
