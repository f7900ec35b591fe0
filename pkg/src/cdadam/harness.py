"""Experiment orchestration: config parsing, the run loop, metric capture,
step-size grid search, and CSV/JSON export.

Config files are flat `key = value` text (# starts a comment); CLI flags
override file values. Metrics always report the true full-dataset gradient
norm at the current iterate, recomputed exactly and excluded from the bit
ledger. Runs are deterministic: identical config and seed give identical
metric values (elapsed_ms, being wall-clock, is the one excluded column).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import (
    ALGORITHMS,
    ITERATION_FUNCS,
    IterationContext,
    IterationStats,
    init_states,
)
from .compress import KINDS, CompressorSpec
from .core import BitLedger, ConfigError, NonFiniteError, RandomStream, LANE_SHUFFLE
from .optim import AmsgradParams
from .problems import ProblemSpec, build_problem, evaluate, parse_libsvm, synthetic_problem

DEFAULT_ALPHA_GRID = (0.001, 0.003, 0.005, 0.007, 0.009, 0.01)

CSV_FIELDS = ("iter", "loss", "grad_norm", "bits_up", "bits_down",
              "measured_pi_mean", "variance_quadratic", "elapsed_ms")
CSV_HEADER = ",".join(CSV_FIELDS)


class DivergenceError(RuntimeError):
    """Every run in a grid diverged (CLI exit code 2)."""


@dataclass
class MetricRow:
    iter: int
    loss: float
    grad_norm: float
    bits_up: int
    bits_down: int
    measured_pi_mean: float
    variance_quadratic: float
    elapsed_ms: float

    def astuple(self):
        return (self.iter, self.loss, self.grad_norm, self.bits_up, self.bits_down,
                self.measured_pi_mean, self.variance_quadratic, self.elapsed_ms)


_INT_OR_NONE = ("k", "data_seed")


@dataclass
class RunConfig:
    """Fully resolved experiment description; see README for every key."""

    algorithm: str = "cdadam"
    compressor: str = "scaled_sign"
    k: Optional[int] = None
    n_workers: int = 20
    tau: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    nu: float = 1e-8
    lam: float = 0.1
    T: int = 2000
    seed: int = 0
    warmup_fraction: float = 0.13
    downlink_mode: str = "per_broadcast"
    dataset: str = "synthetic"
    n_samples: int = 1000
    dim: int = 50
    noise: float = 0.1
    data_seed: Optional[int] = None
    log_interval: int = 1
    output: Optional[str] = None

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.compressor not in KINDS:
            raise ConfigError(f"unknown compressor {self.compressor!r}, expected one of {KINDS}")
        try:
            self.compressor_spec()
            AmsgradParams(self.alpha, self.beta1, self.beta2, self.nu)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0 (0 = full batch)")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError("lambda must be finite and >= 0")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        if self.downlink_mode not in ("per_broadcast", "per_worker"):
            raise ConfigError("downlink_mode must be per_broadcast or per_worker")
        if not (0.0 <= self.warmup_fraction):
            raise ConfigError("warmup_fraction must be >= 0")
        if self.warmup_iters() > self.T:
            raise ConfigError(
                f"warm-up length {self.warmup_iters()} exceeds T={self.T}")
        if self.dataset == "synthetic":
            if self.n_samples < 1 or self.dim < 1:
                raise ConfigError("n_samples and dim must be >= 1")
            if not (0.0 <= self.noise <= 1.0):
                raise ConfigError("noise must be in [0, 1]")
        return self

    def compressor_spec(self) -> CompressorSpec:
        k = self.k if self.compressor in ("top_k", "rand_k") else None
        return CompressorSpec(self.compressor, k)

    def warmup_iters(self) -> int:
        if self.algorithm != "onebit_adam":
            return 0
        return math.ceil(self.warmup_fraction * self.T)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_mapping(cls, mapping) -> "RunConfig":
        """Build a config from string or typed values; unknown keys fail."""
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for raw_key, value in mapping.items():
            key = "lam" if raw_key == "lambda" else raw_key
            if key not in known:
                raise ConfigError(f"unknown config key {raw_key!r}")
            kwargs[key] = _coerce(key, value)
        return cls(**kwargs)


def _coerce(key, value):
    if value is None:
        return None
    if isinstance(value, str):
        text = value.strip()
        if key in _INT_OR_NONE and text.lower() in ("", "none"):
            return None
        if key == "output":
            return text or None
        if key in ("algorithm", "compressor", "downlink_mode", "dataset"):
            return text
        if key in ("k", "n_workers", "tau", "T", "seed", "data_seed",
                   "n_samples", "dim", "log_interval"):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {text!r}") from None
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {text!r}") from None
    return value


def parse_config_text(text: str) -> dict:
    """Flat `key = value` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    mapping = parse_config_text(Path(path).read_text())
    if overrides:
        mapping.update(overrides)
    return RunConfig.from_mapping(mapping)


def build_problem_from_config(config: RunConfig) -> ProblemSpec:
    data_seed = config.seed if config.data_seed is None else config.data_seed
    if config.dataset == "synthetic":
        return synthetic_problem(config.n_samples, config.dim, config.noise,
                                 config.lam, config.n_workers, data_seed)
    dataset = parse_libsvm(Path(config.dataset))
    shuffle = RandomStream(data_seed).lane(0, 0, LANE_SHUFFLE)
    return build_problem(dataset, config.lam, config.n_workers, shuffle)


@dataclass
class RunResult:
    rows: list
    final_x: np.ndarray
    config: RunConfig
    diverged: bool = False
    error: Optional[str] = None

    def min_grad_norm(self) -> float:
        return min(r.grad_norm for r in self.rows)

    def final_grad_norm(self) -> float:
        return self.rows[-1].grad_norm

    def measured_pi_range(self):
        """(min, max) of per-iteration mean measured pi, baseline row excluded."""
        vals = [r.measured_pi_mean for r in self.rows if r.iter > 0]
        if not vals:
            return None
        return (min(vals), max(vals))


def run_experiment(config: RunConfig, problem: Optional[ProblemSpec] = None) -> RunResult:
    """Execute one deterministic run and capture metrics.

    A t=0 baseline row is always emitted; afterwards one row per
    log_interval iterations (and always at t=T). A non-finite value aborts
    the run but preserves the metrics gathered so far (diverged=True).
    """
    config.validate()
    if problem is None:
        problem = build_problem_from_config(config)
    spec = config.compressor_spec()
    spec.check_dim(problem.dim)
    if config.tau > min(problem.partition.worker_size(i) for i in range(problem.n_workers)):
        raise ConfigError(f"tau={config.tau} exceeds the smallest worker partition")

    params = AmsgradParams(config.alpha, config.beta1, config.beta2, config.nu)
    ctx = IterationContext(
        algorithm=config.algorithm,
        spec=spec,
        params=params,
        tau=config.tau,
        stream=RandomStream(config.seed),
        downlink_per_worker=(config.downlink_mode == "per_worker"),
        warmup_iters=config.warmup_iters(),
        n_workers=config.n_workers,
    )
    step = ITERATION_FUNCS[config.algorithm]

    workers, server = init_states(problem, np.zeros(problem.dim))
    ledger = BitLedger()
    start = time.perf_counter()

    def snapshot(t, stats):
        loss_val, grad = evaluate(problem, workers[0].opt.x)
        elapsed = (time.perf_counter() - start) * 1000.0
        return MetricRow(t, loss_val, float(np.linalg.norm(grad)),
                         ledger.uplink_bits, ledger.downlink_bits,
                         stats.measured_pi_mean, stats.variance_quadratic, elapsed)

    rows = [snapshot(0, IterationStats())]
    diverged = False
    error = None
    for t in range(1, config.T + 1):
        logged = (t % config.log_interval == 0) or (t == config.T)
        ctx.collect_diagnostics = logged
        try:
            stats = step(workers, server, problem, ctx, t, ledger)
        except NonFiniteError as exc:
            diverged = True
            error = str(exc)
            break
        if logged:
            rows.append(snapshot(t, stats))
    return RunResult(rows, workers[0].opt.x.copy(), config, diverged, error)


@dataclass
class GridSearchResult:
    best_alpha: float
    best: RunResult
    results: list  # (alpha, RunResult) in grid order


def grid_search(config: RunConfig, alphas=None,
                problem: Optional[ProblemSpec] = None) -> GridSearchResult:
    """Run each step size, return the argmin of min-over-t gradient norm.

    Diverged runs are excluded; ties break toward the smaller alpha. Raises
    DivergenceError when every step size diverged.
    """
    if alphas is None:
        alphas = DEFAULT_ALPHA_GRID
    alphas = list(alphas)
    if not alphas:
        raise ConfigError("empty step-size grid")
    if problem is None:
        config.validate()
        problem = build_problem_from_config(config)
    results = []
    for alpha in alphas:
        results.append((alpha, run_experiment(replace(config, alpha=alpha), problem)))
    usable = [(res.min_grad_norm(), alpha, res) for alpha, res in results if not res.diverged]
    if not usable:
        raise DivergenceError(f"all {len(alphas)} step sizes diverged")
    _, best_alpha, best = min(usable, key=lambda item: (item[0], item[1]))
    return GridSearchResult(best_alpha, best, results)


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_csv(rows, target) -> None:
    """Write metric rows with the fixed header; `target` is a path or stream."""
    lines = [CSV_HEADER]
    lines.extend(",".join(_format_value(v) for v in row.astuple()) for row in rows)
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        Path(target).write_text(text)


def export_json(rows, config: RunConfig, target) -> None:
    """Write rows plus the fully resolved config for provenance."""
    payload = {
        "config": config.to_dict(),
        "rows": [dict(zip(CSV_FIELDS, row.astuple())) for row in rows],
    }
    text = json.dumps(payload, indent=2)
    if hasattr(target, "write"):
        target.write(text)
    else:
        Path(target).write_text(text)


def read_csv(source) -> list:
    """Read rows previously written by export_csv."""
    text = source.read() if hasattr(source, "read") else Path(source).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"expected header {CSV_HEADER!r}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(MetricRow(int(parts[0]), float(parts[1]), float(parts[2]),
                              int(parts[3]), int(parts[4]), float(parts[5]),
                              float(parts[6]), float(parts[7])))
    return rows


EXTRACT_X = ("iter", "bits_up", "bits_down", "bits_total")


def extract_xy(rows, x_field="bits_up", y_field="grad_norm"):
    """Two-column (x, y) extract for plotting; bits_total = bits_up + bits_down."""
    if x_field not in EXTRACT_X:
        raise ValueError(f"x must be one of {EXTRACT_X}")
    if y_field not in CSV_FIELDS:
        raise ValueError(f"y must be one of {CSV_FIELDS}")
    pairs = []
    for row in rows:
        x = row.bits_up + row.bits_down if x_field == "bits_total" else getattr(row, x_field)
        pairs.append((x, getattr(row, y_field)))
    return pairs
