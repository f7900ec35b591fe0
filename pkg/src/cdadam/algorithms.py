"""Distributed-training state machines over explicit message objects.

Each iteration is a (worker phase, server phase, worker phase) transition:
workers compute local stochastic gradients and send compressed messages
uplink, the server reduces them (in ascending worker index, so aggregation
is deterministic) and broadcasts one message downlink, and every worker
applies that broadcast and updates its own model replica. The server never
holds the model; worker-model equality is an asserted invariant instead of
a transmitted quantity.

Six algorithms share this skeleton:

  cdadam               two-way Markov-compressed AMSGrad
  uncompressed_amsgrad full-precision distributed AMSGrad
  naive_amsgrad        direct per-worker gradient compression, no memory
  ef_amsgrad           worker-side error feedback, full-precision broadcast
  ef21_sgd             two-way Markov compression driving (momentum) SGD
  onebit_adam          uncompressed warm-up, frozen variance, then
                       error-feedback-compressed momentum both ways
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .compress import SCALAR_BITS, CompressorSpec, MarkovState, compress
from .core import (
    DOWN,
    LANE_COMPRESS_DOWN,
    LANE_COMPRESS_UP,
    LANE_GRADIENT,
    UP,
    BitLedger,
    ConsistencyError,
    RandomStream,
    require_finite,
)
from .optim import AmsgradParams, AmsgradState, amsgrad_step, momentum_sgd_step, variance_instability
from .problems import ProblemSpec, local_gradient, sample_batch

ALGORITHMS = (
    "cdadam",
    "uncompressed_amsgrad",
    "naive_amsgrad",
    "ef_amsgrad",
    "ef21_sgd",
    "onebit_adam",
)

REPLICA_TOL = 1e-12


@dataclass
class WorkerState:
    """Everything worker i owns: its uplink Markov reference, its replica of
    the broadcast Markov reference, its model/moments, and the residuals the
    EF-style baselines need."""

    markov_up: MarkovState
    markov_down: MarkovState
    opt: AmsgradState
    ef_residual: np.ndarray
    momentum: np.ndarray
    frozen_v: Optional[np.ndarray] = None


@dataclass
class ServerState:
    """Aggregated uplink reference g_hat, the broadcast Markov reference, and
    the server-side EF residual used by onebit_adam."""

    g_hat: np.ndarray
    markov_down: MarkovState
    ef_residual: np.ndarray


@dataclass
class IterationContext:
    """Per-run knobs shared by every iteration function."""

    algorithm: str
    spec: CompressorSpec
    params: AmsgradParams
    tau: int
    stream: RandomStream
    downlink_per_worker: bool = False
    warmup_iters: int = 0
    n_workers: int = 1
    collect_diagnostics: bool = True


@dataclass
class IterationStats:
    """Diagnostics of one iteration (zeros when not collected/applicable)."""

    measured_pi_mean: float = 0.0
    variance_quadratic: float = 0.0
    variance_inner: float = 0.0


def init_states(problem: ProblemSpec, x0: np.ndarray):
    """Fresh worker and server states; all Markov references start at zero,
    which is exactly the compressed image of the zero initial gradients."""
    d = problem.dim
    workers = [
        WorkerState(
            markov_up=MarkovState.zeros(d),
            markov_down=MarkovState.zeros(d),
            opt=AmsgradState.fresh(x0),
            ef_residual=np.zeros(d),
            momentum=np.zeros(d),
        )
        for _ in range(problem.n_workers)
    ]
    server = ServerState(g_hat=np.zeros(d), markov_down=MarkovState.zeros(d),
                         ef_residual=np.zeros(d))
    return workers, server


def _local_gradients(workers, problem, ctx, t):
    gs = []
    for i, w in enumerate(workers):
        if ctx.tau == 0:
            batch = None
        else:
            batch = sample_batch(problem, i, ctx.tau, ctx.stream.lane(i, t, LANE_GRADIENT))
        g = local_gradient(problem, i, w.opt.x, batch)
        require_finite(g, "local gradient", iteration=t, algorithm=ctx.algorithm)
        gs.append(g)
    return gs


def _compress_tracked(spec, v, rng, pis):
    """compress() plus, when pis is a list, the realized relative error."""
    msg = compress(spec, v, rng)
    dec = msg.decode()
    if pis is not None:
        norm_sq = float(v @ v)
        if norm_sq == 0.0:
            pis.append(0.0)
        else:
            err = dec - v
            pis.append(float(err @ err) / norm_sq)
    return msg, dec


def _markov_send(state, spec, v_target, rng, pis):
    """Sender side of one Markov step; returns the message and its decoded
    increment, folding the increment into `state`."""
    diff = v_target - state.reference
    msg, dec = _compress_tracked(spec, diff, rng, pis)
    state.reference += dec
    return msg, dec


def _broadcast_bits(ledger, bits, ctx):
    ledger.record(DOWN, bits * (ctx.n_workers if ctx.downlink_per_worker else 1))


def _check_replicas(workers, server, t, algorithm):
    ref = server.markov_down.reference
    for i, w in enumerate(workers):
        gap = np.max(np.abs(w.markov_down.reference - ref)) if len(ref) else 0.0
        if gap > REPLICA_TOL:
            raise ConsistencyError(
                f"{algorithm}: worker {i} broadcast replica diverged by {gap:.3e} "
                f"at iteration {t}")


def _check_models(workers):
    x0 = workers[0].opt.x
    assert all(np.max(np.abs(w.opt.x - x0)) <= REPLICA_TOL for w in workers[1:])


def _diag_stats(pis, g_fresh_mean, g_used, beta2) -> IterationStats:
    quad, inner = variance_instability(g_fresh_mean, g_used, beta2)
    pi_mean = float(np.mean(pis)) if pis else 0.0
    return IterationStats(pi_mean, quad, inner)


def cdadam_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """One round of two-way Markov-compressed distributed AMSGrad.

    Worker i uploads c_i = C(g_i - ghat_i) and folds it into its reference;
    the server folds the average into g_hat, broadcasts c = C(g_hat - gtilde),
    and every worker reconstructs the same gtilde and takes an AMSGrad step
    with it.
    """
    gs = _local_gradients(workers, problem, ctx, t)
    pis = [] if ctx.collect_diagnostics else None

    decs = []
    for i, w in enumerate(workers):
        rng = ctx.stream.lane(i, t, LANE_COMPRESS_UP) if ctx.spec.kind == "rand_k" else None
        msg, dec = _markov_send(w.markov_up, ctx.spec, gs[i], rng, pis)
        decs.append(dec)
        ledger.record(UP, msg.bit_size)

    server.g_hat += np.mean(decs, axis=0)
    up_mean = np.mean([w.markov_up.reference for w in workers], axis=0)
    assert np.max(np.abs(server.g_hat - up_mean)) <= REPLICA_TOL

    rng = ctx.stream.lane(0, t, LANE_COMPRESS_DOWN) if ctx.spec.kind == "rand_k" else None
    msg_down, _ = _markov_send(server.markov_down, ctx.spec, server.g_hat, rng, pis)
    _broadcast_bits(ledger, msg_down.bit_size, ctx)

    for w in workers:
        w.markov_down.apply(msg_down)
    _check_replicas(workers, server, t, ctx.algorithm)

    for w in workers:
        amsgrad_step(w.opt, w.markov_down.reference, ctx.params, t, ctx.algorithm)
    _check_models(workers)

    if not ctx.collect_diagnostics:
        return IterationStats()
    return _diag_stats(pis, np.mean(gs, axis=0), workers[0].markov_down.reference,
                       ctx.params.beta2)


def _full_precision_round(workers, problem, ctx, t, ledger):
    """Shared body of uncompressed AMSGrad: average fresh gradients, ship
    them at full precision both ways, AMSGrad step on every worker."""
    gs = _local_gradients(workers, problem, ctx, t)
    d = problem.dim
    ledger.record(UP, SCALAR_BITS * d * len(workers))
    _broadcast_bits(ledger, SCALAR_BITS * d, ctx)
    g_mean = np.mean(gs, axis=0)
    for w in workers:
        amsgrad_step(w.opt, g_mean, ctx.params, t, ctx.algorithm)
    _check_models(workers)
    return g_mean


def uncompressed_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """Vanilla distributed AMSGrad; the communication baseline."""
    _full_precision_round(workers, problem, ctx, t, ledger)
    return IterationStats()


def naive_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """Direct compression of each fresh local gradient, no error memory.

    The compression error is re-introduced every round; the variance
    diagnostic makes the resulting second-moment drift measurable.
    """
    gs = _local_gradients(workers, problem, ctx, t)
    pis = [] if ctx.collect_diagnostics else None

    decs = []
    for i, w in enumerate(workers):
        rng = ctx.stream.lane(i, t, LANE_COMPRESS_UP) if ctx.spec.kind == "rand_k" else None
        msg, dec = _compress_tracked(ctx.spec, gs[i], rng, pis)
        decs.append(dec)
        ledger.record(UP, msg.bit_size)
    g_used = np.mean(decs, axis=0)
    _broadcast_bits(ledger, SCALAR_BITS * problem.dim, ctx)

    for w in workers:
        amsgrad_step(w.opt, g_used, ctx.params, t, ctx.algorithm)
    _check_models(workers)

    if not ctx.collect_diagnostics:
        return IterationStats()
    return _diag_stats(pis, np.mean(gs, axis=0), g_used, ctx.params.beta2)


def ef_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """Worker-side error feedback: compress gradient plus carried residual,
    keep what the compressor dropped. Uplink only; the broadcast stays full
    precision."""
    gs = _local_gradients(workers, problem, ctx, t)
    pis = [] if ctx.collect_diagnostics else None

    decs = []
    for i, w in enumerate(workers):
        rng = ctx.stream.lane(i, t, LANE_COMPRESS_UP) if ctx.spec.kind == "rand_k" else None
        carried = gs[i] + w.ef_residual
        msg, dec = _compress_tracked(ctx.spec, carried, rng, pis)
        w.ef_residual = carried - dec
        decs.append(dec)
        ledger.record(UP, msg.bit_size)
    g_used = np.mean(decs, axis=0)
    _broadcast_bits(ledger, SCALAR_BITS * problem.dim, ctx)

    for w in workers:
        amsgrad_step(w.opt, g_used, ctx.params, t, ctx.algorithm)
    _check_models(workers)

    if not ctx.collect_diagnostics:
        return IterationStats()
    return _diag_stats(pis, np.mean(gs, axis=0), g_used, ctx.params.beta2)


def ef21_sgd_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """Two-way Markov compression driving momentum SGD instead of AMSGrad.

    beta1 doubles as the momentum coefficient (0 gives plain SGD).
    """
    gs = _local_gradients(workers, problem, ctx, t)
    pis = [] if ctx.collect_diagnostics else None

    decs = []
    for i, w in enumerate(workers):
        rng = ctx.stream.lane(i, t, LANE_COMPRESS_UP) if ctx.spec.kind == "rand_k" else None
        msg, dec = _markov_send(w.markov_up, ctx.spec, gs[i], rng, pis)
        decs.append(dec)
        ledger.record(UP, msg.bit_size)

    server.g_hat += np.mean(decs, axis=0)
    rng = ctx.stream.lane(0, t, LANE_COMPRESS_DOWN) if ctx.spec.kind == "rand_k" else None
    msg_down, _ = _markov_send(server.markov_down, ctx.spec, server.g_hat, rng, pis)
    _broadcast_bits(ledger, msg_down.bit_size, ctx)

    alpha = ctx.params.step_size(t)
    for w in workers:
        w.markov_down.apply(msg_down)
    _check_replicas(workers, server, t, ctx.algorithm)
    for w in workers:
        w.opt.x, w.momentum = momentum_sgd_step(
            w.opt.x, w.momentum, w.markov_down.reference, alpha, ctx.params.beta1)
        require_finite(w.opt.x, "model", iteration=t, algorithm=ctx.algorithm)
    _check_models(workers)

    pi_mean = float(np.mean(pis)) if pis else 0.0
    return IterationStats(measured_pi_mean=pi_mean)


def onebit_adam_iteration(workers, server, problem, ctx, t, ledger) -> IterationStats:
    """Frozen-variance baseline.

    Warm-up (t <= warmup_iters): exactly the uncompressed round. At the end
    of the last warm-up iteration the second moment is frozen into
    v_bar = b + nu and per-worker momenta fork from the shared moment.
    After that, each worker error-feedback-compresses its momentum update,
    the server error-feedback-compresses the aggregate, and the model moves
    by alpha * broadcast / sqrt(v_bar) with v_bar never changing again.
    """
    if t <= ctx.warmup_iters:
        _full_precision_round(workers, problem, ctx, t, ledger)
        if t == ctx.warmup_iters:
            for w in workers:
                w.frozen_v = w.opt.b + ctx.params.nu
                w.momentum = w.opt.m.copy()
                w.ef_residual = np.zeros(problem.dim)
            server.ef_residual = np.zeros(problem.dim)
        return IterationStats()

    if workers[0].frozen_v is None:
        # zero-length warm-up: freeze the initial (zero) second moment
        for w in workers:
            w.frozen_v = w.opt.b + ctx.params.nu
            w.momentum = w.opt.m.copy()

    gs = _local_gradients(workers, problem, ctx, t)
    pis = [] if ctx.collect_diagnostics else None
    beta1 = ctx.params.beta1

    decs = []
    for i, w in enumerate(workers):
        rng = ctx.stream.lane(i, t, LANE_COMPRESS_UP) if ctx.spec.kind == "rand_k" else None
        w.momentum = beta1 * w.momentum + (1.0 - beta1) * gs[i]
        carried = w.momentum + w.ef_residual
        msg, dec = _compress_tracked(ctx.spec, carried, rng, pis)
        w.ef_residual = carried - dec
        decs.append(dec)
        ledger.record(UP, msg.bit_size)

    aggregate = np.mean(decs, axis=0)
    carried = aggregate + server.ef_residual
    rng = ctx.stream.lane(0, t, LANE_COMPRESS_DOWN) if ctx.spec.kind == "rand_k" else None
    msg_down, dec_down = _compress_tracked(ctx.spec, carried, rng, pis)
    server.ef_residual = carried - dec_down
    _broadcast_bits(ledger, msg_down.bit_size, ctx)

    alpha = ctx.params.step_size(t)
    for w in workers:
        step = msg_down.decode()
        w.opt.x = w.opt.x - alpha * step / np.sqrt(w.frozen_v)
        require_finite(w.opt.x, "model", iteration=t, algorithm=ctx.algorithm)
    _check_models(workers)

    pi_mean = float(np.mean(pis)) if pis else 0.0
    return IterationStats(measured_pi_mean=pi_mean)


ITERATION_FUNCS = {
    "cdadam": cdadam_iteration,
    "uncompressed_amsgrad": uncompressed_iteration,
    "naive_amsgrad": naive_iteration,
    "ef_amsgrad": ef_iteration,
    "ef21_sgd": ef21_sgd_iteration,
    "onebit_adam": onebit_adam_iteration,
}
