"""Deterministic parameter-server simulator for communication-compressed
adaptive gradient methods, with exact communication-bit accounting."""

from .algorithms import (
    ALGORITHMS,
    IterationContext,
    IterationStats,
    ServerState,
    WorkerState,
    cdadam_iteration,
    ef21_sgd_iteration,
    ef_iteration,
    init_states,
    naive_iteration,
    onebit_adam_iteration,
    uncompressed_iteration,
)
from .compress import (
    KINDS,
    CompressedMessage,
    CompressorSpec,
    MarkovState,
    compress,
    compression_error_sq,
    markov_step,
    measured_pi,
)
from .core import (
    BitLedger,
    ConfigError,
    ConsistencyError,
    NonFiniteError,
    RandomStream,
    axpy,
    record_message,
)
from .harness import (
    DEFAULT_ALPHA_GRID,
    DivergenceError,
    GridSearchResult,
    MetricRow,
    RunConfig,
    RunResult,
    export_csv,
    export_json,
    extract_xy,
    grid_search,
    load_config,
    read_csv,
    run_experiment,
)
from .optim import (
    AmsgradParams,
    AmsgradState,
    TheoryInputs,
    amsgrad_step,
    momentum_sgd_step,
    sgd_step,
    theorem_constants,
    variance_instability,
)
from .problems import (
    Dataset,
    ParseError,
    Partition,
    ProblemSpec,
    build_problem,
    dump_libsvm,
    evaluate,
    full_gradient,
    local_gradient,
    loss,
    parse_libsvm,
    sample_batch,
    synthesize,
    synthetic_problem,
)

__version__ = "0.1.0"
