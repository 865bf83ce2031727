"""Coverage-guided fuzzing for microservice-style software, with a
deterministic in-process cluster simulator as the target harness.

The pieces compose bottom-up: versioned App models interpreted with
coverage probes (`appmodel`, `interp`), a replay-deterministic cluster
(`cluster`), distributed tracing with coverage digests (`tracing`),
record/replay mocking (`mocking`), a digest-indexed seed store with refresh
and life-cycle management (`seedstore`), mutation operators and the
pipelined fuzz loop (`mutation`, `engine`), saturation estimators driving
the campaign switch (`monitor`), and the applied iteration-testing and
taint-verification flows (`scenarios`).
"""
from .appmodel import (
    AppSpec,
    Block,
    CrashKind,
    DiffResult,
    Handler,
    ParseError,
    ValidationError,
    app_to_document,
    diff_blocks,
    parse_app_spec,
)
from .callgraph import CallGraph, build_call_graph
from .cluster import (
    Cluster,
    CorpusEntry,
    DuplicateVersion,
    FaultPolicy,
    Scenario,
    UnknownApp,
    UnknownHandler,
    VersionEvent,
    VersionMismatch,
    load_scenario,
)
from .engine import (
    Campaign,
    CampaignConfig,
    CampaignReport,
    admit_corpus,
    default_corpus,
    run_campaign,
    select_seed,
)
from .interp import (
    BudgetExhausted,
    Crashed,
    ExecutionEnv,
    Returned,
    execute_handler,
)
from .mocking import (
    ConsistencyReport,
    MockPoint,
    MockRecord,
    MockSet,
    PointKind,
    enumerate_mock_points,
    inputs_equal,
    record_run,
    replay_run,
)
from .monitor import (
    CampaignStats,
    Monitor,
    Switch,
    SwitchPolicy,
    UndefinedEstimate,
    decide,
    discovery_rate,
    extrapolate_S,
    ingest_execution,
    upper_bound_U,
)
from .mutation import INTERESTING, InvalidOffset, MutationOp, OpKind, mutate, splice
from .scenarios import (
    IterationReport,
    NoReachingSeed,
    TaintCandidate,
    TaintVerdict,
    TraceIndex,
    directed_priority,
    run_iteration_test,
    select_regression_suite,
    shortest_distances,
    verify_taint,
)
from .seedstore import (
    AdmitDecision,
    EmptyStore,
    RefreshReport,
    Seed,
    SeedStore,
    load_store,
    save_store,
    schedule_triggers,
)
from .tracing import (
    IncompleteTrace,
    Span,
    Trace,
    TraceCollector,
    TraceContext,
    UnknownTrace,
    compute_cover_digest,
    digest_hex,
)

__version__ = "0.1.0"
