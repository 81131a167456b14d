# Aulos Core Modules
__version__ = "1.0.0"

from .mini_ir import (
    IRError,
    IRSyntaxError,
    IrreducibleCFGError,
    Program,
    parse_program,
    load_program,
    build_cfgs,
    compute_dominance,
    find_program_loops,
    build_pdg,
)
from .event_analysis import (
    AnalysisError,
    CompositeEvent,
    EventAnnotatedCfg,
    EventKind,
    EventLiteral,
    EventSpec,
    Predicate,
    analyze_program,
    annotate_cfg,
    identify_binary_events,
    identify_control_intensity_events,
    analyze_event_dependence,
    save_annotations,
    load_annotations,
)
from .fsa_model import (
    Efsa,
    Fsa,
    FsaError,
    ModelFormatError,
    TraceFormatError,
    TraceRecord,
    WindowError,
    augment_efsa,
    learn_fsa,
    load_model,
    load_trace,
    partition_windows,
    save_model,
)
from .intensity_model import DegenerateFitError, IntensityModel, count_iterations, fit
from .verifier import (
    EventVerifier,
    SensorFeed,
    SensorReading,
    Verdict,
    VerifierError,
    VerifierUnavailable,
    NeighborTimeout,
    verify_binary,
    sample_average,
    start_server,
)
from .detector import AnomalyKind, AnomalyReport, Detector, check_intensity, checkpoint_policy
from .baselines import build_ngram_db, find_event_ngrams, ngram_detect, scfd_fit, scfd_classify
from .simulator import SCENARIOS, SimulationError, ScenarioError, scenario, simulate
from .config import AttackSpec, DetectorSettings, PlantConfig, RunConfig, SensorProcess, VerifierConfig
