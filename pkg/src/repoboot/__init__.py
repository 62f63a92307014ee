"""repoboot: distill repository setup into a verified, replayable contract.

The pipeline scans a repository for bootstrap evidence, plans setup and
verification commands through a pluggable backend, materializes the plan as a
`.bootstrap` directory, verifies it stage by stage in isolated environments,
repairs failures through bounded evidence-constrained deltas, and accepts the
contract only once it replays cleanly from a fresh environment.
"""

__version__ = "0.1.0"

from .contract import (
    BootstrapContract,
    CommandsManifest,
    FailurePlaybook,
    FrozenContract,
    diff_contract,
    freeze_contract,
    load_contract,
    materialize_contract,
    render_stage_script,
)
from .evidence import (
    CIEvidenceReport,
    DiscoveryReport,
    EvidenceItem,
    NonLocalFeature,
    RepoSnapshot,
    classify_non_local,
    extract_ci_evidence,
    scan_repository,
    snapshot_repository,
)
from .orchestrator import (
    BudgetCaps,
    BudgetLedger,
    Exhausted,
    PipelineConfig,
    RunReport,
    bootstrap_pipeline,
    charge_budget,
    record_repair_knowledge,
)
from .plan import (
    BootstrapPlan,
    CommandSpec,
    ConstraintViolation,
    SafetyWarning,
    VerificationGoals,
    detect_degenerate_verify,
    generate_plan,
    screen_risky_commands,
    validate_plan,
)
from .repair import (
    FailureSignature,
    RepairDelta,
    SanityVerdict,
    apply_delta,
    diagnose_trace,
    propose_repair,
    sanity_check,
)
from .verifier import (
    ExecutionTrace,
    Session,
    StageResult,
    VerifierConfig,
    clean_replay,
    open_session,
    run_stage,
    validity,
    verify_contract,
)

__all__ = [name for name in dir() if not name.startswith("_")]
