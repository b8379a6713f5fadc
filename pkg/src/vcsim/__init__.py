"""vcsim: deterministic sandbox and reward engine for visual-creation agents.

Simulates a registry of media-creation tools with physically consistent
placeholder outputs, parses tagged agent trajectories, scores them with a
plan-gated multi-component reward, runs grouped policy rollouts with
group-normalized advantages, and evaluates sim-to-real transfer bound
diagnostics.
"""

from .bounds import (
    BoundInputError,
    BoundInputs,
    BoundReport,
    aggregate_kl,
    error_bound,
    improvement_lower_bound,
    monotonicity_scan,
)
from .env import (
    EpisodeError,
    EpisodeState,
    Observation,
    TaskError,
    TaskSpec,
    finalize,
    load_task_suite,
    read_transcript,
    replay_transcript,
    reset,
    step,
    write_transcript,
)
from .judgers import FACETS, Judger, RemoteJudger, RuleJudger, make_judger
from .offline import (
    ScoredRecord,
    StoredTrajectory,
    load_trajectory_dataset,
    rescore_trajectory,
    score_dataset,
)
from .reward import (
    RewardBreakdown,
    RewardConfig,
    RewardConfigError,
    compose_reward,
    filter_dataset,
    score_consistency,
    score_format,
    score_plan,
    score_result,
    score_tool,
    score_traj_coherence,
)
from .rollout import (
    GoldenPolicy,
    NOISE_MODES,
    NoisyPolicy,
    PolicyError,
    RemotePolicy,
    RolloutGroup,
    RolloutRecord,
    compute_advantages,
    export_training_records,
    load_training_records,
    run_group,
    run_rollout,
)
from .tools import (
    AssetStore,
    CatalogEntry,
    MediaAsset,
    MediaCatalog,
    RegistryError,
    ToolRegistry,
    ToolResult,
    ToolSpec,
    UnknownToolError,
    ValidationResult,
    default_catalog,
    default_registry,
    execute_call,
    load_catalog,
    load_registry,
    validate_call,
)
from .trajectory import (
    Block,
    Defect,
    ParseReport,
    ToolCallPayload,
    Trajectory,
    TrajectoryStats,
    parse_trajectory,
    serialize_trajectory,
    trajectories_equal,
    trajectory_stats,
)

__version__ = "0.1.0"
