"""Force-adaptive whole-body control on a planar humanoid testbed.

A self-contained numpy stack: rigid-body simulation with spring-damper
disturbance rigs, a dual-agent PPO trainer with a constrained residual upper
body, and an experiment harness for force-response protocols.
"""

from hafo_lab.configio import ConfigError
from hafo_lab.env import (
    DrRanges,
    ObsLayout,
    PrivilegedLayout,
    ScenarioConfig,
    VecEnv,
    scale_disturbances,
    scenario_preset,
)
from hafo_lab.forces import (
    FORCE_TIERS,
    ForceTier,
    LiftProfile,
    PushSchedule,
    SpringDamperAttachment,
    build_suspension_schedule,
    compass_directions,
    push_sweep_iterator,
    sample_hand_forces,
    spring_damper_force,
    tier_by_name,
)
from hafo_lab.harness import (
    ExperimentReport,
    SimTrace,
    evaluate_force_tiers,
    load_trace,
    push_sweep,
    record_trace,
    replay_trace,
    run_rollout,
    save_trace,
    scenario_from_dict,
    scenario_to_dict,
    spring_compare,
    suspension_report,
    validate_report,
)
from hafo_lab.motions import (
    Curriculum,
    CurriculumConfig,
    DatasetConfig,
    MotionClip,
    blend_reference,
    builtin_clips,
    check_clip,
    generate_dataset,
    load_clip,
    save_clip,
)
from hafo_lab.policy import (
    PolicyBundle,
    act_lower,
    act_upper,
    evaluate_values,
    load_bundle,
    make_bundle,
    save_bundle,
)
from hafo_lab.ppo import PpoConfig, Trainer, compute_gae
from hafo_lab.rewards import (
    RewardTable,
    action_smoothness,
    compute_rewards,
    tracking_error_upper,
    tracking_error_velocity,
)
from hafo_lab.robot import (
    FkResult,
    JointSpec,
    LinkSpec,
    Pose2,
    RobotModel,
    build_model,
    forward_kinematics,
)
from hafo_lab.sim import SimParams, SimState, step

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Curriculum",
    "CurriculumConfig",
    "DatasetConfig",
    "DrRanges",
    "ExperimentReport",
    "FORCE_TIERS",
    "FkResult",
    "ForceTier",
    "JointSpec",
    "LiftProfile",
    "LinkSpec",
    "MotionClip",
    "ObsLayout",
    "PolicyBundle",
    "Pose2",
    "PpoConfig",
    "PrivilegedLayout",
    "PushSchedule",
    "RewardTable",
    "RobotModel",
    "ScenarioConfig",
    "SimParams",
    "SimState",
    "SimTrace",
    "SpringDamperAttachment",
    "Trainer",
    "VecEnv",
    "act_lower",
    "act_upper",
    "action_smoothness",
    "blend_reference",
    "build_model",
    "build_suspension_schedule",
    "builtin_clips",
    "check_clip",
    "compass_directions",
    "compute_gae",
    "compute_rewards",
    "evaluate_force_tiers",
    "evaluate_values",
    "forward_kinematics",
    "generate_dataset",
    "load_bundle",
    "load_clip",
    "load_trace",
    "make_bundle",
    "push_sweep",
    "push_sweep_iterator",
    "record_trace",
    "replay_trace",
    "run_rollout",
    "sample_hand_forces",
    "save_bundle",
    "save_clip",
    "save_trace",
    "scale_disturbances",
    "scenario_from_dict",
    "scenario_preset",
    "scenario_to_dict",
    "spring_compare",
    "spring_damper_force",
    "step",
    "suspension_report",
    "tier_by_name",
    "tracking_error_upper",
    "tracking_error_velocity",
    "validate_report",
    "__version__",
]
