"""rankalign: reward-parameter learning from ranking feedback.

A declarative reward function (weighted terms over named execution features)
is trained against an oracle that can only rank executions: disagreements
between the reward-induced ranking and the oracle's become pairwise
preferences, a Metropolis posterior search updates the weights inside
bounded-distance balls, and when rankings agree but the policy stalls the
oracle's reflection restricts parameter domains to a direction and the same
search runs inside them.
"""

from .rewards import (
    FeatureRecord,
    ParamDomain,
    ParamVector,
    RewardSpec,
    RewardTerm,
    Trajectory,
    builtin_spec,
    evaluate_return,
    evaluate_reward,
    load_spec,
    normalize,
    denormalize,
    relabel,
)
from .preference import PreferenceDataset, PreferencePair, log_posterior, pairwise_likelihood
from .ranking import Ranking, build_preference_dataset, discrepancy_pairs, rank_by_reward
from .inference import CandidateUpdate, MHConfig, PosteriorResult, mh_chain, radius_constrained_update
from .oracle import OracleConfig, ReflectionResult, describe_execution, scripted_rank
from .envs import EnvSpec, StageRule, make_env
from .rl import CEMConfig, Policy, ReplayBuffer, histogram_sample, rollout, train_policy
from .loop import AlignmentConfig, IterationReport, run_experiment, run_iteration
from .proposals import ProposalTemplates, parse_proposal, render_proposal_prompt

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "CandidateUpdate",
    "CEMConfig",
    "EnvSpec",
    "FeatureRecord",
    "IterationReport",
    "MHConfig",
    "OracleConfig",
    "ParamDomain",
    "ParamVector",
    "Policy",
    "PosteriorResult",
    "PreferenceDataset",
    "PreferencePair",
    "ProposalTemplates",
    "Ranking",
    "ReflectionResult",
    "ReplayBuffer",
    "RewardSpec",
    "RewardTerm",
    "StageRule",
    "Trajectory",
    "build_preference_dataset",
    "builtin_spec",
    "denormalize",
    "describe_execution",
    "discrepancy_pairs",
    "evaluate_return",
    "evaluate_reward",
    "histogram_sample",
    "load_spec",
    "log_posterior",
    "make_env",
    "mh_chain",
    "normalize",
    "pairwise_likelihood",
    "parse_proposal",
    "radius_constrained_update",
    "rank_by_reward",
    "relabel",
    "render_proposal_prompt",
    "rollout",
    "run_experiment",
    "run_iteration",
    "scripted_rank",
    "train_policy",
]
