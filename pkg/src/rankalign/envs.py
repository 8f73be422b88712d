"""Deterministic toy manipulation environments.

Each environment exposes a flat state vector (everything the dynamics need),
bounded continuous actions, a named feature schema computed from the
post-step state, staged oracle rules, and a success predicate. A hidden
ground-truth return exists for oracle construction and evaluation only; the
learner side of the system never touches it.

Shipped:
  point-reach     2D point mass driven to a target by velocity commands.
  pick-carry      2D point + gripper; approach, grasp, carry to the goal.
  drawer-pull-1d  approach along a line, then pull a prismatic joint open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .rewards import FeatureRecord, GateCondition, Trajectory

DIRECTION_INCREASE = "increase"
DIRECTION_DECREASE = "decrease"
DIRECTION_NO_CHANGE = "no-change"


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class FeatureDef:
    name: str
    kind: str  # "scalar" or "bool"
    description: str


@dataclass(frozen=True)
class StageRule:
    """Membership predicate plus a within-stage score for the ranking oracle.

    Later indices mean closer to task completion. Predicates of an
    environment's rules are mutually exclusive and total on reachable
    feature records.
    """

    index: int
    name: str
    conditions: tuple[GateCondition, ...]
    score_feature: str
    higher_is_better: bool

    def matches(self, record: FeatureRecord) -> bool:
        return all(c.holds(record, f"stage:{self.name}") for c in self.conditions)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int
    features: tuple[FeatureDef, ...]
    stage_rules: tuple[StageRule, ...]
    success_description: str
    # Scripted-reflection hints: furthest stage index -> {param: direction}.
    # Keys are filtered against the active reward spec before use.
    reflection_hints: Mapping[int, Mapping[str, str]] = field(default_factory=dict)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)


def stage_of(rules: Sequence[StageRule], record: FeatureRecord) -> StageRule:
    matched = [r for r in rules if r.matches(record)]
    if len(matched) != 1:
        names = [r.name for r in matched] or ["<none>"]
        raise EnvError(
            f"feature record matched {len(matched)} stage rules ({', '.join(names)}); "
            "expected exactly one"
        )
    return matched[0]


class Environment:
    """Base: deterministic transitions over tuple states, features per step."""

    spec: EnvSpec

    def reset(self, seed: int) -> tuple[float, ...]:
        raise NotImplementedError

    def transition(self, state: tuple[float, ...], action: tuple[float, ...]) -> tuple[float, ...]:
        raise NotImplementedError

    def features_of(self, state: tuple[float, ...]) -> dict[str, object]:
        raise NotImplementedError

    def is_success_state(self, state: tuple[float, ...]) -> bool:
        raise NotImplementedError

    def clip_action(self, action: Sequence[float]) -> tuple[float, ...]:
        lo, hi = self.spec.action_low, self.spec.action_high
        return tuple(min(max(float(a), l), h) for a, l, h in zip(action, lo, hi))

    def step(
        self, state: tuple[float, ...], action: Sequence[float], step_index: int = 0
    ) -> tuple[tuple[float, ...], FeatureRecord, bool]:
        """Apply one clipped action. `done` reflects success only; the caller
        owns the horizon cutoff."""
        act = self.clip_action(action)
        nxt = self.transition(state, act)
        record = FeatureRecord(self.features_of(nxt), step=step_index)
        return nxt, record, self.is_success_state(nxt)

    def success(self, traj: Trajectory) -> bool:
        return self.is_success_state(traj.states[-1])

    def ground_truth_return(self, traj: Trajectory) -> float:
        """Hidden evaluation-only return: staged progress plus a success bonus.

        Quarantined behind the oracle/evaluation boundary; policy training
        must never read it.
        """
        total = 0.0
        for rec in traj.features:
            rule = stage_of(self.spec.stage_rules, rec)
            score = float(rec.values[rule.score_feature])
            total += 10.0 * rule.index + (score if rule.higher_is_better else -score)
        if traj.success:
            total += 500.0
        return total


def _annulus_point(rng: np.random.Generator, r_lo: float, r_hi: float) -> tuple[float, float]:
    radius = float(rng.uniform(r_lo, r_hi))
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    return radius * math.cos(angle), radius * math.sin(angle)


class PointReach(Environment):
    """2D point mass; velocity commands; target at the origin.

    State: (px, py). Spawn radius is uniform on [0.5, 1.0].
    """

    SPAWN = (0.5, 1.0)
    SUCCESS_RADIUS = 0.05

    def __init__(self):
        self.spec = EnvSpec(
            name="point-reach",
            state_dim=2,
            action_dim=2,
            action_low=(-0.2, -0.2),
            action_high=(0.2, 0.2),
            horizon=30,
            features=(
                FeatureDef("distance_to_target", "scalar", "distance between the point and the target"),
            ),
            stage_rules=(
                StageRule(0, "reaching", (), "distance_to_target", higher_is_better=False),
            ),
            success_description="distance_to_target < 0.05",
            reflection_hints={0: {"approach_weight": DIRECTION_INCREASE}},
        )

    def reset(self, seed: int) -> tuple[float, ...]:
        rng = np.random.default_rng(seed)
        return _annulus_point(rng, *self.SPAWN)

    def transition(self, state, action):
        return (state[0] + action[0], state[1] + action[1])

    def features_of(self, state):
        return {"distance_to_target": math.hypot(state[0], state[1])}

    def is_success_state(self, state) -> bool:
        return math.hypot(state[0], state[1]) < self.SUCCESS_RADIUS


class PickCarry(Environment):
    """2D point agent with a gripper bit; carry the object to the origin goal.

    State: (px, py, ox, oy, grasped). Actions: (vx, vy, grip). A grip command
    above 0.5 within the grasp radius attaches the object, which then moves
    with the agent. Success ends the episode: grasped object within the goal
    radius. Collision flags an attempt to leave the workspace box that step.
    """

    AGENT_SPAWN = (0.7, 1.1)
    OBJECT_SPAWN = (0.4, 0.8)
    GRASP_RADIUS = 0.15
    GRIP_THRESHOLD = 0.4
    SUCCESS_RADIUS = 0.05
    WORKSPACE = 1.5

    def __init__(self):
        self.spec = EnvSpec(
            name="pick-carry",
            state_dim=5,
            action_dim=3,
            action_low=(-0.2, -0.2, 0.0),
            action_high=(0.2, 0.2, 1.0),
            horizon=40,
            features=(
                FeatureDef("distance_to_target", "scalar", "distance between the agent and the object"),
                FeatureDef("grasped", "bool", "whether the object is held by the gripper"),
                FeatureDef("distance_to_goal", "scalar", "distance between the object and the goal"),
                FeatureDef("collision", "bool", "whether the agent hit the workspace boundary"),
            ),
            stage_rules=(
                StageRule(
                    0, "approach", (GateCondition("grasped", "falsy"),),
                    "distance_to_target", higher_is_better=False,
                ),
                StageRule(
                    1, "carry",
                    (GateCondition("grasped", "truthy"),
                     GateCondition("distance_to_goal", "ge", 0.05)),
                    "distance_to_goal", higher_is_better=False,
                ),
                StageRule(
                    2, "deliver",
                    (GateCondition("grasped", "truthy"),
                     GateCondition("distance_to_goal", "lt", 0.05)),
                    "distance_to_goal", higher_is_better=False,
                ),
            ),
            success_description="grasped and distance_to_goal < 0.05",
            reflection_hints={
                0: {"grasp_weight": DIRECTION_INCREASE, "transport_weight": DIRECTION_INCREASE},
                1: {"transport_weight": DIRECTION_INCREASE},
                2: {"transport_weight": DIRECTION_INCREASE},
            },
        )

    def reset(self, seed: int) -> tuple[float, ...]:
        rng = np.random.default_rng(seed)
        px, py = _annulus_point(rng, *self.AGENT_SPAWN)
        ox, oy = _annulus_point(rng, *self.OBJECT_SPAWN)
        return (px, py, ox, oy, 0.0)

    def transition(self, state, action):
        px, py, ox, oy, grasped = state
        vx, vy, grip = action
        nx = min(max(px + vx, -self.WORKSPACE), self.WORKSPACE)
        ny = min(max(py + vy, -self.WORKSPACE), self.WORKSPACE)
        if grasped >= 0.5:
            ox, oy = nx, ny
        elif grip > self.GRIP_THRESHOLD and math.hypot(nx - ox, ny - oy) <= self.GRASP_RADIUS:
            grasped = 1.0
            ox, oy = nx, ny
        # entering the goal radius places the object exactly on the goal
        if grasped >= 0.5 and math.hypot(ox, oy) < self.SUCCESS_RADIUS:
            ox, oy = 0.0, 0.0
        return (nx, ny, ox, oy, grasped)

    def features_of(self, state):
        px, py, ox, oy, grasped = state
        # collision = pressed against the workspace wall (positions are clipped)
        hit = abs(px) >= self.WORKSPACE or abs(py) >= self.WORKSPACE
        return {
            "distance_to_target": math.hypot(px - ox, py - oy),
            "grasped": grasped >= 0.5,
            "distance_to_goal": math.hypot(ox, oy),
            "collision": hit,
        }

    def is_success_state(self, state) -> bool:
        _, _, ox, oy, grasped = state
        return grasped >= 0.5 and math.hypot(ox, oy) < self.SUCCESS_RADIUS


class DrawerPull(Environment):
    """1D approach-then-pull task on a prismatic drawer joint.

    State: (x, j, contacted). The handle sits at the joint position j; once
    the agent is within the contact radius it holds the handle and the joint
    follows its motion (clipped to [0, J_MAX]). Success opens past J_GOAL.
    The collision feature exists for reward-spec compatibility and is always
    False here (no obstacles on the line).
    """

    SPAWN = (0.5, 1.0)
    CONTACT_RADIUS = 0.05
    J_MAX = 0.5
    J_GOAL = 0.3

    def __init__(self):
        self.spec = EnvSpec(
            name="drawer-pull-1d",
            state_dim=3,
            action_dim=1,
            action_low=(-0.15,),
            action_high=(0.15,),
            horizon=40,
            features=(
                FeatureDef("distance_to_handle", "scalar", "distance between the agent and the drawer handle"),
                FeatureDef("contacted", "bool", "whether the agent holds the handle"),
                FeatureDef("drawer_joint_value", "scalar", "how far the drawer has been pulled out"),
                FeatureDef("distance_to_goal", "scalar", "remaining joint travel to the open target"),
                FeatureDef("collision", "bool", "always False; kept for reward compatibility"),
            ),
            stage_rules=(
                StageRule(
                    0, "reaching", (GateCondition("contacted", "falsy"),),
                    "distance_to_handle", higher_is_better=False,
                ),
                StageRule(
                    1, "pulling", (GateCondition("contacted", "truthy"),),
                    "drawer_joint_value", higher_is_better=True,
                ),
            ),
            success_description="drawer_joint_value >= 0.3",
            reflection_hints={
                0: {"grasp_weight": DIRECTION_INCREASE, "pull_weight": DIRECTION_INCREASE},
                1: {"pull_weight": DIRECTION_INCREASE},
            },
        )

    def reset(self, seed: int) -> tuple[float, ...]:
        rng = np.random.default_rng(seed)
        return (float(rng.uniform(*self.SPAWN)), 0.0, 0.0)

    def transition(self, state, action):
        x, j, contacted = state
        v = action[0]
        if contacted >= 0.5:
            nj = min(max(j + v, 0.0), self.J_MAX)
            return (x + (nj - j), nj, 1.0)
        nx = x + v
        touched = abs(nx - j) <= self.CONTACT_RADIUS
        return (nx, j, 1.0 if touched else 0.0)

    def features_of(self, state):
        x, j, contacted = state
        return {
            "distance_to_handle": abs(x - j),
            "contacted": contacted >= 0.5,
            "drawer_joint_value": j,
            "distance_to_goal": max(self.J_GOAL - j, 0.0),
            "collision": False,
        }

    def is_success_state(self, state) -> bool:
        return state[1] >= self.J_GOAL


ENV_REGISTRY = {
    "point-reach": PointReach,
    "pick-carry": PickCarry,
    "drawer-pull-1d": DrawerPull,
}


def make_env(name: str) -> Environment:
    try:
        return ENV_REGISTRY[name]()
    except KeyError:
        raise EnvError(
            f"unknown environment '{name}' (have {', '.join(sorted(ENV_REGISTRY))})"
        ) from None
