"""Inner-loop policy optimization and replay storage.

The policy is linear-Gaussian state feedback (mean = W s + b with fixed
diagonal exploration noise) trained by the cross-entropy method against the
current declarative reward. The replay buffer stores trajectories with
their features so rewards can be relabeled under new parameters; feedback
batches are drawn evenly across a reward histogram of the buffer.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Sequence

import numpy as np

from .envs import Environment
from .rewards import (
    FeatureRecord,
    ParamVector,
    RewardSpec,
    Trajectory,
    evaluate_return,
    relabel,
)


class IdAllocator:
    """Monotone trajectory id source; ids never repeat within a run."""

    def __init__(self, start: int = 0):
        self._counter = itertools.count(start)

    def next(self) -> int:
        return next(self._counter)


_DEFAULT_IDS = IdAllocator()


@dataclass(frozen=True)
class Policy:
    """Linear-Gaussian state-feedback policy: mean action = W s + b."""

    weights: tuple[tuple[float, ...], ...]
    bias: tuple[float, ...]
    noise_std: float = 0.05
    seed: int = 0

    @classmethod
    def zeros(cls, state_dim: int, action_dim: int, noise_std: float = 0.05, seed: int = 0) -> "Policy":
        w = tuple(tuple(0.0 for _ in range(state_dim)) for _ in range(action_dim))
        return cls(w, tuple(0.0 for _ in range(action_dim)), noise_std, seed)

    @classmethod
    def from_flat(
        cls, flat: np.ndarray, state_dim: int, action_dim: int, noise_std: float = 0.05, seed: int = 0
    ) -> "Policy":
        w = flat[: state_dim * action_dim].reshape(action_dim, state_dim)
        b = flat[state_dim * action_dim :]
        return cls(
            tuple(tuple(float(x) for x in row) for row in w),
            tuple(float(x) for x in b),
            noise_std,
            seed,
        )

    def flat(self) -> np.ndarray:
        return np.array([x for row in self.weights for x in row] + list(self.bias))

    def act(self, state: Sequence[float]) -> tuple[float, ...]:
        return tuple(
            sum(w * s for w, s in zip(row, state)) + b
            for row, b in zip(self.weights, self.bias)
        )

    def act_noisy(self, state: Sequence[float], rng: np.random.Generator) -> tuple[float, ...]:
        mean = self.act(state)
        noise = rng.normal(0.0, self.noise_std, size=len(mean))
        return tuple(m + float(n) for m, n in zip(mean, noise))


@dataclass(frozen=True)
class BufferEntry:
    trajectory: Trajectory
    collection_return: float

    @property
    def tid(self) -> int:
        return self.trajectory.tid

    @property
    def features(self) -> tuple[FeatureRecord, ...]:
        return self.trajectory.features


class ReplayBuffer:
    """FIFO store of trajectories with their collection-time returns.

    Only features are authoritative: rewards under any parameters come from
    relabeling, never from the stored return (which exists for round-trip
    checks).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: Deque[BufferEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, trajectory: Trajectory, collection_return: float) -> None:
        self._entries.append(BufferEntry(trajectory, collection_return))

    def snapshot(self) -> list[BufferEntry]:
        return list(self._entries)


@dataclass(frozen=True)
class CEMConfig:
    population: int = 32
    elite_frac: float = 0.25
    generations: int = 6
    episodes: int = 4
    seed: int = 0
    init_std: float = 0.5
    min_std: float = 0.08

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not (0.0 < self.elite_frac < 1.0):
            raise ValueError("elite_frac must be in (0, 1)")


def _run_episode(
    env: Environment,
    policy: Policy,
    reset_seed: int,
    tid: int,
    noise_rng: np.random.Generator | None = None,
) -> Trajectory:
    state = env.reset(int(reset_seed))
    states, actions, records = [], [], []
    for t in range(env.spec.horizon):
        if noise_rng is None:
            action = policy.act(state)
        else:
            action = policy.act_noisy(state, noise_rng)
        action = env.clip_action(action)
        state, record, done = env.step(state, action, step_index=t)
        states.append(state)
        actions.append(action)
        records.append(record)
        if done:
            break
    traj = Trajectory(tid, tuple(states), tuple(actions), tuple(records), success=done)
    return traj


def rollout(
    env: Environment,
    policy: Policy,
    m: int,
    seed: int,
    ids: IdAllocator | None = None,
) -> list[Trajectory]:
    """m greedy episodes (exploration noise off) with distinct derived resets."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ids = ids or _DEFAULT_IDS
    reset_seeds = np.random.SeedSequence(seed).generate_state(m)
    return [_run_episode(env, policy, int(s), ids.next()) for s in reset_seeds]


def train_policy(
    env: Environment,
    spec: RewardSpec,
    params: ParamVector,
    init: Policy,
    config: CEMConfig,
    buffer: ReplayBuffer,
    ids: IdAllocator | None = None,
    telemetry: dict | None = None,
) -> Policy:
    """Cross-entropy method over flattened policy parameters.

    Candidates are scored by mean return under the current reward across a
    shared set of reset seeds (common random numbers); every evaluation
    rollout lands in the replay buffer. Returns the final distribution mean.
    Deterministic given config.seed.
    """
    ids = ids or _DEFAULT_IDS
    rng = np.random.default_rng(config.seed)
    mean = init.flat()
    std = np.full(mean.shape, config.init_std)
    n_elite = max(1, int(round(config.population * config.elite_frac)))
    elite_means: list[float] = []

    for gen in range(config.generations):
        reset_seeds = rng.integers(0, 2**31 - 1, size=config.episodes)
        candidates = rng.normal(mean, std, size=(config.population, mean.size))
        candidates[0] = mean  # elitism: the incumbent competes every generation
        scores = np.empty(config.population)
        for c in range(config.population):
            policy = Policy.from_flat(
                candidates[c], env.spec.state_dim, env.spec.action_dim, init.noise_std
            )
            noise_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
            total = 0.0
            for s in reset_seeds:
                traj = _run_episode(env, policy, int(s), ids.next(), noise_rng)
                ret = evaluate_return(spec, params, traj)
                buffer.add(traj, ret)
                total += ret
            scores[c] = total / config.episodes
        elite_idx = np.argsort(-scores)[:n_elite]
        elite = candidates[elite_idx]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), config.min_std)
        elite_means.append(float(scores[elite_idx].mean()))

    if telemetry is not None:
        telemetry["elite_mean_returns"] = elite_means
    return Policy.from_flat(
        mean, env.spec.state_dim, env.spec.action_dim, init.noise_std, init.seed
    )


def histogram_sample(
    buffer: ReplayBuffer,
    spec: RewardSpec,
    params: ParamVector,
    n: int,
    bins: int,
    seed: int,
) -> list[Trajectory]:
    """Draw up to n trajectories evenly across a relabeled-return histogram.

    Every buffered trajectory is relabeled under the current parameters; an
    equal-width histogram over the return range is cycled in ascending order,
    taking one uniform draw without replacement per visit. Degenerate ranges
    (all returns equal) collapse to uniform sampling.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    entries = buffer.snapshot()
    if not entries or n < 1:
        return []
    returns = [
        sum(relabel(rec, spec, params) for rec in e.features) for e in entries
    ]
    lo, hi = min(returns), max(returns)
    rng = np.random.default_rng(seed)
    if hi == lo:
        take = min(n, len(entries))
        chosen = rng.choice(len(entries), size=take, replace=False)
        return [entries[int(i)].trajectory for i in chosen]

    width = (hi - lo) / bins
    buckets: list[list[int]] = [[] for _ in range(bins)]
    for i, r in enumerate(returns):
        b = min(int((r - lo) / width), bins - 1)
        buckets[b].append(i)
    for bucket in buckets:
        order = rng.permutation(len(bucket))
        bucket[:] = [bucket[int(k)] for k in order]

    picked: list[int] = []
    while len(picked) < n and any(buckets):
        for bucket in buckets:
            if bucket and len(picked) < n:
                picked.append(bucket.pop())
    return [entries[i].trajectory for i in picked]
