"""The outer alignment loop: train, sample, rank, compare, update.

Each iteration trains the policy on the current reward, samples fresh
rollouts plus a histogram draw from replay, ranks the combined batch with
the reward and with the oracle, and turns any ranking disagreement into a
preference dataset for a radius-bounded posterior update. When the rankings
agree but the policy is stuck below the success threshold, the oracle is
asked to reflect instead: the named parameters get their domains temporarily
restricted to the suggested direction and the same posterior search runs
inside them, accepted only if the batch stays fully consistent.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import Environment, make_env
from .inference import MHConfig, radius_constrained_update
from .oracle import (
    LLMClient,
    OracleConfig,
    OracleError,
    ReflectionResult,
    llm_rank,
    reflect_parameters,
    render_ranking_prompt,
    describe_execution,
    scripted_rank,
)
from .ranking import (
    Ranking,
    all_pairs_dataset,
    build_preference_dataset,
    discrepancy_pairs,
    rank_by_reward,
)
from .rewards import ParamVector, RewardSpec, Trajectory
from .rl import (
    CEMConfig,
    IdAllocator,
    Policy,
    ReplayBuffer,
    histogram_sample,
    rollout,
    train_policy,
)
from .preference import returns_under

UPDATE_MODES = ("self-alignment", "fixed")

# seed-derivation tags, one stream per concern
_TAG_CEM, _TAG_ROLLOUT, _TAG_HIST, _TAG_ORACLE, _TAG_MH, _TAG_SHUFFLE, _TAG_EVAL = range(1, 8)

METRICS_HEADER = (
    "iteration,inconsistency_before,inconsistency_after,success_rate,accepted,adjustment_fired"
)


class LoopError(Exception):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    max_iterations: int = 40
    success_threshold: float = 0.5
    target_success: float = 0.9
    rollouts: int = 5
    histogram_samples: int = 5
    histogram_bins: int = 5
    beta: float = 0.9
    radii: tuple[float, ...] = (1.0, 3.0, 5.0, 10.0)
    mh: MHConfig = field(default_factory=MHConfig)
    cem: CEMConfig = field(default_factory=CEMConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    eval_episodes: int = 100
    buffer_capacity: int = 2400
    update_mode: str = "self-alignment"
    task_description: str = ""

    def __post_init__(self):
        if not (0.0 <= self.success_threshold <= 1.0 and 0.0 <= self.target_success <= 1.0):
            raise LoopError("success thresholds must lie in [0, 1]")
        if self.rollouts + self.histogram_samples < 2:
            raise LoopError("need at least two trajectories per batch to rank")
        if self.update_mode not in UPDATE_MODES:
            raise LoopError(f"unknown update mode '{self.update_mode}'")
        if self.max_iterations < 0:
            raise LoopError("max_iterations must be >= 0")


@dataclass
class IterationReport:
    index: int
    inconsistency_before: int
    inconsistency_after: int
    success_rate: float
    params_before: ParamVector
    params_after: ParamVector
    accepted: bool
    adjustment_fired: bool
    directions: dict[str, str] = field(default_factory=dict)
    transcripts: list[str] = field(default_factory=list)
    skipped: bool = False
    batch_ids: tuple[int, ...] = ()
    oracle_ranking: tuple[int, ...] = ()


@dataclass
class RunState:
    env: Environment
    spec: RewardSpec
    params: ParamVector
    policy: Policy
    buffer: ReplayBuffer
    ids: IdAllocator
    client: LLMClient | None = None
    transcript_sink: "TranscriptSink | None" = None
    eval_seeds: tuple[int, ...] = ()
    last_batch: list[Trajectory] = field(default_factory=list)


class TranscriptSink:
    """Numbered oracle transcript files inside a run directory."""

    def __init__(self, directory: Path | None):
        self.directory = directory
        self.counter = 0
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    def write(self, text: str) -> str:
        name = f"{self.counter:03d}.txt"
        if self.directory is not None:
            (self.directory / name).write_text(text)
        self.counter += 1
        return name


def _derive_seed(seed: int, tag: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, tag, iteration]).generate_state(1)[0])


def evaluate_success(env: Environment, policy: Policy, seeds: Sequence[int]) -> float:
    wins = 0
    for s in seeds:
        state = env.reset(int(s))
        for t in range(env.spec.horizon):
            state, _, done = env.step(state, policy.act(state), step_index=t)
            if done:
                wins += 1
                break
    return wins / len(seeds)


def init_run_state(
    env_name: str,
    spec: RewardSpec,
    config: AlignmentConfig,
    initial_params: ParamVector | None = None,
    transcript_dir: Path | None = None,
) -> RunState:
    env = make_env(env_name)
    spec.check_features_declared(env.spec.feature_names)
    params = initial_params if initial_params is not None else spec.default_params()
    spec.conforms(params)
    policy = Policy.zeros(env.spec.state_dim, env.spec.action_dim)
    client = None
    if config.oracle.backend == "llm-http":
        client = LLMClient(config.oracle)
    eval_seeds = tuple(
        int(s)
        for s in np.random.SeedSequence([config.seed, _TAG_EVAL]).generate_state(config.eval_episodes)
    )
    return RunState(
        env=env,
        spec=spec,
        params=params,
        policy=policy,
        buffer=ReplayBuffer(config.buffer_capacity),
        ids=IdAllocator(),
        client=client,
        transcript_sink=TranscriptSink(transcript_dir),
        eval_seeds=eval_seeds,
    )


def _oracle_rank(
    state: RunState, config: AlignmentConfig, batch: list[Trajectory], iteration: int
) -> tuple[Ranking, str]:
    if config.oracle.backend == "llm-http":
        ranking, reply = llm_rank(batch, state.spec, state.client)
        prompt = render_ranking_prompt(batch, state.spec)
        return ranking, f"{prompt}\n\n--- reply ---\n{reply}"
    rng = np.random.default_rng(_derive_seed(config.seed, _TAG_ORACLE, iteration))
    ranking = scripted_rank(batch, state.env.spec.stage_rules, config.oracle, rng=rng)
    lines = "\n".join(f"  - {d.text}" for d in describe_execution(batch))
    transcript = f"{lines}\n\nThe final result is:\n[{', '.join(str(i) for i in ranking.ids)}]"
    return ranking, transcript


def _reflect(
    state: RunState, config: AlignmentConfig, batch: list[Trajectory]
) -> tuple[ReflectionResult, str]:
    result = reflect_parameters(
        batch,
        state.spec,
        state.params,
        config.oracle,
        stage_rules=state.env.spec.stage_rules,
        hints=state.env.spec.reflection_hints,
        client=state.client,
        task_description=config.task_description or state.env.spec.name,
    )
    text = "Reflection directions:\n" + "\n".join(
        f"  {name}: {direction}" for name, direction in result.directions.items()
    )
    return result, text


def run_iteration(state: RunState, config: AlignmentConfig, iteration: int) -> IterationReport:
    """One pass of the outer loop; mutates the run state in place."""
    cem_cfg = replace(config.cem, seed=_derive_seed(config.seed, _TAG_CEM, iteration))
    state.policy = train_policy(
        state.env, state.spec, state.params, state.policy, cem_cfg, state.buffer, ids=state.ids
    )
    fresh = rollout(
        state.env, state.policy, config.rollouts,
        _derive_seed(config.seed, _TAG_ROLLOUT, iteration), ids=state.ids,
    )
    replayed = histogram_sample(
        state.buffer, state.spec, state.params, config.histogram_samples,
        config.histogram_bins, _derive_seed(config.seed, _TAG_HIST, iteration),
    ) if config.histogram_samples > 0 else []
    fresh_ids = {t.tid for t in fresh}
    batch = fresh + [t for t in replayed if t.tid not in fresh_ids]
    state.last_batch = batch
    success_rate = evaluate_success(state.env, state.policy, state.eval_seeds)

    params_before = state.params
    transcripts: list[str] = []
    rank_reward = rank_by_reward(batch, state.spec, params_before)
    # the oracle sees the batch in reward-rank order (Algorithm line order);
    # ties in its own scores then fall back to the presented order
    by_id = {t.tid: t for t in batch}
    oracle_batch = [by_id[tid] for tid in rank_reward.ids]
    try:
        rank_oracle, transcript = _oracle_rank(state, config, oracle_batch, iteration)
    except OracleError as err:
        transcripts.append(state.transcript_sink.write(f"oracle failure: {err}"))
        return IterationReport(
            index=iteration, inconsistency_before=-1, inconsistency_after=-1,
            success_rate=success_rate, params_before=params_before,
            params_after=params_before, accepted=False, adjustment_fired=False,
            transcripts=transcripts, skipped=True,
        )
    transcripts.append(state.transcript_sink.write(transcript))

    disc_before = len(discrepancy_pairs(rank_reward, rank_oracle))
    dataset = build_preference_dataset(
        rank_reward, rank_oracle, batch, config.beta,
        _derive_seed(config.seed, _TAG_SHUFFLE, iteration),
    )

    accepted = False
    adjustment_fired = False
    directions: dict[str, str] = {}
    params_after = params_before
    mh_cfg = replace(config.mh, seed=_derive_seed(config.seed, _TAG_MH, iteration))

    if config.update_mode == "self-alignment":
        if len(dataset) > 0:
            cand = radius_constrained_update(
                params_before, dataset, state.spec, config.radii, mh_cfg, rank_oracle
            )
            if cand.discrepancy_after < disc_before:
                accepted = True
                params_after = cand.params
        elif success_rate < config.success_threshold:
            adjustment_fired = True
            try:
                reflection, text = _reflect(state, config, batch)
            except OracleError as err:
                transcripts.append(state.transcript_sink.write(f"oracle failure: {err}"))
                return IterationReport(
                    index=iteration, inconsistency_before=disc_before,
                    inconsistency_after=disc_before, success_rate=success_rate,
                    params_before=params_before, params_after=params_before,
                    accepted=False, adjustment_fired=True, transcripts=transcripts,
                    skipped=True, batch_ids=tuple(t.tid for t in batch),
                    oracle_ranking=rank_oracle.ids,
                )
            transcripts.append(state.transcript_sink.write(text))
            directions = dict(reflection.directions)
            overrides = {}
            for name, direction in reflection.changed().items():
                idx = params_before.names.index(name)
                dom = params_before.domains[idx]
                value = params_before.values[idx]
                if direction == "increase":
                    overrides[name] = dom.restricted_above(value)
                else:
                    overrides[name] = dom.restricted_below(value)
            if overrides:
                adj_dataset = all_pairs_dataset(rank_oracle, batch, config.beta)
                cand = radius_constrained_update(
                    params_before, adj_dataset, state.spec, config.radii, mh_cfg,
                    rank_oracle, domains=overrides, sample_candidates=False,
                )
                moved = cand.params.values != params_before.values
                if moved and cand.discrepancy_after == 0:
                    accepted = True
                    params_after = cand.params
                    for name, direction in reflection.changed().items():
                        before_v = params_before[name]
                        after_v = params_after[name]
                        if direction == "increase":
                            assert after_v > before_v
                        else:
                            assert after_v < before_v

    state.params = params_after
    # active domains never leak out of the restricted search
    assert all(
        d.active_lo == d.lo and d.active_hi == d.hi for d in state.params.domains
    )
    disc_after = (
        len(discrepancy_pairs(rank_by_reward(batch, state.spec, params_after), rank_oracle))
        if accepted
        else disc_before
    )
    if accepted:
        assert disc_after <= disc_before
    return IterationReport(
        index=iteration,
        inconsistency_before=disc_before,
        inconsistency_after=disc_after,
        success_rate=success_rate,
        params_before=params_before,
        params_after=params_after,
        accepted=accepted,
        adjustment_fired=adjustment_fired,
        directions=directions,
        transcripts=transcripts,
        batch_ids=tuple(t.tid for t in batch),
        oracle_ranking=rank_oracle.ids,
    )


def _write_batch_files(
    run_dir: Path, iteration: int, batch: list[Trajectory], report: IterationReport,
    spec: RewardSpec, params_before: ParamVector,
) -> None:
    bdir = run_dir / "batches"
    bdir.mkdir(exist_ok=True)
    lines = []
    for traj in batch:
        lines.append(json.dumps({"traj": traj.tid, "success": traj.success, "horizon": traj.horizon}))
        for t in range(traj.horizon):
            lines.append(
                json.dumps(
                    {
                        "traj": traj.tid,
                        "step": t,
                        "state": list(traj.states[t]),
                        "action": list(traj.actions[t]),
                        "features": dict(traj.features[t].values),
                    }
                )
            )
    (bdir / f"iter_{iteration:03d}.jsonl").write_text("\n".join(lines) + "\n")
    returns = returns_under(params_before, spec, batch)
    meta = {
        "ids": [t.tid for t in batch],
        "oracle_ranking": list(report.oracle_ranking),
        "returns_before": {str(t.tid): r for t, r in zip(batch, returns)},
    }
    (bdir / f"iter_{iteration:03d}.meta.json").write_text(json.dumps(meta, indent=1))


@dataclass
class RunResult:
    run_dir: Path
    reports: list[IterationReport]
    summary: dict


def run_experiment(
    env_name: str,
    spec: RewardSpec,
    config: AlignmentConfig,
    out_dir: str | Path,
    initial_params: ParamVector | None = None,
    label: str | None = None,
    config_snapshot: str | None = None,
) -> RunResult:
    """Run iterations until the target success rate or the iteration budget.

    Writes metrics.csv, params.csv, batch logs, oracle transcripts and
    summary.json into `out_dir`. With identical config and seed the metric
    and parameter files are byte-identical across executions.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if config_snapshot is not None:
        (run_dir / "config.toml").write_text(config_snapshot)
    state = init_run_state(
        env_name, spec, config, initial_params, transcript_dir=run_dir / "oracle"
    )

    t0 = time.monotonic()
    reports: list[IterationReport] = []
    metrics_rows = [METRICS_HEADER]
    params_rows = ["iteration," + ",".join(state.params.names)]

    def params_row(i: int, params: ParamVector) -> str:
        return f"{i}," + ",".join(repr(v) for v in params.values)

    final_success = evaluate_success(
        state.env, state.policy, state.eval_seeds
    ) if config.max_iterations == 0 else 0.0
    terminated_by = "max_iterations"
    for i in range(config.max_iterations):
        params_rows.append(params_row(i, state.params))
        report = run_iteration(state, config, i)
        reports.append(report)
        metrics_rows.append(
            f"{report.index},{report.inconsistency_before},{report.inconsistency_after},"
            f"{report.success_rate!r},{int(report.accepted)},{int(report.adjustment_fired)}"
        )
        if not report.skipped:
            _write_batch_files(run_dir, i, state.last_batch, report, state.spec, report.params_before)
        final_success = report.success_rate
        if report.success_rate >= config.target_success:
            terminated_by = "target_success"
            params_rows.append(params_row(i + 1, state.params))
            break
    else:
        params_rows.append(params_row(config.max_iterations, state.params))

    (run_dir / "metrics.csv").write_text("\n".join(metrics_rows) + "\n")
    (run_dir / "params.csv").write_text("\n".join(params_rows) + "\n")
    summary = {
        "label": label or config.update_mode,
        "env": env_name,
        "reward_spec": spec.name,
        "seed": config.seed,
        "iterations": len(reports),
        "final_success_rate": final_success,
        "terminated_by": terminated_by,
        "n_tokens": state.client.n_tokens if state.client else 0,
        "wall_time_s": time.monotonic() - t0,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return RunResult(run_dir, reports, summary)
