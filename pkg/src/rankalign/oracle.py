"""Ranking and reflection oracles over execution descriptions.

Two backends share one contract. The scripted backend clusters executions by
task stage, ranks within each stage by the stage score, and optionally
perturbs the result with Boltzmann adjacent swaps, reproducing the way a
language-model ranker stumbles on subtle numerical differences. The HTTP
backend sends the shipped prompt templates to a chat-completions endpoint,
parses the bracketed list on the reply's final line, and accounts every
prompt and completion token it consumes.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import httpx
import numpy as np

from .envs import StageRule, stage_of
from .ranking import Ranking
from .rewards import FeatureRecord, ParamVector, RewardSpec, Trajectory, spec_to_toml

DIRECTIONS = ("increase", "decrease", "no-change")

SWAP_MODELS = ("none", "boltzmann-adjacent")


class OracleError(Exception):
    pass


class ReplyParseError(OracleError):
    """The oracle reply could not be parsed; carries the raw reply text."""

    def __init__(self, message: str, reply: str):
        self.reply = reply
        super().__init__(f"{message}\n--- raw reply ---\n{reply}")


@dataclass(frozen=True)
class ExecutionDescription:
    index: int
    text: str


@dataclass(frozen=True)
class OracleConfig:
    backend: str = "scripted"
    noise_beta: float = 0.9
    swap_model: str = "none"
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "RANKALIGN_API_KEY"
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.backend not in ("scripted", "llm-http"):
            raise OracleError(f"unknown oracle backend '{self.backend}'")
        if self.noise_beta < 0:
            raise OracleError("noise beta must be >= 0")
        if self.swap_model not in SWAP_MODELS:
            raise OracleError(f"unknown swap model '{self.swap_model}'")


@dataclass(frozen=True)
class ReflectionResult:
    """Per-parameter adjustment directions; values from replies are discarded."""

    directions: Mapping[str, str]

    def __post_init__(self):
        for name, d in self.directions.items():
            if d not in DIRECTIONS:
                raise OracleError(f"unknown direction '{d}' for parameter '{name}'")

    def changed(self) -> dict[str, str]:
        return {k: v for k, v in self.directions.items() if v != "no-change"}


def _format_value(value) -> str:
    if value is None:
        return "None"
    if isinstance(value, bool):
        return "True" if value else "False"
    return f"{float(value):.4f}"


def describe_execution(batch: Sequence[Trajectory]) -> list[ExecutionDescription]:
    """One line per trajectory from its last step, in batch order.

    Line format: "data sample {k}: {name} = {value}, ..." with fixed 4-decimal
    reals, True/False booleans and None for absent values.
    """
    out = []
    for k, traj in enumerate(batch):
        rec = traj.last_features
        if not rec.values:
            raise OracleError(f"trajectory {traj.tid} has an empty feature record")
        parts = ", ".join(f"{name} = {_format_value(v)}" for name, v in rec.values.items())
        out.append(ExecutionDescription(k, f"data sample {k}: {parts}."))
    return out


def load_template(name: str) -> str:
    return resources.files("rankalign.templates").joinpath(f"{name}.txt").read_text()


def render_ranking_prompt(batch: Sequence[Trajectory], spec: RewardSpec) -> str:
    lines = "\n".join(f"  - {d.text}" for d in describe_execution(batch))
    return load_template("ranking").format(
        reward_function=spec_to_toml(spec), descriptions=lines
    )


def render_reflection_prompt(
    batch: Sequence[Trajectory], spec: RewardSpec, task_description: str
) -> str:
    lines = "\n".join(f"  - {d.text}" for d in describe_execution(batch))
    return load_template("reflection").format(
        task_description=task_description,
        reward_function=spec_to_toml(spec),
        descriptions=lines,
    )


# ---------------------------------------------------------------------------
# Scripted backend


def scripted_rank(
    batch: Sequence[Trajectory],
    stage_rules: Sequence[StageRule],
    config: OracleConfig,
    rng: np.random.Generator | None = None,
) -> Ranking:
    """Cluster by stage (later stages first), sort within stages by the stage
    score, then run one seeded adjacent-swap noise pass.

    Scores are compared at the 4-decimal resolution of the execution
    descriptions (the oracle's whole information set); executions that tie at
    that resolution keep their presented order, the way a language-model
    ranker anchors on indistinguishable samples.

    A swap between neighbours with within-stage score gap d happens with
    probability 1 - logistic(beta * |d|): certainty swaps nothing, equal
    scores are a coin flip. Neighbours from different stages never swap
    (stage membership is treated as unambiguous, so mistakes concentrate on
    close calls within a stage).
    """
    if not batch:
        raise OracleError("cannot rank an empty batch")
    entries = []
    for traj in batch:
        rule = stage_of(stage_rules, traj.last_features)
        score = round(float(traj.last_features.values[rule.score_feature]), 4)
        key = score if not rule.higher_is_better else -score
        entries.append((traj.tid, rule.index, score, key))
    entries.sort(key=lambda e: (-e[1], e[3]))

    if config.swap_model == "boltzmann-adjacent":
        if rng is None:
            rng = np.random.default_rng(config.seed)
        for i in range(len(entries) - 1):
            a, b = entries[i], entries[i + 1]
            if a[1] != b[1]:
                continue
            gap = abs(a[2] - b[2])
            p_swap = 1.0 - 1.0 / (1.0 + math.exp(-config.noise_beta * gap))
            if rng.uniform() < p_swap:
                entries[i], entries[i + 1] = b, a
    return Ranking(tuple(e[0] for e in entries), provenance="oracle")


def scripted_reflect(
    batch: Sequence[Trajectory],
    spec: RewardSpec,
    stage_rules: Sequence[StageRule],
    hints: Mapping[int, Mapping[str, str]],
) -> ReflectionResult:
    """Deterministic reflection stand-in keyed on the furthest stage reached.

    Looks up the environment's hint table for that stage and keeps only
    directions that name parameters of the active spec.
    """
    if not batch:
        raise OracleError("cannot reflect on an empty batch")
    furthest = max(stage_of(stage_rules, t.last_features).index for t in batch)
    table = hints.get(furthest, {})
    known = set(spec.param_names)
    return ReflectionResult({k: v for k, v in table.items() if k in known})


# ---------------------------------------------------------------------------
# HTTP (chat-completions) backend

FINAL_LIST_RE = re.compile(r"^\[\s*(?:\d+\s*(?:,\s*\d+\s*)*)?\]$")


def parse_final_list(reply: str) -> list[int]:
    """Parse the bracketed integer list that must be the reply's last line."""
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    if not lines:
        raise ReplyParseError("empty reply", reply)
    last = lines[-1]
    if not FINAL_LIST_RE.match(last):
        raise ReplyParseError(f"last line {last!r} is not a bracketed integer list", reply)
    inner = last.strip("[]").strip()
    return [int(x) for x in inner.split(",")] if inner else []


DICT_ENTRY_RE = re.compile(r"['\"]([A-Za-z_][A-Za-z0-9_]*)['\"]\s*:")


def parse_reflection_reply(reply: str, spec: RewardSpec) -> ReflectionResult:
    """Extract the final dictionary literal and map per-entry comments to
    directions. Values are ignored; only increase/decrease/no change count."""
    start = reply.rfind("{")
    if start == -1:
        raise ReplyParseError("no dictionary literal in reply", reply)
    end = reply.find("}", start)
    if end == -1:
        region = reply[start:]
    else:
        # comments may trail the closing brace on its line
        tail = reply[end + 1 :].splitlines()
        region = reply[start : end + 1] + (tail[0] if tail else "")
    directions: dict[str, str] = {}
    known = set(spec.param_names)
    for line in region.splitlines():
        m = DICT_ENTRY_RE.search(line)
        if not m:
            continue
        name = m.group(1)
        if name not in known:
            raise OracleError(f"reflection reply names unknown parameter '{name}'")
        comment = line.partition("#")[2].lower()
        if "no change" in comment or "no-change" in comment:
            directions[name] = "no-change"
        elif "increase" in comment:
            directions[name] = "increase"
        elif "decrease" in comment:
            directions[name] = "decrease"
        else:
            directions[name] = "no-change"
    if not directions:
        raise ReplyParseError("dictionary literal contained no parameter entries", reply)
    return ReflectionResult(directions)


class LLMClient:
    """Minimal chat-completions client with cumulative token accounting."""

    def __init__(self, config: OracleConfig):
        if not config.endpoint:
            raise OracleError("llm-http backend requires an endpoint URL")
        self.config = config
        self.n_tokens = 0
        self.calls = 0

    def chat(self, system: str, user: str) -> str:
        headers = {}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        }
        try:
            response = httpx.post(
                self.config.endpoint, json=payload, headers=headers,
                timeout=self.config.timeout_s,
            )
            response.raise_for_status()
        except httpx.HTTPError as err:
            raise OracleError(f"oracle transport failure: {err}") from err
        data = response.json()
        usage = data.get("usage", {})
        self.n_tokens += int(usage.get("prompt_tokens", 0)) + int(usage.get("completion_tokens", 0))
        self.calls += 1
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as err:
            raise OracleError(f"malformed completion payload: {data!r}") from err


def llm_rank(
    batch: Sequence[Trajectory],
    spec: RewardSpec,
    client: LLMClient,
    system_prompt: str = "",
) -> tuple[Ranking, str]:
    """Rank via the HTTP backend. Retries a non-parsable reply once, then
    fails carrying the raw reply. Returns the ranking and the reply text."""
    prompt = render_ranking_prompt(batch, spec)
    last_err: ReplyParseError | None = None
    reply = ""
    for _ in range(2):
        reply = client.chat(system_prompt, prompt)
        try:
            positions = parse_final_list(reply)
            if sorted(positions) != list(range(len(batch))):
                raise OracleError(
                    f"reply list {positions} is not a permutation of sample indices "
                    f"0..{len(batch) - 1}"
                )
            ids = tuple(batch[p].tid for p in positions)
            return Ranking(ids, provenance="oracle"), reply
        except ReplyParseError as err:
            last_err = err
    raise last_err


def llm_reflect(
    batch: Sequence[Trajectory],
    spec: RewardSpec,
    client: LLMClient,
    task_description: str,
    system_prompt: str = "",
) -> tuple[ReflectionResult, str]:
    prompt = render_reflection_prompt(batch, spec, task_description)
    last_err: ReplyParseError | None = None
    for _ in range(2):
        reply = client.chat(system_prompt, prompt)
        try:
            return parse_reflection_reply(reply, spec), reply
        except ReplyParseError as err:
            last_err = err
    raise last_err


def reflect_parameters(
    batch: Sequence[Trajectory],
    spec: RewardSpec,
    params: ParamVector,
    config: OracleConfig,
    stage_rules: Sequence[StageRule] = (),
    hints: Mapping[int, Mapping[str, str]] | None = None,
    client: LLMClient | None = None,
    task_description: str = "",
) -> ReflectionResult:
    """Dispatch reflection to the configured backend."""
    if config.backend == "scripted":
        return scripted_reflect(batch, spec, stage_rules, hints or {})
    if client is None:
        raise OracleError("llm-http reflection needs a client")
    result, _ = llm_reflect(batch, spec, client, task_description)
    return result
