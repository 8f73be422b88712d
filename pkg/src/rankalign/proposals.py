"""Reward-proposal prompts and structured-reply validation.

The proposal pipeline asks a language model for a structured reward block in
the reward-spec file format (never executable code). Rendering substitutes
the environment's observation schema and the task phrase; parsing extracts
the block from a reply and validates it into a RewardSpec, reporting every
violation at once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .envs import EnvSpec
from .oracle import load_template
from .rewards import RewardSpec, SpecValidationError, spec_from_dict


class ProposalError(Exception):
    """Validation report for a rejected proposal reply."""

    def __init__(self, problems: Iterable[str]):
        self.problems = list(problems)
        super().__init__("proposal rejected:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class ProposalTemplates:
    background: str
    task: str

    @classmethod
    def shipped(cls) -> "ProposalTemplates":
        return cls(load_template("background"), load_template("reward_request"))


def render_proposal_prompt(
    env_spec: EnvSpec,
    task_description: str,
    templates: ProposalTemplates | None = None,
) -> str:
    """Background plus task prompt with the environment's observations filled in."""
    if not env_spec.features:
        raise ProposalError([f"environment '{env_spec.name}' declares no observations"])
    templates = templates or ProposalTemplates.shipped()
    obs_lines = "\n".join(
        f"{i + 1}. obs['{f.name}']: {f.description};"
        for i, f in enumerate(env_spec.features)
    )
    background = templates.background.format(observations=obs_lines)
    task = templates.task.format(task_description=task_description)
    return background + "\n" + task


_FENCE_RE = re.compile(r"```(?:toml)?\s*\n(.*?)```", re.DOTALL)


def extract_block(reply: str) -> str:
    """The structured block: last fenced code block, else from the first
    [parameters...] line onward."""
    fences = _FENCE_RE.findall(reply)
    if fences:
        return fences[-1]
    m = re.search(r"^\s*(?:name\s*=|\[parameters)", reply, re.MULTILINE)
    if m:
        return reply[m.start() :]
    raise ProposalError(["reply contains no structured reward block"])


def parse_proposal(reply: str, feature_schema: Iterable[str] | None = None) -> RewardSpec:
    """Validate a proposal reply into a RewardSpec.

    Checks the term naming rule, finite parameter domains, weight-parameter
    references and, when a schema is given, that every referenced feature is
    a declared observation. All problems are reported together.
    """
    if not reply.strip():
        raise ProposalError(["empty reply"])
    block = extract_block(reply)
    try:
        data = tomllib.loads(block)
    except tomllib.TOMLDecodeError as err:
        raise ProposalError([f"structured block is not valid TOML: {err}"]) from None
    try:
        spec = spec_from_dict(data, name=str(data.get("name", "proposal")))
    except SpecValidationError as err:
        raise ProposalError(err.problems) from None
    if feature_schema is not None:
        declared = set(feature_schema)
        unknown = [f for f in spec.feature_names if f not in declared]
        if unknown:
            raise ProposalError(
                [f"feature '{f}' is not a declared observation" for f in unknown]
            )
    return spec
