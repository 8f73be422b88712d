"""Pairwise preference likelihood and log-posterior over trajectory returns.

The probability that trajectory i beats trajectory j is a logistic in the
scaled return difference beta * (r_i - r_j); the posterior combines the
pair log-likelihoods with a uniform box prior over the parameter domains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .rewards import ParamVector, RewardSpec, Trajectory, base_matrix

PAIR_SOURCES = ("discrepant", "agreed")


class PreferenceError(Exception):
    pass


@dataclass(frozen=True)
class PreferencePair:
    preferred: int
    dispreferred: int
    source: str = "discrepant"

    def __post_init__(self):
        if self.preferred == self.dispreferred:
            raise PreferenceError("a pair must relate two distinct trajectories")
        if self.source not in PAIR_SOURCES:
            raise PreferenceError(f"unknown pair source '{self.source}'")


@dataclass(frozen=True)
class PreferenceDataset:
    """Oriented preference pairs plus the trajectories they reference."""

    pairs: tuple[PreferencePair, ...]
    trajectories: Mapping[int, Trajectory]
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise PreferenceError("rationality coefficient beta must be >= 0")
        for p in self.pairs:
            if p.preferred not in self.trajectories or p.dispreferred not in self.trajectories:
                raise PreferenceError(
                    f"pair ({p.preferred}, {p.dispreferred}) references a trajectory "
                    "missing from the table"
                )

    def __len__(self) -> int:
        return len(self.pairs)


def pairwise_likelihood(return_i: float, return_j: float, beta: float) -> float:
    """P(i beats j) = exp(b*r_i) / (exp(b*r_i) + exp(b*r_j)).

    Computed as a logistic of beta * (r_i - r_j). The losing side is derived
    as the exact float complement of the winning side, so
    pairwise_likelihood(a, b) + pairwise_likelihood(b, a) == 1.0 exactly.
    """
    if beta < 0:
        raise PreferenceError("beta must be >= 0")
    for r in (return_i, return_j):
        if not math.isfinite(r):
            raise PreferenceError(f"returns must be finite, got {r!r}")
    x = beta * (return_i - return_j)
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    return 1.0 - pairwise_likelihood(return_j, return_i, beta)


def log_pairwise_likelihood(return_i: float, return_j: float, beta: float) -> float:
    """log of pairwise_likelihood, stable for |beta * (r_i - r_j)| up to ~700+."""
    x = beta * (return_i - return_j)
    return -float(np.logaddexp(0.0, -x))


def pair_logit_matrix(dataset: PreferenceDataset, spec: RewardSpec) -> np.ndarray:
    """One row per pair: term base sums of the preferred minus the dispreferred.

    Row r dotted with the weight vector gives (return_pref - return_disp), so
    repeated posterior evaluations reduce to a matrix-vector product.
    """
    ids = sorted(dataset.trajectories)
    pos = {tid: i for i, tid in enumerate(ids)}
    bases = base_matrix(spec, [dataset.trajectories[tid] for tid in ids])
    rows = np.zeros((len(dataset.pairs), bases.shape[1]))
    for r, pair in enumerate(dataset.pairs):
        rows[r] = bases[pos[pair.preferred]] - bases[pos[pair.dispreferred]]
    return rows


def log_likelihood_from_logits(diff_rows: np.ndarray, weights: np.ndarray, beta: float) -> float:
    if diff_rows.shape[0] == 0:
        return 0.0
    x = beta * (diff_rows @ weights)
    return float(-np.logaddexp(0.0, -x).sum())


def log_posterior(
    params: ParamVector,
    dataset: PreferenceDataset,
    spec: RewardSpec,
    domains: Mapping | None = None,
) -> float:
    """Sum of pair log-likelihoods plus the uniform-box log-prior.

    The prior contributes 0 inside the active domains and -inf outside; its
    normalizing constant is dropped (argmax-invariant). Optional `domains`
    override individual active windows (used by restricted searches).
    """
    spec.conforms(params)
    for name, value, dom in zip(params.names, params.values, params.domains):
        if domains is not None and name in domains:
            dom = domains[name]
        if not dom.contains(value, active=True):
            return -math.inf
    diff = pair_logit_matrix(dataset, spec)
    w = np.asarray(params.values, dtype=float)
    return log_likelihood_from_logits(diff, w, dataset.beta)


def returns_under(
    params: ParamVector, spec: RewardSpec, trajectories: Sequence[Trajectory]
) -> list[float]:
    """Trajectory returns via the base-sum path (linear in the weights)."""
    bases = base_matrix(spec, trajectories)
    w = np.asarray(params.values, dtype=float)
    return [float(v) for v in bases @ w]
