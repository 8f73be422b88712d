"""Posterior sampling over reward parameters and discrepancy-guided updates.

A random-walk Metropolis chain runs in normalized [0, 1] coordinates with
isotropic Gaussian proposals clipped to the unit cube; the box prior (and any
temporary domain restriction or distance ball) enters as -inf log-posterior.
The candidate search runs one chain per allowed distance radius in parallel,
scores each chain's best state by the ranking discrepancy it leaves behind,
and keeps the current parameters unless a candidate does at least as well.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .preference import PreferenceDataset, log_likelihood_from_logits, pair_logit_matrix
from .ranking import Ranking, discrepancy_pairs, rank_by_reward
from .rewards import ParamDomain, ParamVector, RewardSpec, denormalize, normalize


class InferenceError(Exception):
    pass


@dataclass(frozen=True)
class MHConfig:
    burn_in: int = 200
    n_samples: int = 100
    proposal_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0:
            raise InferenceError("burn_in must be >= 0")
        if self.n_samples < 1:
            raise InferenceError("n_samples must be >= 1")
        if self.proposal_sigma <= 0:
            raise InferenceError("proposal_sigma must be > 0")


@dataclass(frozen=True)
class PosteriorResult:
    samples: tuple[ParamVector, ...]
    map_estimate: ParamVector
    map_log_posterior: float
    acceptance_rate: float


@dataclass(frozen=True)
class CandidateUpdate:
    params: ParamVector
    radius: float
    discrepancy_after: int
    distance_to_current: float

    def __post_init__(self):
        if self.distance_to_current > self.radius + 1e-9:
            raise InferenceError(
                f"candidate at distance {self.distance_to_current} exceeds radius {self.radius}"
            )


class _LogPosterior:
    """Log-posterior over normalized coordinates with optional constraints."""

    def __init__(
        self,
        dataset: PreferenceDataset,
        spec: RewardSpec,
        template: ParamVector,
        domains: Mapping[str, ParamDomain] | None = None,
        center: ParamVector | None = None,
        radius: float | None = None,
    ):
        spec.conforms(template)
        self.beta = dataset.beta
        self.diff = pair_logit_matrix(dataset, spec)
        self.template = template
        self.lo = np.array([d.lo for d in template.domains])
        self.span = np.array([d.span for d in template.domains])
        act = []
        for name, dom in zip(template.names, template.domains):
            if domains is not None and name in domains:
                dom = domains[name]
            act.append((dom.active_lo, dom.active_hi))
        self.active_lo = np.array([a for a, _ in act])
        self.active_hi = np.array([b for _, b in act])
        self.center = np.asarray(center.values, dtype=float) if center is not None else None
        self.radius = radius

    def raw(self, unit: np.ndarray) -> np.ndarray:
        return self.lo + unit * self.span

    def __call__(self, unit: np.ndarray) -> float:
        w = self.raw(unit)
        if np.any(w < self.active_lo) or np.any(w > self.active_hi):
            return -math.inf
        if self.center is not None and np.linalg.norm(w - self.center) > self.radius:
            return -math.inf
        return log_likelihood_from_logits(self.diff, w, self.beta)


def mh_chain(
    dataset: PreferenceDataset,
    spec: RewardSpec,
    init: ParamVector,
    config: MHConfig,
    domains: Mapping[str, ParamDomain] | None = None,
    center: ParamVector | None = None,
    radius: float | None = None,
) -> PosteriorResult:
    """Random-walk Metropolis from `init`, fully deterministic given the seed.

    Proposals are clipped component-wise to the unit cube; every visited
    state therefore stays in [0, 1]^d normalized. The reported MAP is the
    best state the chain visited, burn-in included. `domains`, `center` and
    `radius` add optional support constraints for restricted searches.
    """
    posterior = _LogPosterior(dataset, spec, init, domains, center, radius)
    z = normalize(init)
    lp = posterior(z)
    if lp == -math.inf:
        raise InferenceError("initial parameters have zero posterior support")
    rng = np.random.default_rng(config.seed)
    best_z, best_lp = z.copy(), lp
    samples: list[np.ndarray] = []
    accepted = 0
    total = config.burn_in + config.n_samples
    for step in range(total):
        raw = z + rng.normal(0.0, config.proposal_sigma, size=z.size)
        # unit-cube exits are rejected like ball exits (clip-projection makes
        # the faces sticky and parks plateau walks on degenerate corners)
        out_of_cube = bool(np.any(raw < 0.0) or np.any(raw > 1.0))
        proposal = np.clip(raw, 0.0, 1.0)
        lp_prop = -math.inf if out_of_cube else posterior(proposal)
        u = rng.uniform()
        if math.log(max(u, 1e-300)) < lp_prop - lp:
            z, lp = proposal, lp_prop
            accepted += 1
            # ties move to the newest state so plateau posteriors return a
            # representative feasible point instead of the start
            if lp >= best_lp:
                best_z, best_lp = z.copy(), lp
        assert np.all(z >= 0.0) and np.all(z <= 1.0)
        if step >= config.burn_in:
            samples.append(z.copy())
    return PosteriorResult(
        samples=tuple(denormalize(init, s) for s in samples),
        map_estimate=denormalize(init, best_z),
        map_log_posterior=best_lp,
        acceptance_rate=accepted / total,
    )


def batch_discrepancy(
    params: ParamVector,
    spec: RewardSpec,
    dataset: PreferenceDataset,
    oracle_ranking: Ranking,
) -> int:
    """Discordant pairs between the params-induced ranking and the oracle's."""
    batch = [dataset.trajectories[tid] for tid in oracle_ranking.ids]
    induced = rank_by_reward(batch, spec, params)
    return len(discrepancy_pairs(induced, oracle_ranking))


class _BatchScorer:
    """Counts ranking discrepancy for many parameter vectors against one
    oracle-ranked batch, reusing the per-trajectory term base sums."""

    def __init__(self, spec: RewardSpec, dataset: PreferenceDataset, oracle_ranking: Ranking):
        from .rewards import base_matrix

        batch = [dataset.trajectories[tid] for tid in oracle_ranking.ids]
        self.ids = [t.tid for t in batch]
        self.bases = base_matrix(spec, batch)
        pos = {tid: k for k, tid in enumerate(oracle_ranking.ids)}
        self.oracle_pos = [pos[tid] for tid in self.ids]

    def discrepancy(self, params: ParamVector) -> int:
        returns = self.bases @ np.asarray(params.values)
        # reward order: descending return, ties by ascending id
        order = sorted(range(len(self.ids)), key=lambda k: (-returns[k], self.ids[k]))
        reward_pos = [0] * len(self.ids)
        for p, k in enumerate(order):
            reward_pos[k] = p
        count = 0
        for i in range(len(self.ids)):
            for j in range(i + 1, len(self.ids)):
                if (reward_pos[i] < reward_pos[j]) != (self.oracle_pos[i] < self.oracle_pos[j]):
                    count += 1
        return count


def _nudge_into(params: ParamVector, domains: Mapping[str, ParamDomain] | None) -> ParamVector:
    """Project values into restricted active windows (restriction excludes the
    current value, so the chain needs a start just inside the window)."""
    if not domains:
        return params
    values = list(params.values)
    for i, name in enumerate(params.names):
        dom = domains.get(name)
        if dom is None:
            continue
        values[i] = min(max(values[i], dom.active_lo), dom.active_hi)
    return params.with_values(values)


def radius_constrained_update(
    current: ParamVector,
    dataset: PreferenceDataset,
    spec: RewardSpec,
    radii: Sequence[float],
    config: MHConfig,
    oracle_ranking: Ranking,
    domains: Mapping[str, ParamDomain] | None = None,
    sample_candidates: bool = True,
) -> CandidateUpdate:
    """Search one posterior chain per radius and keep the best candidate.

    Each chain is confined to the ball of its radius around the current
    values (raw parameter units) intersected with the active domains.
    Candidates (each chain's best state plus, by default, its retained
    samples) are scored by the discrepancy they leave on the oracle-ranked
    batch; the largest reduction wins and ties go to the candidate nearest
    the current values. The current values compete as a zero-distance
    candidate whenever they remain inside the (possibly restricted) domains,
    so the update never returns anything that increases the discrepancy.

    `sample_candidates=False` restricts the pool to the chain MAPs; the
    direction-restricted adjustment search uses this, where every feasible
    point already scores zero discrepancy and nearest-tie selection over
    samples would collapse the move to an epsilon.
    """
    if not radii or any(r <= 0 for r in radii):
        raise InferenceError("radii must be a nonempty list of positive distances")
    disc_before = batch_discrepancy(current, spec, dataset, oracle_ranking)
    init = _nudge_into(current, domains)
    chain_seeds = [int(s) for s in np.random.SeedSequence(config.seed).generate_state(len(radii))]
    # scale proposals to the ball: a step of 0.2 normalized can dwarf a small
    # radius and stall that chain on rejections
    span_norm = math.sqrt(sum(d.span**2 for d in current.domains))

    def run_chain(idx: int) -> PosteriorResult:
        sigma = min(config.proposal_sigma, radii[idx] / (2.0 * span_norm))
        cfg = MHConfig(config.burn_in, config.n_samples, sigma, chain_seeds[idx])
        return mh_chain(
            dataset, spec, init, cfg, domains=domains, center=current, radius=radii[idx]
        )

    with ThreadPoolExecutor(max_workers=len(radii)) as pool:
        results = list(pool.map(run_chain, range(len(radii))))

    current_feasible = all(
        domains.get(name, dom).contains(val)
        for name, val, dom in zip(current.names, current.values, current.domains)
    ) if domains else True
    # current goes first so exact ties resolve to "no change"
    candidates: list[CandidateUpdate] = []
    if current_feasible:
        candidates.append(CandidateUpdate(current, 0.0, disc_before, 0.0))
    scorer = _BatchScorer(spec, dataset, oracle_ranking)
    for r, res in zip(radii, results):
        pool_params = [res.map_estimate]
        if sample_candidates:
            seen = {tuple(res.map_estimate.values)}
            for s in res.samples:
                key = tuple(s.values)
                if key not in seen:
                    seen.add(key)
                    pool_params.append(s)
        for cand in pool_params:
            candidates.append(
                CandidateUpdate(cand, float(r), scorer.discrepancy(cand), current.distance_to(cand))
            )

    best = min(candidates, key=lambda c: (c.discrepancy_after, c.distance_to_current))
    if best.discrepancy_after > disc_before:
        return CandidateUpdate(current, 0.0, disc_before, 0.0)
    return best
