"""Rankings, ranking discrepancy, and preference-dataset assembly.

Discrepancy between two rankings over the same trajectories is the set of
Kendall discordant pairs: unordered pairs whose relative order differs.
The preference dataset pairs every discordant pair with an equal number of
randomly drawn concordant ones, all oriented by the oracle ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .preference import PreferenceDataset, PreferencePair
from .rewards import ParamVector, RewardSpec, Trajectory
from .preference import returns_under

PROVENANCES = ("reward", "oracle")


class RankingError(Exception):
    pass


@dataclass(frozen=True)
class Ranking:
    """Trajectory ids, most preferred first."""

    ids: tuple[int, ...]
    provenance: str = "reward"

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise RankingError(f"ranking contains duplicate ids: {self.ids}")
        if self.provenance not in PROVENANCES:
            raise RankingError(f"unknown provenance '{self.provenance}'")

    def __len__(self) -> int:
        return len(self.ids)

    def position(self) -> dict[int, int]:
        return {tid: i for i, tid in enumerate(self.ids)}


def rank_by_reward(
    batch: Sequence[Trajectory], spec: RewardSpec, params: ParamVector
) -> Ranking:
    """Sort by descending return; equal returns break by ascending id."""
    if not batch:
        raise RankingError("cannot rank an empty batch")
    returns = returns_under(params, spec, batch)
    order = sorted(zip(batch, returns), key=lambda tr: (-tr[1], tr[0].tid))
    return Ranking(tuple(t.tid for t, _ in order), provenance="reward")


def discrepancy_pairs(rank_a: Ranking, rank_b: Ranking) -> set[tuple[int, int]]:
    """Unordered id pairs whose relative order differs between the rankings."""
    if set(rank_a.ids) != set(rank_b.ids):
        raise RankingError(
            f"rankings cover different id sets: {sorted(rank_a.ids)} vs {sorted(rank_b.ids)}"
        )
    pos_a = rank_a.position()
    pos_b = rank_b.position()
    ids = sorted(rank_a.ids)
    out: set[tuple[int, int]] = set()
    for k, i in enumerate(ids):
        for j in ids[k + 1 :]:
            if (pos_a[i] < pos_a[j]) != (pos_b[i] < pos_b[j]):
                out.add((i, j))
    return out


def concordant_pairs(rank_a: Ranking, rank_b: Ranking) -> set[tuple[int, int]]:
    ids = sorted(rank_a.ids)
    disc = discrepancy_pairs(rank_a, rank_b)
    return {
        (i, j)
        for k, i in enumerate(ids)
        for j in ids[k + 1 :]
        if (i, j) not in disc
    }


def build_preference_dataset(
    rank_reward: Ranking,
    rank_oracle: Ranking,
    batch: Sequence[Trajectory],
    beta: float,
    rng_seed: int,
) -> PreferenceDataset:
    """All discordant pairs plus an equal count of sampled concordant pairs.

    The oracle ranking orients every pair. Concordant pairs are drawn
    uniformly without replacement (all of them if fewer exist than needed);
    the combined list is shuffled deterministically by `rng_seed`. A zero
    discrepancy yields an empty dataset.
    """
    table = {t.tid: t for t in batch}
    if set(rank_oracle.ids) - set(table):
        raise RankingError("oracle ranking references trajectories missing from the batch")
    disc = sorted(discrepancy_pairs(rank_reward, rank_oracle))
    oracle_pos = rank_oracle.position()

    def orient(pair: tuple[int, int], source: str) -> PreferencePair:
        i, j = pair
        if oracle_pos[i] > oracle_pos[j]:
            i, j = j, i
        return PreferencePair(preferred=i, dispreferred=j, source=source)

    pairs: list[PreferencePair] = []
    if disc:
        rng = np.random.default_rng(rng_seed)
        conc = sorted(concordant_pairs(rank_reward, rank_oracle))
        n_pos = min(len(disc), len(conc))
        chosen = rng.choice(len(conc), size=n_pos, replace=False) if n_pos else []
        pairs = [orient(p, "discrepant") for p in disc]
        pairs += [orient(conc[int(k)], "agreed") for k in sorted(chosen)]
        perm = rng.permutation(len(pairs))
        pairs = [pairs[int(k)] for k in perm]
    return PreferenceDataset(tuple(pairs), table, beta)


def all_pairs_dataset(
    rank_oracle: Ranking, batch: Sequence[Trajectory], beta: float
) -> PreferenceDataset:
    """Every pair implied by the oracle ranking, oriented and marked agreed.

    Used by the restricted-domain adjustment search: with zero discrepancy
    there are no discordant pairs, but the posterior over all consistent
    pairs still has structure (it rewards widening the return margins), so
    the sampler moves instead of sitting on a flat surface.
    """
    table = {t.tid: t for t in batch}
    ids = rank_oracle.ids
    pairs = tuple(
        PreferencePair(ids[i], ids[j], source="agreed")
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
    )
    return PreferenceDataset(pairs, table, beta)
