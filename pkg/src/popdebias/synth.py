"""Synthetic interaction logs drawn from the popularity causal graph.

Exposure follows popularity (Z -> I), clicks follow user-item matching and
popularity ({U, I, Z} -> C). In multi-behavior mode clicked items convert to
post-clicks through a second matching score, a latent item quality and
popularity ({U, I, Q, Z} -> L), with a latent producer reputation feeding both
popularity and quality (Q <- T -> Z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import InteractionLog
from .evaluation import discounts, rank_matrix, spearman
from .model import FactorModel, elu_prime, sigmoid
from .training import pd_matrix

STAGE_TICKS = 10_000_000


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 200
    num_items: int = 100
    T: int = 10
    d_true: int = 8
    gamma_true: float = 1.0
    exposure_strength: float = 2.0
    drift_rate: float = 0.3
    interactions_per_stage: int = 2000
    seed: int = 0
    pop_spread: float = 1.0
    match_scale: float = 1.0
    mbd: bool = False
    rho_T: float = 0.0
    gamma_post: float = 0.5
    quality_spread: float = 1.5

    def __post_init__(self):
        for name in ("num_users", "num_items", "T", "d_true", "interactions_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("gamma_true", "exposure_strength", "drift_rate", "pop_spread", "gamma_post"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.rho_T <= 1:
            raise ValueError("rho_T must lie in [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    true_match: np.ndarray          # [users, items] click-side matching
    true_pop: np.ndarray            # [T, items] sampling popularity per stage
    true_quality: np.ndarray        # [items] in (0, 1)
    exposure_counts: np.ndarray     # [T, items]
    reputation: np.ndarray          # [items] latent confounder
    true_match_l: np.ndarray | None = None  # [users, items] post-click matching

    def preference(self) -> np.ndarray:
        """Popularity-free utility used as ranking ground truth."""
        util = elu_prime(self.true_match)
        if self.true_match_l is not None:
            util = util * sigmoid(self.true_match_l) * self.true_quality[None, :]
        return util

    def write(self, out_dir) -> None:
        from pathlib import Path
        out = Path(out_dir)
        np.savetxt(out / "true_match.tsv", self.true_match, delimiter="\t", fmt="%.10g")
        np.savetxt(out / "true_pop.tsv", self.true_pop, delimiter="\t", fmt="%.10g")
        np.savetxt(out / "true_quality.tsv", self.true_quality, delimiter="\t", fmt="%.10g")
        if self.true_match_l is not None:
            np.savetxt(out / "true_match_l.tsv", self.true_match_l, delimiter="\t", fmt="%.10g")


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    names = ("factors", "popularity", "drift", "exposure", "clicks")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def _latent(rng, n_users, n_items, d, scale):
    users = rng.standard_normal((n_users, d))
    items = rng.standard_normal((n_items, d))
    items *= scale / np.linalg.norm(items, axis=1, keepdims=True)
    return users @ items.T


def generate(config: SynthConfig) -> tuple[InteractionLog, GroundTruth]:
    rng = _streams(config.seed)
    nu, ni = config.num_users, config.num_items
    true_match = _latent(rng["factors"], nu, ni, config.d_true, config.match_scale)
    true_match_l = _latent(rng["factors"], nu, ni, config.d_true, config.match_scale) if config.mbd else None

    rho = config.rho_T
    reputation = rng["popularity"].standard_normal(ni)
    own_pop = rng["popularity"].standard_normal(ni)
    own_q = rng["popularity"].standard_normal(ni)
    log_pop = config.pop_spread * (rho * reputation + np.sqrt(1 - rho ** 2) * own_pop)
    quality = sigmoid(config.quality_spread * (rho * reputation + np.sqrt(1 - rho ** 2) * own_q))

    pops = np.empty((config.T, ni))
    for t in range(config.T):
        if t:
            log_pop = log_pop + config.drift_rate * rng["drift"].standard_normal(ni)
        p = np.exp(log_pop - log_pop.max())
        pops[t] = p / p.sum()

    elu = elu_prime(true_match)
    cols = {k: [] for k in ("u", "i", "ts", "post")}
    exposure_counts = np.zeros((config.T, ni), dtype=np.int64)
    for t in range(config.T):
        pop = pops[t]
        expo_p = pop ** config.exposure_strength
        expo_p = expo_p / expo_p.sum()
        click_w = elu * pop[None, :] ** config.gamma_true
        top = click_w.max()
        if not np.isfinite(top) or top <= 0:
            raise ValueError("infeasible click scaling: every click probability is zero")
        click_p = 0.9 * click_w / top
        if config.mbd:
            post_p = sigmoid(true_match_l) * quality[None, :] * (pop / pop.max())[None, :] ** config.gamma_post
        need = config.interactions_per_stage
        drawn = 0
        chunk = max(4 * need, 1024)
        while need > 0:
            if drawn > 1000 * config.interactions_per_stage + 10 ** 6:
                raise ValueError("click probabilities too small to fill the stage")
            u = rng["exposure"].integers(0, nu, size=chunk)
            i = rng["exposure"].choice(ni, size=chunk, p=expo_p)
            c = rng["clicks"].random(chunk) < click_p[u, i]
            hits = np.flatnonzero(c)
            if len(hits) >= need:
                cut = hits[need - 1] + 1
                u, i, hits = u[:cut], i[:cut], hits[:need]
            exposure_counts[t] += np.bincount(i, minlength=ni)
            base = t * STAGE_TICKS + drawn
            cols["u"].append(u[hits])
            cols["i"].append(i[hits])
            cols["ts"].append(base + hits)
            if config.mbd:
                cols["post"].append((rng["clicks"].random(len(hits)) < post_p[u[hits], i[hits]]).astype(np.int8))
            drawn += len(u)
            need -= len(hits)
    users = np.concatenate(cols["u"])
    items = np.concatenate(cols["i"])
    post = np.concatenate(cols["post"]) if config.mbd else np.zeros(len(users), dtype=np.int8)
    log = InteractionLog(users.astype(np.int64), items.astype(np.int64),
                         np.concatenate(cols["ts"]).astype(np.int64),
                         np.ones(len(users), dtype=np.int8), post, nu, ni)
    truth = GroundTruth(true_match, pops, quality, exposure_counts, reputation, true_match_l)
    return log, truth


def stage_slices(log: InteractionLog, T: int) -> list[InteractionLog]:
    """Split a generated log back into its generator stages (by timestamp tick)."""
    stage = log.timestamps // STAGE_TICKS
    return [log.subset(np.flatnonzero(stage == t)) for t in range(T)]


# ---------------------------------------------------------------- reports

def recommendation_frequency(lists: np.ndarray, num_items: int) -> np.ndarray:
    return np.bincount(np.asarray(lists).ravel(), minlength=num_items)


def ground_truth_ndcg(scores: np.ndarray, utility: np.ndarray, exclude_sets=None, K: int = 20) -> float:
    """NDCG@K of the ranking by ``scores`` against the top-K items by true ``utility``."""
    lists = rank_matrix(scores, exclude_sets, K)
    ideal = rank_matrix(utility, exclude_sets, K)
    disc = discounts(K)
    total = 0.0
    for row, best in zip(lists, ideal):
        rel = np.isin(row, best)
        total += float(np.sum(disc[rel])) / float(np.sum(disc))
    return total / len(lists)


def amplification_report(log: InteractionLog, ground_truth: GroundTruth, model_corr: FactorModel,
                         model_pd: FactorModel, K: int = 20, exclude_seen: bool = True) -> dict:
    """Popularity amplification and ground-truth accuracy of two rankers.

    For each model: Spearman between item recommendation frequency in the
    top-K lists and item interaction count, and ground-truth NDCG@K against
    the true matching scores. Both models rank by ELU'(f).
    """
    users = np.arange(log.num_users)
    seen = log.user_item_sets() if exclude_seen else None
    popularity = log.item_counts("clicks")
    utility = ground_truth.true_match
    out = {}
    for name, model in (("correlational", model_corr), ("pd", model_pd)):
        if model is None:
            raise ValueError(f"{name} model is missing")
        scores = pd_matrix(model, users)
        lists = rank_matrix(scores, seen, K)
        out[name] = {
            "pop_spearman": spearman(recommendation_frequency(lists, log.num_items), popularity),
            "gt_ndcg": ground_truth_ndcg(scores, utility, seen, K),
        }
    return out
