"""All-ranking top-K accuracy and exposure/quality fairness metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import InteractionLog


@dataclass(frozen=True)
class RankingReport:
    users: np.ndarray  # evaluated users, row order of ``lists``
    lists: np.ndarray  # [len(users), K] item ids, best first
    K: int
    metrics: dict = field(default_factory=dict)

    def to_csv(self, path, ks=None) -> None:
        with open(path, "w") as fh:
            fh.write("metric,K,value\n")
            for (name, k), value in sorted(self.metrics.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                fh.write(f"{name},{k},{value:.12g}\n")

    def lists_to_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("user\titems\n")
            for u, row in zip(self.users.tolist(), self.lists.tolist()):
                fh.write(f"{u}\t{','.join(map(str, row))}\n")


def rank_items(scores, excluded=(), K: int = 50) -> np.ndarray:
    """Top-K item ids for one user; ties go to the smaller item id."""
    scores = np.array(scores, dtype=np.float64)
    excluded = list(excluded)
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(scores) - len(set(excluded)) < K:
        raise ValueError(f"fewer than K={K} candidates")
    scores[excluded] = -np.inf
    return np.argsort(-scores, kind="stable")[:K]


def rank_matrix(scores: np.ndarray, exclude_sets=None, K: int = 50) -> np.ndarray:
    """Row-wise :func:`rank_items` over a [users, items] score matrix."""
    scores = np.array(scores, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if exclude_sets is not None:
        for row, excl in enumerate(exclude_sets):
            if excl:
                scores[row, list(excl)] = -np.inf
    n_cand = np.isfinite(scores).sum(axis=1) if exclude_sets is not None else np.full(len(scores), scores.shape[1])
    if np.any(n_cand < K):
        raise ValueError(f"fewer than K={K} candidates for some user")
    return np.argsort(-scores, axis=1, kind="stable")[:, :K]


def ground_truth_sets(log: InteractionLog, users, label: str = "clicked", exclude_sets=None) -> list[set]:
    """Per-user positive items of ``log`` (``clicked`` or ``post_clicked``) minus excluded items."""
    mask = (log.clicked == 1) if label == "clicked" else (log.post_clicked == 1)
    sets: dict[int, set] = {}
    for u, i in zip(log.users[mask].tolist(), log.items[mask].tolist()):
        sets.setdefault(u, set()).add(i)
    out = []
    for k, u in enumerate(np.asarray(users).tolist()):
        s = set(sets.get(u, ()))
        if exclude_sets is not None:
            s -= exclude_sets[k]
        out.append(s)
    return out


def discounts(K: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, K + 2))


def accuracy_metrics(lists: np.ndarray, truth: list[set], K: int) -> tuple[float, float, float]:
    """Macro recall, hit ratio and NDCG@K; users with empty truth are skipped."""
    lists = np.asarray(lists)[:, :K]
    disc = discounts(K)
    ideal = np.cumsum(disc)
    recalls, hrs, ndcgs = [], [], []
    for row, pos in zip(lists, truth):
        if not pos:
            continue
        hit = np.fromiter((i in pos for i in row.tolist()), dtype=bool, count=len(row))
        n_hit = int(hit.sum())
        recalls.append(n_hit / len(pos))
        hrs.append(1.0 if n_hit else 0.0)
        dcg = float(np.sum(disc[hit]))
        ndcgs.append(dcg / ideal[min(len(pos), K) - 1])
    if not recalls:
        return 0.0, 0.0, 0.0
    return float(np.mean(recalls)), float(np.mean(hrs)), float(np.mean(ndcgs))


def position_exposure(j) -> float:
    j = np.asarray(j)
    if np.any(j < 1):
        raise ValueError("positions are 1-based")
    out = 1.0 / np.log2(1.0 + j)
    return float(out) if out.ndim == 0 else out


def exposure_vector(lists: np.ndarray, num_items: int) -> np.ndarray:
    """Item exposure: positional weight averaged over users (empirical P_{i,j})."""
    lists = np.asarray(lists)
    if lists.size == 0:
        raise ValueError("no ranking lists")
    n_users, K = lists.shape
    exp = np.zeros(num_items)
    np.add.at(exp, lists, np.broadcast_to(discounts(K), lists.shape))
    return exp / n_users


def item_exposure(lists, i: int) -> float:
    lists = np.asarray(lists)
    if lists.size == 0:
        raise ValueError("no ranking lists")
    rows, cols = np.nonzero(lists == i)
    return float(np.sum(discounts(lists.shape[1])[cols]) / lists.shape[0])


def group_exposure(group, exposure: np.ndarray) -> float:
    group = np.asarray(list(group), dtype=np.int64)
    if group.size == 0:
        raise ValueError("empty group")
    return float(np.mean(exposure[group]))


def disparity_exposure(g1, g2, exposure: np.ndarray) -> float:
    return abs(group_exposure(g1, exposure) - group_exposure(g2, exposure))


def group_ratio(group, r: np.ndarray) -> float:
    group = np.asarray(list(group), dtype=np.int64)
    if group.size == 0:
        raise ValueError("empty group")
    return float(np.mean(r[group]))


def disparity_quality(g1, g2, exposure: np.ndarray, r: np.ndarray) -> float:
    q1, q2 = group_ratio(g1, r), group_ratio(g2, r)
    if q1 <= 0 or q2 <= 0:
        raise ValueError("group mean ratio must be positive")
    return abs(group_exposure(g1, exposure) / q1 - group_exposure(g2, exposure) / q2)


@dataclass(frozen=True)
class GroupSpec:
    bins: list  # bins[b] = list of subgroup item arrays
    item_bin: np.ndarray  # -1 for items outside the grading

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    def bin_items(self, b: int) -> np.ndarray:
        return np.concatenate(self.bins[b])

    def to_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("item\tbin\tsubgroup\n")
            rows = []
            for b, subs in enumerate(self.bins):
                for s, members in enumerate(subs):
                    rows.extend((int(i), b, s) for i in members)
            for i, b, s in sorted(rows):
                fh.write(f"{i}\t{b}\t{s}\n")


def _equal_count_split(items, key, n_parts):
    order = np.lexsort((items, key))  # key first, item id breaks ties
    return [items[idx] for idx in np.array_split(order, n_parts)]


def build_groups(items, bin_values, subgroup_values, n_bins: int, n_subgroups: int, edges=None) -> GroupSpec:
    """Equal-count quantile bins over ``bin_values``, then equal-count subgroups
    over ``subgroup_values`` inside every bin.

    ``bin_values``/``subgroup_values`` are indexed by item id. ``edges`` replaces
    the quantile bins with fixed half-open intervals ``[e_k, e_{k+1})``.
    """
    items = np.asarray(items, dtype=np.int64)
    bin_values = np.asarray(bin_values, dtype=np.float64)
    subgroup_values = np.asarray(subgroup_values, dtype=np.float64)
    if n_bins < 1 or n_subgroups < 1:
        raise ValueError("n_bins and n_subgroups must be >= 1")
    num_items = len(bin_values)
    if edges is not None:
        edges = np.asarray(edges, dtype=np.float64)
        raw_bins = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = items[(bin_values[items] >= lo) & (bin_values[items] < hi)]
            raw_bins.append(np.sort(sel))
    else:
        if len(items) < n_bins:
            raise ValueError(f"{len(items)} graded items cannot fill {n_bins} bins")
        raw_bins = _equal_count_split(items, bin_values[items], n_bins)
    bins = []
    item_bin = np.full(num_items, -1, dtype=np.int64)
    for b, members in enumerate(raw_bins):
        if len(members) < n_subgroups:
            raise ValueError(f"bin {b} has {len(members)} items, fewer than {n_subgroups} subgroups")
        bins.append(_equal_count_split(members, subgroup_values[members], n_subgroups))
        item_bin[members] = b
    return GroupSpec(bins, item_bin)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks; NaN for a constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


@dataclass(frozen=True)
class FairnessReport:
    rows: list  # (partition, bin, subgroup, exposure, ratio, d_r, d_l)
    d_r: np.ndarray  # per quality bin
    d_l: np.ndarray  # per post-click group
    exposure_variance: np.ndarray  # item exposure variance per quality bin
    quality_variance: np.ndarray  # variance of Exp/Ratio across subgroups per group

    @property
    def mean_d_r(self) -> float:
        return float(np.mean(self.d_r))

    @property
    def mean_d_l(self) -> float:
        return float(np.mean(self.d_l))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("partition,bin,subgroup,exposure,ratio,d_r,d_l\n")
            for part, b, s, e, q, dr, dl in self.rows:
                fh.write(f"{part},{b},{s},{e:.12g},{q:.12g},{_fmt(dr)},{_fmt(dl)}\n")


def _fmt(x):
    return "" if x is None else f"{x:.12g}"


def _pair_mean(values):
    pairs = list(itertools.combinations(values, 2))
    if not pairs:
        return 0.0
    return float(np.mean([abs(a - b) for a, b in pairs]))


def fairness_report(lists, num_items: int, r, r_defined, click_counts, post_counts,
                    n_bins: int = 5, n_subgroups: int = 3, edges=None) -> FairnessReport:
    """Exposure (D_r) and quality (D_l) disparities of a set of ranking lists.

    Exposure partition: bins by ratio ``r``, subgroups by click counts.
    Quality partition: groups by post-click counts, subgroups by ``r``; only
    items with a positive ratio take part so that every Ratio(G) is positive.
    """
    r = np.asarray(r, dtype=np.float64)
    r_defined = np.asarray(r_defined, dtype=bool)
    exposure = exposure_vector(lists, num_items)
    rows = []

    graded = np.flatnonzero(r_defined)
    spec = build_groups(graded, np.where(r_defined, r, 0.0), click_counts, n_bins, n_subgroups, edges)
    d_r, var_e = [], []
    for b, subs in enumerate(spec.bins):
        exps = [group_exposure(g, exposure) for g in subs]
        d = _pair_mean(exps)
        d_r.append(d)
        var_e.append(float(np.var(exposure[spec.bin_items(b)])))
        for s, g in enumerate(subs):
            rows.append(("exposure", b, s, exps[s], group_ratio(g, r), d, None))

    positive = np.flatnonzero(r_defined & (np.nan_to_num(r) > 0))
    qspec = build_groups(positive, post_counts, np.where(r_defined, r, 0.0), n_bins, n_subgroups)
    d_l, var_q = [], []
    for b, subs in enumerate(qspec.bins):
        per = [group_exposure(g, exposure) / group_ratio(g, r) for g in subs]
        d = _pair_mean(per)
        d_l.append(d)
        var_q.append(float(np.var(per)))
        for s, g in enumerate(subs):
            rows.append(("quality", b, s, group_exposure(g, exposure), group_ratio(g, r), None, d))
    return FairnessReport(rows, np.array(d_r), np.array(d_l), np.array(var_e), np.array(var_q))
