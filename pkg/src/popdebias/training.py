"""BPR training for PD/PDA and joint CTR + CTCVR training for MBD.

Gradients are analytic and vectorized over a mini-batch; a batch of one is
plain per-sample SGD. Losses are batch means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dataset import (InteractionLog, PopularityTable, StagedInteractions, compute_quality_ratio,
                      fill_undefined_ratio, minmax_normalize, popularity_floor, popularity_table)
from .evaluation import accuracy_metrics, ground_truth_sets, rank_matrix
from .model import (CVR_CAP, LOGIT_CLAMP, FactorModel, ScoreParams, elu_prime, elu_prime_grad,
                    match_matrix, sigmoid)

logger = logging.getLogger(__name__)

MODES = ("PD", "PDA", "MBD")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    l2: float = 1e-4
    epochs_max: int = 100
    patience: int = 10
    batch_size: int = 256
    seed: int = 0
    mode: str = "PD"
    params: ScoreParams = field(default_factory=ScoreParams)
    neg_per_pos: int = 1
    dim: int = 32
    optimizer: str = "sgd"
    val_k: int = 50
    full_ridge: bool = False
    variant: str = "standard"
    select: str = "best"

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be >= 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.neg_per_pos < 1:
            raise ValueError("neg_per_pos must be >= 1")
        if self.batch_size < 1 or self.epochs_max < 1 or self.dim < 1 or self.val_k < 1:
            raise ValueError("batch_size, epochs_max, dim and val_k must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.variant not in ("standard", "both_pop"):
            raise ValueError("variant must be standard or both_pop")
        if self.select not in ("best", "last"):
            raise ValueError("select must be best or last")


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_reason: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,val_metric\n")
            for e, (loss, val) in enumerate(zip(self.losses, self.val_metrics), start=1):
                fh.write(f"{e},{loss:.12g},{val:.12g}\n")


# ---------------------------------------------------------------- sampling

class NegativeSampler:
    """Uniform sampling over the items a user has not interacted with."""

    def __init__(self, log: InteractionLog):
        self.num_items = log.num_items
        mask = log.clicked == 1
        keys = log.users[mask] * log.num_items + log.items[mask]
        self.keys = np.unique(keys)
        distinct = np.bincount(self.keys // log.num_items, minlength=log.num_users)
        self.full_users = np.flatnonzero(distinct >= log.num_items)

    def _seen(self, users, items):
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return (self.keys[pos] == keys) if len(self.keys) else np.zeros(len(keys), dtype=bool)

    def sample(self, rng: np.random.Generator, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if len(self.full_users) and np.isin(users, self.full_users).any():
            bad = users[np.isin(users, self.full_users)][0]
            raise ValueError(f"user {bad} interacted with every item; no negative available")
        out = rng.integers(0, self.num_items, size=len(users))
        todo = np.flatnonzero(self._seen(users, out))
        while len(todo):
            out[todo] = rng.integers(0, self.num_items, size=len(todo))
            todo = todo[self._seen(users[todo], out[todo])]
        return out


def sample_negative(rng: np.random.Generator, u: int, log: InteractionLog) -> int:
    return int(NegativeSampler(log).sample(rng, [u])[0])


# ---------------------------------------------------------------- losses

def bpr_pair_loss(p_pos, p_neg):
    """-ln sigmoid(p_pos - p_neg), computed stably."""
    return np.logaddexp(0.0, -(np.asarray(p_pos, dtype=np.float64) - p_neg))


def ce_loss(p, y):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("probability must lie in (0, 1)")
    return -y * np.log(p) - (1 - y) * np.log1p(-p)


def bpr_gradients(U, I, J, m_i, m_j, gamma, l2):
    """Per-sample BPR loss and gradients w.r.t. the user, positive and negative rows.

    Score: P = ELU'(u.v) * m**gamma; loss = -ln sigmoid(P_i - P_j) + l2/2 (|u|^2 + |i|^2 + |j|^2).
    """
    f_i = np.sum(U * I, axis=1)
    f_j = np.sum(U * J, axis=1)
    w_i = np.power(m_i, gamma)
    w_j = np.power(m_j, gamma)
    diff = elu_prime(f_i) * w_i - elu_prime(f_j) * w_j
    loss = bpr_pair_loss(diff, 0.0) + 0.5 * l2 * (np.sum(U * U, 1) + np.sum(I * I, 1) + np.sum(J * J, 1))
    g = -sigmoid_exact(-diff)
    gi = (g * elu_prime_grad(f_i) * w_i)[:, None]
    gj = (g * elu_prime_grad(f_j) * w_j)[:, None]
    gU = gi * I - gj * J + l2 * U
    gI = gi * U + l2 * I
    gJ = -gj * U + l2 * J
    return loss, gU, gI, gJ


def sigmoid_exact(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def mbd_gradients(Uc, Ic, Ul, Il, weight, y_c, y_l, l2):
    """Per-sample ``L_ctr + L_ctcvr`` and gradients for the CTR and CVR tables.

    ``weight`` is the popularity/quality factor ``r**gamma_r * z**gamma_z``
    (times ``z_c**gamma_zc`` for the both-popularity variant).
    """
    a_raw = np.sum(Uc * Ic, axis=1)
    b_raw = np.sum(Ul * Il, axis=1)
    a_in = np.abs(a_raw) < LOGIT_CLAMP
    b_in = np.abs(b_raw) < LOGIT_CLAMP
    sa, sb = sigmoid(a_raw), sigmoid(b_raw)
    p_ctr = sa
    p_raw = sa * sb * weight
    capped = p_raw >= CVR_CAP
    p = np.where(capped, CVR_CAP, p_raw)
    loss = (-(y_c * np.log(p_ctr) + (1 - y_c) * np.log1p(-p_ctr))
            - (y_l * np.log(p) + (1 - y_l) * np.log1p(-p)))
    # d ce / d p  *  d p / d logit  =  (-y + (1-y) p/(1-p)) * (1 - sigma)
    dlp = np.where(capped, 0.0, -y_l + (1 - y_l) * p / (1 - p))
    da = ((p_ctr - y_c) + dlp * (1 - sa)) * a_in
    db = (dlp * (1 - sb)) * b_in
    loss = loss + 0.5 * l2 * (np.sum(Uc * Uc, 1) + np.sum(Ic * Ic, 1) + np.sum(Ul * Ul, 1) + np.sum(Il * Il, 1))
    gUc = da[:, None] * Ic + l2 * Uc
    gIc = da[:, None] * Uc + l2 * Ic
    gUl = db[:, None] * Il + l2 * Ul
    gIl = db[:, None] * Ul + l2 * Il
    return loss, (gUc, gIc, gUl, gIl)


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray, key: str) -> None:
        np.subtract.at(table, rows, self.lr * grads)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, tuple] = {}
        self.t = 0

    def next_step(self) -> None:
        self.t += 1

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray, key: str) -> None:
        if key not in self.state:
            self.state[key] = (np.zeros_like(table), np.zeros_like(table))
        m, v = self.state[key]
        g = np.zeros_like(table)
        np.add.at(g, rows, grads)
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        table -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


def _ridge_rows(config, n, rows_touched):
    return np.arange(n) if config.full_ridge else rows_touched


# ---------------------------------------------------------------- epochs

@dataclass(frozen=True)
class BPRSamples:
    users: np.ndarray
    items: np.ndarray
    stages: np.ndarray
    factors: np.ndarray  # [T, num_items] popularity factor (floored)


def bpr_samples(staged: StagedInteractions, pop: PopularityTable | None = None,
                source: str = "clicks") -> BPRSamples:
    pop = pop or popularity_table(staged, source)
    merged = staged.merged()
    stage_ids = staged.stage_index()
    keep = merged.clicked == 1
    factors = np.stack([pop.factor(t) if pop.D[t].sum() else np.ones(pop.m.shape[1]) for t in range(pop.T)])
    return BPRSamples(merged.users[keep], merged.items[keep], stage_ids[keep], factors)


def bpr_epoch(model: FactorModel, samples: BPRSamples, sampler: NegativeSampler, config: TrainConfig,
              rng: np.random.Generator, optimizer=None) -> float:
    """One shuffled pass of pairwise updates; returns the mean per-sample loss."""
    optimizer = optimizer or make_optimizer(config)
    gamma = config.params.gamma
    n = len(samples.users)
    if n == 0:
        raise TrainingError("empty training partition")
    order = rng.permutation(n)
    users = np.repeat(samples.users[order], config.neg_per_pos)
    items = np.repeat(samples.items[order], config.neg_per_pos)
    stages = np.repeat(samples.stages[order], config.neg_per_pos)
    negs = sampler.sample(rng, users)
    total = 0.0
    for start in range(0, len(users), config.batch_size):
        sl = slice(start, start + config.batch_size)
        u, i, j, t = users[sl], items[sl], negs[sl], stages[sl]
        loss, gU, gI, gJ = bpr_gradients(model.user_emb[u], model.item_emb[i], model.item_emb[j],
                                         samples.factors[t, i], samples.factors[t, j], gamma,
                                         0.0 if config.full_ridge else config.l2)
        if not np.all(np.isfinite(loss)):
            k = int(np.flatnonzero(~np.isfinite(loss))[0])
            raise TrainingError(f"non-finite loss for pair (u={u[k]}, i={i[k]}, j={j[k]})")
        B = len(u)
        total += float(loss.sum())
        if isinstance(optimizer, Adam):
            optimizer.next_step()
        item_rows = np.concatenate([i, j])
        item_grads = np.concatenate([gI, gJ]) / B
        user_grads = gU / B
        if config.full_ridge and config.l2:
            user_grads = np.concatenate([user_grads, config.l2 * model.user_emb])
            u = np.concatenate([u, np.arange(model.num_users)])
            item_grads = np.concatenate([item_grads, config.l2 * model.item_emb])
            item_rows = np.concatenate([item_rows, np.arange(model.num_items)])
        optimizer.step(model.user_emb, u, user_grads, "user")
        optimizer.step(model.item_emb, item_rows, item_grads, "item")
    return total / len(users)


@dataclass(frozen=True)
class MBDSamples:
    users: np.ndarray
    items: np.ndarray
    post: np.ndarray
    weight: np.ndarray  # per-item r**gamma_r * z**gamma_z (* z_c**gamma_zc)


def item_quality_and_popularity(log: InteractionLog) -> tuple[np.ndarray, np.ndarray]:
    """Min-max normalized quality ratio (undefined -> global ratio) and click popularity."""
    r, defined = compute_quality_ratio(log)
    r = minmax_normalize(fill_undefined_ratio(r, defined, log))
    z = minmax_normalize(log.item_counts("clicks"))
    return r, z


def mbd_weight(r, z, params: ScoreParams, variant: str = "standard") -> np.ndarray:
    w = np.power(r, params.gamma_r) * np.power(z, params.gamma_z)
    if variant == "both_pop":
        w = w * np.power(z, params.gamma_zc)
    return w


def mbd_samples(log: InteractionLog, r, z, params: ScoreParams, variant: str = "standard") -> MBDSamples:
    keep = log.clicked == 1
    return MBDSamples(log.users[keep], log.items[keep], log.post_clicked[keep].astype(np.float64),
                      mbd_weight(r, z, params, variant))


def mbd_epoch(model_c: FactorModel, model_l: FactorModel, samples: MBDSamples, sampler: NegativeSampler,
              config: TrainConfig, rng: np.random.Generator, optimizer=None) -> tuple[float, float]:
    """One pass over clicks plus sampled unclicked negatives.

    Returns the mean total loss and the mean CTR part.
    """
    optimizer = optimizer or make_optimizer(config)
    n = len(samples.users)
    if n == 0:
        raise TrainingError("empty training partition")
    k = config.neg_per_pos
    neg_users = np.repeat(samples.users, k)
    neg_items = sampler.sample(rng, neg_users)
    users = np.concatenate([samples.users, neg_users])
    items = np.concatenate([samples.items, neg_items])
    y_c = np.concatenate([np.ones(n), np.zeros(n * k)])
    y_l = np.concatenate([samples.post, np.zeros(n * k)])
    order = rng.permutation(len(users))
    users, items, y_c, y_l = users[order], items[order], y_c[order], y_l[order]
    total = 0.0
    total_ctr = 0.0
    l2 = 0.0 if config.full_ridge else config.l2
    for start in range(0, len(users), config.batch_size):
        sl = slice(start, start + config.batch_size)
        u, i = users[sl], items[sl]
        loss, (gUc, gIc, gUl, gIl) = mbd_gradients(model_c.user_emb[u], model_c.item_emb[i],
                                                   model_l.user_emb[u], model_l.item_emb[i],
                                                   samples.weight[i], y_c[sl], y_l[sl], l2)
        if not np.all(np.isfinite(loss)):
            bad = int(np.flatnonzero(~np.isfinite(loss))[0])
            raise TrainingError(f"non-finite loss for sample (u={u[bad]}, i={i[bad]})")
        p_ctr = sigmoid(np.sum(model_c.user_emb[u] * model_c.item_emb[i], 1))
        total_ctr += float(np.sum(-(y_c[sl] * np.log(p_ctr) + (1 - y_c[sl]) * np.log1p(-p_ctr))))
        total += float(loss.sum())
        B = len(u)
        if isinstance(optimizer, Adam):
            optimizer.next_step()
        for model, gu, gi, key in ((model_c, gUc, gIc, "c"), (model_l, gUl, gIl, "l")):
            urows, irows, ug, ig = u, i, gu / B, gi / B
            if config.full_ridge and config.l2:
                urows = np.concatenate([u, np.arange(model.num_users)])
                ug = np.concatenate([ug, config.l2 * model.user_emb])
                irows = np.concatenate([i, np.arange(model.num_items)])
                ig = np.concatenate([ig, config.l2 * model.item_emb])
            optimizer.step(model.user_emb, urows, ug, "user_" + key)
            optimizer.step(model.item_emb, irows, ig, "item_" + key)
    return total / len(users), total_ctr / len(users)


# ---------------------------------------------------------------- scoring helpers

def pd_matrix(model: FactorModel, users) -> np.ndarray:
    return elu_prime(match_matrix(model, users))


def pda_matrix(model: FactorModel, users, m_tilde, gamma_tilde) -> np.ndarray:
    return pd_matrix(model, users) * np.power(m_tilde, gamma_tilde)[None, :]


def mbd_matrix(model_c: FactorModel, model_l: FactorModel, users, r, gamma_r) -> np.ndarray:
    return (sigmoid(match_matrix(model_c, users)) * sigmoid(match_matrix(model_l, users))
            * np.power(r, gamma_r)[None, :])


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    models: dict  # role -> FactorModel
    trace: TrainTrace
    r: np.ndarray | None = None
    z: np.ndarray | None = None
    m_valid: np.ndarray | None = None
    pop: PopularityTable | None = None


def validation_metric(lists, truth, K) -> float:
    recall, hr, _ = accuracy_metrics(lists, truth, K)
    return recall + hr


def fit(config: TrainConfig, staged: StagedInteractions, valid_log: InteractionLog,
        rng_init: np.random.Generator | None = None, rng_neg: np.random.Generator | None = None,
        validator: Callable | None = None, popularity_source: str = "clicks",
        r: np.ndarray | None = None, z: np.ndarray | None = None) -> FitResult:
    """Train until ``epochs_max`` or until the validation metric stalls for ``patience`` epochs.

    Validation ranks with the mode's own scorer (PD: ELU'(f); PDA: ELU'(f) *
    m_valid**gamma; MBD: sigma(f_c) sigma(f_l) r**gamma_r) and scores
    Recall@K + HitRatio@K. ``validator(models) -> float`` overrides it.
    ``config.select="last"`` keeps the final parameters instead of the best
    validated ones.
    """
    rng_init = rng_init or np.random.default_rng(config.seed)
    rng_neg = rng_neg or np.random.default_rng(config.seed + 1)
    if len(valid_log) == 0:
        raise ValueError("empty validation set")
    train_log = staged.merged()
    sampler = NegativeSampler(train_log)
    optimizer = make_optimizer(config)
    nu, ni = train_log.num_users, train_log.num_items
    params = config.params
    result = FitResult(models={}, trace=TrainTrace())

    if config.mode in ("PD", "PDA"):
        pop = popularity_table(staged, popularity_source)
        samples = bpr_samples(staged, pop, popularity_source)
        model = FactorModel.init(nu, ni, config.dim, rng_init, "matching", params)
        result.models = {"matching": model}
        result.pop = pop
        counts = valid_log.item_counts(popularity_source)
        if counts.sum() == 0:
            counts = valid_log.item_counts("clicks")
        m_valid = counts / max(counts.sum(), 1)
        result.m_valid = np.where(m_valid > 0, m_valid, popularity_floor(counts))
        label = "clicked"
    else:
        if r is None or z is None:
            r_est, z_est = item_quality_and_popularity(train_log)
            r = r_est if r is None else r
            z = z_est if z is None else z
        result.r, result.z = r, z
        samples = mbd_samples(train_log, r, z, params, config.variant)
        model_c = FactorModel.init(nu, ni, config.dim, rng_init, "ctr", params)
        model_l = FactorModel.init(nu, ni, config.dim, rng_init, "cvr", params)
        result.models = {"ctr": model_c, "cvr": model_l}
        label = "post_clicked"

    if validator is None:
        val_users = np.unique(valid_log.users[(valid_log.post_clicked if label == "post_clicked"
                                                else valid_log.clicked) == 1])
        if len(val_users) == 0:
            raise ValueError("validation set has no positives")
        seen = train_log.user_item_sets()
        exclude = [seen[u] for u in val_users]
        truth = ground_truth_sets(valid_log, val_users, label, exclude)
        K = min(config.val_k, ni - max(len(s) for s in exclude))
        if K < 1:
            raise ValueError("no candidates left for validation ranking")

        def validator(models):
            if config.mode == "PD":
                scores = pd_matrix(models["matching"], val_users)
            elif config.mode == "PDA":
                scores = pda_matrix(models["matching"], val_users, result.m_valid, params.gamma)
            else:
                scores = mbd_matrix(models["ctr"], models["cvr"], val_users, r, params.gamma_r)
            return validation_metric(rank_matrix(scores, exclude, K), truth, K)

    trace = result.trace
    best_val = -np.inf
    best_models = {k: m.copy() for k, m in result.models.items()}
    stale = 0
    trace.stopped_reason = "epochs_max"
    for epoch in range(config.epochs_max):
        if config.mode == "MBD":
            loss, _ = mbd_epoch(result.models["ctr"], result.models["cvr"], samples, sampler, config,
                                rng_neg, optimizer)
        else:
            loss = bpr_epoch(result.models["matching"], samples, sampler, config, rng_neg, optimizer)
        val = float(validator(result.models))
        trace.losses.append(loss)
        trace.val_metrics.append(val)
        logger.debug("epoch %d loss %.6f val %.6f", epoch + 1, loss, val)
        if val > best_val:
            best_val = val
            trace.best_epoch = epoch
            best_models = {k: m.copy() for k, m in result.models.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                trace.stopped_reason = "patience"
                break
    if config.select == "best":
        result.models = best_models
    return result


def with_params(config: TrainConfig, **kwargs) -> TrainConfig:
    """Copy of ``config`` with score parameters replaced."""
    return replace(config, params=replace(config.params, **kwargs))
