import math

import numpy as np
import pytest
from scipy import stats

from popdebias.dataset import InteractionLog, split_stages
from popdebias.model import FactorModel, ScoreParams, elu_prime
from popdebias.training import (SGD, BPRSamples, NegativeSampler, TrainConfig, TrainingError,
                                bpr_epoch, bpr_gradients, bpr_pair_loss, bpr_samples, ce_loss, fit,
                                item_quality_and_popularity, mbd_epoch, mbd_gradients, mbd_samples,
                                pd_matrix, pda_matrix, sample_negative)

from conftest import random_log
from oracles import finite_difference, relative_error

GAMMAS = (0.0, 0.5, 1.0, 2.0)


def bpr_loss_only(U, I, J, m_i, m_j, gamma, l2):
    p_i = elu_prime(U @ I) * m_i ** gamma
    p_j = elu_prime(U @ J) * m_j ** gamma
    return math.log1p(math.exp(-(p_i - p_j))) + 0.5 * l2 * (U @ U + I @ I + J @ J)


def mbd_loss_only(Uc, Ic, Ul, Il, w, y_c, y_l, l2):
    p_c = 1 / (1 + math.exp(-(Uc @ Ic)))
    p = p_c * w / (1 + math.exp(-(Ul @ Il)))
    ce = lambda q, y: -(y * math.log(q) + (1 - y) * math.log(1 - q))
    reg = Uc @ Uc + Ic @ Ic + Ul @ Ul + Il @ Il
    return ce(p_c, y_c) + ce(p, y_l) + 0.5 * l2 * reg


def bpr_check(rng, gamma, l2=0.0, d=8):
    U, I, J = (rng.normal(0, 0.5, d) for _ in range(3))
    m_i, m_j = rng.uniform(0.05, 1.0, 2)
    _, gU, gI, gJ = bpr_gradients(U[None], I[None], J[None], np.array([m_i]), np.array([m_j]), gamma, l2)
    errs = []
    for x, g in ((U, gU), (I, gI), (J, gJ)):
        fd = finite_difference(lambda: bpr_loss_only(U, I, J, m_i, m_j, gamma, l2), x)
        errs.append(relative_error(g[0], fd))
    return max(errs)


def mbd_check(rng, gamma_r, gamma_z, l2=0.0, d=8):
    Uc, Ic, Ul, Il = (rng.normal(0, 0.5, d) for _ in range(4))
    r, z = rng.uniform(0.05, 1.0, 2)
    w = r ** gamma_r * z ** gamma_z
    y_c = float(rng.integers(0, 2))
    y_l = float(y_c * rng.integers(0, 2))
    _, grads = mbd_gradients(Uc[None], Ic[None], Ul[None], Il[None], np.array([w]), np.array([y_c]),
                             np.array([y_l]), l2)
    errs = []
    for x, g in zip((Uc, Ic, Ul, Il), grads):
        fd = finite_difference(lambda: mbd_loss_only(Uc, Ic, Ul, Il, w, y_c, y_l, l2), x)
        errs.append(relative_error(g[0], fd))
    return max(errs)


@pytest.mark.parametrize("gamma", GAMMAS)
def test_bpr_gradient_finite_difference(gamma):
    rng = np.random.default_rng(int(gamma * 10))
    for _ in range(25):
        assert bpr_check(rng, gamma, l2=0.01) < 1e-4
    assert bpr_check(rng, 0.0) < 1e-4


@pytest.mark.parametrize("gamma_r", GAMMAS)
@pytest.mark.parametrize("gamma_z", (0.0, 1.0))
def test_mbd_gradient_finite_difference(gamma_r, gamma_z):
    rng = np.random.default_rng(7)
    for _ in range(15):
        assert mbd_check(rng, gamma_r, gamma_z, l2=0.01) < 1e-4


def test_bpr_loss_examples():
    assert bpr_pair_loss(0.3, 0.3) == pytest.approx(math.log(2))
    assert bpr_pair_loss(1.5, 0.5) == pytest.approx(0.31326, abs=1e-5)
    assert bpr_pair_loss(1e4, 0) == pytest.approx(0.0, abs=1e-300)


def test_ce_loss_examples():
    assert ce_loss(0.5, 1) == pytest.approx(math.log(2))
    assert ce_loss(1 - 1e-12, 1) == pytest.approx(0.0, abs=1e-11)
    assert ce_loss(0.25, 0) == pytest.approx(0.28768, abs=1e-5)
    with pytest.raises(ValueError):
        ce_loss(1.0, 1)


def test_sample_negative_forced():
    log = InteractionLog.from_arrays([0] * 9, [i for i in range(10) if i != 7], num_items=10)
    rng = np.random.default_rng(0)
    assert {sample_negative(rng, 0, log) for _ in range(50)} == {7}


def test_sample_negative_uniform_chi_square():
    log = InteractionLog.from_arrays([1, 1], [0, 1], num_users=2, num_items=20)
    draws = NegativeSampler(log).sample(np.random.default_rng(3), np.zeros(10_000, dtype=np.int64))
    counts = np.bincount(draws, minlength=20)
    assert stats.chisquare(counts).pvalue > 0.01


def test_sample_negative_reproducible():
    log = InteractionLog.from_arrays([0, 0], [0, 1], num_items=30)
    a = NegativeSampler(log).sample(np.random.default_rng(5), np.zeros(100, dtype=np.int64))
    b = NegativeSampler(log).sample(np.random.default_rng(5), np.zeros(100, dtype=np.int64))
    assert np.array_equal(a, b)
    assert not np.isin(a, [0, 1]).any()


def test_sampler_full_user():
    log = InteractionLog.from_arrays([0, 0], [0, 1], num_items=2)
    with pytest.raises(ValueError, match="every item"):
        sample_negative(np.random.default_rng(0), 0, log)


def _staged(seed=0, n=400, nu=15, ni=25, T=3, post_rate=0.0):
    return split_stages(random_log(np.random.default_rng(seed), n, nu, ni, post_rate), T)


def test_bpr_epoch_zero_lr_keeps_parameters():
    staged = _staged()
    cfg = TrainConfig(learning_rate=0.0, dim=4, params=ScoreParams(gamma=1.0))
    model = FactorModel.init(15, 25, 4, np.random.default_rng(0))
    before = model.copy()
    bpr_epoch(model, bpr_samples(staged), NegativeSampler(staged.merged()), cfg, np.random.default_rng(1))
    assert np.array_equal(model.user_emb, before.user_emb) and np.array_equal(model.item_emb, before.item_emb)


def test_mbd_epoch_zero_lr_keeps_parameters():
    log = _staged(post_rate=0.3).merged()
    r, z = item_quality_and_popularity(log)
    cfg = TrainConfig(learning_rate=0.0, dim=4, mode="MBD", params=ScoreParams(gamma_r=1, gamma_z=1))
    mc = FactorModel.init(15, 25, 4, np.random.default_rng(0), "ctr")
    ml = FactorModel.init(15, 25, 4, np.random.default_rng(1), "cvr")
    before = (mc.copy(), ml.copy())
    mbd_epoch(mc, ml, mbd_samples(log, r, z, cfg.params), NegativeSampler(log), cfg, np.random.default_rng(2))
    assert np.array_equal(mc.user_emb, before[0].user_emb) and np.array_equal(ml.item_emb, before[1].item_emb)


def test_bpr_epoch_loss_invariant_to_factor_scale_at_gamma0():
    staged = _staged()
    samples = bpr_samples(staged)
    scaled = BPRSamples(samples.users, samples.items, samples.stages, samples.factors * 7.0)
    cfg = TrainConfig(dim=4, params=ScoreParams(gamma=0.0))
    losses = []
    for s in (samples, scaled):
        model = FactorModel.init(15, 25, 4, np.random.default_rng(0))
        losses.append(bpr_epoch(model, s, NegativeSampler(staged.merged()), cfg, np.random.default_rng(1)))
    assert losses[0] == losses[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_bpr_epoch_non_finite_names_pair():
    staged = _staged()
    model = FactorModel.init(15, 25, 4, np.random.default_rng(0))
    model.user_emb[:] = np.nan
    with pytest.raises(TrainingError, match="u="):
        bpr_epoch(model, bpr_samples(staged), NegativeSampler(staged.merged()), TrainConfig(dim=4),
                  np.random.default_rng(1))


def test_l2_shrinks_norms_without_data_gradient():
    rng = np.random.default_rng(0)
    table_u = rng.normal(size=(1, 4))
    table_i = rng.normal(size=(1, 4))
    opt = SGD(0.1)
    norms = []
    for _ in range(20):
        # positive equals negative: the data terms cancel
        _, gU, gI, gJ = bpr_gradients(table_u, table_i, table_i, np.ones(1), np.ones(1), 1.0, 0.5)
        opt.step(table_u, np.array([0]), gU, "u")
        opt.step(table_i, np.array([0, 0]), np.concatenate([gI, gJ]), "i")
        norms.append(np.linalg.norm(table_u) + np.linalg.norm(table_i))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def _learnable_mbd_log(seed=0):
    rng = np.random.default_rng(seed)
    nu, ni = 40, 30
    U, V = rng.normal(size=(nu, 3)), rng.normal(size=(ni, 3))
    users, items, posts = [], [], []
    for u in range(nu):
        scores = U[u] @ V.T
        for i in np.argsort(-scores)[:8]:
            users.append(u)
            items.append(i)
            posts.append(int(scores[i] > np.median(scores[np.argsort(-scores)[:8]])))
    return InteractionLog.from_arrays(users, items, rng.permutation(len(users)), None, posts, nu, ni)


def test_mbd_loss_decreases():
    log = _learnable_mbd_log()
    r, z = item_quality_and_popularity(log)
    cfg = TrainConfig(learning_rate=0.05, l2=0.0, dim=8, mode="MBD", optimizer="adam",
                      params=ScoreParams(gamma_r=1, gamma_z=1), batch_size=64)
    mc = FactorModel.init(40, 30, 8, np.random.default_rng(0), "ctr")
    ml = FactorModel.init(40, 30, 8, np.random.default_rng(1), "cvr")
    rng = np.random.default_rng(2)
    samples, sampler = mbd_samples(log, r, z, cfg.params), NegativeSampler(log)
    from popdebias.training import make_optimizer
    opt = make_optimizer(cfg)
    losses = [mbd_epoch(mc, ml, samples, sampler, cfg, rng, opt)[0] for _ in range(10)]
    assert losses[0] > losses[4]
    assert np.mean(losses[:5]) > np.mean(losses[5:])


def test_mbd_esmm_weights_are_one():
    log = _learnable_mbd_log()
    r, z = item_quality_and_popularity(log)
    assert np.all(mbd_samples(log, r, z, ScoreParams()).weight == 1.0)


def _fit_inputs(post_rate=0.0):
    staged = _staged(seed=1, n=600, post_rate=post_rate)
    valid = random_log(np.random.default_rng(9), 80, 15, 25, post_rate=max(post_rate, 0.0))
    return staged, valid


def test_fit_patience_returns_first_epoch():
    staged, valid = _fit_inputs()
    vals = iter([5.0, 4.0, 3.0, 2.0])
    cfg = TrainConfig(dim=4, patience=1, epochs_max=10, learning_rate=0.05)
    res = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1), validator=lambda m: next(vals))
    assert len(res.trace.losses) == 2 and res.trace.best_epoch == 0
    assert res.trace.stopped_reason == "patience"
    one = fit(TrainConfig(dim=4, epochs_max=1, learning_rate=0.05), staged, valid, np.random.default_rng(0),
              np.random.default_rng(1), validator=lambda m: 1.0)
    assert np.array_equal(res.models["matching"].user_emb, one.models["matching"].user_emb)


def test_fit_select_last_keeps_final_models():
    staged, valid = _fit_inputs()
    vals = iter([5.0, 4.0, 3.0])
    cfg = TrainConfig(dim=4, patience=5, epochs_max=3, learning_rate=0.05, select="last")
    res = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1), validator=lambda m: next(vals))
    three = fit(TrainConfig(dim=4, epochs_max=3, learning_rate=0.05), staged, valid, np.random.default_rng(0),
                np.random.default_rng(1), validator=lambda m: 1.0)
    assert res.trace.best_epoch == 0
    # "best" selection on a constant metric keeps epoch 1, "last" keeps epoch 3
    assert np.array_equal(res.models["matching"].item_emb,
                          fit(TrainConfig(dim=4, epochs_max=3, learning_rate=0.05, select="last"), staged, valid,
                              np.random.default_rng(0), np.random.default_rng(1),
                              validator=lambda m: 1.0).models["matching"].item_emb)
    assert not np.array_equal(res.models["matching"].item_emb, three.models["matching"].item_emb)


def test_fit_reproducible():
    staged, valid = _fit_inputs()
    cfg = TrainConfig(dim=4, epochs_max=3, optimizer="adam", learning_rate=0.05)
    a = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1))
    b = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1))
    assert a.trace.losses == b.trace.losses and a.trace.val_metrics == b.trace.val_metrics
    assert np.array_equal(a.models["matching"].user_emb, b.models["matching"].user_emb)


@pytest.mark.parametrize("mode", ["PD", "PDA"])
def test_fit_validation_scorer(mode):
    from popdebias.evaluation import ground_truth_sets, rank_matrix
    from popdebias.training import validation_metric
    staged, valid = _fit_inputs()
    cfg = TrainConfig(dim=4, epochs_max=1, mode=mode, val_k=5, params=ScoreParams(gamma=0.8, gamma_tilde=0.1))
    res = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1))
    train = staged.merged()
    users = np.unique(valid.users)
    seen = train.user_item_sets()
    excl = [seen[u] for u in users]
    model = res.models["matching"]
    counts = valid.item_counts()
    m_valid = np.where(counts > 0, counts / counts.sum(), 1 / (counts.sum() + len(counts)))
    # PDA validates with gamma_tilde = gamma
    scores = pd_matrix(model, users) if mode == "PD" else pda_matrix(model, users, m_valid, 0.8)
    K = min(5, 25 - max(len(e) for e in excl))
    expected = validation_metric(rank_matrix(scores, excl, K), ground_truth_sets(valid, users, "clicked", excl), K)
    assert res.trace.val_metrics[0] == expected


def test_fit_mbd_runs():
    staged, valid = _fit_inputs(post_rate=0.4)
    cfg = TrainConfig(dim=4, epochs_max=2, mode="MBD", params=ScoreParams(gamma_r=1, gamma_z=1))
    res = fit(cfg, staged, valid, np.random.default_rng(0), np.random.default_rng(1))
    assert set(res.models) == {"ctr", "cvr"} and len(res.trace.losses) == 2


def test_train_config_validation():
    for kw in ({"learning_rate": -1}, {"mode": "X"}, {"optimizer": "rms"}, {"patience": 0}, {"select": "mid"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_trace_csv(tmp_path):
    staged, valid = _fit_inputs()
    res = fit(TrainConfig(dim=4, epochs_max=2), staged, valid)
    res.trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_metric" and len(lines) == 3
