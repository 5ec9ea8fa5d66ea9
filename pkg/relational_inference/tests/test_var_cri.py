# tests/test_var_cri.py

import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import logsumexp

from app.config import apply_overrides, default_config
from app.decoder.bank import EdgeModelBank
from app.errors import ConfigError, DegeneracyError
from app.graph.realizations import enumerate_realizations
from app.inference import common, cri, trainer, var_cri
from app.inference.var_cri import GroupPartition, VarState
from app.nn.optim import AdamState


def _config(n_groups):
    return apply_overrides(default_config("spring", seed=0), ["model.method=var-cri", f"var_cri.n_groups={n_groups}"])


def _bank(kind, seed, sigma2=0.5):
    widths = [10, 6, 2] if kind == "physics_induced" else [10, 6, 3]
    return EdgeModelBank.create(kind, widths, 2, sigma2, np.random.default_rng(seed), node_hidden=5)


def _adam(bank):
    return tuple(AdamState.zeros(p.size) for _, p in bank.networks())


# ==============================================================================
# 分组
# ==============================================================================

def test_contiguous_partitions():
    assert GroupPartition.contiguous(5, 2).groups == ((0, 1, 2), (3, 4))
    assert GroupPartition.contiguous(4, 10).groups == ((0,), (1,), (2,), (3,))
    assert GroupPartition.contiguous(3, 1).sizes == [3]
    assert GroupPartition.contiguous(0, 2).groups == ()


def test_invalid_partitions_raise():
    with pytest.raises(ConfigError):
        GroupPartition(((0, 2), (1,)))
    with pytest.raises(ConfigError):
        GroupPartition(((0,), ()))
    with pytest.raises(ConfigError):
        GroupPartition.contiguous(3, 0)


def test_embedded_one_hot_masks_other_slots():
    part = GroupPartition.contiguous(3, 2)
    tables = part.tables(2, 1 << 20)
    oh = part.embedded_one_hot(tables)
    assert oh[0].shape == (4, 3, 2) and oh[1].shape == (2, 3, 2)
    assert_array_equal(oh[0][:, 2], np.zeros((4, 2)))
    assert_array_equal(oh[1][:, :2], np.zeros((2, 2, 2)))


# ==============================================================================
# 平均场 E 步
# ==============================================================================

@pytest.mark.parametrize("kind", ["physics_induced", "message_passing"])
def test_single_group_is_exact_posterior(kind, make_random_dataset, rng):
    ds = make_random_dataset(rng, S=2, T=3, N=3)
    bank = _bank(kind, seed=1)
    config = _config(1)
    ctx = var_cri.prepare(ds, config, bank)
    state = var_cri.e_step(VarState(bank, var_cri.initial_priors(2, ctx.partition), _adam(bank)), ctx, config)

    exact = cri.e_step(cri.CriState(bank, np.array([0.5, 0.5]), _adam(bank)), cri.prepare(ds, config))
    assert_allclose(state.factors[0], exact.posterior, rtol=1e-9, atol=1e-12)
    assert state.elbo == pytest.approx(exact.marginal_log_likelihood, rel=1e-9)


def test_separable_likelihood_is_solved_in_one_sweep(rng):
    a = rng.normal(size=(2, 3, 2))
    b = rng.normal(size=(2, 3, 2))
    ll = (a[..., :, None] + b[..., None, :]).reshape(2, 3, 4)
    part = GroupPartition.contiguous(2, 2)
    tables = part.tables(2, 1 << 20)
    log_omegas = [np.log([0.3, 0.7])] * 2
    q, history = var_cri.mean_field_update(ll, part, tables, log_omegas, sweeps=1)
    assert len(history) == 1
    for factor, term in zip(q, (a, b)):
        logits = np.log([0.3, 0.7]) + term
        assert_allclose(factor, np.exp(logits - logsumexp(logits, axis=-1, keepdims=True)), rtol=1e-10)


def _kl_to_exact(q, ll, log_omegas):
    joint_q = (q[0][..., :, None] * q[1][..., None, :]).reshape(ll.shape)
    log_prior = (log_omegas[0][:, None] + log_omegas[1][None, :]).reshape(-1)
    log_post = ll + log_prior - logsumexp(ll + log_prior, axis=-1, keepdims=True)
    return float(np.sum(joint_q * (np.log(joint_q) - log_post)))


def test_collapsed_factor_raises(caplog):
    logits = np.zeros((1, 2, 3))
    logits[0, 1] = -np.inf
    with caplog.at_level(logging.WARNING, logger="app.inference.var_cri"), pytest.raises(DegeneracyError, match="第 1 组"):
        var_cri._normalize(logits, 1)
    assert "[0, 1]" in caplog.text


def test_elbo_rises_and_kl_falls_over_sweeps(rng):
    ll = rng.normal(scale=3.0, size=(1, 2, 16))
    part = GroupPartition.contiguous(4, 2)
    tables = part.tables(2, 1 << 20)
    log_omegas = [np.log(rng.dirichlet(np.ones(4))) for _ in range(2)]
    q, elbos, kls = None, [], []
    for _ in range(8):
        q, history = var_cri.mean_field_update(ll, part, tables, log_omegas, sweeps=1, tol=0.0, factors=q)
        elbos.append(history[-1])
        kls.append(_kl_to_exact(q, ll, log_omegas))
        for f in q:
            assert_allclose(f.sum(axis=-1), 1.0, atol=1e-12)
    assert all(after >= before - 1e-9 for before, after in zip(elbos, elbos[1:]))
    assert all(after <= before + 1e-9 for before, after in zip(kls, kls[1:]))
    assert min(kls) >= -1e-12
    exact = float(logsumexp(ll + (log_omegas[0][:, None] + log_omegas[1][None, :]).reshape(-1), axis=-1).sum())
    assert elbos[-1] == pytest.approx(exact - kls[-1], rel=1e-9)


def test_additive_path_matches_general_path(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=2, T=3, N=4)
    bank = _bank("physics_induced", seed=2)
    ctx = var_cri.prepare(ds, _config(2), bank)
    log_omegas = [np.log(rng.dirichlet(np.ones(t.size))) for t in ctx.group_tables]

    _, U = var_cri._group_increments(bank, ctx.batch, ctx.group_one_hot)
    q_add, h_add = var_cri.additive_mean_field(ctx.batch.increments, U, log_omegas, bank.sigma2, sweeps=4, tol=0.0)

    full = enumerate_realizations(2, 3)
    ll = common.log_likelihood_table(bank, ctx.batch, full.one_hot).sum(axis=1)
    q_gen, h_gen = var_cri.mean_field_update(ll, ctx.partition, ctx.group_tables, log_omegas, sweeps=4, tol=0.0)

    for a, b in zip(q_add, q_gen):
        assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    assert_allclose(h_add, h_gen, rtol=1e-9)


def test_singleton_groups(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=1, T=2, N=4)
    bank = _bank("physics_induced", seed=3)
    config = _config(10)
    ctx = var_cri.prepare(ds, config, bank)
    assert ctx.partition.sizes == [1, 1, 1]
    priors = var_cri.initial_priors(2, ctx.partition)
    assert list(priors) == [1]
    state = var_cri.e_step(VarState(bank, priors, _adam(bank)), ctx, config)
    assert len(state.factors) == 3 and state.factors[0].shape == (1, 4, 2)
    types = var_cri.infer_edge_types(state, ctx)
    assert_array_equal(np.diag(types[0]), -np.ones(4))
    assert set(np.unique(types[0][~np.eye(4, dtype=bool)])) <= {0, 1}


# ==============================================================================
# M 步与读出
# ==============================================================================

def test_group_priors_average_factors_by_size(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=1, T=2, N=4)
    bank = _bank("physics_induced", seed=4)
    ctx = var_cri.prepare(ds, _config(2), bank)
    f0 = rng.dirichlet(np.ones(4), size=(1, 4))
    f1 = rng.dirichlet(np.ones(2), size=(1, 4))
    state = VarState(bank, var_cri.initial_priors(2, ctx.partition), _adam(bank), factors=(f0, f1))
    priors = var_cri.m_step_priors(state, ctx).priors
    assert sorted(priors) == [1, 2]
    assert_allclose(priors[2], f0[0].mean(axis=0), rtol=1e-12)
    assert_allclose(priors[1], f1[0].mean(axis=0), rtol=1e-12)


def test_factor_argmax_readout(make_random_dataset, rng):
    ds = make_random_dataset(rng, S=1, T=2, N=4)
    bank = _bank("physics_induced", seed=5)
    ctx = var_cri.prepare(ds, _config(2), bank)
    f0 = np.eye(4)[[3, 0, 2, 1]][None]
    f1 = np.eye(2)[[1, 0, 0, 1]][None]
    types = var_cri.infer_edge_types(VarState(bank, {}, (), factors=(f0, f1)), ctx)
    # 节点 0 的邻居 [1, 2, 3]：前两个槽位来自 z=3 -> (1, 1)，第三个槽位为 1
    assert_array_equal(types[0, 0], [-1, 1, 1, 1])
    assert_array_equal(types[0, 1], [0, -1, 0, 0])


def test_train_var_records_partition(spring_config, spring_splits):
    config = apply_overrides(spring_config, ["model.method=var-cri", "var_cri.n_groups=2"])
    train, valid, _ = spring_splits
    result = trainer.train_var(config, train, valid)
    assert result.last.method == "var-cri"
    assert result.last.partition == [[0, 1], [2]]
    assert sorted(result.last.priors) == [1, 2]
    assert len(result.history) == 3
    assert all(np.isfinite(row["marginal_log_likelihood"]) for row in result.history)
    assert result.edge_types.shape == (train.n_sims, 4, 4)
