import math

import numpy as np
import pytest

from tgdm import autodiff as ad
from tgdm.autodiff import Tensor
from tgdm.benchmark import synthetic_pair
from tgdm.data import DomainShiftSpec, SplitConfig, make_splits, mix_episodes, split_datasets
from tgdm.model import LossWeights, drgn_forward, episode_loss, fsl_loss, predict_episode
from tgdm.trainer import (AdamState, IterationLog, TrainConfig, TrainingError, adam_step,
                          drgn_update, initial_params, iteration_episodes, log_to_csv,
                          pseudo_step, theta_update, train)

TINY = dict(n_way=2, k_shot=1, n_query=2, extractor_widths=(8, 6), edge_hidden=8,
            node_width=8, drgn_hidden=(6, 6), log_timing=False, log_every=0)


def _setup(seed=0, **kw):
    cfg = TrainConfig(**{**TINY, "seed": seed, **kw})
    source, target = synthetic_pair(seed, 8, 8, 10, 4, DomainShiftSpec(60, 0.5, 1.0))
    split = make_splits(source, target, SplitConfig(n_aux=3, aux_per_class=6, seed=seed))
    d_sb, d_aux, _ = split_datasets(source, target, split)
    theta, omega = initial_params(cfg, 4)
    eps = iteration_episodes(d_sb, d_aux, cfg, 0)
    return cfg, (source, target, split), theta, omega, eps


def _checksums(params):
    return {k: v.data.tobytes() for k, v in params.items()}


# ------------------------------------------------------------------- adam

def test_adam_first_step_hand_computation():
    params = {"a": Tensor(0.0), "b": Tensor(2.0)}
    grads = {"a": np.array(1.0), "b": np.array(0.0)}
    st = AdamState()
    out = adam_step(params, grads, st, lr=0.001, weight_decay=1e-5)
    assert out["a"].item() == pytest.approx(-0.001 / (1 + 1e-8) - 0.0, abs=1e-18)
    assert out["b"].item() == pytest.approx(2.0 - 0.001 * 1e-5 * 2.0, abs=1e-18)
    assert st.step == 1 and params["a"].item() == 0.0


def test_adam_second_step_hand_computation():
    st = AdamState()
    p = adam_step({"a": Tensor(0.0)}, {"a": np.array(1.0)}, st, 0.01)
    p = adam_step(p, {"a": np.array(-0.5)}, st, 0.01)
    m = 0.9 * 0.1 + 0.1 * -0.5
    v = 0.999 * 0.001 + 0.001 * 0.25
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = -0.01 / (1 + 1e-8) - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p["a"].item() == pytest.approx(expected, abs=1e-15)


def test_adam_zero_gradient_is_identity_and_shapes_checked():
    params = {"w": Tensor(np.arange(4.0).reshape(2, 2))}
    out = adam_step(params, {"w": np.zeros((2, 2))}, AdamState(), 0.1)
    assert out["w"].data.tobytes() == params["w"].data.tobytes()
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"w": np.zeros(4)}, AdamState(), 0.1)


# ------------------------------------------------------------ pseudo step

def test_pseudo_step_does_not_mutate_inputs():
    cfg, _, theta, omega, eps = _setup()
    before = (_checksums(theta), _checksums(omega))
    ps = pseudo_step(theta, omega, eps.e_s, eps.e_t, 1.2, cfg, eps.mix_seed)
    assert (_checksums(theta), _checksums(omega)) == before
    assert any(ps.theta_hat[k].data.tobytes() != theta[k].data.tobytes() for k in theta)


def test_pseudo_step_zero_step_size_returns_theta():
    cfg, _, theta, omega, eps = _setup(inner_step_size=0.0)
    ps = pseudo_step(theta, omega, eps.e_s, eps.e_t, 1.2, cfg, eps.mix_seed)
    assert _checksums(ps.theta_hat) == _checksums(theta)


def test_pseudo_step_is_plain_gradient_step():
    cfg, _, theta, omega, eps = _setup(inner_step_size=0.05)
    ps = pseudo_step(theta, omega, eps.e_s, eps.e_t, 0.8, cfg, eps.mix_seed)
    lam = drgn_forward(omega, 0.8).item()
    rng = np.random.default_rng(eps.mix_seed)
    tracked = ad.tracked_copy(theta)
    loss, _ = fsl_loss(tracked, eps.e_s, eps.e_t, mix_episodes(eps.e_s, eps.e_t, lam, rng))
    grads = ad.backward_grads(loss, tracked)
    for k in theta:
        np.testing.assert_allclose(ps.theta_hat[k].data, theta[k].data - 0.05 * grads[k].data,
                                   rtol=0, atol=1e-14)


def test_zero_drgn_gives_half_regardless_of_loss():
    cfg, _, theta, omega, eps = _setup()
    zero = {k: Tensor(np.zeros(v.shape)) for k, v in omega.items()}
    for l_prev in (0.0, 1.6, 50.0):
        assert pseudo_step(theta, zero, eps.e_s, eps.e_t, l_prev, cfg).lambda_hat == 0.5


# ------------------------------------------------------------ drgn update

def test_no_mix_weight_means_zero_hypergradient():
    cfg, _, theta, omega, eps = _setup(weights=LossWeights(0.25, 0.25, 0.0))
    upd = drgn_update(omega, AdamState(), theta, eps.e_s, eps.e_t, eps.e_t_val, 1.0, cfg,
                      eps.mix_seed)
    assert all(not np.any(g) for g in upd.hypergrad.values())
    for k in omega:
        np.testing.assert_array_equal(upd.omega[k].data,
                                      omega[k].data - cfg.lr_omega * 1e-5 * omega[k].data)


def test_drgn_update_is_deterministic():
    cfg, _, theta, omega, eps = _setup()
    a = drgn_update(omega, AdamState(), theta, eps.e_s, eps.e_t, eps.e_t_val, 1.0, cfg,
                    eps.mix_seed)
    b = drgn_update(omega, AdamState(), theta, eps.e_s, eps.e_t, eps.e_t_val, 1.0, cfg,
                    eps.mix_seed)
    assert _checksums(a.omega) == _checksums(b.omega)


def _post_step_val_loss(theta, omega_arrays, eps, cfg, l_prev):
    """Validation loss after one plain step, recomputed from scratch (no second order)."""
    omega = {k: Tensor(v) for k, v in omega_arrays.items()}
    lam = drgn_forward(omega, l_prev).item()
    th = ad.tracked_copy(theta)
    e_mix = mix_episodes(eps.e_s, eps.e_t, lam, np.random.default_rng(eps.mix_seed))
    grads = ad.backward_grads(fsl_loss(th, eps.e_s, eps.e_t, e_mix, cfg.weights)[0], th)
    stepped = {k: Tensor(theta[k].data - cfg.inner_step * grads[k].data) for k in theta}
    return episode_loss(stepped, eps.e_t_val).item()


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_hypergradient_matches_finite_differences(seed):
    # the finite difference goes through lambda only, so a larger
    # inner step keeps the signal above double-precision noise
    cfg, _, theta, omega, eps = _setup(seed, inner_step_size=0.5)
    upd = drgn_update(omega, AdamState(), theta, eps.e_s, eps.e_t, eps.e_t_val, 1.1, cfg,
                      eps.mix_seed)
    fd = ad.numeric_grad(lambda arrs: _post_step_val_loss(theta, arrs, eps, cfg, 1.1),
                         omega, 1e-5)
    assert ad.max_rel_error(upd.hypergrad, fd) < 1e-3


def test_quadratic_oracle_direction():
    """Adam moves omega against the sign of the closed-form hypergradient."""
    inner = lambda th, om: ad.add(
        ad.mul(ad.sigmoid(om["w"]), ad.power(ad.sub(th["t"], 1.0), 2.0)),
        ad.mul(ad.sub(1.0, ad.sigmoid(om["w"])), ad.power(ad.sub(th["t"], 3.0), 2.0)))
    outer = lambda th: ad.power(ad.sub(th["t"], 2.0), 2.0)
    omega = {"w": Tensor(0.0)}
    hg = ad.hypergradient(inner, outer, {"t": Tensor(0.0)}, omega, 0.1)
    new = adam_step(omega, hg, AdamState(), 1e-4)
    assert hg["w"].item() > 0 and new["w"].item() < 0


# ----------------------------------------------------------- theta update

def test_source_only_weights_reduce_to_source_step():
    cfg, _, theta, omega, eps = _setup(weights=LossWeights(1.0, 0.0, 0.0))
    new, lam, loss, comps = theta_update(theta, AdamState(), omega, eps.e_s, eps.e_t, 1.0, cfg,
                                         eps.mix_seed)
    tracked = ad.tracked_copy(theta)
    ls = episode_loss(tracked, eps.e_s)
    direct = adam_step(theta, ad.backward_grads(ls, tracked), AdamState(), cfg.lr_theta)
    assert loss == ls.item() == comps[0]
    for k in theta:
        np.testing.assert_allclose(new[k].data, direct[k].data, rtol=0, atol=1e-15)


def test_frozen_ratio_matches_fixed_lambda_training():
    cfg, (source, target, split), theta, omega, _ = _setup(iterations=5)
    frozen = {k: Tensor(np.zeros(v.shape)) for k, v in omega.items()}
    frozen["drgn.2.bias"] = Tensor(np.full(1, 0.8))
    c = drgn_forward(frozen, 0.0).item()
    d_sb, d_aux, _ = split_datasets(source, target, split)
    th, adam = theta, AdamState()
    for t in range(5):
        eps = iteration_episodes(d_sb, d_aux, cfg, t)
        th, lam, _, _ = theta_update(th, adam, frozen, eps.e_s, eps.e_t, 3.0 * t, cfg,
                                     eps.mix_seed)
        assert lam == c
    fixed = train(source, target, split, cfg, "m3t-fixed", fixed_lambda=c)
    assert _checksums(th) == _checksums(fixed.theta)


def test_overfit_single_episode():
    cfg, _, theta, _, eps = _setup(0)
    adam, losses = AdamState(), []
    for _ in range(50):
        tracked = ad.tracked_copy(theta)
        loss = episode_loss(tracked, eps.e_s)
        losses.append(loss.item())
        theta = adam_step(theta, ad.backward_grads(loss, tracked), adam, 0.01)
    assert losses[-1] < 0.5 * losses[0]


def test_two_cluster_fit_reaches_full_train_accuracy():
    cfg, _, theta, _, eps = _setup(1, n_query=5)
    rng = np.random.default_rng(0)
    centers = np.array([[4.0, 0, 0, 0], [-4.0, 0, 0, 0]])
    support = centers + 0.1 * rng.standard_normal((2, 4))
    query = np.repeat(centers, 5, axis=0) + 0.1 * rng.standard_normal((10, 4))
    query[0] = support[0]
    ep = type(eps.e_s)(2, 1, 5, support, query, np.array([0, 1]), np.repeat([0, 1], 5),
                       ("a", "b"))
    adam = AdamState()
    for _ in range(200):
        tracked = ad.tracked_copy(theta)
        theta = adam_step(theta, ad.backward_grads(episode_loss(tracked, ep), tracked),
                          adam, 0.01)
    pred = predict_episode(theta, ep)
    assert pred[0] == 0 and np.mean(pred == ep.query_labels) >= 0.99


# ------------------------------------------------------------- full loop

def test_single_iteration_loop():
    cfg, (source, target, split), theta, omega, _ = _setup(iterations=1)
    res = train(source, target, split, cfg, "tgdm")
    assert len(res.log) == 1 and res.log[0].t == 0
    assert _checksums(res.omega) != _checksums(omega)
    assert _checksums(res.theta) != _checksums(theta)


def test_loop_is_deterministic_and_lambdas_open():
    cfg, data, _, _, _ = _setup(iterations=12)
    a = train(*data, cfg, "tgdm")
    b = train(*data, cfg, "tgdm")
    assert log_to_csv(a.log) == log_to_csv(b.log)
    assert [r.t for r in a.log] == list(range(12))
    for r in a.log:
        assert 0 < r.lambda_hat < 1 and 0 < r.lam < 1


def test_variants_share_streams_and_differ():
    cfg, data, _, _, _ = _setup(iterations=3)
    logs = {v: train(*data, cfg, v, fixed_lambda=0.4).log for v in
            ("m-base", "base-m3t", "m3t-fixed")}
    assert all(math.isnan(r.lam) and math.isnan(r.loss_mix) for r in logs["m-base"])
    assert all(r.lam == 0.4 for r in logs["m3t-fixed"])
    assert len({r.lam for r in logs["base-m3t"]}) == 3
    # same episodes and initial parameters: the source loss of iteration 0 agrees
    assert len({logs[v][0].loss_s for v in logs}) == 1


def test_loop_errors():
    cfg, data, _, _, _ = _setup(iterations=1)
    with pytest.raises(ValueError, match="unknown variant"):
        train(*data, cfg, "nope")
    with pytest.raises(ValueError, match="fixed_lambda"):
        train(*data, cfg, "m3t-fixed")
    bad = TrainConfig(**{**TINY, "n_query": 40, "iterations": 1})
    with pytest.raises(TrainingError, match="setup.*needs 41"):
        train(*data, bad, "tgdm")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_omega=0.0)
    assert TrainConfig().inner_step == 0.001


def test_csv_row_format():
    row = IterationLog(3, 0.5, 0.25, 1.0, 2.0, float("nan"), 3.0, 0.1, 12.3456)
    assert IterationLog.CSV_HEADER == \
        "iter,lambda_hat,lambda,loss_s,loss_t,loss_mix,loss_fsl,loss_tval,ms"
    assert row.csv_row() == "3,0.5,0.25,1.0,2.0,nan,3.0,0.1,12.346"
