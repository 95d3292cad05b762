import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgdm import autodiff as ad
from tgdm.autodiff import Tensor
from tgdm.data import DomainShiftSpec, generate_synthetic_domain, mix_episodes, sample_episode
from tgdm.model import (CheckpointError, LossWeights, ModelConfig, drgn_forward,
                        episode_ce_loss, episode_loss, extract_features, fsl_loss, gnn_classify,
                        init_drgn, init_mixup3t, load_params, predict_episode, predict_logits,
                        save_params, select)

from gradcheck import kink_safe_check

SMALL = ModelConfig(in_dim=4, n_way=3, extractor_widths=(8, 6), rounds=2, edge_hidden=8,
                    node_width=8, drgn_hidden=(6, 6))


def _episodes(seed=0, cfg=SMALL, k=1, q=2):
    src = generate_synthetic_domain(seed, 6, 8, cfg.in_dim, DomainShiftSpec(), "s")
    tgt = generate_synthetic_domain(seed + 1, 6, 8, cfg.in_dim, DomainShiftSpec(60, 0.5), "t")
    rng = np.random.default_rng(seed)
    return (sample_episode(src, src.class_names, cfg.n_way, k, q, rng),
            sample_episode(tgt, tgt.class_names, cfg.n_way, k, q, rng))


def _params(seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    return init_mixup3t(cfg, rng), init_drgn(cfg, rng)


# -------------------------------------------------------------- extractor

def test_identity_extractor_passes_input_through():
    params = {"extractor.0.weight": Tensor(np.eye(4)), "extractor.0.bias": Tensor(np.zeros(4))}
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(extract_features(params, x).data, x)


def test_zero_extractor_gives_zero_features():
    theta, _ = _params()
    zeroed = {k: Tensor(np.zeros(v.shape)) if k.startswith("extractor") else v
              for k, v in theta.items()}
    out = extract_features(zeroed, np.ones((3, 4)))
    assert out.shape == (3, 6) and not np.any(out.data)


def test_extractor_shape_error():
    theta, _ = _params()
    with pytest.raises(ad.ShapeError, match=r"\[m, 4\]"):
        extract_features(theta, np.ones((3, 5)))


def test_default_architecture_shapes():
    theta = init_mixup3t(ModelConfig(in_dim=16), np.random.default_rng(0))
    assert theta["extractor.0.weight"].shape == (16, 64)
    assert theta["extractor.1.weight"].shape == (64, 32)
    assert theta["classifier.round0.edge0.weight"].shape == (37, 16)
    assert theta["classifier.round0.node.weight"].shape == (74, 32)
    assert theta["classifier.round1.node.weight"].shape == (64, 32)
    assert theta["classifier.readout.weight"].shape == (32, 5)
    omega = init_drgn(ModelConfig(in_dim=16), np.random.default_rng(0))
    assert [omega[f"drgn.{i}.weight"].shape for i in range(3)] == [(1, 16), (16, 16), (16, 1)]


def test_init_is_bounded_and_seeded():
    a, _ = _params(3)
    b, _ = _params(3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    w = a["extractor.0.weight"].data
    assert np.all(np.abs(w) <= 1 / math.sqrt(4))


# ---------------------------------------------------------------- classifier

def test_adjacency_rows_are_probability_vectors():
    theta, _ = _params()
    e_s, _ = _episodes(k=2, q=3)
    fq = extract_features(theta, e_s.query)
    fs = extract_features(theta, e_s.support)
    logits, adjs = gnn_classify(theta, fq, fs, e_s.support_labels, return_adjacency=True)
    assert logits.shape == (9, 3) and len(adjs) == 2
    for a in adjs:
        assert np.all(a.data >= 0)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)


def test_support_permutation_invariance():
    theta, _ = _params(1)
    e_s, _ = _episodes(2, k=2, q=3)
    fq = extract_features(theta, e_s.query)
    fs = extract_features(theta, e_s.support)
    base = gnn_classify(theta, fq, fs, e_s.support_labels).data
    perm = np.random.default_rng(0).permutation(len(e_s.support_labels))
    fs_p = extract_features(theta, e_s.support[perm])
    got = gnn_classify(theta, fq, fs_p, e_s.support_labels[perm]).data
    np.testing.assert_allclose(got, base, atol=1e-12)
    qperm = np.random.default_rng(1).permutation(fq.shape[0])
    got_q = gnn_classify(theta, extract_features(theta, e_s.query[qperm]), fs,
                         e_s.support_labels).data
    np.testing.assert_allclose(got_q, base[qperm], atol=1e-12)


def test_missing_support_class_is_an_error():
    theta, _ = _params()
    with pytest.raises(ValueError, match=r"classes \[2\]"):
        gnn_classify(theta, np.ones((2, 6)), np.ones((2, 6)), [0, 1])


def test_uniform_logits_give_log_n():
    theta, _ = _params()
    theta = dict(theta)
    theta["classifier.readout.weight"] = Tensor(np.zeros((8, 3)))
    theta["classifier.readout.bias"] = Tensor(np.zeros(3))
    e_s, _ = _episodes()
    assert abs(episode_loss(theta, e_s).item() - math.log(3)) < 1e-12
    assert abs(ad.cross_entropy(np.zeros((4, 5)), [0, 1, 2, 3]).item() - math.log(5)) < 1e-12


def test_hand_built_cross_entropy():
    expected = math.log(1 + math.exp(-2))
    assert ad.cross_entropy(np.array([[2.0, 0.0], [0.0, 2.0]]), [0, 1]).item() == \
        pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.1269, abs=1e-4)
    assert ad.cross_entropy(np.array([[800.0, 0.0]]), [0]).item() < 1e-300


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ad.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_fsl_loss_weighting():
    theta, _ = _params()
    e_s, e_t = _episodes()
    e_mix = mix_episodes(e_s, e_t, 0.3)
    total, (ls, lt, lm) = fsl_loss(theta, e_s, e_t, e_mix)
    assert total.item() == pytest.approx(0.25 * ls + 0.25 * lt + 0.5 * lm, abs=1e-14)
    only_s, _ = fsl_loss(theta, e_s, e_t, e_mix, LossWeights(1, 0, 0))
    assert only_s.item() == ls
    zero, _ = fsl_loss(theta, e_s, e_t, e_mix, LossWeights(0, 0, 0))
    grads = ad.backward_grads(zero, ad.tracked_copy(theta))
    assert zero.item() == 0.0 and all(not np.any(g.data) for g in grads.values())
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)


def test_fsl_loss_without_mixed_episode():
    theta, _ = _params()
    e_s, e_t = _episodes()
    total, (ls, lt, lm) = fsl_loss(theta, e_s, e_t, None, LossWeights(0.5, 0.5, 0.0))
    assert math.isnan(lm) and total.item() == pytest.approx(0.5 * ls + 0.5 * lt)


# relu and abs make the model piecewise smooth; coordinates whose perturbation
# crosses a kink are excluded, and h is large enough to keep rounding noise
# well below tolerance on the smallest gradient entries
FD_STEP = 3e-4


def _checked(result):
    assert result.skipped <= 0.2 * (result.compared + result.skipped)
    return result.max_rel_error


@pytest.mark.parametrize("seed", range(3))
def test_classifier_gradients_match_finite_differences(seed):
    theta, _ = _params(seed)
    e_s, _ = _episodes(seed)
    assert _checked(kink_safe_check(lambda p: episode_loss(p, e_s), theta, FD_STEP)) < 1e-4


def composite_loss(e_s, e_t, l_t_val=0.7):
    """Tri-task loss with the mixed episode built from the ratio network output."""
    def loss(p):
        lam = drgn_forward(select(p, ["drgn"]), l_t_val)
        e_mix = mix_episodes(e_s, e_t, lam)
        return fsl_loss(select(p, ["extractor", "classifier"]), e_s, e_t, e_mix)[0]
    return loss


@pytest.mark.parametrize("seed", range(3))
def test_full_composite_gradients_match_finite_differences(seed):
    theta, omega = _params(seed)
    e_s, e_t = _episodes(seed)
    result = kink_safe_check(composite_loss(e_s, e_t), {**theta, **omega}, FD_STEP)
    assert _checked(result) < 1e-4


def test_extractor_gradients_plain_check():
    theta, _ = _params(0)
    e_s, _ = _episodes(0)
    ext = select(theta, ["extractor"])
    rest = select(theta, ["classifier"])
    assert ad.finite_diff_check(lambda p: episode_loss({**p, **rest}, e_s), ext, 1e-5) < 1e-4


# ---------------------------------------------------------------- ratio net

def test_drgn_zero_weights_give_half():
    omega = {k: Tensor(np.zeros(v.shape)) for k, v in _params()[1].items()}
    assert drgn_forward(omega, 1.3).item() == 0.5


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-1e6, 1e6), seed=st.integers(0, 50))
def test_drgn_output_strictly_inside_unit_interval(x, seed):
    _, omega = _params(seed)
    lam = drgn_forward(omega, x).item()
    assert 0.0 < lam < 1.0


def test_drgn_extreme_inputs_and_errors():
    _, omega = _params()
    for x in (-1e6, 0.0, 1e6):
        assert 0.0 < drgn_forward(omega, x).item() < 1.0
    for bad in (float("nan"), float("inf")):
        with pytest.raises(ValueError, match="finite"):
            drgn_forward(omega, bad)


@pytest.mark.parametrize("seed", range(3))
def test_drgn_gradients_match_finite_differences(seed):
    _, omega = _params(seed)
    assert ad.finite_diff_check(lambda p: drgn_forward(p, 0.9), omega, 1e-5) < 1e-4


# ---------------------------------------------------------------- prediction

def test_argmax_and_ties():
    assert predict_logits(np.array([[0.1, 0.9, 0.3, 0.2, 0.1]]))[0] == 1
    assert predict_logits(np.array([[1.0, 1.0, 0.0, 0.0, 0.0]]))[0] == 0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-100, 100))
def test_prediction_shift_invariance(seed, c):
    logits = np.random.default_rng(seed).standard_normal((6, 5))
    shifts = c * np.arange(6)[:, None]
    np.testing.assert_array_equal(predict_logits(logits), predict_logits(logits + shifts))


def test_predict_episode_shape():
    theta, _ = _params()
    e_s, _ = _episodes(q=4)
    pred = predict_episode(theta, e_s)
    assert pred.shape == (12,) and set(pred) <= {0, 1, 2}


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    theta, omega = _params()
    params = {**theta, **omega, "scalar": Tensor(2.5)}
    save_params(tmp_path / "m.ckpt", params)
    got = load_params(tmp_path / "m.ckpt")
    assert list(got) == list(params)
    assert all(got[k].data.tobytes() == params[k].data.tobytes() for k in params)
    assert got["scalar"].shape == ()


def test_checkpoint_errors(tmp_path):
    theta, _ = _params()
    save_params(tmp_path / "m.ckpt", theta)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    (tmp_path / "long.ckpt").write_bytes(raw + b"xx")
    with pytest.raises(CheckpointError, match="magic"):
        load_params(tmp_path / "magic.ckpt")
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "short.ckpt")
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(tmp_path / "long.ckpt")
