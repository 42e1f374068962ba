import dataclasses
import math

import numpy as np
import pytest

from xsyscomb import autograd as ag
from xsyscomb.adaptation import (
    AdaptationSet, AdaptHyper, LhucTransform, VariationalLhuc, apply_lhuc, blhuc_objective, blhuc_predict,
    blhuc_predict_mc, estimate_blhuc, estimate_lhuc, kl_gaussian, kl_monte_carlo, load_transform,
    load_transforms, model_log_probs, save_transform, sequence_losses, xi,
)
from xsyscomb.autograd import ShapeError, Tensor, grad_check
from xsyscomb.corpus import FeatureSequence, Speaker, render_utterance
from xsyscomb.rng import Stream
from xsyscomb.tdnn import TdnnConfig, TrainHyper, train_frame_system

from conftest import random_utterance

TDNN = TdnnConfig(hidden_dim=24, bottleneck_dim=8, conv_layers=1, conv_channels=2,
                  offsets=((-1, 0, 1), (-1, 0, 1), (-3, 0, 3)), dropout=0.0)


@pytest.fixture(scope="module")
def trained(small_corpus):
    model, _ = train_frame_system(small_corpus, TDNN, TrainHyper(epochs=6, batch_size=4, lr=0.01), 2)
    return model


@pytest.fixture(scope="module")
def channel_speaker(small_corpus):
    """A speaker that differs from the identity only by a per-dimension channel scale."""
    cfg = small_corpus.config
    scale = Stream(5, "scale").uniform((cfg.feat_dim,), 0.5, 1.5)
    spk = Speaker("chan", scale, np.zeros(cfg.feat_dim), 1.0)
    stream = Stream(5, "chan/utts")
    utts = []
    for j, ref in enumerate(u.reference for u in small_corpus.splits["test"][:6]):
        frames = render_utterance(cfg, small_corpus.prototypes, spk, ref, stream)
        utts.append(FeatureSequence(frames, "chan", f"chan-{j}", ref))
    return AdaptationSet.from_references("chan", utts)


# ------------------------------------------------------------------- lhuc


def test_apply_lhuc_examples():
    h = Tensor(np.array([1.0, -2.0]))
    assert np.allclose(apply_lhuc(h, np.array([0.0, math.log(3)])).data, [1.0, -3.0], rtol=0, atol=1e-15)
    assert np.array_equal(apply_lhuc(h, np.zeros(2)).data, h.data)
    assert np.allclose(apply_lhuc(h, np.full(2, 30.0)).data, 2 * h.data, rtol=0, atol=1e-9)
    with pytest.raises(ShapeError):
        apply_lhuc(h, np.zeros(3))


def test_xi_range_and_monotone():
    r = np.linspace(-30, 30, 1001)
    v = xi(r)
    assert np.all(v > 0) and np.all(v < 2) and np.all(np.diff(v) > 0)


def test_zero_learning_rate_keeps_identity(trained, channel_speaker):
    t = estimate_lhuc(trained, channel_speaker, AdaptHyper(lr=0.0))
    assert all(np.all(v == 0) for v in t.params.values())
    utt = channel_speaker.utterances[0]
    assert np.array_equal(model_log_probs(trained, utt, t.as_lhuc()), model_log_probs(trained, utt, None))


def test_channel_scale_speaker_loss_decreases(trained, channel_speaker):
    s = channel_speaker
    si = ag.mean(sequence_losses(trained, s.utterances, s.supervision, None)).item()
    t = estimate_lhuc(trained, s, AdaptHyper(epochs=5))
    adapted = ag.mean(sequence_losses(trained, s.utterances, s.supervision, t.as_lhuc())).item()
    print(f"channel-scale speaker: SI loss {si:.4f}, adapted {adapted:.4f}")
    assert adapted < si


def test_backbone_is_untouched(trained, channel_speaker):
    before = {k: v.copy() for k, v in trained.state_arrays().items()}
    estimate_lhuc(trained, channel_speaker, AdaptHyper(epochs=1))
    estimate_blhuc(trained, channel_speaker, AdaptHyper(epochs=1))
    after = trained.state_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not trained.training


def test_empty_set_and_unknown_layer_rejected(trained, channel_speaker):
    with pytest.raises(ValueError):
        estimate_lhuc(trained, AdaptationSet("x", [], []))
    with pytest.raises(ValueError):
        estimate_blhuc(trained, channel_speaker, AdaptHyper(layers=("nowhere",)))


def test_adaptation_set_validation():
    u = random_utterance(8, 4, 0, speaker="a")
    with pytest.raises(ValueError):
        AdaptationSet("b", [u], [(0,)])
    with pytest.raises(ValueError):
        AdaptationSet("a", [u], [])
    with pytest.raises(ValueError):
        AdaptationSet("a", [u], [(0,)], source="oracle")


# --------------------------------------------------------------------- kl


def test_kl_examples():
    assert kl_gaussian([1.0], [1.0], [0.0], [1.0]) == 0.5
    q = (np.array([0.3, -1.2]), np.array([0.5, 2.0]))
    assert kl_gaussian(*q, *q) == 0.0
    assert kl_gaussian(np.zeros(4), np.ones(4), np.zeros(4), np.ones(4)) == 0.0
    with pytest.raises(ValueError):
        kl_gaussian([0.0], [0.0], [0.0], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_kl_matches_monte_carlo(seed):
    s = Stream(seed, "klpair")
    mq, mp = s.normal((1,)), s.normal((1,))
    sq, sp = s.uniform((1,), 0.5, 2.0), s.uniform((1,), 0.5, 2.0)
    exact = kl_gaussian(mq, sq, mp, sp)
    mc = kl_monte_carlo(mq, sq, mp, sp, 100_000, s.child("mc"))
    assert abs(mc - exact) <= max(0.01 * exact, 2e-3)


def test_kl_is_zero_at_standard_normal_initialization(trained, channel_speaker):
    s = channel_speaker
    hist = []
    estimate_blhuc(trained, s, AdaptHyper(epochs=1, sigma_init=1.0, lr=1e-12), history=hist)
    assert hist[0].l2 == pytest.approx(0.0, abs=1e-9)
    assert hist[0].bound == hist[0].l1 + hist[0].l2


# ------------------------------------------------------------------ blhuc


def test_zero_learning_rate_keeps_initial_posterior(trained, channel_speaker):
    post = estimate_blhuc(trained, channel_speaker, AdaptHyper(lr=0.0, sigma_init=0.5))
    for k in post.mu:
        assert np.all(post.mu[k] == 0) and np.allclose(post.sigma(k), 0.5, rtol=1e-15)


def test_clamped_sigma_reproduces_lhuc_trajectory(trained, channel_speaker):
    hyper = AdaptHyper(epochs=2, batch_size=2)
    lhuc_traj, blhuc_traj = [], []
    estimate_lhuc(trained, channel_speaker, hyper, seed=3, trajectory=lhuc_traj)
    estimate_blhuc(trained, channel_speaker, dataclasses.replace(hyper, sigma_clamp=1e-8, kl_weight=0.0),
                   seed=3, trajectory=blhuc_traj)
    assert len(lhuc_traj) == len(blhuc_traj) == 6
    for a, b in zip(lhuc_traj, blhuc_traj):
        for k in a:
            assert np.allclose(a[k], b[k], rtol=1e-5, atol=1e-7)


def test_blhuc_objective_gradients(trained, channel_speaker):
    s = channel_speaker
    utts, sup = s.utterances[:2], s.supervision[:2]
    widths = trained.lhuc_widths()
    eps = {k: Stream(1, k).normal((w,)) for k, w in widths.items()}
    mu0 = {k: Stream(2, k).normal((w,)) * 0.3 for k, w in widths.items()}
    ls0 = {k: np.full(w, math.log(0.4)) for k, w in widths.items()}
    layer = "prefinal"

    def wrt_mu(m):
        mu = {k: (m if k == layer else Tensor(v)) for k, v in mu0.items()}
        return blhuc_objective(trained, utts, sup, mu, {k: Tensor(v) for k, v in ls0.items()}, eps, 10)[0]

    def wrt_log_sigma(ls):
        sig = {k: (ls if k == layer else Tensor(v)) for k, v in ls0.items()}
        return blhuc_objective(trained, utts, sup, {k: Tensor(v) for k, v in mu0.items()}, sig, eps, 10)[0]

    assert grad_check(wrt_mu, mu0[layer]) < 1e-4
    assert grad_check(wrt_log_sigma, ls0[layer]) < 1e-4


def test_lhuc_path_gradient(trained, channel_speaker):
    s = channel_speaker
    r0 = Stream(4, "r").normal((TDNN.hidden_dim,)) * 0.3
    f = lambda r: ag.mean(sequence_losses(trained, s.utterances[:2], s.supervision[:2], {"layer2": r}))
    assert grad_check(f, r0) < 1e-4


def test_zero_mean_prediction_is_speaker_independent(trained, channel_speaker):
    utt = channel_speaker.utterances[0]
    widths = trained.lhuc_widths()
    post = VariationalLhuc("chan", {k: np.zeros(w) for k, w in widths.items()},
                           {k: np.full(w, 1.3) for k, w in widths.items()})
    assert np.array_equal(blhuc_predict(trained, post, utt), model_log_probs(trained, utt, None))


def test_prediction_ignores_sigma(trained, channel_speaker):
    utt = channel_speaker.utterances[0]
    post = estimate_blhuc(trained, channel_speaker, AdaptHyper(epochs=1))
    other = dataclasses.replace(post, log_sigma={k: v + 2.0 for k, v in post.log_sigma.items()})
    assert np.array_equal(blhuc_predict(trained, post, utt), blhuc_predict(trained, other, utt))


def test_mean_prediction_agrees_with_monte_carlo(trained, channel_speaker):
    post = estimate_blhuc(trained, channel_speaker, AdaptHyper(epochs=3))
    utt = channel_speaker.utterances[1]
    mean = blhuc_predict(trained, post, utt).argmax(-1)
    mc = blhuc_predict_mc(trained, post, utt, 64, Stream(8, "mc")).argmax(-1)
    agreement = float(np.mean(mean == mc))
    print(f"posterior-mean vs 64-sample top-1 agreement: {agreement:.3f}")
    assert agreement >= 0.9


# --------------------------------------------------------------------- io


def test_transform_round_trip(tmp_path):
    t = LhucTransform("s1", {"layer0": np.array([0.1, -0.2]), "prefinal": np.array([1.5])})
    v = VariationalLhuc("s2", {"layer0": np.array([0.3])}, {"layer0": np.array([-1.0])})
    save_transform(t, tmp_path)
    save_transform(v, tmp_path)
    back_t, back_v = load_transform(tmp_path / "s1.json"), load_transform(tmp_path / "s2.json")
    assert all(np.array_equal(back_t.params[k], t.params[k]) for k in t.params)
    assert np.array_equal(back_v.mu["layer0"], v.mu["layer0"])
    assert np.array_equal(back_v.log_sigma["layer0"], v.log_sigma["layer0"])
    table = load_transforms(tmp_path)
    assert set(table) == {"s1", "s2"} and np.array_equal(table["s2"]["layer0"], v.mu["layer0"])
