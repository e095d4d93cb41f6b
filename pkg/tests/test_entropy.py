import numpy as np
import pytest

from clustercodec import engine as eg
from clustercodec import entropy as ent
from clustercodec.checks import check_gradients
from clustercodec.engine import Tensor
from clustercodec.errors import DecodeError
from clustercodec.rangecoder import SIGMA_MIN
from clustercodec.transform import ArchConfig, SMALL_CONFIG


def _ctx(cfg, seed=0, dtype=np.float64):
    return ent.ContextModel(np.random.default_rng(seed), cfg, dtype=dtype)


def _features(cfg, h, w, seed=1, dtype=np.float64):
    rng = np.random.default_rng(seed)
    m = cfg.latent_channels
    mean_feat = rng.standard_normal((m, h, w)).astype(dtype)
    scale_feat = rng.standard_normal((m, h, w)).astype(dtype)
    return mean_feat, scale_feat


def test_anchor_mask_checkerboard():
    m = ent.anchor_mask(3, 4)
    assert m[0, 0] and not m[0, 1] and m[1, 1]
    assert m.sum() == 6


def test_group_schedule_offsets():
    sched = ent.GroupSchedule((16, 16, 32, 64, 64))
    assert sched.offsets == [0, 16, 32, 64, 128]


def test_factorized_prior_shapes_and_floor():
    prior = ent.FactorizedPrior(7, dtype=np.float64)
    mu, sigma = prior.mu_sigma(3, 5)
    assert mu.data.shape == (7, 3, 5)
    assert (sigma.data >= SIGMA_MIN).all()
    # each channel constant across space
    assert np.ptp(mu.data, axis=(1, 2)).max() == 0.0


@pytest.mark.parametrize("hw", [(4, 4), (5, 3), (8, 8)])
def test_roundtrip_bit_exact(hw):
    cfg = SMALL_CONFIG
    model = _ctx(cfg)
    h, w = hw
    mean_feat, scale_feat = _features(cfg, h, w)
    y = np.random.default_rng(2).standard_normal((cfg.latent_channels, h, w)) * 3
    streams, y_hat, report = ent.scctx_encode(y, mean_feat, scale_feat, model)
    assert len(streams) == len(cfg.group_sizes)
    decoded = ent.scctx_decode(streams, mean_feat, scale_feat, model)
    np.testing.assert_array_equal(decoded, y_hat)
    assert report.bits_estimated > 0


def test_roundtrip_default_group_layout():
    # the 192-channel default schedule (16,16,32,64,64) round-trips too
    cfg = ArchConfig()
    model = _ctx(cfg, seed=3)
    mean_feat, scale_feat = _features(cfg, 4, 4, seed=4)
    y = np.random.default_rng(5).standard_normal((192, 4, 4)) * 2
    streams, y_hat, _ = ent.scctx_encode(y, mean_feat, scale_feat, model)
    decoded = ent.scctx_decode(streams, mean_feat, scale_feat, model)
    np.testing.assert_array_equal(decoded, y_hat)


def test_reconstruction_is_offset_round():
    # every coded value lands on mu + integer
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=6)
    mean_feat, scale_feat = _features(cfg, 6, 6, seed=7)
    y = np.random.default_rng(8).standard_normal((cfg.latent_channels, 6, 6))
    _, y_hat, _ = ent.scctx_encode(y, mean_feat, scale_feat, model)
    assert np.abs(y_hat - y).max() <= 0.5 + 1e-9


def test_stream_count_mismatch_raises():
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=9)
    mean_feat, scale_feat = _features(cfg, 4, 4, seed=10)
    y = np.zeros((cfg.latent_channels, 4, 4))
    streams, _, _ = ent.scctx_encode(y, mean_feat, scale_feat, model)
    with pytest.raises(DecodeError):
        ent.scctx_decode(streams[:-1], mean_feat, scale_feat, model)


def test_truncated_substream_raises():
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=11)
    mean_feat, scale_feat = _features(cfg, 8, 8, seed=12)
    y = np.random.default_rng(13).standard_normal((cfg.latent_channels, 8, 8)) * 4
    streams, _, _ = ent.scctx_encode(y, mean_feat, scale_feat, model)
    broken = list(streams)
    broken[0] = broken[0][:3]
    with pytest.raises(DecodeError):
        ent.scctx_decode(broken, mean_feat, scale_feat, model)


def test_bits_estimate_tracks_stream_size():
    # estimated bits within coder overhead of actual bytes emitted
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=14)
    mean_feat, scale_feat = _features(cfg, 16, 16, seed=15)
    y = np.random.default_rng(16).standard_normal((cfg.latent_channels, 16, 16)) * 5
    streams, _, report = ent.scctx_encode(y, mean_feat, scale_feat, model)
    actual_bits = 8 * sum(len(s) for s in streams)
    overhead = 8 * 16 * len(streams)
    assert report.bits_estimated <= actual_bits <= report.bits_estimated * 1.005 + overhead


def test_likelihood_bits_matches_gaussian_bin_mass():
    x = Tensor(np.array([0.0]))
    mu = eg.constant(np.array([0.0]))
    sigma = eg.constant(np.array([1.0]))
    from scipy.stats import norm
    expected = -np.log2(norm.cdf(0.5) - norm.cdf(-0.5))
    got = ent.likelihood_bits(x, mu, sigma)
    np.testing.assert_allclose(got.data, expected, rtol=1e-6)


def test_likelihood_bits_decreases_with_accuracy():
    x = Tensor(np.zeros((4, 4)))
    sigma = eg.constant(np.full((4, 4), 1.0))
    good = ent.likelihood_bits(x, eg.constant(np.zeros((4, 4))), sigma)
    bad = ent.likelihood_bits(x, eg.constant(np.full((4, 4), 3.0)), sigma)
    assert good.data < bad.data


def test_train_params_shapes_and_floor():
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=17)
    mean_feat, scale_feat = _features(cfg, 4, 4, seed=18)
    y = Tensor(np.random.default_rng(19).standard_normal((cfg.latent_channels, 4, 4)))
    mu, sigma = ent.scctx_train_params(y, eg.constant(mean_feat), eg.constant(scale_feat), model)
    assert mu.data.shape == y.data.shape == sigma.data.shape
    assert (sigma.data >= SIGMA_MIN).all()


def test_train_params_match_coding_params_on_dequantized_latent():
    # feeding the decoder-visible latent into the training graph reproduces
    # exactly the (mu, sigma) the coder used position-by-position
    cfg = SMALL_CONFIG
    model = _ctx(cfg, seed=20)
    mean_feat, scale_feat = _features(cfg, 6, 6, seed=21)
    y = np.random.default_rng(22).standard_normal((cfg.latent_channels, 6, 6)) * 2
    _, y_hat, _ = ent.scctx_encode(y, mean_feat, scale_feat, model)

    anchors = ent.anchor_mask(6, 6)
    mu, sigma = ent.scctx_train_params(Tensor(y_hat), eg.constant(mean_feat),
                                       eg.constant(scale_feat), model)
    # recompute coding-side params for group 0 non-anchors and compare
    sizes = model.schedule.sizes
    ctx = model.spatial[0](eg.constant(y_hat[:sizes[0]] * anchors[None]))
    mu_b, sig_b = model.group_params(0, eg.constant(mean_feat), eg.constant(scale_feat), None, ctx)
    np.testing.assert_allclose(mu.data[:sizes[0]][:, ~anchors], mu_b.data[:, ~anchors], atol=1e-12)
    np.testing.assert_allclose(sigma.data[:sizes[0]][:, ~anchors], sig_b.data[:, ~anchors], atol=1e-12)


def test_rate_gradient_through_context_model():
    cfg = ArchConfig(stage_channels=(4, 4, 4, 4), stage_depths=(1, 0, 0, 0),
                     latent_channels=4, synthesis_base=4, pqf_hidden=4,
                     ca_reduction=2, group_sizes=(2, 2))
    model = _ctx(cfg, seed=23)
    mean_feat, scale_feat = _features(cfg, 4, 4, seed=24)
    y = np.random.default_rng(25).standard_normal((4, 4, 4))

    def loss_fn():
        mu, sigma = ent.scctx_train_params(Tensor(y.copy()), eg.constant(mean_feat),
                                           eg.constant(scale_feat), model)
        return ent.likelihood_bits(eg.constant(y), mu, sigma)

    check_gradients(loss_fn, [model.net_b[0].kernel, model.net_b[1].bias,
                              model.spatial[0].kernel], rel_tol=1e-4)


def test_factorized_prior_gradient():
    prior = ent.FactorizedPrior(3, dtype=np.float64)
    z = np.random.default_rng(26).standard_normal((3, 2, 2))

    def loss_fn():
        mu, sigma = prior.mu_sigma(2, 2)
        return ent.likelihood_bits(eg.constant(z), mu, sigma)

    check_gradients(loss_fn, [prior.mu, prior.sigma_raw], rel_tol=1e-4)
