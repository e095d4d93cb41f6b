import math

import numpy as np
import pytest

from clustercodec import attention as attn
from clustercodec import engine as eg
from clustercodec.checks import check_gradients
from clustercodec.engine import Tensor


def sa_params(k=7, seed=0, dtype=np.float64):
    return attn.SpatialAttnParams(np.random.default_rng(seed), k=k, dtype=dtype)


def ca_params(channels, r=4, seed=0, dtype=np.float64):
    return attn.ChannelAttnParams(np.random.default_rng(seed), channels, reduction=r, dtype=dtype)


def test_sa_zero_weights_halves_input():
    p = sa_params()
    p.kernel.data[:] = 0
    p.bias.data[:] = 0
    x = Tensor(np.random.default_rng(1).standard_normal((3, 5, 5)))
    out = attn.spatial_attention(x, p)
    np.testing.assert_allclose(out.data, x.data * 0.5)


def test_sa_saturated_bias_is_identity():
    p = sa_params()
    p.kernel.data[:] = 0
    p.bias.data[:] = 50.0
    x = Tensor(np.random.default_rng(2).standard_normal((3, 4, 4)))
    out = attn.spatial_attention(x, p)
    np.testing.assert_allclose(out.data, x.data, atol=1e-9)


def test_sa_matches_scalar_oracle_1x1_kernel():
    p = sa_params(k=1)
    p.kernel.data[:] = 0
    p.kernel.data[0, 0, 0, 0] = 0.7   # weight on the mean map
    p.kernel.data[0, 1, 0, 0] = -0.3  # weight on the max map
    p.bias.data[:] = 0.1
    x = np.random.default_rng(3).standard_normal((1, 2, 2))
    out = attn.spatial_attention(Tensor(x), p)
    for r in range(2):
        for c in range(2):
            v = x[0, r, c]
            gate = 1.0 / (1.0 + math.exp(-(0.7 * v - 0.3 * v + 0.1)))
            assert abs(out.data[0, r, c] - v * gate) < 1e-12


def test_sa_even_kernel_rejected():
    with pytest.raises(eg.EngineError, match="odd"):
        sa_params(k=4)


def test_ca_zero_weights_halves_input():
    p = ca_params(8)
    p.reduce.w.data[:] = 0
    p.reduce.b.data[:] = 0
    p.expand.w.data[:] = 0
    p.expand.b.data[:] = 0
    x = Tensor(np.random.default_rng(4).standard_normal((8, 3, 3)))
    out = attn.channel_attention(x, p)
    np.testing.assert_allclose(out.data, x.data * 0.5)


def test_ca_single_channel_scalar_oracle():
    p = ca_params(1, r=1)
    p.reduce.w.data[:] = 2.0
    p.reduce.b.data[:] = 0.1
    p.expand.w.data[:] = -1.5
    p.expand.b.data[:] = 0.4
    x = np.random.default_rng(5).standard_normal((1, 2, 3))
    out = attn.channel_attention(Tensor(x), p)
    pool = x.mean()
    u = 2.0 * pool + 0.1
    g = 0.5 * u * (1.0 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))
    gate = 1.0 / (1.0 + math.exp(-(-1.5 * g + 0.4)))
    np.testing.assert_allclose(out.data, x * gate, atol=1e-12)


def test_ca_gate_position_independent():
    p = ca_params(4)
    x = np.random.default_rng(6).standard_normal((4, 1, 2))
    x[:, 0, 1] = x[:, 0, 0]
    out = attn.channel_attention(Tensor(x), p)
    ratio0 = out.data[:, 0, 0] / x[:, 0, 0]
    ratio1 = out.data[:, 0, 1] / x[:, 0, 1]
    np.testing.assert_allclose(ratio0, ratio1)


def test_gates_bounded_and_contractive():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((8, 6, 6)))
    sa_out = attn.spatial_attention(x, sa_params(seed=8))
    ca_out = attn.channel_attention(x, ca_params(8, seed=9))
    assert (np.abs(sa_out.data) <= np.abs(x.data)).all()
    assert (np.abs(ca_out.data) <= np.abs(x.data)).all()


def test_attention_gradients():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 4, 4))
    sp = sa_params(k=3, seed=11)
    cp = ca_params(4, seed=12)

    check_gradients(lambda: eg.sum_(eg.square(attn.spatial_attention(Tensor(x.copy()), sp))),
                    [sp.kernel, sp.bias])
    check_gradients(lambda: eg.sum_(eg.square(attn.channel_attention(Tensor(x.copy()), cp))),
                    [cp.reduce.w, cp.reduce.b, cp.expand.w, cp.expand.b])
