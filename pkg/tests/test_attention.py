"""Attention variants: fixed points, invariants, and gradient checks."""
import numpy as np
import pytest
import torch

from helpers import check_grad_against_fd

from pin2pano.attention import (
    AttentionConfig,
    ChannelAttention,
    FastAttention,
    PositionAttention,
    channel_attention,
    fast_attention,
    make_attention,
    position_attention,
    reduced_channels,
)
from pin2pano.segnet import seeded_he_init_

POS = AttentionConfig("position", reduction_ratio=1)
CHAN = AttentionConfig("channel")
FASTC = AttentionConfig("fast", reduction_ratio=1)


def _rand_module(cls, channels, config, seed):
    torch.manual_seed(seed)
    m = cls(channels, config).double()
    for p in m.parameters():
        if p.dim() >= 2:
            with torch.no_grad():
                p.normal_(0, 0.5)
    return m


def test_attention_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig("nonlocal")
    with pytest.raises(ValueError):
        AttentionConfig("position", reduction_ratio=0)


def test_reduced_channels_rules():
    assert reduced_channels(64, 8) == 8
    assert reduced_channels(4, 8) == 1  # ratio larger than width floors at 1
    with pytest.raises(ValueError):
        reduced_channels(6, 4)  # must divide


def test_make_attention_dispatch():
    assert isinstance(make_attention(8, AttentionConfig("position")), PositionAttention)
    assert isinstance(make_attention(8, AttentionConfig("channel")), ChannelAttention)
    assert isinstance(make_attention(8, AttentionConfig("fast")), FastAttention)


# --- fixed points -----------------------------------------------------------


def test_gamma_zero_is_exact_identity():
    f = torch.randn(4, 5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    for cls, cfg in ((PositionAttention, POS), (ChannelAttention, CHAN), (FastAttention, FASTC)):
        m = _rand_module(cls, 4, cfg, seed=1)
        with torch.no_grad():
            m.gamma.zero_()
        r = m(f)
        out = r[0] if isinstance(r, tuple) else r
        assert torch.equal(out, f), cls.__name__


def test_position_rows_uniform_for_constant_input():
    """All positions share one feature vector -> every attention row is 1/N."""
    f = torch.full((3, 2, 4), 0.7, dtype=torch.float64)
    m = _rand_module(PositionAttention, 3, POS, seed=2)
    _, attn = m(f)
    assert torch.allclose(attn, torch.full((8, 8), 1.0 / 8, dtype=torch.float64), atol=1e-12)


def test_channel_rows_uniform_for_identical_channels():
    one = torch.randn(1, 3, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    f = one.repeat(4, 1, 1)
    m = ChannelAttention(4, CHAN).double()
    with torch.no_grad():
        m.gamma.fill_(1.0)
    _, attn = m(f)
    assert torch.allclose(attn, torch.full((4, 4), 0.25, dtype=torch.float64), atol=1e-12)


def test_position_1x1_input_hand_oracle():
    """Single spatial position: attn = [[1.0]], out = gamma*V(f) + f."""
    f = torch.tensor([[[0.3]], [[-1.2]]], dtype=torch.float64)
    m = _rand_module(PositionAttention, 2, AttentionConfig("position", reduction_ratio=2), seed=4)
    with torch.no_grad():
        m.gamma.fill_(0.5)
    out, attn = m(f)
    assert torch.allclose(attn, torch.ones(1, 1, dtype=torch.float64), atol=1e-12)
    v = m.value(f.unsqueeze(0)).squeeze(0)
    assert torch.allclose(out, 0.5 * v + f, atol=1e-12)


def test_channel_two_orthogonal_channels_oracle():
    """C=2 explicit softmax oracle over the Gram matrix."""
    f = torch.zeros(2, 1, 2, dtype=torch.float64)
    f[0, 0, 0] = 2.0  # channel 0 = (2, 0)
    f[1, 0, 1] = 1.0  # channel 1 = (0, 1)
    m = ChannelAttention(2, CHAN).double()
    with torch.no_grad():
        m.gamma.fill_(1.0)
    with torch.no_grad():
        out, attn = m(f)
    gram = np.array([[4.0, 0.0], [0.0, 1.0]])
    e = np.exp(gram - gram.max(axis=1, keepdims=True))
    expected_attn = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(attn.numpy(), expected_attn, atol=1e-12)
    flat = f.reshape(2, 2).numpy()
    expected_out = expected_attn @ flat + flat
    assert np.allclose(out.reshape(2, 2).numpy(), expected_out, atol=1e-12)


# --- invariants -------------------------------------------------------------


def test_row_stochasticity():
    gen = torch.Generator().manual_seed(5)
    f = torch.randn(6, 4, 5, dtype=torch.float64, generator=gen)
    _, attn_p = _rand_module(PositionAttention, 6, POS, seed=6)(f)
    assert torch.allclose(attn_p.sum(dim=-1), torch.ones(20, dtype=torch.float64), atol=1e-6)
    assert (attn_p >= 0).all()
    _, attn_c = ChannelAttention(6, CHAN).double()(f)
    assert torch.allclose(attn_c.sum(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-6)


def test_fast_attention_association_order_equivalence():
    gen = torch.Generator().manual_seed(7)
    f = torch.randn(4, 3, 3, dtype=torch.float64, generator=gen)
    m = _rand_module(FastAttention, 4, FASTC, seed=8)
    with torch.no_grad():
        m.gamma.fill_(1.0)
    lin = fast_attention(f, m, order="linear")
    quad = fast_attention(f, m, order="quadratic")
    assert (lin - quad).abs().max().item() < 1e-5
    with pytest.raises(ValueError):
        fast_attention(f, m, order="cubic")


def test_fast_attention_constant_map_stays_constant():
    f = torch.full((3, 4, 4), -0.4, dtype=torch.float64)
    m = _rand_module(FastAttention, 3, FASTC, seed=9)
    with torch.no_grad():
        m.gamma.fill_(1.0)
    out = m(f)
    spread = (out - out.mean(dim=(1, 2), keepdim=True)).abs().max()
    assert spread.item() < 1e-9


def test_position_permutation_equivariance_exact():
    """Spatially shuffling the input shuffles the output identically, bitwise."""
    gen = torch.Generator().manual_seed(10)
    c, h, w = 5, 3, 4
    f = torch.randn(c, h, w, dtype=torch.float64, generator=gen)
    m = _rand_module(PositionAttention, c, POS, seed=11)
    with torch.no_grad():
        m.gamma.fill_(0.8)
    out, attn = m(f)
    perm = torch.randperm(h * w, generator=gen)
    f_p = f.reshape(c, -1)[:, perm].reshape(c, h, w)
    out_p, attn_p = m(f_p)
    assert torch.equal(out_p, out.reshape(c, -1)[:, perm].reshape(c, h, w))
    assert torch.equal(attn_p, attn[perm][:, perm])


def test_batched_and_unbatched_agree():
    gen = torch.Generator().manual_seed(12)
    f = torch.randn(2, 4, 3, 3, dtype=torch.float64, generator=gen)
    for cls, cfg in ((PositionAttention, POS), (ChannelAttention, CHAN), (FastAttention, FASTC)):
        m = _rand_module(cls, 4, cfg, seed=13)
        with torch.no_grad():
            m.gamma.fill_(1.0)
        r = m(f)
        batched = r[0] if isinstance(r, tuple) else r
        for i in range(2):
            ri = m(f[i])
            single = ri[0] if isinstance(ri, tuple) else ri
            assert torch.allclose(batched[i], single, atol=1e-12)
    with pytest.raises(ValueError):
        _rand_module(ChannelAttention, 4, CHAN, seed=14)(torch.zeros(3, 3))


def test_non_finite_input_raises():
    f = torch.full((2, 2, 2), float("nan"), dtype=torch.float64)
    with pytest.raises(FloatingPointError):
        _rand_module(PositionAttention, 2, POS, seed=15)(f)


def test_seeded_init_determinism():
    a = seeded_he_init_(PositionAttention(4, POS), seed=33)
    b = seeded_he_init_(PositionAttention(4, POS), seed=33)
    for (n1, p1), (_, p2) in zip(
        sorted(a.named_parameters()), sorted(b.named_parameters())
    ):
        assert torch.equal(p1, p2), n1


# --- gradient checks --------------------------------------------------------


def _grad_case(cls, cfg, seed):
    gen = torch.Generator().manual_seed(seed)
    f = torch.randn(3, 2, 3, dtype=torch.float64, generator=gen, requires_grad=True)
    m = _rand_module(cls, 3, cfg, seed=seed + 100)
    with torch.no_grad():
        m.gamma.fill_(0.7)
    weights = torch.randn(3, 2, 3, dtype=torch.float64, generator=gen)

    def scalar():
        r = m(f)
        out = r[0] if isinstance(r, tuple) else r
        return (out * weights).sum()

    params = [p for p in m.parameters() if p.requires_grad]
    return scalar, [f] + params


def test_position_attention_gradcheck():
    scalar, tensors = _grad_case(PositionAttention, POS, seed=40)
    check_grad_against_fd(scalar, tensors, trials=20, seed=1)


def test_channel_attention_gradcheck():
    scalar, tensors = _grad_case(ChannelAttention, CHAN, seed=41)
    check_grad_against_fd(scalar, tensors, trials=20, seed=2)


def test_fast_attention_gradcheck():
    scalar, tensors = _grad_case(FastAttention, FASTC, seed=42)
    check_grad_against_fd(scalar, tensors, trials=20, seed=3)


def test_wrapper_functions():
    gen = torch.Generator().manual_seed(16)
    f = torch.randn(3, 2, 2, dtype=torch.float64, generator=gen)
    mp = _rand_module(PositionAttention, 3, POS, seed=17)
    assert torch.equal(position_attention(f, mp)[0], mp(f)[0])
    mc = ChannelAttention(3, CHAN).double()
    assert torch.equal(channel_attention(f, mc)[0], mc(f)[0])
