"""Segmenter architecture, seeded init, segmentation loss, checkpoints."""
from decimal import Decimal, getcontext

import pytest
import torch

from helpers import check_grad_against_fd

from pin2pano.attention import AttentionConfig
from pin2pano.segnet import (
    Segmenter,
    SegmenterConfig,
    init_segmenter,
    load_segmenter,
    save_segmenter,
    seg_loss,
)

SMALL = SegmenterConfig(encoder_channels=(4, 6, 8, 12))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        SegmenterConfig(encoder_channels=(4, 6, 8))
    with pytest.raises(ValueError):
        SegmenterConfig(encoder_channels=(4, 0, 8, 12))
    cfg = SegmenterConfig(
        encoder_channels=(4, 6, 8, 12),
        attention=(AttentionConfig("position", 4), AttentionConfig("channel")),
        aux_head=False,
    )
    assert SegmenterConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes_desk_size():
    m = init_segmenter(SMALL, seed=0)
    taps = m(torch.zeros(3, 64, 256))
    assert taps.logits.shape == (19, 64, 256)
    assert taps.feat_da2.shape == (12, 8, 32)
    assert taps.aux_logits.shape == (19, 64, 256)
    batched = m(torch.zeros(2, 3, 64, 256))
    assert batched.logits.shape == (2, 19, 64, 256)
    assert batched.feat_da2.shape == (2, 12, 8, 32)


def test_forward_shape_native_panoramic():
    tiny = SegmenterConfig(encoder_channels=(2, 2, 2, 2), aux_head=False)
    taps = init_segmenter(tiny, seed=0)(torch.zeros(3, 400, 2048))
    assert taps.logits.shape == (19, 400, 2048)


def test_forward_rejects_bad_dims():
    m = init_segmenter(SMALL, seed=0)
    with pytest.raises(ValueError, match="divisible by 8"):
        m(torch.zeros(3, 60, 256))
    with pytest.raises(ValueError):
        m(torch.zeros(4, 64, 256))


def test_zero_image_gives_spatially_constant_logits():
    """Zero input + zero biases: convolution stacks stay translation invariant."""
    m = init_segmenter(SMALL, seed=3)
    logits = m(torch.zeros(3, 32, 64)).logits
    ref = logits[:, :1, :1]
    assert torch.allclose(logits, ref.expand_as(logits), atol=1e-6)


def test_seeded_init_determinism_and_seed_sensitivity():
    a = init_segmenter(SMALL, seed=7)
    b = init_segmenter(SMALL, seed=7)
    c = init_segmenter(SMALL, seed=8)
    names = [n for n, _ in sorted(a.named_parameters())]
    for n in names:
        pa = dict(a.named_parameters())[n]
        pb = dict(b.named_parameters())[n]
        assert torch.equal(pa, pb), n
    assert any(
        not torch.equal(dict(a.named_parameters())[n], dict(c.named_parameters())[n])
        for n in names
    )


def test_attention_heads_and_fusion_presence():
    plain = Segmenter(SMALL)
    assert len(plain.heads) == 0 and plain.fusion is None
    assert not any("heads" in n for n, _ in plain.named_parameters())
    cfg = SegmenterConfig(
        encoder_channels=(4, 6, 8, 12),
        attention=(AttentionConfig("position", 4), AttentionConfig("fast", 4)),
    )
    m = init_segmenter(cfg, seed=0)
    taps = m(torch.zeros(3, 32, 32))
    assert len(taps.attended) == 2
    assert all(t.shape == (12, 4, 4) for t in taps.attended)
    assert m.fusion.weight.shape == (12, 24, 1, 1)


def test_gamma_keeps_configured_init():
    cfg = SegmenterConfig(
        encoder_channels=(4, 6, 8, 12),
        attention=(AttentionConfig("position", 4, gamma_init=0.25),),
    )
    m = init_segmenter(cfg, seed=5)
    assert m.heads[0].gamma.item() == pytest.approx(0.25, abs=0.0)


def test_aux_head_disabled():
    cfg = SegmenterConfig(encoder_channels=(4, 6, 8, 12), aux_head=False)
    m = init_segmenter(cfg, seed=0)
    assert m.aux_classifier is None
    assert m(torch.zeros(3, 32, 32)).aux_logits is None


def test_non_finite_forward_raises():
    m = init_segmenter(SMALL, seed=0)
    with torch.no_grad():
        m.classifier.bias.fill_(float("inf"))
    with pytest.raises(FloatingPointError):
        m(torch.zeros(3, 32, 32))


# --- segmentation loss -------------------------------------------------------


def test_seg_loss_uniform_is_ln19():
    getcontext().prec = 50
    oracle = float(Decimal(19).ln())
    logits = torch.zeros(19, 8, 8, dtype=torch.float64)
    labels = torch.randint(0, 19, (8, 8), generator=torch.Generator().manual_seed(0))
    assert abs(seg_loss(logits, labels).item() - oracle) < 1e-9
    # Any constant-over-classes logit map is the same uniform distribution.
    assert abs(seg_loss(logits + 3.25, labels).item() - oracle) < 1e-9


def test_seg_loss_perfect_prediction_approaches_zero():
    labels = torch.randint(0, 19, (6, 6), generator=torch.Generator().manual_seed(1))
    logits = torch.full((19, 6, 6), -100.0, dtype=torch.float64)
    logits.scatter_(0, labels.unsqueeze(0), 100.0)
    assert seg_loss(logits, labels).item() < 1e-12


def test_seg_loss_all_ignore_is_zero_with_zero_grad():
    logits = torch.randn(
        19, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2)
    ).requires_grad_(True)
    labels = torch.full((4, 4), 255, dtype=torch.long)
    loss = seg_loss(logits, labels)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_seg_loss_rejects_bad_labels():
    logits = torch.zeros(19, 2, 2)
    with pytest.raises(ValueError):
        seg_loss(logits, torch.full((2, 2), 19, dtype=torch.long))
    with pytest.raises(ValueError):
        seg_loss(logits, torch.full((2, 2), -1, dtype=torch.long))


def test_seg_loss_ignores_only_masked_pixels():
    logits = torch.zeros(2, 1, 2, dtype=torch.float64)
    logits[0, 0, 0] = 5.0
    logits[1, 0, 0] = -5.0
    labels = torch.tensor([[0, 255]], dtype=torch.long)
    manual = -torch.log_softmax(logits[:, 0, 0], dim=0)[0]
    assert seg_loss(logits, labels).item() == pytest.approx(manual.item(), abs=1e-12)


def test_seg_loss_gradcheck():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(5, 3, 4, dtype=torch.float64, generator=gen, requires_grad=True)
    labels = torch.randint(0, 5, (3, 4), generator=gen)
    labels[0, 0] = 255
    check_grad_against_fd(lambda: seg_loss(logits, labels), [logits], trials=20, seed=4)


def test_segmenter_can_overfit_one_sample():
    """Sanity: a few SGD steps reduce training loss on a fixed sample."""
    gen = torch.Generator().manual_seed(9)
    x = torch.rand(3, 16, 16, generator=gen)
    y = torch.randint(0, 3, (16, 16), generator=gen)
    m = init_segmenter(SegmenterConfig(encoder_channels=(8, 8, 8, 8), aux_head=False), seed=1)
    opt = torch.optim.Adam(m.parameters(), lr=5e-3)
    first = None
    for _ in range(120):
        opt.zero_grad()
        loss = seg_loss(m(x).logits, y)
        if first is None:
            first = loss.item()
        loss.backward()
        opt.step()
    assert loss.item() < 0.5 * first


# --- checkpointing -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = init_segmenter(SMALL, seed=11)
    path = tmp_path / "seg.pt"
    save_segmenter(path, m, iteration=42)
    loaded, iteration = load_segmenter(path, expected_arch=SMALL)
    assert iteration == 42
    for (n, p), (_, q) in zip(
        sorted(m.named_parameters()), sorted(loaded.named_parameters())
    ):
        assert torch.equal(p, q), n


def test_checkpoint_arch_mismatch_raises(tmp_path):
    save_segmenter(tmp_path / "seg.pt", init_segmenter(SMALL, seed=0))
    other = SegmenterConfig(encoder_channels=(4, 6, 8, 16))
    with pytest.raises(ValueError, match="arch"):
        load_segmenter(tmp_path / "seg.pt", expected_arch=other)


def test_checkpoint_bad_schema_raises(tmp_path):
    torch.save({"schema": 99}, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="schema"):
        load_segmenter(tmp_path / "bad.pt")
