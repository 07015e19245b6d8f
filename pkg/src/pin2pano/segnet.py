"""Miniature encoder-decoder segmentation networks (the generator G).

Architecture: four 3x3 conv blocks (strides 2/2/2/1, overall stride 8),
optional attention heads fused by a 1x1 conv, a 1x1 classifier and bilinear
upsampling back to input resolution.  The forward pass exposes the two
adaptation taps: the final class-probability output (site DA_1) and the
pre-decoder feature map (site DA_2).  An auxiliary classifier on the
pre-decoder features carries the DA_2 segmentation term.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionConfig, make_attention
from .palette import IGNORE_INDEX, NUM_CLASSES

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3
    encoder_channels: tuple[int, int, int, int] = (32, 64, 96, 128)
    attention: tuple[AttentionConfig, ...] = ()
    aux_head: bool = True
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or any(c < 1 for c in self.encoder_channels):
            raise ValueError("encoder_channels must be four positive widths")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "encoder_channels": list(self.encoder_channels),
            "attention": [
                {
                    "variant": a.variant,
                    "reduction_ratio": a.reduction_ratio,
                    "gamma_init": a.gamma_init,
                }
                for a in self.attention
            ],
            "aux_head": self.aux_head,
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "SegmenterConfig":
        return SegmenterConfig(
            in_channels=d["in_channels"],
            encoder_channels=tuple(d["encoder_channels"]),
            attention=tuple(AttentionConfig(**a) for a in d["attention"]),
            aux_head=d["aux_head"],
            num_classes=d["num_classes"],
        )


@dataclass
class ForwardTaps:
    """Per-forward network taps consumed by the adaptation sites."""

    logits: torch.Tensor  # (B, 19, H, W), full input resolution
    feat_da2: torch.Tensor  # (B, C, H/8, W/8), pre-decoder features
    aux_logits: torch.Tensor | None = None  # (B, 19, H, W) from the auxiliary head
    attended: tuple[torch.Tensor, ...] = field(default_factory=tuple)


class Segmenter(nn.Module):
    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.encoder_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(config.in_channels, c1, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c3, c4, 3, stride=1, padding=1),
            nn.ReLU(inplace=True),
        )
        self.heads = nn.ModuleList(make_attention(c4, a) for a in config.attention)
        self.fusion = (
            nn.Conv2d(len(self.heads) * c4, c4, kernel_size=1) if self.heads else None
        )
        self.classifier = nn.Conv2d(c4, config.num_classes, kernel_size=1)
        self.aux_classifier = (
            nn.Conv2d(c4, config.num_classes, kernel_size=1) if config.aux_head else None
        )

    def forward(self, x: torch.Tensor) -> ForwardTaps:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError("input must be (B, C_in, H, W)")
        h, w = x.shape[2], x.shape[3]
        if h % 8 or w % 8:
            raise ValueError(f"input dims must be divisible by 8, got {h}x{w}")
        f = self.encoder(x)  # (B, C4, H/8, W/8)
        attended: tuple[torch.Tensor, ...] = ()
        feat = f
        if self.heads:
            outs = []
            for head in self.heads:
                r = head(f)
                outs.append(r[0] if isinstance(r, tuple) else r)
            attended = tuple(outs)
            feat = self.fusion(torch.cat(outs, dim=1))
        logits = F.interpolate(
            self.classifier(feat), size=(h, w), mode="bilinear", align_corners=False
        )
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite activations in segmenter forward")
        aux = None
        if self.aux_classifier is not None:
            aux = F.interpolate(
                self.aux_classifier(feat), size=(h, w), mode="bilinear", align_corners=False
            )
        if squeeze:
            return ForwardTaps(
                logits=logits.squeeze(0),
                feat_da2=feat.squeeze(0),
                aux_logits=None if aux is None else aux.squeeze(0),
                attended=tuple(a.squeeze(0) for a in attended),
            )
        return ForwardTaps(logits=logits, feat_da2=feat, aux_logits=aux, attended=attended)


def seeded_he_init_(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic He-style init: fan-in-scaled normal weights, zero biases.

    Parameters named `gamma` (residual attention scales) keep their
    configured init values.  Iteration order is fixed by parameter name, so
    a seed fully determines every weight byte.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if name.split(".")[-1] == "gamma":
            continue
        with torch.no_grad():
            if p.dim() >= 2:
                fan_in = p.shape[1] * math.prod(p.shape[2:]) if p.dim() > 2 else p.shape[1]
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            else:
                p.zero_()
    return module


def init_segmenter(arch: SegmenterConfig, seed: int) -> Segmenter:
    """Build a segmenter with deterministic seed-derived parameters."""
    return seeded_he_init_(Segmenter(arch), seed)


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over valid pixels; 255 is ignored; empty set gives 0."""
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    labels = labels.long()
    bad = (labels < 0) | ((labels >= logits.shape[1]) & (labels != IGNORE_INDEX))
    if bad.any():
        raise ValueError("labels must lie in {0..18, 255}")
    if not (labels != IGNORE_INDEX).any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX)


def atomic_save(obj, path) -> None:
    """torch.save via a temp file + rename so readers never see partial writes."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(obj, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_segmenter(path, model: Segmenter, iteration: int = 0) -> None:
    atomic_save(
        {
            "schema": CHECKPOINT_SCHEMA,
            "arch": model.config.to_dict(),
            "iteration": int(iteration),
            "state": model.state_dict(),
        },
        path,
    )


def load_segmenter(path, expected_arch: SegmenterConfig | None = None):
    """Load (model, iteration); a mismatched expected arch config is an error."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {ckpt.get('schema')!r}")
    arch = SegmenterConfig.from_dict(ckpt["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ValueError("checkpoint arch config does not match the requested arch")
    model = Segmenter(arch)
    model.load_state_dict(ckpt["state"])
    return model, ckpt["iteration"]
