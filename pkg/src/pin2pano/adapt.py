"""Adversarial domain-adaptation mechanisms and their discriminators.

Three mechanisms align source/target statistics at two generator taps:
  - S: adversarial alignment of the tap itself (softmax output at DA_1,
    pre-decoder features at DA_2);
  - A: the DA_2 features pass through a mechanism-owned position-attention
    reweighting before the discriminator;
  - R: a two-stage scheme at DA_1 — stage 1 is S on the output map, stage 2
    rebuilds a prediction from region-context features (region construction
    + cross-region interaction + the generator's own classifier) and aligns
    that rebuilt output with a second discriminator.

Gradient routing is structural: the adversarial (generator) branch runs with
discriminator-side parameters frozen, and the discriminator branch runs on
detached inputs, so neither loss can leak gradients across the G/D split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionConfig, PositionAttention

DA_1 = "DA_1"
DA_2 = "DA_2"
SITES = (DA_1, DA_2)
MECHANISMS = ("S", "A", "S+A", "R")

MIN_DISC_INPUT = 32
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DASiteConfig:
    site: str
    mechanism: str
    lambda_adv: float
    lambda_seg: float

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown adaptation site: {self.site!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism: {self.mechanism!r}")
        if self.mechanism in ("A", "S+A") and self.site != DA_2:
            raise ValueError("attention mechanisms (A, S+A) apply at DA_2 only")
        if self.mechanism == "R" and self.site != DA_1:
            raise ValueError("the region-context mechanism (R) applies at DA_1 only")
        if self.lambda_adv < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be nonnegative")


class Discriminator(nn.Module):
    """Fully-convolutional binary domain classifier.

    Five 3x3 stride-2 convs with leaky ReLU (slope 0.2); each layer maps a
    spatial extent n to ceil(n/2), so the logit map is ceil(input/32).
    """

    def __init__(self, in_channels: int, base_channels: int = 64):
        super().__init__()
        b = base_channels
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * b, 8 * b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * b, 1, 3, stride=2, padding=1),
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        squeeze = f.dim() == 3
        if squeeze:
            f = f.unsqueeze(0)
        if not torch.isfinite(f).all():
            raise FloatingPointError("non-finite discriminator input")
        if f.shape[-2] < MIN_DISC_INPUT or f.shape[-1] < MIN_DISC_INPUT:
            raise ValueError(
                f"discriminator input must be >= {MIN_DISC_INPUT} px per side, "
                f"got {tuple(f.shape[-2:])}"
            )
        out = self.layers(f)
        return out.squeeze(0) if squeeze else out


def init_discriminator(in_channels: int, base_channels: int, seed: int) -> Discriminator:
    from .segnet import seeded_he_init_

    return seeded_he_init_(Discriminator(in_channels, base_channels), seed)


def discriminator_forward(d: Discriminator, f: torch.Tensor) -> torch.Tensor:
    return d(f)


def fit_discriminator_input(f: torch.Tensor) -> torch.Tensor:
    """Resize policy for small feature maps: bilinearly upsample any spatial
    dim below the discriminator minimum; maps already large enough pass
    through untouched."""
    h, w = f.shape[-2], f.shape[-1]
    if h >= MIN_DISC_INPUT and w >= MIN_DISC_INPUT:
        return f
    size = (max(h, MIN_DISC_INPUT), max(w, MIN_DISC_INPUT))
    squeeze = f.dim() == 3
    if squeeze:
        f = f.unsqueeze(0)
    f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
    return f.squeeze(0) if squeeze else f


def _log_clamped(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))


def d_loss(logits_s: torch.Tensor, logits_t: torch.Tensor) -> torch.Tensor:
    """Two-class cross-entropy for the discriminator: source=1, target=0.

    Each domain term is averaged over its own logit map, so the two maps may
    differ in spatial size.
    """
    l_s = -_log_clamped(torch.sigmoid(logits_s)).mean()
    l_t = -_log_clamped(1.0 - torch.sigmoid(logits_t)).mean()
    return (l_s + l_t) / 2.0


def adv_loss(logits_t: torch.Tensor) -> torch.Tensor:
    """Generator's fooling objective: target logits scored against the source label."""
    return -_log_clamped(torch.sigmoid(logits_t)).mean()


class DomainHead(nn.Module):
    """Feature -> domain-logit pipeline for one mechanism at one site:
    optional attention reweighting, the resize policy, then the discriminator."""

    def __init__(self, disc: Discriminator, attn: PositionAttention | None = None):
        super().__init__()
        self.disc = disc
        self.attn = attn

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if self.attn is not None:
            f = adam_reweight(f, self.attn)
        return self.disc(fit_discriminator_input(f))


def adversarial_pair(x_s: torch.Tensor, x_t: torch.Tensor, head: nn.Module):
    """Compute (L_D, L_adv) with structural gradient routing.

    L_adv is evaluated with every head parameter frozen (gradients reach only
    the inputs, i.e. the generator); L_D is evaluated on detached inputs (so
    gradients reach only the head).
    """
    if x_s.shape[-3] != x_t.shape[-3]:
        raise ValueError(
            f"domain feature channel mismatch: {x_s.shape[-3]} vs {x_t.shape[-3]}"
        )
    params = list(head.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        l_adv = adv_loss(head(x_t))
    finally:
        for p, r in zip(params, flags):
            p.requires_grad_(r)
    l_d = d_loss(head(x_s.detach()), head(x_t.detach()))
    return l_d, l_adv


def site_features(site: str, taps) -> torch.Tensor:
    """Select the tensor a site aligns: softmax output at DA_1, features at DA_2."""
    if site == DA_1:
        return torch.softmax(taps.logits, dim=-3)
    if site == DA_2:
        return taps.feat_da2
    raise ValueError(f"unknown adaptation site: {site!r}")


def sdam(site: str, taps_s, taps_t, d: nn.Module):
    """Adversarial alignment of one site's features across domains -> (L_D, L_adv)."""
    head = d if isinstance(d, DomainHead) else DomainHead(d)
    return adversarial_pair(site_features(site, taps_s), site_features(site, taps_t), head)


def adam_reweight(f: torch.Tensor, attn: PositionAttention) -> torch.Tensor:
    """Attention-based feature reweighting ahead of the DA_2 discriminator."""
    out, _ = attn(f)
    return out


# --- region construction -------------------------------------------------


@dataclass
class RegionDecision:
    """Partition of a prediction grid into connected semantic regions."""

    region_ids: np.ndarray  # (H, W) int64, values 0..num_regions-1
    representatives: tuple[np.ndarray, ...]  # per region: flat pixel indices, top-k by confidence
    boundary: np.ndarray  # (H, W) float64 in [0, 1]
    confidence: np.ndarray  # (H, W) float64, max class probability
    num_regions: int


def rcb(logits, f=None, boundary_threshold: float = 0.1, k_max: int = 4) -> RegionDecision:
    """Region construction from one prediction map.

    boundary: gradient magnitude of the class-probability maps, normalized to
    max 1.  Regions: 4-connected components of the argmax map, additionally
    split wherever the probability jump across an edge exceeds the threshold.
    Representatives: the min(k_max, region size) highest-confidence pixels.
    """
    if isinstance(logits, torch.Tensor):
        probs = torch.softmax(logits.detach().double(), dim=0).cpu().numpy()
    else:
        logits = np.asarray(logits, dtype=np.float64)
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        probs = e / e.sum(axis=0, keepdims=True)
    if probs.ndim != 3 or probs.shape[1] == 0 or probs.shape[2] == 0:
        raise ValueError("rcb expects a nonempty (C, H, W) logit map")
    c, h, w = probs.shape
    if f is not None and tuple(f.shape[-2:]) != (h, w):
        raise ValueError("features must be resized to the logits grid before rcb")

    gy, gx = np.gradient(probs, axis=(1, 2))
    mag = np.sqrt((gy * gy + gx * gx).sum(axis=0))
    peak = mag.max()
    boundary = mag / peak if peak > 0 else np.zeros_like(mag)

    arg = probs.argmax(axis=0)
    confidence = probs.max(axis=0)

    # Edge connectivity: same argmax and a small probability jump.
    jump_r = np.abs(probs[:, :, 1:] - probs[:, :, :-1]).max(axis=0)
    jump_d = np.abs(probs[:, 1:, :] - probs[:, :-1, :]).max(axis=0)
    conn_r = (arg[:, 1:] == arg[:, :-1]) & (jump_r <= boundary_threshold)
    conn_d = (arg[1:, :] == arg[:-1, :]) & (jump_d <= boundary_threshold)

    idx = np.arange(h * w).reshape(h, w)
    rows = np.concatenate([idx[:, :-1][conn_r], idx[:-1, :][conn_d]])
    cols = np.concatenate([idx[:, 1:][conn_r], idx[1:, :][conn_d]])
    graph = sp.coo_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w)
    )
    n_comp, labels = connected_components(graph, directed=False)

    # Relabel in row-major first-appearance order for stable region ids.
    first = np.full(n_comp, -1, dtype=np.int64)
    order = []
    for i, lab in enumerate(labels):
        if first[lab] < 0:
            first[lab] = len(order)
            order.append(lab)
    region_ids = first[labels].reshape(h, w)

    conf_flat = confidence.reshape(-1)
    reps = []
    for r in range(n_comp):
        members = np.flatnonzero(region_ids.reshape(-1) == r)
        ranked = members[np.lexsort((members, -conf_flat[members]))]
        reps.append(ranked[: min(k_max, len(ranked))])
    return RegionDecision(
        region_ids=region_ids,
        representatives=tuple(reps),
        boundary=boundary,
        confidence=confidence,
        num_regions=n_comp,
    )


class RegionInteraction(nn.Module):
    """Cross-region context exchange with an identity-initialized fusion.

    Phase 2 reuses position attention over the stack of region summaries;
    phase 3 fuses the propagated context with the input features by a 1x1
    conv whose init is [I | 0] with zero bias, so a fresh module returns its
    input unchanged.
    """

    def __init__(self, channels: int, reduction_ratio: int = 1):
        super().__init__()
        self.channels = channels
        self.attn = PositionAttention(
            channels, AttentionConfig("position", reduction_ratio=reduction_ratio)
        )
        self.fusion = nn.Conv2d(2 * channels, channels, kernel_size=1)
        self.reset_fusion_identity_()

    def reset_fusion_identity_(self) -> None:
        with torch.no_grad():
            self.fusion.weight.zero_()
            for i in range(self.channels):
                self.fusion.weight[i, i, 0, 0] = 1.0
            self.fusion.bias.zero_()

    def seeded_init_(self, seed: int) -> "RegionInteraction":
        from .segnet import seeded_he_init_

        seeded_he_init_(self.attn, seed)
        self.reset_fusion_identity_()
        return self


def rib(rd: RegionDecision, f: torch.Tensor, params: RegionInteraction) -> torch.Tensor:
    """Three-phase region interaction over a single (C, H, W) feature map.

    (1) per-region summary: confidence-weighted mean over the region pixels;
    (2) summaries exchange information via attention across regions;
    (3) each pixel receives its region's updated summary, fused with f.
    """
    if f.dim() != 3:
        raise ValueError("rib expects a single (C, H, W) feature map")
    c, h, w = f.shape
    if rd.region_ids.shape != (h, w):
        raise ValueError("region decision does not partition this feature grid")
    if rd.region_ids.min() < 0 or rd.region_ids.max() >= rd.num_regions:
        raise ValueError("region ids must lie in [0, num_regions)")
    n = h * w
    r = rd.num_regions
    ids = torch.from_numpy(rd.region_ids.reshape(-1).astype(np.int64))
    weight = torch.from_numpy(rd.confidence.reshape(-1)).to(f.dtype)  # (N,)
    flat = f.reshape(c, n)

    wsum = torch.zeros(r, dtype=f.dtype).index_add_(0, ids, weight)
    sums = torch.zeros(c, r, dtype=f.dtype).index_add_(1, ids, flat * weight)
    summaries = sums / wsum  # (C, R)

    updated, _ = params.attn(summaries.reshape(1, c, r, 1))
    updated = updated.reshape(c, r)

    ctx = updated.index_select(1, ids)  # (C, N)
    stacked = torch.cat([flat, ctx], dim=0).reshape(1, 2 * c, h, w)
    return params.fusion(stacked).squeeze(0)


# --- two-stage region-context adaptation ---------------------------------


class RcdamParams(nn.Module):
    """Stage-2 generator-side parameters: the region-interaction block plus a
    reference to the generator's classifier (shared weights, so the rebuilt
    prediction lives in the same output space as stage 1)."""

    def __init__(self, rib_params: RegionInteraction, classifier: nn.Module):
        super().__init__()
        self.rib = rib_params
        # Kept out of the module registry: the classifier belongs to G and
        # must not be double-registered under this module's parameters.
        object.__setattr__(self, "_classifier_ref", (classifier,))

    @property
    def classifier(self) -> nn.Module:
        return self._classifier_ref[0]


def _stage2_logits(taps, rc: RcdamParams, boundary_threshold: float) -> torch.Tensor:
    logits = taps.logits if taps.logits.dim() == 4 else taps.logits.unsqueeze(0)
    feat = taps.feat_da2 if taps.feat_da2.dim() == 4 else taps.feat_da2.unsqueeze(0)
    outs = []
    for i in range(logits.shape[0]):
        f_up = F.interpolate(
            feat[i : i + 1],
            size=logits.shape[-2:],
            mode="bilinear",
            align_corners=False,
        )[0]
        rd = rcb(logits[i], f_up.detach(), boundary_threshold=boundary_threshold)
        fused = rib(rd, f_up, rc.rib)
        outs.append(rc.classifier(fused.unsqueeze(0))[0])
    return torch.stack(outs, dim=0)


def rcdam(
    taps_s,
    taps_t,
    d_stage1: nn.Module,
    d_stage2: nn.Module,
    rc_params: RcdamParams,
    boundary_threshold: float = 0.1,
):
    """Two-stage alignment at DA_1 -> (L_D_total, L_adv_total, stage-2 source logits).

    Stage 1 aligns the ordinary output map.  Stage 2 rebuilds predictions
    from region-context features and aligns those with a second
    discriminator.  The returned stage-2 source logits are the hook for the
    extra segmentation term (weighted by the trainer); inference continues to
    use the stage-1 output.
    """
    l_d1, l_adv1 = sdam(DA_1, taps_s, taps_t, d_stage1)
    s2_s = _stage2_logits(taps_s, rc_params, boundary_threshold)
    s2_t = _stage2_logits(taps_t, rc_params, boundary_threshold)
    head = d_stage2 if isinstance(d_stage2, DomainHead) else DomainHead(d_stage2)
    l_d2, l_adv2 = adversarial_pair(
        torch.softmax(s2_s, dim=1), torch.softmax(s2_t, dim=1), head
    )
    return l_d1 + l_d2, l_adv1 + l_adv2, s2_s
