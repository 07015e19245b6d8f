"""Self-attention primitives: position, channel, and linear-time "fast" variants.

All variants share the residual form out = gamma * aggregate(f) + f with a
learned scalar gamma (initialized to 0 so a fresh module is the identity).

Position attention computes its softmax and aggregation in a canonical,
content-derived spatial order and scatters the result back.  Floating-point
reductions then see the same operand order regardless of how the caller's
pixels were arranged, which makes spatial permutation equivariance hold
bitwise, not just mathematically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

POSITION = "position"
CHANNEL = "channel"
FAST = "fast"
VARIANTS = (POSITION, CHANNEL, FAST)


@dataclass(frozen=True)
class AttentionConfig:
    variant: str
    reduction_ratio: int = 8
    gamma_init: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant: {self.variant!r}")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")


def reduced_channels(channels: int, ratio: int) -> int:
    """Query/key width under reduction; tiny channel counts floor at 1."""
    if ratio > channels:
        return 1
    if channels % ratio != 0:
        raise ValueError(
            f"reduction_ratio {ratio} does not divide channel count {channels}"
        )
    return channels // ratio


def _check_finite(f: torch.Tensor) -> None:
    if not torch.isfinite(f).all():
        raise FloatingPointError("non-finite attention input")


def _canonical_order(columns: torch.Tensor) -> torch.Tensor:
    """Content-based spatial ordering: lexicographic over feature columns.

    columns: (C, N).  Returns an index permutation over N, identical for any
    spatial shuffling of the input (ties carry identical feature vectors, so
    their relative order cannot affect results).
    """
    arr = np.ascontiguousarray(columns.detach().cpu().numpy().T)  # (N, C)
    view = arr.view([("", arr.dtype)] * arr.shape[1]).ravel()
    order = np.argsort(view, kind="stable")
    return torch.from_numpy(np.ascontiguousarray(order)).to(columns.device)


class PositionAttention(nn.Module):
    """Spatial self-attention: attn = row-softmax(Q^T K), out = gamma*(V attn^T) + f."""

    def __init__(self, channels: int, config: AttentionConfig):
        super().__init__()
        c_red = reduced_channels(channels, config.reduction_ratio)
        self.query = nn.Conv2d(channels, c_red, kernel_size=1)
        self.key = nn.Conv2d(channels, c_red, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.full((1,), float(config.gamma_init)))

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f, squeeze = _as_batched(f)
        _check_finite(f)
        b, c, h, w = f.shape
        n = h * w
        q = self.query(f).reshape(b, -1, n)  # (B, Cr, N)
        k = self.key(f).reshape(b, -1, n)  # (B, Cr, N)
        v = self.value(f).reshape(b, c, n)  # (B, C, N)
        flat = f.reshape(b, c, n)
        outs, attns = [], []
        for i in range(b):
            order = _canonical_order(flat[i])
            inverse = torch.argsort(order)
            qc = q[i].index_select(1, order)  # (Cr, N) in canonical order
            kc = k[i].index_select(1, order)
            vc = v[i].index_select(1, order)
            energy = qc.transpose(0, 1) @ kc  # (N, N)
            attn_c = torch.softmax(energy, dim=-1)
            out_c = vc @ attn_c.transpose(0, 1)  # (C, N)
            outs.append(out_c.index_select(1, inverse))
            attns.append(attn_c.index_select(0, inverse).index_select(1, inverse))
        out_flat = torch.stack(outs, dim=0)
        attn = torch.stack(attns, dim=0)
        out = self.gamma * out_flat.reshape(b, c, h, w) + f
        if squeeze:
            return out.squeeze(0), attn.squeeze(0)
        return out, attn


class ChannelAttention(nn.Module):
    """Channel self-attention over the Gram matrix of the reshaped feature map."""

    def __init__(self, channels: int, config: AttentionConfig):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((1,), float(config.gamma_init)))

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f, squeeze = _as_batched(f)
        _check_finite(f)
        b, c, h, w = f.shape
        flat = f.reshape(b, c, h * w)  # (B, C, N)
        energy = flat @ flat.transpose(1, 2)  # (B, C, C)
        attn = torch.softmax(energy, dim=-1)
        out_flat = attn @ flat  # (B, C, N)
        out = self.gamma * out_flat.reshape(b, c, h, w) + f
        if squeeze:
            return out.squeeze(0), attn.squeeze(0)
        return out, attn


class FastAttention(nn.Module):
    """Linear-time attention: cosine affinity of Q, K scaled by 1/N.

    The affinity application associates either way; the linear order
    Q^T (K V^T) never materializes the N x N matrix.
    """

    def __init__(self, channels: int, config: AttentionConfig):
        super().__init__()
        c_red = reduced_channels(channels, config.reduction_ratio)
        self.query = nn.Conv2d(channels, c_red, kernel_size=1)
        self.key = nn.Conv2d(channels, c_red, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.full((1,), float(config.gamma_init)))

    def forward(self, f: torch.Tensor, order: str = "linear") -> torch.Tensor:
        f, squeeze = _as_batched(f)
        _check_finite(f)
        b, c, h, w = f.shape
        n = h * w
        q = self.query(f).reshape(b, -1, n)  # (B, Cr, N)
        k = self.key(f).reshape(b, -1, n)
        v = self.value(f).reshape(b, c, n)
        qh = q / q.norm(dim=1, keepdim=True).clamp_min(1e-12)
        kh = k / k.norm(dim=1, keepdim=True).clamp_min(1e-12)
        if order == "linear":
            m = kh @ v.transpose(1, 2)  # (B, Cr, C)
            out_flat = (qh.transpose(1, 2) @ m).transpose(1, 2) / n  # (B, C, N)
        elif order == "quadratic":
            affinity = qh.transpose(1, 2) @ kh / n  # (B, N, N)
            out_flat = v @ affinity.transpose(1, 2)
        else:
            raise ValueError(f"unknown association order: {order!r}")
        out = self.gamma * out_flat.reshape(b, c, h, w) + f
        if squeeze:
            return out.squeeze(0)
        return out


def _as_batched(f: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if f.dim() == 3:
        return f.unsqueeze(0), True
    if f.dim() == 4:
        return f, False
    raise ValueError("feature map must be (C, H, W) or (B, C, H, W)")


def make_attention(channels: int, config: AttentionConfig) -> nn.Module:
    cls = {POSITION: PositionAttention, CHANNEL: ChannelAttention, FAST: FastAttention}
    return cls[config.variant](channels, config)


def position_attention(f, module: PositionAttention):
    return module(f)


def channel_attention(f, module: ChannelAttention):
    return module(f)


def fast_attention(f, module: FastAttention, order: str = "linear"):
    return module(f, order=order)
