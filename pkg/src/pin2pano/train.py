"""Alternating adversarial training loop.

Each step runs two phases: phase A forwards both domains through the
generator, builds L_G = weighted segmentation terms + weighted adversarial
terms, and updates the generator only (discriminator parameters are frozen
inside the adversarial branch); phase B updates every discriminator from its
own two-class loss on detached features.  Both optimizers follow polynomial
learning-rate decay.

Checkpoints capture parameters, optimizer moments, the sampling RNG state
and the loss history, so a resumed run is bit-identical to an uninterrupted
one.  Metrics are line-delimited JSON records; the wall_ms field is assigned
at write time and is the single nondeterministic field, so determinism
comparisons go through canonical_metrics_lines which drops it.
"""

from __future__ import annotations

import json
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapt import (
    DA_1,
    DA_2,
    DASiteConfig,
    DomainHead,
    RcdamParams,
    RegionInteraction,
    init_discriminator,
    rcdam,
    sdam,
)
from .attention import AttentionConfig, PositionAttention
from .scene import Sample
from .segnet import (
    Segmenter,
    SegmenterConfig,
    atomic_save,
    init_segmenter,
    seeded_he_init_,
    seg_loss,
)

CHECKPOINT_SCHEMA = 1

PAPER_SITE_DEFAULTS = {
    DA_1: {"lambda_adv": 0.001, "lambda_seg": 1.0},
    DA_2: {"lambda_adv": 0.0002, "lambda_seg": 0.1},
}


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 200_000
    batch_size: int = 2
    g_base_lr: float = 1e-5
    g_momentum: float = 0.9
    g_weight_decay: float = 5e-4
    d_base_lr: float = 4e-6
    d_base_channels: int = 64
    lr_power: float = 0.9
    sites: tuple[DASiteConfig, ...] = (
        DASiteConfig(DA_1, "S", 0.001, 1.0),
        DASiteConfig(DA_2, "S", 0.0002, 0.1),
    )
    rcdam_stage2_seg_weight: float = 1.5
    boundary_threshold: float = 0.1
    source_resize: tuple[int, int] | None = (720, 1280)  # (H, W); None keeps native
    target_size: tuple[int, int] | None = (400, 2048)
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        seen = [s.site for s in self.sites]
        if len(seen) != len(set(seen)):
            raise ValueError("at most one adaptation entry per site")

    def to_dict(self) -> dict:
        return {
            "max_iter": self.max_iter,
            "batch_size": self.batch_size,
            "g_base_lr": self.g_base_lr,
            "g_momentum": self.g_momentum,
            "g_weight_decay": self.g_weight_decay,
            "d_base_lr": self.d_base_lr,
            "d_base_channels": self.d_base_channels,
            "lr_power": self.lr_power,
            "sites": [
                {
                    "site": s.site,
                    "mechanism": s.mechanism,
                    "lambda_adv": s.lambda_adv,
                    "lambda_seg": s.lambda_seg,
                }
                for s in self.sites
            ],
            "rcdam_stage2_seg_weight": self.rcdam_stage2_seg_weight,
            "boundary_threshold": self.boundary_threshold,
            "source_resize": list(self.source_resize) if self.source_resize else None,
            "target_size": list(self.target_size) if self.target_size else None,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            max_iter=d["max_iter"],
            batch_size=d["batch_size"],
            g_base_lr=d["g_base_lr"],
            g_momentum=d["g_momentum"],
            g_weight_decay=d["g_weight_decay"],
            d_base_lr=d["d_base_lr"],
            d_base_channels=d["d_base_channels"],
            lr_power=d["lr_power"],
            sites=tuple(DASiteConfig(**s) for s in d["sites"]),
            rcdam_stage2_seg_weight=d["rcdam_stage2_seg_weight"],
            boundary_threshold=d["boundary_threshold"],
            source_resize=tuple(d["source_resize"]) if d["source_resize"] else None,
            target_size=tuple(d["target_size"]) if d["target_size"] else None,
            seed=d["seed"],
            checkpoint_every=d["checkpoint_every"],
            log_every=d["log_every"],
        )


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float) -> float:
    """base_lr * (1 - iter/max_iter)^power, nonincreasing in iter."""
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class SiteLossTerms:
    """Per-site generator-loss ingredients gathered during phase A."""

    cfg: DASiteConfig
    adv: torch.Tensor
    aux_seg: torch.Tensor | None = None
    stage2_seg: torch.Tensor | None = None


def generator_total_loss(l_seg_main, site_terms: list[SiteLossTerms], cfg: TrainConfig):
    """L_G: the main segmentation term is weighted by DA_1's lambda_seg (1.0
    when no DA_1 site is configured); DA_2's lambda_seg weights the auxiliary
    head; each site adds lambda_adv * L_adv; a region-context stage adds its
    own weighted segmentation term."""
    main_w = 1.0
    for s in cfg.sites:
        if s.site == DA_1:
            main_w = s.lambda_seg
    total = main_w * l_seg_main
    for term in site_terms:
        total = total + term.cfg.lambda_adv * term.adv
        if term.aux_seg is not None:
            total = total + term.cfg.lambda_seg * term.aux_seg
        if term.stage2_seg is not None:
            total = total + cfg.rcdam_stage2_seg_weight * term.stage2_seg
    return total


@dataclass
class TrainState:
    iteration: int
    generator: nn.Module
    heads: dict[str, DomainHead]
    rcdam_params: RcdamParams | None
    g_opt: torch.optim.Optimizer
    d_opts: dict[str, torch.optim.Optimizer]
    rng: torch.Generator
    loss_history: deque = field(default_factory=lambda: deque(maxlen=1000))


def _mechanisms(site_cfg: DASiteConfig) -> list[str]:
    return ["S", "A"] if site_cfg.mechanism == "S+A" else [site_cfg.mechanism]


def _component_seed(base_seed: int, name: str) -> int:
    return (int(base_seed) * 2654435761 + zlib.crc32(name.encode())) % (2**63)


def build_train_state(cfg: TrainConfig, arch: SegmenterConfig) -> TrainState:
    generator = init_segmenter(arch, _component_seed(cfg.seed, "generator"))
    feat_channels = arch.encoder_channels[3]
    heads: dict[str, DomainHead] = {}
    d_opts: dict[str, torch.optim.Optimizer] = {}
    rcdam_params = None
    g_params = list(generator.parameters())

    for site_cfg in cfg.sites:
        in_ch = arch.num_classes if site_cfg.site == DA_1 else feat_channels
        if site_cfg.mechanism == "R":
            for stage in ("R1", "R2"):
                key = f"{site_cfg.site}.{stage}"
                disc = init_discriminator(
                    arch.num_classes, cfg.d_base_channels, _component_seed(cfg.seed, key)
                )
                heads[key] = DomainHead(disc)
            rib_params = RegionInteraction(feat_channels).seeded_init_(
                _component_seed(cfg.seed, "rcdam.rib")
            )
            rcdam_params = RcdamParams(rib_params, generator.classifier)
            g_params += list(rib_params.parameters())
        else:
            for mech in _mechanisms(site_cfg):
                key = f"{site_cfg.site}.{mech}"
                disc = init_discriminator(
                    in_ch, cfg.d_base_channels, _component_seed(cfg.seed, key)
                )
                attn = None
                if mech == "A":
                    attn = PositionAttention(in_ch, AttentionConfig("position"))
                    seeded_he_init_(attn, _component_seed(cfg.seed, key + ".attn"))
                heads[key] = DomainHead(disc, attn)

    g_opt = torch.optim.SGD(
        g_params,
        lr=cfg.g_base_lr,
        momentum=cfg.g_momentum,
        weight_decay=cfg.g_weight_decay,
    )
    for key in sorted(heads):
        d_opts[key] = torch.optim.Adam(
            heads[key].parameters(), lr=cfg.d_base_lr, betas=(0.9, 0.99)
        )
    rng = torch.Generator().manual_seed(_component_seed(cfg.seed, "sampler"))
    return TrainState(
        iteration=0,
        generator=generator,
        heads=heads,
        rcdam_params=rcdam_params,
        g_opt=g_opt,
        d_opts=d_opts,
        rng=rng,
    )


def resize_image(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(
        x.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    ).squeeze(0)


def resize_labels(y: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(y.shape[-2:]) == tuple(size):
        return y
    out = F.interpolate(y.unsqueeze(0).unsqueeze(0).float(), size=size, mode="nearest")
    return out.squeeze(0).squeeze(0).long()


def _stack_source(batch: list[Sample], cfg: TrainConfig):
    xs, ys = [], []
    for s in batch:
        if s.labels is None:
            raise ValueError("source batch must be labeled")
        x = torch.from_numpy(np.ascontiguousarray(s.image))
        y = torch.from_numpy(np.ascontiguousarray(s.labels))
        if cfg.source_resize is not None:
            x = resize_image(x, cfg.source_resize)
            y = resize_labels(y, cfg.source_resize)
        xs.append(x)
        ys.append(y)
    return torch.stack(xs), torch.stack(ys)


def _stack_target(batch: list[Sample], cfg: TrainConfig) -> torch.Tensor:
    xs = []
    for s in batch:
        x = torch.from_numpy(np.ascontiguousarray(s.image))
        if cfg.target_size is not None:
            x = resize_image(x, cfg.target_size)
        xs.append(x)
    return torch.stack(xs)


def generator_phase(state: TrainState, x_s, y_s, x_t, cfg: TrainConfig):
    """Phase A: forward both domains, build L_G, update the generator only.

    Returns (record fields, detachable per-head discriminator losses for
    phase B).
    """
    state.g_opt.zero_grad()
    taps_s = state.generator(x_s)
    taps_t = state.generator(x_t)
    l_seg_main = seg_loss(taps_s.logits, y_s)

    site_terms: list[SiteLossTerms] = []
    d_losses: dict[str, torch.Tensor] = {}
    adv_log: dict[str, float] = {}
    extra_seg_log: dict[str, float] = {}

    for site_cfg in cfg.sites:
        if site_cfg.mechanism == "R":
            l_d_total, l_adv_total, stage2_logits_s = rcdam(
                taps_s,
                taps_t,
                state.heads[f"{site_cfg.site}.R1"],
                state.heads[f"{site_cfg.site}.R2"],
                state.rcdam_params,
                boundary_threshold=cfg.boundary_threshold,
            )
            stage2_seg = seg_loss(stage2_logits_s, y_s)
            site_terms.append(
                SiteLossTerms(cfg=site_cfg, adv=l_adv_total, stage2_seg=stage2_seg)
            )
            # One combined two-stage D loss; both stage optimizers step on it.
            d_losses[f"{site_cfg.site}.R"] = l_d_total
            adv_log[f"{site_cfg.site}.R"] = float(l_adv_total.detach())
            extra_seg_log[f"{site_cfg.site}.stage2_seg"] = float(stage2_seg.detach())
            continue
        mechs = _mechanisms(site_cfg)
        adv_sum = None
        for mech in mechs:
            key = f"{site_cfg.site}.{mech}"
            l_d, l_adv = sdam(site_cfg.site, taps_s, taps_t, state.heads[key])
            d_losses[key] = l_d
            adv_log[key] = float(l_adv.detach())
            adv_sum = l_adv if adv_sum is None else adv_sum + l_adv
        # A site running several mechanisms averages their adversarial losses,
        # so lambda_adv keeps one per-site meaning regardless of mechanism count.
        adv_sum = adv_sum / len(mechs)
        aux = None
        if site_cfg.site == DA_2 and site_cfg.lambda_seg > 0:
            if taps_s.aux_logits is None:
                raise ValueError(
                    "DA_2 lambda_seg > 0 requires a generator with an auxiliary head"
                )
            aux = seg_loss(taps_s.aux_logits, y_s)
            extra_seg_log[f"{site_cfg.site}.aux_seg"] = float(aux.detach())
        site_terms.append(SiteLossTerms(cfg=site_cfg, adv=adv_sum, aux_seg=aux))

    l_g = generator_total_loss(l_seg_main, site_terms, cfg)
    finite = torch.isfinite(l_g) and all(torch.isfinite(v) for v in d_losses.values())
    if not finite:
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}: "
            f"l_g={float(l_g.detach())!r}, "
            f"l_d={ {k: float(v.detach()) for k, v in d_losses.items()} !r}"
        )
    l_g.backward()
    state.g_opt.step()

    record = {
        "l_seg": float(l_seg_main.detach()),
        "l_g": float(l_g.detach()),
        "l_adv": adv_log,
        "l_seg_extra": extra_seg_log,
    }
    return record, d_losses


def discriminator_phase(state: TrainState, d_losses: dict[str, torch.Tensor]) -> dict:
    """Phase B: every discriminator steps on its own detached-input loss."""
    for opt in state.d_opts.values():
        opt.zero_grad()
    if d_losses:
        total = None
        for key in sorted(d_losses):
            total = d_losses[key] if total is None else total + d_losses[key]
        total.backward()
        for opt in state.d_opts.values():
            opt.step()
    return {k: float(v.detach()) for k, v in d_losses.items()}


def train_step(state: TrainState, batch_s: list[Sample], batch_t: list[Sample], cfg: TrainConfig) -> TrainState:
    """One alternating G/D update; appends a canonical record to the loss history."""
    if state.iteration >= cfg.max_iter:
        raise ValueError("training already ran to max_iter")
    lr_g = poly_lr(cfg.g_base_lr, state.iteration, cfg.max_iter, cfg.lr_power)
    lr_d = poly_lr(cfg.d_base_lr, state.iteration, cfg.max_iter, cfg.lr_power)
    for group in state.g_opt.param_groups:
        group["lr"] = lr_g
    for opt in state.d_opts.values():
        for group in opt.param_groups:
            group["lr"] = lr_d

    x_s, y_s = _stack_source(batch_s, cfg)
    x_t = _stack_target(batch_t, cfg)
    record, d_losses = generator_phase(state, x_s, y_s, x_t, cfg)
    record["l_d"] = discriminator_phase(state, d_losses)
    record["iter"] = state.iteration
    record["lr_g"] = lr_g
    record["lr_d"] = lr_d
    state.iteration += 1
    state.loss_history.append(record)
    return state


# --- checkpointing ---------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, arch: SegmenterConfig) -> None:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "train_config": cfg.to_dict(),
        "arch": arch.to_dict(),
        "iteration": state.iteration,
        "generator": state.generator.state_dict(),
        "heads": {k: state.heads[k].state_dict() for k in sorted(state.heads)},
        "rcdam_rib": (
            state.rcdam_params.rib.state_dict() if state.rcdam_params is not None else None
        ),
        "g_opt": state.g_opt.state_dict(),
        "d_opts": {k: state.d_opts[k].state_dict() for k in sorted(state.d_opts)},
        "rng": state.rng.get_state(),
        "loss_history": list(state.loss_history),
    }
    atomic_save(payload, path)


def load_checkpoint(path, cfg: TrainConfig, arch: SegmenterConfig) -> TrainState:
    """Rebuild a TrainState; config or arch mismatch with the checkpoint is an error."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {ckpt.get('schema')!r}")
    if ckpt["train_config"] != cfg.to_dict():
        raise ValueError("checkpoint train config does not match the requested config")
    if ckpt["arch"] != arch.to_dict():
        raise ValueError("checkpoint arch config does not match the requested arch")
    state = build_train_state(cfg, arch)
    state.generator.load_state_dict(ckpt["generator"])
    for k, sd in ckpt["heads"].items():
        state.heads[k].load_state_dict(sd)
    if ckpt["rcdam_rib"] is not None:
        state.rcdam_params.rib.load_state_dict(ckpt["rcdam_rib"])
    state.g_opt.load_state_dict(ckpt["g_opt"])
    for k, sd in ckpt["d_opts"].items():
        state.d_opts[k].load_state_dict(sd)
    state.rng.set_state(ckpt["rng"])
    state.iteration = ckpt["iteration"]
    state.loss_history = deque(ckpt["loss_history"], maxlen=state.loss_history.maxlen)
    return state


def load_generator(path) -> Segmenter:
    """Rebuild just the generator from a training checkpoint (for evaluation)."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA or "generator" not in ckpt:
        raise ValueError(f"not a training checkpoint: {path}")
    model = Segmenter(SegmenterConfig.from_dict(ckpt["arch"]))
    model.load_state_dict(ckpt["generator"])
    return model


def canonical_metrics_lines(path) -> list[str]:
    """Metrics lines with the wall-time field removed (the only field that may
    differ between two otherwise identical runs)."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        rec.pop("wall_ms", None)
        out.append(json.dumps(rec, sort_keys=True))
    return out


def run_training(
    cfg: TrainConfig,
    source_dataset: list[Sample],
    target_dataset: list[Sample],
    arch: SegmenterConfig,
    run_dir,
    resume=None,
):
    """Train to cfg.max_iter; returns (final checkpoint path, metrics path).

    Checkpoints land under <run_dir>/checkpoints every checkpoint_every
    iterations and at the end; metrics append to <run_dir>/metrics.log.  A
    non-finite loss aborts after writing a diagnostic snapshot.
    """
    if not source_dataset or not target_dataset:
        raise ValueError("datasets must be nonempty")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.log"

    if resume is not None:
        state = load_checkpoint(resume, cfg, arch)
    else:
        state = build_train_state(cfg, arch)
        metrics_path.unlink(missing_ok=True)

    final_path = ckpt_dir / "final.pt"
    with open(metrics_path, "a") as log:
        while state.iteration < cfg.max_iter:
            idx_s = torch.randint(
                0, len(source_dataset), (cfg.batch_size,), generator=state.rng
            )
            idx_t = torch.randint(
                0, len(target_dataset), (cfg.batch_size,), generator=state.rng
            )
            batch_s = [source_dataset[int(i)] for i in idx_s]
            batch_t = [target_dataset[int(i)] for i in idx_t]
            t0 = time.perf_counter()
            try:
                train_step(state, batch_s, batch_t, cfg)
            except NonFiniteLossError:
                save_checkpoint(run_dir / "diagnostic.pt", state, cfg, arch)
                raise
            wall_ms = (time.perf_counter() - t0) * 1000.0
            it = state.iteration
            if it % cfg.log_every == 0 or it == cfg.max_iter:
                rec = dict(state.loss_history[-1])
                rec["wall_ms"] = wall_ms
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            if it % cfg.checkpoint_every == 0 and it < cfg.max_iter:
                save_checkpoint(ckpt_dir / f"iter_{it:08d}.pt", state, cfg, arch)
    save_checkpoint(final_path, state, cfg, arch)
    return final_path, metrics_path
