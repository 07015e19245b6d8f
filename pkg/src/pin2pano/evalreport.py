"""Per-class IoU / mIoU evaluation and result-table emission.

The confusion matrix is 19x19 over the trainID palette; ignore-labeled
pixels (255) contribute nothing.  Classes absent from both prediction and
ground truth have undefined IoU and are excluded from the mean; this
exclusion policy is recorded in every report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .palette import CLASS_NAMES, IGNORE_INDEX, NUM_CLASSES
from .scene import Sample

UNDEFINED_POLICY = "classes absent from prediction and ground truth are excluded from the mean"


class ConfusionMatrix:
    """counts[g][p] = number of valid pixels with ground truth g predicted p."""

    def __init__(self, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES) or (counts < 0).any():
            raise ValueError("confusion matrix must be 19x19 nonnegative counts")
        self.counts = counts

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred dims {pred.shape} != gt dims {gt.shape}")
        if pred.min(initial=0) < 0 or pred.max(initial=0) >= NUM_CLASSES:
            raise ValueError("predictions must lie in {0..18}")
        valid = gt != IGNORE_INDEX
        g = gt[valid]
        if g.size and (g.min() < 0 or g.max() >= NUM_CLASSES):
            raise ValueError("ground truth must lie in {0..18, 255}")
        p = pred[valid]
        binc = np.bincount(
            g.astype(np.int64) * NUM_CLASSES + p.astype(np.int64),
            minlength=NUM_CLASSES * NUM_CLASSES,
        )
        self.counts += binc.reshape(NUM_CLASSES, NUM_CLASSES)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)


def update_confusion(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class as float64; classes with TP+FP+FN = 0 are NaN (undefined).

    Counting stays in integers until the final division.
    """
    counts = cm.counts
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(NUM_CLASSES, np.nan, dtype=np.float64)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    return iou


def mean_iou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    defined = ~np.isnan(iou)
    if not defined.any():
        raise ValueError("empty confusion matrix: mIoU undefined")
    return float(iou[defined].mean())


@dataclass
class EvalReport:
    model: str
    dataset: str
    per_class_iou: tuple  # 19 entries, float or None (undefined)
    miou: float
    policy: str = UNDEFINED_POLICY

    def to_record(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "miou": self.miou,
            "per_class_iou": list(self.per_class_iou),
            "class_names": list(CLASS_NAMES),
            "policy": self.policy,
        }

    @staticmethod
    def from_record(rec: dict) -> "EvalReport":
        return EvalReport(
            model=rec["model"],
            dataset=rec["dataset"],
            per_class_iou=tuple(rec["per_class_iou"]),
            miou=rec["miou"],
            policy=rec.get("policy", UNDEFINED_POLICY),
        )


def report_from_confusion(cm: ConfusionMatrix, model: str, dataset: str) -> EvalReport:
    iou = per_class_iou(cm)
    return EvalReport(
        model=model,
        dataset=dataset,
        per_class_iou=tuple(None if np.isnan(v) else float(v) for v in iou),
        miou=mean_iou(cm),
    )


def evaluate_model(
    model,
    dataset,
    input_size: tuple[int, int] | None = None,
    model_tag: str = "model",
    dataset_tag: str = "dataset",
) -> EvalReport:
    """Single-scale evaluation: forward each labeled sample, argmax, accumulate.

    input_size (H, W) optionally resizes images before the forward pass;
    logits are bilinearly mapped back to label resolution before argmax.
    """
    cm = ConfusionMatrix()
    with torch.no_grad():
        for sample in dataset:
            if sample.labels is None:
                raise ValueError("evaluation requires a labeled dataset")
            x = torch.from_numpy(np.ascontiguousarray(sample.image))
            if input_size is not None and tuple(x.shape[-2:]) != tuple(input_size):
                x = F.interpolate(
                    x.unsqueeze(0), size=input_size, mode="bilinear", align_corners=False
                ).squeeze(0)
            taps = model(x)
            logits = taps.logits
            if logits.dim() == 4:
                logits = logits.squeeze(0)
            if tuple(logits.shape[-2:]) != sample.labels.shape:
                logits = F.interpolate(
                    logits.unsqueeze(0),
                    size=sample.labels.shape,
                    mode="bilinear",
                    align_corners=False,
                ).squeeze(0)
            pred = logits.argmax(dim=0).numpy()
            cm.update(pred, sample.labels)
    return report_from_confusion(cm, model_tag, dataset_tag)


@dataclass
class GapRow:
    name: str
    backbone: str
    miou_src: float
    miou_tgt: float
    gap: float


def gap_report(
    report_source: EvalReport, report_target: EvalReport, backbone: str = "-"
) -> GapRow:
    """Source-vs-target degradation row; gap = target mIoU minus source mIoU."""
    if report_source.model != report_target.model:
        raise ValueError(
            f"model tags differ: {report_source.model!r} vs {report_target.model!r}"
        )
    return GapRow(
        name=report_source.model,
        backbone=backbone,
        miou_src=report_source.miou,
        miou_tgt=report_target.miou,
        gap=report_target.miou - report_source.miou,
    )


def format_gap_table(rows: list[GapRow]) -> str:
    """Fixed-format gap table; mIoU values are percentages with one decimal."""
    lines = [
        f"{'Network':<22}{'Backbone':<15}{'Source mIoU':>12}{'Target mIoU':>13}{'mIoU Gap':>10}",
        "-" * 72,
    ]
    for r in rows:
        lines.append(
            f"{r.name:<22}{r.backbone:<15}"
            f"{100.0 * r.miou_src:>12.1f}{100.0 * r.miou_tgt:>13.1f}{100.0 * r.gap:>10.1f}"
        )
    return "\n".join(lines) + "\n"


def format_class_table(reports: list[EvalReport]) -> str:
    """Per-class IoU table in the fixed class order; undefined entries show '-'."""
    widths = [max(len(n), 5) + 2 for n in CLASS_NAMES]
    header = f"{'Model':<28}{'mIoU':>7}" + "".join(
        f"{n:>{w}}" for n, w in zip(CLASS_NAMES, widths)
    )
    lines = [header, "-" * len(header)]
    for rep in reports:
        cells = "".join(
            f"{'-':>{w}}" if v is None else f"{100.0 * v:>{w}.1f}"
            for v, w in zip(rep.per_class_iou, widths)
        )
        lines.append(f"{rep.model:<28}{100.0 * rep.miou:>7.1f}" + cells)
    return "\n".join(lines) + "\n"


def save_reports(path, reports: list[EvalReport]) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")


def load_reports(path) -> list[EvalReport]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(EvalReport.from_record(json.loads(line)))
    return out
