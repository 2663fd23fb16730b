"""Segmentation evaluation: confusion-matrix statistics, IoU/accuracy reports,
held-out-domain evaluation across client models, and embedding export.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, UndefinedMetricError
from .models import TwoBranchModel, fuse_outputs
from .scenes import LabeledImage

EVAL_MODES = ("fused", "global_only", "local_only")


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ContractError("need at least one class")
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts)
            if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
                raise ContractError("counts must be a non-negative C x C matrix")
            self.counts = counts.astype(np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError("prediction and ground truth must share a shape")
        c = self.num_classes
        if pred.min() < 0 or pred.max() >= c or gt.min() < 0 or gt.max() >= c:
            raise ContractError("labels out of class range")
        flat = gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(num_classes).add(pred, gt)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; classes absent from both gt and prediction are NaN."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    defined = ~np.isnan(iou)
    if not defined.any():
        raise UndefinedMetricError("no class is present in ground truth or prediction")
    return float(iou[defined].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("no pixels evaluated")
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    miou: float
    pixel_acc: float
    per_client: Dict[int, "EvalReport"] = field(default_factory=dict)
    unseen_domain: Optional["EvalReport"] = None

    def to_dict(self) -> dict:
        out = {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "pixel_acc": self.pixel_acc,
        }
        if self.per_client:
            out["per_client"] = {str(c): r.to_dict() for c, r in self.per_client.items()}
        if self.unseen_domain is not None:
            out["unseen_domain"] = self.unseen_domain.to_dict()
        return out


def report_from_confusion(cm: ConfusionMatrix) -> EvalReport:
    return EvalReport(per_class_iou=per_class_iou(cm), miou=miou(cm), pixel_acc=pixel_accuracy(cm))


def _upsample_pred(pred: np.ndarray, height: int, width: int, factor: int = 4) -> np.ndarray:
    up = np.repeat(np.repeat(pred, factor, axis=-2), factor, axis=-1)
    return up[..., :height, :width]


def predict(model: TwoBranchModel, images: Sequence[LabeledImage], mode: str = "fused") -> np.ndarray:
    """Label predictions (N, H, W). Logits are argmaxed at feature resolution;
    nearest upsampling makes this identical to full-resolution argmax."""
    if mode not in EVAL_MODES:
        raise ContractError(f"mode must be one of {EVAL_MODES}")
    if not images:
        raise ContractError("no images to evaluate")
    x = ad.Tensor(np.stack([img.image for img in images]))
    h, w = images[0].mask.shape
    with ad.no_grad():
        if mode in ("fused", "global_only"):
            zg = model.logits_from_features("global", model.features("global", x))
        if mode in ("fused", "local_only"):
            zl = model.logits_from_features("local", model.features("local", x))
        z = fuse_outputs(zl, zg) if mode == "fused" else (zg if mode == "global_only" else zl)
    return _upsample_pred(np.argmax(z.data, axis=1), h, w)


def evaluate_client(
    model: TwoBranchModel, images: Sequence[LabeledImage], mode: str = "fused"
) -> EvalReport:
    preds = predict(model, images, mode)
    cm = ConfusionMatrix(model.num_classes)
    for img, pred in zip(images, preds):
        cm.add(pred, img.mask)
    return report_from_confusion(cm)


def evaluate_unseen(
    models: Dict[int, TwoBranchModel], holdout: Sequence[LabeledImage], mode: str = "fused"
) -> EvalReport:
    """Evaluate every participating client's model on the held-out domain and
    average their scores."""
    if not models:
        raise ContractError("no client models to evaluate")
    per_client = {cid: evaluate_client(m, holdout, mode) for cid, m in sorted(models.items())}
    ious = np.stack([r.per_class_iou for r in per_client.values()])
    with np.errstate(invalid="ignore"):
        mean_iou = np.nanmean(ious, axis=0)
    return EvalReport(
        per_class_iou=mean_iou,
        miou=float(np.mean([r.miou for r in per_client.values()])),
        pixel_acc=float(np.mean([r.pixel_acc for r in per_client.values()])),
        per_client=per_client,
    )


def export_embeddings(
    model: TwoBranchModel,
    images: Sequence[LabeledImage],
    sample_per_class: int,
    path: str,
    seed: int = 0,
    branch: str = "global",
) -> Tuple[int, List[int]]:
    """Sample per-pixel extractor features with their labels into a CSV.

    Returns (rows written, class ids that were requested but absent).
    """
    if sample_per_class < 1:
        raise ContractError("sample_per_class must be >= 1")
    if not images:
        raise ContractError("no images to sample from")
    rng = np.random.default_rng([seed, 7])
    x = ad.Tensor(np.stack([img.image for img in images]))
    with ad.no_grad():
        feats = model.features(branch, x).data  # (N, K, h', w')
    num_classes = images[0].num_classes
    positions: Dict[int, List[Tuple[int, int, int]]] = {c: [] for c in range(num_classes)}
    for n, img in enumerate(images):
        for c in np.unique(img.mask):
            for y, xpix in np.argwhere(img.mask == c):
                positions[int(c)].append((n, int(y), int(xpix)))
    skipped = [c for c in range(num_classes) if not positions[c]]
    k_ch = feats.shape[1]
    rows_written = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(k_ch)] + ["class_id"])
        for c in range(num_classes):
            pool = positions[c]
            if not pool:
                continue
            take = min(sample_per_class, len(pool))
            for i in rng.choice(len(pool), size=take, replace=False):
                n, y, xpix = pool[int(i)]
                vec = feats[n, :, y // 4, xpix // 4]
                writer.writerow([f"{v:.17g}" for v in vec] + [c])
                rows_written += 1
    return rows_written, skipped
