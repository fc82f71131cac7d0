"""Confusion-matrix accumulation and segmentation metrics.

Per-class F1 and IoU, overall accuracy, and class means that exclude the
clutter class by default.  Classes absent from both reference and prediction
have undefined per-class metrics; they are reported as NaN and skipped in
means (with a warning) rather than counted as 0 or 1.
"""

from __future__ import annotations

import io
import math
import warnings

import numpy as np


class ConfusionMatrix:
    """C x C counts with rows = reference class, columns = predicted class."""

    def __init__(self, class_names, excluded_from_mean=("clutter",)):
        self.class_names = list(class_names)
        self.num_classes = len(self.class_names)
        self.excluded_from_mean = set(excluded_from_mean) & set(self.class_names)
        self.counts = np.zeros((self.num_classes, self.num_classes), np.int64)

    def accumulate(self, ref: np.ndarray, pred: np.ndarray,
                   ignore_value: int | None = None) -> "ConfusionMatrix":
        ref = np.asarray(ref)
        pred = np.asarray(pred)
        if ref.shape != pred.shape:
            raise ValueError(f"shape mismatch: reference {ref.shape} vs prediction {pred.shape}")
        ref = ref.reshape(-1).astype(np.int64)
        pred = pred.reshape(-1).astype(np.int64)
        if ignore_value is not None:
            keep = ref != ignore_value
            ref = ref[keep]
            pred = pred[keep]
        if ref.size == 0:
            return self
        c = self.num_classes
        if ref.min() < 0 or ref.max() >= c or pred.min() < 0 or pred.max() >= c:
            raise ValueError(f"class index outside [0, {c})")
        flat = np.bincount(ref * c + pred, minlength=c * c)
        self.counts += flat.reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _tp_fp_fn(self, c: int) -> tuple[int, int, int]:
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        return tp, fp, fn

    def f1(self, c: int) -> float:
        tp, fp, fn = self._tp_fp_fn(c)
        if tp + fp + fn == 0:
            return math.nan
        return 2.0 * tp / (2.0 * tp + fp + fn)

    def iou(self, c: int) -> float:
        tp, fp, fn = self._tp_fp_fn(c)
        if tp + fp + fn == 0:
            return math.nan
        return tp / (tp + fp + fn)

    def overall_accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total

    def _mean_over_classes(self, metric) -> float:
        values = []
        for c, name in enumerate(self.class_names):
            if name in self.excluded_from_mean:
                continue
            v = metric(c)
            if math.isnan(v):
                warnings.warn(f"class {name!r} has no pixels; excluded from the mean")
                continue
            values.append(v)
        if not values:
            raise ValueError("no classes with defined metrics")
        return float(np.mean(values))

    def mean_f1(self) -> float:
        return self._mean_over_classes(self.f1)

    def mean_iou(self) -> float:
        return self._mean_over_classes(self.iou)

    def report_text(self) -> str:
        buf = io.StringIO()
        name_w = max(len(n) for n in self.class_names + ["class"])
        buf.write(f"{'class':<{name_w}} {'F1':>8} {'IoU':>8} {'ref px':>12} {'flag':>9}\n")
        for c, name in enumerate(self.class_names):
            f1v, iouv = self.f1(c), self.iou(c)
            support = int(self.counts[c].sum())
            flag = "excluded" if name in self.excluded_from_mean else ""
            f1s = f"{f1v:.4f}" if not math.isnan(f1v) else "-"
            ious = f"{iouv:.4f}" if not math.isnan(iouv) else "-"
            buf.write(f"{name:<{name_w}} {f1s:>8} {ious:>8} {support:>12,} {flag:>9}\n")
        buf.write(f"\noverall accuracy : {self.overall_accuracy():.4f}\n")
        buf.write(f"mean F1          : {self.mean_f1():.4f}\n")
        buf.write(f"mean IoU         : {self.mean_iou():.4f}\n")
        return buf.getvalue()

    def report_csv(self) -> str:
        lines = ["class,f1,iou,ref_pixels,excluded_from_mean"]
        for c, name in enumerate(self.class_names):
            f1v, iouv = self.f1(c), self.iou(c)
            lines.append(
                f"{name},{f1v:.6f},{iouv:.6f},{int(self.counts[c].sum())},"
                f"{int(name in self.excluded_from_mean)}"
            )
        lines.append(f"overall_accuracy,{self.overall_accuracy():.6f},,,")
        lines.append(f"mean_f1,{self.mean_f1():.6f},,,")
        lines.append(f"mean_iou,{self.mean_iou():.6f},,,")
        return "\n".join(lines) + "\n"
