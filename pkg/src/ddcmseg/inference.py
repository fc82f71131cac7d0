"""Full-image prediction: sliding windows, flip/mirror test-time augmentation,
and overlap-averaged stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

TTA_TRANSFORMS = ("identity", "hflip", "vflip", "hvflip")


def apply_flip(arr: np.ndarray, transform: str) -> np.ndarray:
    """Flip the trailing (h, w) axes; every transform is its own inverse."""
    if transform == "identity":
        return arr
    if transform == "hflip":
        return arr[..., :, ::-1]
    if transform == "vflip":
        return arr[..., ::-1, :]
    if transform == "hvflip":
        return arr[..., ::-1, ::-1]
    raise ValueError(f"unknown TTA transform {transform!r}")


def plan_windows(h: int, w: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Grid of window origins at stride multiples, with a clamped final
    row/column whenever the grid does not land exactly on the far edge."""
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than image {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    def axis_positions(extent: int) -> list[int]:
        positions = list(range(0, extent - window + 1, stride))
        if positions[-1] != extent - window:
            positions.append(extent - window)
        return positions

    ys = axis_positions(h)
    xs = axis_positions(w)
    return [(y, x) for y in ys for x in xs]


@dataclass(frozen=True)
class StitchPlan:
    """Sliding-window inference settings: window size, stride, TTA on/off."""

    window: int = 448
    stride: int = 100
    tta: bool = True

    @property
    def transforms(self) -> tuple[str, ...]:
        return TTA_TRANSFORMS if self.tta else ("identity",)

    def windows(self, h: int, w: int) -> list[tuple[int, int]]:
        return plan_windows(h, w, self.window, self.stride)


def predict_image(model, image: np.ndarray, plan: StitchPlan, num_classes: int,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stitch per-window TTA-averaged class probabilities over a full image.

    ``model`` maps a float32 (m, c, win, win) batch to (m, num_classes, win,
    win) log-probabilities.  All enabled flip transforms of each window are
    batched through one call, inverse-transformed, and averaged in
    probability space; overlapping windows are then averaged per pixel via a
    hit counter.  Window order is fixed, so results are deterministic.

    Returns (class_map int64 (h, w), probabilities float32 (num_classes, h,
    w), hit counts int64 (h, w)).  Argmax ties break toward the lower class
    index.
    """
    if image.ndim != 3:
        raise ShapeError(f"image must be (c, h, w), got shape {image.shape}")
    _, h, w = image.shape
    acc = np.zeros((num_classes, h, w), np.float32)
    hits = np.zeros((h, w), np.int64)
    transforms = plan.transforms

    for y, x in plan.windows(h, w):
        patch = image[:, y:y + plan.window, x:x + plan.window]
        batch = np.stack([np.ascontiguousarray(apply_flip(patch, t)) for t in transforms])
        log_probs = model(batch.astype(np.float32, copy=False))
        if log_probs.shape[1] != num_classes:
            raise ShapeError(
                f"model produced {log_probs.shape[1]} channels, expected {num_classes}"
            )
        probs = np.exp(log_probs)
        mean = np.zeros_like(probs[0])
        for k, t in enumerate(transforms):
            mean += apply_flip(probs[k], t)
        mean /= np.float32(len(transforms))
        acc[:, y:y + plan.window, x:x + plan.window] += mean
        hits[y:y + plan.window, x:x + plan.window] += 1

    if hits.min() < 1:
        raise AssertionError("window plan left pixels uncovered")
    probs = acc / hits.astype(np.float32)
    class_map = probs.argmax(axis=0)
    return class_map, probs, hits
