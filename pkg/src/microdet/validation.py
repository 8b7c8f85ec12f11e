"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from microdet.assign import BBox


def check_image_batch(X, input_size: int | None = None) -> np.ndarray:
    """Coerce X to a float32 [N, 3, H, W] batch with values in [0, 1].

    Accepts an array or a sequence of [3, H, W] images.  HWC inputs are
    transposed when unambiguous.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected image batch of rank 3 or 4, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise ValueError(f"expected 3 channels, got shape {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"expected square images, got {arr.shape[2]}x{arr.shape[3]}")
    if input_size is not None and arr.shape[2] != input_size:
        raise ValueError(f"expected {input_size}px images, got {arr.shape[2]}px")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image batch contains non-finite values")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        if hi > 1.5 and hi <= 255.0 and lo >= 0.0:
            arr = arr / 255.0
        else:
            raise ValueError(f"pixel values outside [0, 1]: min {lo}, max {hi}")
    return np.ascontiguousarray(arr)


def check_labels(y, n_images: int, num_classes: int) -> list[list[tuple[BBox, int]]]:
    """Coerce labels to per-image lists of (BBox, class).

    Each image's labels may be an (M, 5) array of rows [class, cx, cy, w, h]
    or a list of (BBox, class) pairs.
    """
    if len(y) != n_images:
        raise ValueError(f"got labels for {len(y)} images, expected {n_images}")
    out: list[list[tuple[BBox, int]]] = []
    for i, entry in enumerate(y):
        gts: list[tuple[BBox, int]] = []
        if isinstance(entry, np.ndarray):
            if entry.size and (entry.ndim != 2 or entry.shape[1] != 5):
                raise ValueError(f"image {i}: label array must be (M, 5), got {entry.shape}")
            rows = [(BBox(*map(float, r[1:])), int(r[0])) for r in entry]
        else:
            rows = []
            for item in entry:
                bbox, cls = item
                if not isinstance(bbox, BBox):
                    bbox = BBox(*map(float, bbox))
                rows.append((bbox, int(cls)))
        for bbox, cls in rows:
            if not 0 <= cls < num_classes:
                raise ValueError(f"image {i}: class {cls} outside [0, {num_classes})")
            for name, v in (("cx", bbox.cx), ("cy", bbox.cy), ("w", bbox.w), ("h", bbox.h)):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"image {i}: {name}={v} outside [0, 1]")
            gts.append((bbox, cls))
        out.append(gts)
    return out
