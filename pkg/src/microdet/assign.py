"""Label assignment and prediction decoding.

Training uses a one-to-many assignment (top-k cells per target by the
alignment metric score^alpha * IoU^beta, restricted to each target's
centre region) with small-target-aware weighting.  The one-to-one
assignment gives each target exactly one cell, which is what makes
suppression-free decoding possible at inference time.  A classic greedy
NMS decoder is kept as the latency baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from microdet.model import RawPredictions, level_anchors


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, normalized center format (all fields in [0, 1])."""

    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self, scale: float = 1.0) -> tuple[float, float, float, float]:
        return ((self.cx - self.w / 2) * scale, (self.cy - self.h / 2) * scale,
                (self.cx + self.w / 2) * scale, (self.cy + self.h / 2) * scale)

    @staticmethod
    def from_xyxy(x1: float, y1: float, x2: float, y2: float,
                  scale: float = 1.0) -> "BBox":
        return BBox((x1 + x2) / (2 * scale), (y1 + y2) / (2 * scale),
                    (x2 - x1) / scale, (y2 - y1) / scale)

    def area_px(self, image_size: float) -> float:
        return self.w * self.h * image_size * image_size

    def clamped(self) -> "BBox":
        x1, y1, x2, y2 = self.to_xyxy()
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(1.0, max(x2, x1)), min(1.0, max(y2, y1))
        return BBox.from_xyxy(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 for disjoint or degenerate."""
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union) if union > 0.0 else 0.0


def iou_many(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """IoU of each row of boxes [M,4] (xyxy) against one reference box."""
    iw = np.minimum(boxes[:, 2], ref[2]) - np.maximum(boxes[:, 0], ref[0])
    ih = np.minimum(boxes[:, 3], ref[3]) - np.maximum(boxes[:, 1], ref[1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    ref_area = (ref[2] - ref[0]) * (ref[3] - ref[1])
    union = area + ref_area - inter
    out = np.zeros(len(boxes), dtype=np.float64)
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


# ---------------------------------------------------------------------------
# full-grid decode (numpy, no gradients)
# ---------------------------------------------------------------------------


@dataclass
class DecodedCells:
    """Every prediction cell of one image, flattened across levels."""

    boxes: np.ndarray      # [M, 4] xyxy pixels
    scores: np.ndarray     # [M, num_classes] sigmoid probabilities
    anchors: np.ndarray    # [M, 2] cell centers, pixels
    strides: np.ndarray    # [M]
    input_size: int
    level_slices: dict[str, slice] = field(default_factory=dict)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def decoded_distances(preds: RawPredictions, level: str, image_index: int) -> np.ndarray:
    """Per-cell (l, t, r, b) distances in stride units, [cells, 4]."""
    raw = preds.box[level].data[image_index]
    g = raw.shape[-1]
    if preds.use_dfl:
        nb = preds.dfl_bins + 1
        z = raw.reshape(4, nb, g * g)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        dist = (p * np.arange(nb, dtype=np.float32)[None, :, None]).sum(axis=1)
    else:
        dist = np.logaddexp(0.0, raw.reshape(4, g * g)).astype(np.float32)
    return dist.T  # [cells, 4]


def decode_cells(preds: RawPredictions, image_index: int = 0) -> DecodedCells:
    boxes, scores, anchors, strides = [], [], [], []
    slices: dict[str, slice] = {}
    offset = 0
    for lv in preds.levels:
        s = preds.strides[lv]
        g = preds.input_size // s
        anch = level_anchors(g, s)
        dist = decoded_distances(preds, lv, image_index) * s
        xyxy = np.empty((g * g, 4), dtype=np.float32)
        xyxy[:, 0] = anch[:, 0] - dist[:, 0]
        xyxy[:, 1] = anch[:, 1] - dist[:, 1]
        xyxy[:, 2] = anch[:, 0] + dist[:, 2]
        xyxy[:, 3] = anch[:, 1] + dist[:, 3]
        logit = preds.cls[lv].data[image_index].reshape(preds.num_classes, g * g)
        boxes.append(xyxy)
        scores.append(_stable_sigmoid(logit.T))
        anchors.append(anch)
        strides.append(np.full(g * g, s, dtype=np.float32))
        slices[lv] = slice(offset, offset + g * g)
        offset += g * g
    return DecodedCells(
        boxes=np.concatenate(boxes), scores=np.concatenate(scores),
        anchors=np.concatenate(anchors), strides=np.concatenate(strides),
        input_size=preds.input_size, level_slices=slices)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssignConfig:
    topk: int = 10
    metric_alpha: float = 0.5
    metric_beta: float = 6.0
    center_radius: float = 2.5
    small_target_alpha: float = 1.0
    small_target_area: float = 400.0
    small_target_boost: bool = True


@dataclass
class Assignment:
    """Cell-to-target pairing with per-pair weights.

    ``pairs[i]`` is (flat cell index, gt index); ``small_target_weights[i]`` >= 1
    up-weights small targets; ``scores[i]`` is the alignment metric of the
    pair.
    """

    pairs: list[tuple[int, int]]
    small_target_weights: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)


def small_target_weight(gt: BBox, image_size: float, alpha: float = 1.0,
                area_small: float = 400.0) -> float:
    """1 at or above the small-target area threshold, up to 1 + alpha at zero."""
    area = gt.area_px(image_size)
    return 1.0 + alpha * max(0.0, 1.0 - area / area_small)


def _candidate_mask(cells: DecodedCells, gt_xyxy, center_radius: float) -> np.ndarray:
    gcx = (gt_xyxy[0] + gt_xyxy[2]) / 2.0
    gcy = (gt_xyxy[1] + gt_xyxy[3]) / 2.0
    gw = gt_xyxy[2] - gt_xyxy[0]
    gh = gt_xyxy[3] - gt_xyxy[1]
    hx = np.maximum(gw, center_radius * cells.strides) / 2.0
    hy = np.maximum(gh, center_radius * cells.strides) / 2.0
    return ((np.abs(cells.anchors[:, 0] - gcx) <= hx)
            & (np.abs(cells.anchors[:, 1] - gcy) <= hy))


def _alignment(cells: DecodedCells, gt_xyxy, gt_class: int,
               cfg: AssignConfig) -> np.ndarray:
    s = cells.scores[:, gt_class].astype(np.float64)
    overlap = iou_many(cells.boxes.astype(np.float64), np.asarray(gt_xyxy, dtype=np.float64))
    return s ** cfg.metric_alpha * overlap ** cfg.metric_beta


def _gt_geometry(gts, image_size: float):
    return [(np.asarray(b.to_xyxy(image_size), dtype=np.float64), c) for b, c in gts]


def _small_target_weights_for(gts, image_size: float, cfg: AssignConfig) -> np.ndarray:
    if not cfg.small_target_boost:
        return np.ones(len(gts), dtype=np.float32)
    return np.array([small_target_weight(b, image_size, cfg.small_target_alpha, cfg.small_target_area)
                     for b, _ in gts], dtype=np.float32)


def assign_o2m(cells: DecodedCells, gts: list[tuple[BBox, int]],
               cfg: AssignConfig = AssignConfig()) -> Assignment:
    """Top-k cells per target; a contested cell keeps its best target."""
    if not gts:
        return Assignment([], np.zeros(0, dtype=np.float32), np.zeros(0))
    gt_w = _small_target_weights_for(gts, cells.input_size, cfg)
    claims: dict[int, tuple[int, float]] = {}
    for gi, (gxyxy, gcls) in enumerate(_gt_geometry(gts, cells.input_size)):
        cand = np.nonzero(_candidate_mask(cells, gxyxy, cfg.center_radius))[0]
        if cand.size == 0:
            continue
        t = _alignment(cells, gxyxy, gcls, cfg)
        ranked = sorted(cand.tolist(), key=lambda ci: (-t[ci], ci))[:cfg.topk]
        for ci in ranked:
            prev = claims.get(ci)
            if prev is None or t[ci] > prev[1]:
                claims[ci] = (gi, t[ci])
    items = sorted(claims.items())
    pairs = [(ci, gi) for ci, (gi, _) in items]
    scores = np.array([tv for _, (_, tv) in items], dtype=np.float64)
    weights = np.array([gt_w[gi] for _, gi in pairs], dtype=np.float32)
    return Assignment(pairs, weights, scores)


def assign_o2o(cells: DecodedCells, gts: list[tuple[BBox, int]],
               cfg: AssignConfig = AssignConfig()) -> Assignment:
    """Injective top-1 matching, targets processed in index order.

    A target whose candidate region is exhausted falls back to the best
    remaining cell anywhere, so the pairing stays injective and total as
    long as cells remain.
    """
    if not gts:
        return Assignment([], np.zeros(0, dtype=np.float32), np.zeros(0))
    gt_w = _small_target_weights_for(gts, cells.input_size, cfg)
    taken: set[int] = set()
    pairs: list[tuple[int, int]] = []
    pair_scores: list[float] = []
    for gi, (gxyxy, gcls) in enumerate(_gt_geometry(gts, cells.input_size)):
        t = _alignment(cells, gxyxy, gcls, cfg)
        cand = np.nonzero(_candidate_mask(cells, gxyxy, cfg.center_radius))[0]
        free = [ci for ci in cand.tolist() if ci not in taken]
        if not free:
            free = [ci for ci in range(len(cells.boxes)) if ci not in taken]
            if not free:
                continue
        best = min(free, key=lambda ci: (-t[ci], ci))
        taken.add(best)
        pairs.append((best, gi))
        pair_scores.append(float(t[best]))
    weights = np.array([gt_w[gi] for _, gi in pairs], dtype=np.float32)
    return Assignment(pairs, weights, np.asarray(pair_scores))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _candidates(cells: DecodedCells, conf_thresh: float):
    """(cell, class, score) above threshold, descending score, stable ties."""
    m, nc = cells.scores.shape
    flat = cells.scores.ravel()
    keep = np.nonzero(flat > conf_thresh)[0]
    order = keep[np.argsort(-flat[keep], kind="stable")]
    return order // nc, order % nc, flat[order]


def _to_detection(cells: DecodedCells, ci: int, cls: int, score: float) -> Detection:
    x1, y1, x2, y2 = cells.boxes[ci] / cells.input_size
    bbox = BBox.from_xyxy(float(x1), float(y1), float(x2), float(y2)).clamped()
    return Detection(bbox=bbox, class_id=int(cls), score=float(score))


def decode_nms_free(preds: RawPredictions, conf_thresh: float,
                    image_index: int = 0) -> list[Detection]:
    """Emit every above-threshold cell, no suppression pass.

    Meant for the one-to-one branch, where training already guarantees one
    cell per target.  Output is ordered by descending score.
    """
    cells = decode_cells(preds, image_index)
    ci, cls, sc = _candidates(cells, conf_thresh)
    return [_to_detection(cells, c, k, s) for c, k, s in zip(ci, cls, sc)]


def nms_keep(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
             iou_thresh: float) -> list[int]:
    """Greedy class-wise suppression; returns kept indices in score order."""
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    alive = np.ones(len(scores), dtype=bool)
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        same = alive & (classes == classes[idx])
        same[idx] = False
        if same.any():
            cand = np.nonzero(same)[0]
            overlap = iou_many(boxes[cand], boxes[idx])
            alive[cand[overlap > iou_thresh]] = False
    return kept


def decode_with_nms(preds: RawPredictions, conf_thresh: float,
                    iou_thresh: float, image_index: int = 0) -> list[Detection]:
    """Above-threshold cells followed by greedy class-wise NMS."""
    cells = decode_cells(preds, image_index)
    ci, cls, sc = _candidates(cells, conf_thresh)
    if len(ci) == 0:
        return []
    boxes = cells.boxes[ci].astype(np.float64)
    kept = nms_keep(boxes, sc, cls, iou_thresh)
    return [_to_detection(cells, ci[i], cls[i], sc[i]) for i in kept]
