"""Training objectives: distance-weighted IoU box loss with non-monotonic
focusing, bin-distribution regression (ablation baseline), classification,
epoch-scheduled component weights, and the distillation objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from microdet import tensor as T
from microdet.assign import Assignment, BBox
from microdet.model import RawPredictions, decode_assigned_boxes, level_anchors
from microdet.tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_kd: float = 0.5
    temperature: float = 3.0
    wiou_alpha: float = 1.9
    wiou_delta: float = 3.0
    wiou_momentum: float = 0.99
    dfl_weight: float = 0.5
    cls_pos_weight: float = 1.0
    box_weight: tuple[float, float] = (1.0, 2.0)   # start/end of schedule
    cls_weight: tuple[float, float] = (1.0, 0.5)


@dataclass(frozen=True)
class ProgSchedule:
    """Linear per-component loss re-weighting across the training run."""

    total_epochs: int
    box: tuple[float, float] = (1.0, 2.0)
    cls: tuple[float, float] = (1.0, 0.5)

    def weight(self, component: str, epoch: int) -> float:
        w_initial, w_final = getattr(self, component)
        if self.total_epochs <= 1:
            return w_initial
        e = min(max(epoch, 0), self.total_epochs - 1)
        frac = e / (self.total_epochs - 1)
        return w_initial + (w_final - w_initial) * frac


@dataclass
class LossBreakdown:
    box_loss: float
    cls_loss: float
    kd_loss: float
    total: float
    weights: dict[str, float] = field(default_factory=dict)
    mean_liou: float = 0.0
    num_assigned: int = 0
    tensor: Tensor | None = None  # scalar graph node driving backward


class WIoURunningMean:
    """Momentum-tracked mean of the plain IoU loss, owned by the trainer.

    The tracked value is detached from gradients; it only shapes the
    focusing factor.
    """

    def __init__(self, momentum: float = 0.99, init: float = 1.0):
        self.momentum = momentum
        self.value = init

    def update(self, batch_mean_liou: float) -> None:
        self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean_liou


# ---------------------------------------------------------------------------
# box losses
# ---------------------------------------------------------------------------


def _cols(t: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    m = t.shape[0]
    return tuple(T.narrow(t, 1, i, 1).reshape(m) for i in range(4))


def wiou_v3(pred_xyxy: Tensor, gt_xyxy: np.ndarray, running_mean_liou: float,
            alpha: float = 1.9, delta: float = 3.0) -> Tensor:
    """Vector of box losses for [M,4] predictions against constant targets.

    loss_i = r_i * exp(d_i^2 / D_i^2) * (1 - IoU_i), with the enclosing-box
    diagonal D and the outlierness-based factor r both detached.
    """
    if running_mean_liou <= 0.0:
        raise ValueError("running mean of the IoU loss must be positive")
    g = np.asarray(gt_xyxy, dtype=np.float64)
    if np.any((g[:, 2] - g[:, 0]) <= 0) or np.any((g[:, 3] - g[:, 1]) <= 0):
        raise ValueError("degenerate ground-truth box (zero area)")
    px1, py1, px2, py2 = _cols(pred_xyxy)
    gx1, gy1, gx2, gy2 = (Tensor(g[:, i]) for i in range(4))

    iw = T.minimum(px2, gx2) - T.maximum(px1, gx1)
    ih = T.minimum(py2, gy2) - T.maximum(py1, gy1)
    inter = iw.relu() * ih.relu()
    area_p = (px2 - px1).relu() * (py2 - py1).relu()
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_p + Tensor(area_g) - inter
    liou = 1.0 - inter / union

    # distance attention; enclosing-box dims detached from the gradient
    pd = pred_xyxy.data
    enc_w = np.maximum(pd[:, 2], g[:, 2]) - np.minimum(pd[:, 0], g[:, 0])
    enc_h = np.maximum(pd[:, 3], g[:, 3]) - np.minimum(pd[:, 1], g[:, 1])
    denom = Tensor(enc_w ** 2 + enc_h ** 2)
    pcx = (px1 + px2) * 0.5
    pcy = (py1 + py2) * 0.5
    gcx = Tensor((g[:, 0] + g[:, 2]) * 0.5)
    gcy = Tensor((g[:, 1] + g[:, 3]) * 0.5)
    dist2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    r_wiou = (dist2 / denom).exp()

    # non-monotonic focusing from detached outlierness
    beta_o = liou.data / running_mean_liou
    r = beta_o / (delta * alpha ** (beta_o - delta))
    return Tensor(r) * r_wiou * liou


def wiou_v3_loss(pred: BBox, gt: BBox, running_mean_liou: float,
                 alpha: float = 1.9, delta: float = 3.0) -> float:
    """Scalar convenience form of :func:`wiou_v3` for a single box pair."""
    g = np.asarray([gt.to_xyxy()], dtype=np.float64)
    with T.no_grad(), T.float64_precision():
        p = Tensor(np.asarray([pred.to_xyxy()], dtype=np.float64))
        return float(wiou_v3(p, g, running_mean_liou, alpha, delta).data[0])


def dfl_loss_vec(bin_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy split across the two bins bracketing each target.

    bin_logits: [M, n+1]; targets: [M] floats in [0, n].
    """
    t = np.asarray(targets, dtype=np.float64)
    nbins = bin_logits.shape[-1]
    n = nbins - 1
    if np.any(t < 0) or np.any(t > n):
        raise ValueError(f"targets must lie in [0, {n}]")
    lo = np.minimum(np.floor(t), n - 1).astype(np.int64)
    hi = lo + 1
    w = np.zeros((len(t), nbins), dtype=np.float32)
    rows = np.arange(len(t))
    w[rows, lo] = hi - t
    w[rows, hi] = t - lo
    logp = T.log_softmax(bin_logits, axis=-1)
    return -(logp * Tensor(w)).sum(axis=-1)


def dfl_loss(bin_logits, target_distance: float) -> float:
    """Scalar form for one side's bin logits."""
    arr = bin_logits.data if isinstance(bin_logits, Tensor) else np.asarray(bin_logits)
    with T.no_grad(), T.float64_precision():
        z = Tensor(np.asarray(arr, dtype=np.float64))
        return float(dfl_loss_vec(z.reshape(1, z.shape[-1]), np.asarray([target_distance])).data[0])


# ---------------------------------------------------------------------------
# task loss
# ---------------------------------------------------------------------------


def _zero() -> Tensor:
    return Tensor(np.zeros((), dtype=np.float32))


def task_loss(preds: RawPredictions, assignments: Sequence[Assignment],
              gts_per_image: Sequence[list[tuple[BBox, int]]],
              schedule: ProgSchedule, epoch: int,
              cfg: LossConfig = LossConfig(),
              running_mean_liou: float = 1.0) -> LossBreakdown:
    """Box + classification objective over one batch.

    Box term: weighted mean of the focused IoU loss over assigned
    pairs (plus the bin-distribution term when expectation decoding is
    active).  Class term: binary cross-entropy over every cell, targets 1
    at each assigned cell's class, summed and normalised by the number of
    assigned pairs.
    """
    if len(assignments) != len(gts_per_image):
        raise ValueError("assignments and ground truths must align per image")
    n_images = preds.box[preds.levels[0]].shape[0]
    if len(assignments) != n_images:
        raise ValueError(f"{len(assignments)} assignments for batch of {n_images}")
    size = preds.input_size
    offsets = preds.level_offsets()

    # group assigned pairs by level, keeping image/cell/gt alignment
    per_level: dict[str, list[tuple[int, int, int, float]]] = {lv: [] for lv in preds.levels}
    for img, (assignment, gts) in enumerate(zip(assignments, gts_per_image)):
        for (cell, gi), wgt in zip(assignment.pairs, assignment.small_target_weights):
            for lv in reversed(preds.levels):
                if cell >= offsets[lv]:
                    per_level[lv].append((img, cell - offsets[lv], gi, float(wgt)))
                    break

    pred_boxes, gt_boxes, weights = [], [], []
    dfl_terms: list[Tensor] = []
    for lv in preds.levels:
        rows = per_level[lv]
        if not rows:
            continue
        s = preds.strides[lv]
        grid = size // s
        img_idx = np.array([r[0] for r in rows], dtype=np.int64)
        cell_idx = np.array([r[1] for r in rows], dtype=np.int64)
        anchors = level_anchors(grid, s)[cell_idx]
        gt_xyxy = np.array(
            [gts_per_image[r[0]][r[2]][0].to_xyxy(size) for r in rows], dtype=np.float64)
        box, bins = decode_assigned_boxes(preds, lv, img_idx, cell_idx)
        if bins is not None:
            # distribution targets: side distances in stride units
            nb = preds.dfl_bins + 1
            tgt = np.empty((len(rows), 4), dtype=np.float64)
            tgt[:, 0] = anchors[:, 0] - gt_xyxy[:, 0]
            tgt[:, 1] = anchors[:, 1] - gt_xyxy[:, 1]
            tgt[:, 2] = gt_xyxy[:, 2] - anchors[:, 0]
            tgt[:, 3] = gt_xyxy[:, 3] - anchors[:, 1]
            tgt = np.clip(tgt / s, 0.0, preds.dfl_bins - 1e-3)
            side_losses = dfl_loss_vec(bins.reshape(len(rows) * 4, nb), tgt.reshape(-1))
            dfl_terms.append(side_losses.reshape(len(rows), 4).mean(axis=-1))
        pred_boxes.append(box)
        gt_boxes.append(gt_xyxy)
        weights.append(np.array([r[3] for r in rows], dtype=np.float32))

    num_assigned = sum(len(a) for a in assignments)
    if pred_boxes:
        pred_cat = T.concat(pred_boxes, axis=0) if len(pred_boxes) > 1 else pred_boxes[0]
        gt_cat = np.concatenate(gt_boxes)
        w_cat = np.concatenate(weights)
        losses = wiou_v3(pred_cat, gt_cat, running_mean_liou,
                         cfg.wiou_alpha, cfg.wiou_delta)
        w_t = Tensor(w_cat)
        box_term = (losses * w_t).sum() / float(w_cat.sum())
        mean_liou = float(np.mean(1.0 - _iou_np(pred_cat.data, gt_cat)))
        if dfl_terms:
            dfl_cat = T.concat(dfl_terms, axis=0) if len(dfl_terms) > 1 else dfl_terms[0]
            box_term = box_term + cfg.dfl_weight * ((dfl_cat * w_t).sum() / float(w_cat.sum()))
    else:
        box_term = _zero()
        mean_liou = 0.0

    # classification over every cell of every level; assigned cells may
    # carry a positive-class weight to survive the extreme cell imbalance
    cls_targets = _cls_targets(preds, assignments, gts_per_image, offsets)
    cls_sum = _zero()
    pw = cfg.cls_pos_weight
    for lv in preds.levels:
        bce = T.bce_with_logits(preds.cls[lv], cls_targets[lv])
        if pw != 1.0:
            bce = bce * Tensor(1.0 + (pw - 1.0) * cls_targets[lv])
        cls_sum = cls_sum + bce.sum()
    cls_term = cls_sum / float(max(1, num_assigned))

    w_box = schedule.weight("box", epoch)
    w_cls = schedule.weight("cls", epoch)
    total = w_box * box_term + w_cls * cls_term
    return LossBreakdown(
        box_loss=float(box_term.data), cls_loss=float(cls_term.data),
        kd_loss=0.0, total=float(total.data),
        weights={"box": w_box, "cls": w_cls},
        mean_liou=mean_liou, num_assigned=num_assigned, tensor=total)


def _iou_np(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    iw = np.minimum(pred[:, 2], gt[:, 2]) - np.maximum(pred[:, 0], gt[:, 0])
    ih = np.minimum(pred[:, 3], gt[:, 3]) - np.maximum(pred[:, 1], gt[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = ((pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
             + (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1]) - inter)
    return np.where(union > 0, inter / union, 0.0)


def _cls_targets(preds, assignments, gts_per_image, offsets) -> dict[str, np.ndarray]:
    out = {}
    for lv in preds.levels:
        out[lv] = np.zeros(preds.cls[lv].shape, dtype=np.float32)
    for img, (assignment, gts) in enumerate(zip(assignments, gts_per_image)):
        for cell, gi in assignment.pairs:
            for lv in reversed(preds.levels):
                if cell >= offsets[lv]:
                    local = cell - offsets[lv]
                    grid = preds.input_size // preds.strides[lv]
                    out[lv][img, gts[gi][1], local // grid, local % grid] = 1.0
                    break
    return out


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def kd_loss(student_logits: dict[str, Tensor], teacher_logits: dict[str, Tensor],
            temperature: float) -> Tensor:
    """Temperature-scaled KL between per-cell class distributions.

    For each shared pyramid level, both logit maps get an implicit
    background logit of zero appended (so the single-class case is a
    proper two-way distribution), are softened by ``temperature`` and
    compared student-first: KL(student || teacher).  Per-level terms are
    T^2 times the mean over cells, summed over levels.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if set(student_logits) != set(teacher_logits):
        raise ValueError(f"level mismatch: {sorted(student_logits)} vs {sorted(teacher_logits)}")
    total = _zero()
    for lv in sorted(student_logits):
        zs, zt = student_logits[lv], teacher_logits[lv]
        if zs.shape != zt.shape:
            raise ValueError(f"{lv}: student {zs.shape} vs teacher {zt.shape}")
        n, c, h, w = zs.shape
        zero_ch = Tensor(np.zeros((n, 1, h, w), dtype=np.float32))
        ls = T.concat([zs * (1.0 / temperature), zero_ch], axis=1)
        lt = T.concat([zt * (1.0 / temperature), zero_ch], axis=1)
        ps = T.softmax(ls, axis=1)
        kl = (ps * (T.log_softmax(ls, axis=1) - T.log_softmax(lt, axis=1))).sum(axis=1)
        total = total + (temperature ** 2) * kl.mean()
    return total


def total_loss(task, kd, lambda_kd: float):
    """(1 - lambda) * task + lambda * kd; works on floats and tensors."""
    if not 0.0 <= lambda_kd <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lambda_kd}")
    if isinstance(task, LossBreakdown):
        task = task.total
    return (1.0 - lambda_kd) * task + lambda_kd * kd
