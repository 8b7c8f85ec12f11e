"""Independent straight-line reference implementations used as test oracles.

Everything here is written as plain float64 numpy/python with explicit
loops, deliberately sharing no code with the package under test.  Expected
values asserted in the test suite are computed by these functions.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    ``f`` is called with the (mutated in place, then restored) array; the
    accumulation is float64.
    """
    g = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def grads_close(analytic: np.ndarray, numeric: np.ndarray,
                rtol: float = 1e-3, atol: float = 1e-5) -> bool:
    """Relative tolerance with an absolute fallback near zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n)
    bound = np.maximum(atol, rtol * np.maximum(np.abs(a), np.abs(n)))
    return bool(np.all(err <= bound))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_reference(x, w, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Nested-loop 2-d cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, oh, ow), dtype=np.float64)
    for b in range(n):
        for f in range(k):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                    if bias is not None:
                        acc += float(bias[f])
                    out[b, f, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# attention (channel branch + spatial branch, straight line)
# ---------------------------------------------------------------------------


def dual_attention_reference(feat, w_c, spatial_kernel) -> np.ndarray:
    """Channel gate times spatial gate applied to the feature map, float64.

    feat: [N,C,H,W]; w_c: [C,C]; spatial_kernel: [1,2,7,7].
    """
    f = np.asarray(feat, dtype=np.float64)
    wc = np.asarray(w_c, dtype=np.float64)
    sk = np.asarray(spatial_kernel, dtype=np.float64)
    n, c, h, w = f.shape
    out = np.zeros_like(f)
    for b in range(n):
        gap = f[b].mean(axis=(1, 2))                      # [C]
        chan = 1.0 / (1.0 + np.exp(-(wc @ gap)))          # [C]
        pooled = np.stack([f[b].mean(axis=0), f[b].max(axis=0)])  # [2,H,W]
        sp = conv2d_reference(pooled[None], sk, stride=1, pad=3)[0, 0]
        sp = 1.0 / (1.0 + np.exp(-sp))                    # [H,W]
        for ch in range(c):
            out[b, ch] = f[b, ch] * chan[ch] * sp
    return out


# ---------------------------------------------------------------------------
# regression-by-expectation over distance bins
# ---------------------------------------------------------------------------


def dfl_expectation_reference(bin_logits) -> np.ndarray:
    """Expectation of the softmax distribution over integer bins, float64."""
    z = np.asarray(bin_logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    idx = np.arange(z.shape[-1], dtype=np.float64)
    return (p * idx).sum(axis=-1)


def dfl_loss_reference(bin_logits, target: float) -> float:
    """Cross-entropy split across the two bins bracketing ``target``."""
    z = np.asarray(bin_logits, dtype=np.float64)
    n = z.size - 1
    lo = min(int(math.floor(target)), n - 1)
    hi = lo + 1
    w_lo = hi - target
    w_hi = target - lo
    logp = z - z.max()
    logp = logp - math.log(np.exp(logp).sum())
    return float(-(w_lo * logp[lo] + w_hi * logp[hi]))


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------


def iou_xyxy(a, b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0.0 else 0.0


def wiou_v3_reference(pred_xyxy, gt_xyxy, running_mean_liou: float,
                      alpha: float = 1.9, delta: float = 3.0) -> float:
    """Distance-weighted IoU loss with the non-monotonic focusing factor."""
    px1, py1, px2, py2 = (float(v) for v in pred_xyxy)
    gx1, gy1, gx2, gy2 = (float(v) for v in gt_xyxy)
    liou = 1.0 - iou_xyxy(pred_xyxy, gt_xyxy)
    pcx, pcy = (px1 + px2) / 2.0, (py1 + py2) / 2.0
    gcx, gcy = (gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0
    enc_w = max(px2, gx2) - min(px1, gx1)
    enc_h = max(py2, gy2) - min(py1, gy1)
    r_wiou = math.exp(((pcx - gcx) ** 2 + (pcy - gcy) ** 2) / (enc_w ** 2 + enc_h ** 2))
    beta_o = liou / running_mean_liou
    r = beta_o / (delta * alpha ** (beta_o - delta))
    return r * r_wiou * liou


def kd_loss_reference(student_levels, teacher_levels, temperature: float) -> float:
    """Temperature-scaled KL between per-cell class distributions, float64.

    Each level is a [N, C, H, W] logit array; an implicit background logit
    of zero is appended so the per-cell distribution has C+1 entries.  The
    per-level term is T^2 times the mean KL over cells; levels are summed.
    """
    total = 0.0
    for zs, zt in zip(student_levels, teacher_levels):
        zs = np.asarray(zs, dtype=np.float64)
        zt = np.asarray(zt, dtype=np.float64)
        n, c, h, w = zs.shape
        acc = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    ls = np.append(zs[b, :, i, j] / temperature, 0.0)
                    lt = np.append(zt[b, :, i, j] / temperature, 0.0)
                    ps = np.exp(ls - ls.max())
                    ps /= ps.sum()
                    pt = np.exp(lt - lt.max())
                    pt /= pt.sum()
                    acc += float((ps * (np.log(ps) - np.log(pt))).sum())
        total += temperature ** 2 * acc / (n * h * w)
    return total


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


def alignment_scores(cand_boxes, cand_scores, gt_xyxy, gt_class: int,
                     alpha: float, beta: float) -> np.ndarray:
    """score^alpha * IoU^beta for every candidate cell, float64."""
    t = np.zeros(len(cand_boxes), dtype=np.float64)
    for i, box in enumerate(cand_boxes):
        s = float(cand_scores[i, gt_class])
        t[i] = (s ** alpha) * (iou_xyxy(box, gt_xyxy) ** beta)
    return t


def o2m_bruteforce(cells_xyxy, cells_scores, anchor_xy, strides, gts,
                   k: int, alpha: float, beta: float, center_radius: float):
    """Top-k-per-target assignment with conflict resolution, loop form.

    Returns a sorted list of (cell, gt) pairs.  ``gts`` is a list of
    (xyxy, class).  Candidate cells are those whose anchor point falls in
    the target's centre region.  A cell claimed by several targets keeps
    the pair with the higher alignment score (ties: lower target index).
    """
    claims = {}
    for gi, (gxyxy, gcls) in enumerate(gts):
        gx1, gy1, gx2, gy2 = gxyxy
        gcx, gcy = (gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0
        gw, gh = gx2 - gx1, gy2 - gy1
        cand = []
        for ci in range(len(cells_xyxy)):
            s = strides[ci]
            hx = max(gw, center_radius * s) / 2.0
            hy = max(gh, center_radius * s) / 2.0
            if abs(anchor_xy[ci][0] - gcx) <= hx and abs(anchor_xy[ci][1] - gcy) <= hy:
                cand.append(ci)
        t = alignment_scores(cells_xyxy, cells_scores, gxyxy, gcls, alpha, beta)
        ranked = sorted(cand, key=lambda ci: (-t[ci], ci))[:k]
        for ci in ranked:
            prev = claims.get(ci)
            if prev is None or t[ci] > prev[1]:
                claims[ci] = (gi, t[ci])
    return sorted((ci, gi) for ci, (gi, _) in claims.items())


def o2o_bruteforce(cells_xyxy, cells_scores, anchor_xy, strides, gts,
                   alpha: float, beta: float, center_radius: float):
    """Greedy injective top-1 matching in target order, loop form."""
    taken = set()
    pairs = []
    for gi, (gxyxy, gcls) in enumerate(gts):
        gx1, gy1, gx2, gy2 = gxyxy
        gcx, gcy = (gx1 + gx2) / 2.0, (gy1 + gy2) / 2.0
        gw, gh = gx2 - gx1, gy2 - gy1
        t = alignment_scores(cells_xyxy, cells_scores, gxyxy, gcls, alpha, beta)
        cand = []
        for ci in range(len(cells_xyxy)):
            s = strides[ci]
            hx = max(gw, center_radius * s) / 2.0
            hy = max(gh, center_radius * s) / 2.0
            if abs(anchor_xy[ci][0] - gcx) <= hx and abs(anchor_xy[ci][1] - gcy) <= hy:
                cand.append(ci)
        free = [ci for ci in cand if ci not in taken]
        if not free:
            free = [ci for ci in range(len(cells_xyxy)) if ci not in taken]
        if not free:
            continue
        best = min(free, key=lambda ci: (-t[ci], ci))
        taken.add(best)
        pairs.append((best, gi))
    return pairs


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------


def nms_exhaustive(boxes_xyxy, scores, classes, iou_thresh: float):
    """O(n^2) greedy suppression; returns kept indices in score order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if classes[i] == classes[j] and iou_xyxy(boxes_xyxy[i], boxes_xyxy[j]) > iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------


def match_image_reference(dets, gts, iou_thresh: float):
    """Greedy score-ordered matching within one image.

    dets: list of (xyxy, cls, score); gts: list of (xyxy, cls).
    Returns (tp_flags ordered as dets sorted by score desc, matched gt set).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    matched = set()
    flags = []
    for i in order:
        box, cls, _ = dets[i]
        best_iou, best_gt = 0.0, -1
        for gi, (gbox, gcls) in enumerate(gts):
            if gi in matched or gcls != cls:
                continue
            v = iou_xyxy(box, gbox)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0 and best_iou >= iou_thresh:
            matched.add(best_gt)
            flags.append((dets[i][2], i, True))
        else:
            flags.append((dets[i][2], i, False))
    return flags, matched


def average_precision_reference(dets_per_image, gts_per_image, iou_thresh: float,
                                n_points: int = 101) -> float:
    """Interpolated AP over pooled detections, straight-line float64."""
    records = []
    n_gt = 0
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        n_gt += len(gts)
        flags, _ = match_image_reference(dets, gts, iou_thresh)
        for score, i, tp in flags:
            records.append((-score, img, i, tp))
    if n_gt == 0:
        return 0.0
    records.sort()
    tp_cum, fp_cum = 0, 0
    precisions, recalls = [], []
    for _, _, _, tp in records:
        if tp:
            tp_cum += 1
        else:
            fp_cum += 1
        precisions.append(tp_cum / (tp_cum + fp_cum))
        recalls.append(tp_cum / n_gt)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, n_points):
        p_at = 0.0
        for p, rc in zip(precisions, recalls):
            if rc >= r and p > p_at:
                p_at = p
        ap += p_at / n_points
    return ap
