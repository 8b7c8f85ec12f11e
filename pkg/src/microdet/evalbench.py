"""Detection metrics and the decode-latency benchmark.

Metrics follow the interpolated-average-precision convention: per-image
greedy matching in descending score order, detections pooled across the
corpus into one precision-recall curve per IoU threshold, area under the
interpolated curve sampled at 101 (or 11) recall points.  All metric math
runs in float64.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, Sequence

import numpy as np

from microdet.assign import BBox, Detection, decode_nms_free, decode_with_nms
from microdet.model import RawPredictions
from microdet.tensor import Tensor

IOU_RANGE = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

SIZE_BUCKETS = (("recall_lt16", 0.0, 16.0),
                ("recall_16_32", 16.0, 32.0),
                ("recall_ge32", 32.0, float("inf")))


@dataclass
class EvalReport:
    precision: float
    recall: float
    ap_per_iou: dict[float, float]
    map50: float
    map5095: float
    recall_lt16: float
    recall_16_32: float
    recall_ge32: float
    num_images: int = 0
    num_gts: int = 0
    num_detections: int = 0
    pr_curve: list[tuple[float, float]] = field(default_factory=list)

    def scalar_rows(self) -> list[tuple[str, float]]:
        rows = [("precision", self.precision), ("recall", self.recall),
                ("map50", self.map50), ("map5095", self.map5095)]
        rows += [(f"ap_{t:.2f}", v) for t, v in sorted(self.ap_per_iou.items())]
        rows += [("recall_lt16", self.recall_lt16),
                 ("recall_16_32", self.recall_16_32),
                 ("recall_ge32", self.recall_ge32)]
        return rows


@dataclass
class StageStats:
    median_us: float
    p95_us: float
    reps: int


@dataclass
class BenchReport:
    stages: dict[str, StageStats]
    candidate_count: int
    reps: int


# ---------------------------------------------------------------------------
# matching and average precision
# ---------------------------------------------------------------------------


def _match_image(dets: Sequence[Detection], gts, iou_thresh: float):
    """Greedy match in descending score order; returns per-det TP flags
    (ordered like the sorted detections) and the matched gt index set."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched: set[int] = set()
    flags: list[tuple[float, int, bool]] = []
    for i in order:
        det = dets[i]
        best_iou, best_gt = 0.0, -1
        for gi, (gbox, gcls) in enumerate(gts):
            if gi in matched or gcls != det.class_id:
                continue
            from microdet.assign import iou as iou_fn
            v = iou_fn(det.bbox, gbox)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0 and best_iou >= iou_thresh:
            matched.add(best_gt)
            flags.append((det.score, i, True))
        else:
            flags.append((det.score, i, False))
    return flags, matched


def _interp_ap(tp_flags: np.ndarray, n_gt: int, n_points: int) -> tuple[float, list]:
    if n_gt == 0:
        return 0.0, []
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    precis = tp_cum / (tp_cum + fp_cum)
    recall = tp_cum / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, n_points):
        mask = recall >= r
        ap += float(precis[mask].max()) / n_points if mask.any() else 0.0
    return ap, list(zip(recall.tolist(), precis.tolist()))


def evaluate(dets_per_image: Sequence[Sequence[Detection]],
             gts_per_image: Sequence[Sequence[tuple[BBox, int]]],
             iou_thresholds: Sequence[float] = IOU_RANGE,
             image_size: float = 1.0,
             n_points: int = 101) -> EvalReport:
    """Corpus-level precision/recall/AP plus size-bucketed recall.

    ``image_size`` converts normalized ground-truth extents to pixels for
    the size buckets (geometric-mean side length).
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError(f"{len(dets_per_image)} detection lists vs "
                         f"{len(gts_per_image)} ground-truth lists")
    n_gt = sum(len(g) for g in gts_per_image)
    n_det = sum(len(d) for d in dets_per_image)

    ap_per_iou: dict[float, float] = {}
    pr_curve: list[tuple[float, float]] = []
    precision = recall = 0.0
    bucket_hits = {name: 0 for name, _, _ in SIZE_BUCKETS}
    bucket_totals = {name: 0 for name, _, _ in SIZE_BUCKETS}

    for thresh in iou_thresholds:
        records = []
        matched_sets = []
        for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
            flags, matched = _match_image(dets, gts, thresh)
            matched_sets.append(matched)
            for score, i, tp in flags:
                records.append((-score, img, i, tp))
        records.sort()
        tp_flags = np.array([tp for *_, tp in records], dtype=bool)
        ap, curve = _interp_ap(tp_flags, n_gt, n_points)
        ap_per_iou[float(thresh)] = ap
        if abs(thresh - 0.5) < 1e-9:
            pr_curve = curve
            tp_total = int(tp_flags.sum())
            precision = tp_total / len(records) if records else 0.0
            recall = tp_total / n_gt if n_gt else 0.0
            for matched, gts in zip(matched_sets, gts_per_image):
                for gi, (gbox, _) in enumerate(gts):
                    extent = (gbox.w * gbox.h) ** 0.5 * image_size
                    for name, lo, hi in SIZE_BUCKETS:
                        if lo <= extent < hi:
                            bucket_totals[name] += 1
                            bucket_hits[name] += gi in matched
                            break

    buckets = {name: (bucket_hits[name] / bucket_totals[name]
                      if bucket_totals[name] else 0.0)
               for name, _, _ in SIZE_BUCKETS}
    aps = [ap_per_iou[t] for t in ap_per_iou]
    return EvalReport(
        precision=precision, recall=recall, ap_per_iou=ap_per_iou,
        map50=ap_per_iou.get(0.5, 0.0), map5095=float(np.mean(aps)) if aps else 0.0,
        recall_lt16=buckets["recall_lt16"], recall_16_32=buckets["recall_16_32"],
        recall_ge32=buckets["recall_ge32"], num_images=len(dets_per_image),
        num_gts=n_gt, num_detections=n_det, pr_curve=pr_curve)


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


class _pinned_core:
    """Pin the process to one logical CPU where the platform allows."""

    def __enter__(self):
        self._saved = None
        if hasattr(os, "sched_getaffinity"):
            try:
                self._saved = os.sched_getaffinity(0)
                os.sched_setaffinity(0, {min(self._saved)})
            except OSError:
                self._saved = None
        return self

    def __exit__(self, *exc):
        if self._saved is not None:
            try:
                os.sched_setaffinity(0, self._saved)
            except OSError:
                pass
        return False


def _time_stage(fn: Callable[[], object], reps: int, warmup: int = 5) -> StageStats:
    for _ in range(warmup):
        fn()
    times_us = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times_us.append((time.perf_counter_ns() - t0) / 1000.0)
    times_us.sort()
    p95 = times_us[min(len(times_us) - 1, int(round(0.95 * (len(times_us) - 1))))]
    return StageStats(median_us=median(times_us), p95_us=p95, reps=reps)


def bench_decode(preds: RawPredictions, conf_thresh: float, iou_thresh: float,
                 reps: int = 50, forward_fn: Callable[[], object] | None = None
                 ) -> BenchReport:
    """Time the suppression-free and NMS decode paths on identical inputs."""
    if reps < 30:
        raise ValueError(f"need at least 30 repetitions, got {reps}")
    from microdet.assign import decode_cells
    cells = decode_cells(preds)
    candidates = int((cells.scores > conf_thresh).sum())
    stages: dict[str, StageStats] = {}
    with _pinned_core():
        if forward_fn is not None:
            stages["forward"] = _time_stage(forward_fn, reps)
        stages["decode_nms_free"] = _time_stage(
            lambda: decode_nms_free(preds, conf_thresh), reps)
        stages["decode_with_nms"] = _time_stage(
            lambda: decode_with_nms(preds, conf_thresh, iou_thresh), reps)
    return BenchReport(stages=stages, candidate_count=candidates, reps=reps)


def make_bench_predictions(input_size: int = 256,
                           levels: tuple[str, ...] = ("P2", "P3", "P4"),
                           num_classes: int = 1, n_hot: int = 1000,
                           seed: int = 0) -> RawPredictions:
    """Synthetic raw predictions with exactly ``n_hot`` above-threshold cells."""
    from microdet.model import LEVEL_STRIDES
    rng = np.random.default_rng(seed)
    strides = {lv: LEVEL_STRIDES[lv] for lv in levels}
    total = sum((input_size // s) ** 2 for s in strides.values())
    if n_hot > total * num_classes:
        raise ValueError(f"cannot place {n_hot} candidates in {total} cells")
    hot = rng.choice(total * num_classes, size=n_hot, replace=False)
    flat_cls = np.full(total * num_classes, -10.0, dtype=np.float32)
    flat_cls[hot] = rng.uniform(1.0, 6.0, n_hot).astype(np.float32)
    box, cls = {}, {}
    offset = 0
    for lv in levels:
        g = input_size // strides[lv]
        block = flat_cls[offset * num_classes:(offset + g * g) * num_classes]
        cls[lv] = Tensor(block.reshape(g * g, num_classes).T.reshape(1, num_classes, g, g))
        box[lv] = Tensor(rng.standard_normal((1, 4, g, g)).astype(np.float32))
        offset += g * g
    return RawPredictions(levels=levels, box=box, cls=cls, strides=strides,
                          num_classes=num_classes, input_size=input_size)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def emit_report(report, path, fmt: str = "csv") -> None:
    """Write an EvalReport or BenchReport as CSV, or an EvalReport as SVG."""
    if fmt == "csv":
        _emit_csv(report, path)
    elif fmt == "svg":
        _emit_svg(report, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _emit_csv(report, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        if isinstance(report, BenchReport):
            fh.write("stage,median_us,p95_us,reps\n")
            for name, st in report.stages.items():
                fh.write(f"{name},{st.median_us:.3f},{st.p95_us:.3f},{st.reps}\n")
            return
        fh.write("metric,value\n")
        if report is None:
            return
        for name, value in report.scalar_rows():
            fh.write(f"{name},{value:.6f}\n")


def _emit_svg(report: EvalReport, path) -> None:
    w, h, pad = 420, 300, 40
    px = lambda r: pad + r * (w - 2 * pad)
    py = lambda p: h - pad - p * (h - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w // 2}" y="{h - 8}" font-size="11">recall</text>',
             f'<text x="8" y="{h // 2}" font-size="11" transform="rotate(-90 12 {h // 2})">precision</text>']
    curve = report.pr_curve if report is not None else []
    if curve:
        pts = " ".join(f"{px(r):.1f},{py(p):.1f}" for r, p in curve)
        if len(curve) == 1:
            r, p = curve[0]
            pts = f"{px(r):.1f},{py(p):.1f} {px(r):.1f},{py(p):.1f}"
        parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
    if report is not None:
        bars = [("lt 16", report.recall_lt16), ("16-32", report.recall_16_32),
                ("ge 32", report.recall_ge32)]
        bw = 24
        for i, (label, val) in enumerate(bars):
            x = w - pad - (len(bars) - i) * (bw + 8)
            bh = val * 80
            parts.append(f'<rect x="{x}" y="{pad + 80 - bh:.1f}" width="{bw}" '
                         f'height="{bh:.1f}" fill="darkorange"/>')
            parts.append(f'<text x="{x}" y="{pad + 94}" font-size="8">{label}</text>')
        parts.append(f'<text x="{pad + 4}" y="{pad - 6}" font-size="11">'
                     f'AP@0.5={report.map50:.3f}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(parts) + "\n")
