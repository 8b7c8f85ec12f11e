"""Deterministic synthetic ground-to-air scenes with YOLO-format labels.

Each scene is a sky-gradient background with small dark multi-rotor
silhouettes (the labelled targets), unlabelled clutter (bird chevrons,
cloud blobs, building edges) and a global atmospheric condition.  Scene
content is a pure function of (seed, config): the background, targets,
clutter and condition draw from independently spawned random streams, so
e.g. changing the target count leaves the background bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from microdet.assign import BBox
from microdet.tensor import Tensor

CONDITIONS = ("clear", "backlight", "fog", "dusk")

UAV_CLASS = 0


class PlacementError(RuntimeError):
    """Requested target count does not fit without overlaps."""


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 96
    min_targets: int = 1
    max_targets: int = 3
    size_min: float = 4.0
    size_max: float = 24.0
    small_bias: float = 0.7      # probability of drawing below the cutoff
    small_cutoff: float = 18.0
    max_birds: int = 3
    max_clouds: int = 4
    max_edges: int = 2
    condition_weights: tuple[float, float, float, float] = (0.4, 0.2, 0.2, 0.2)

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if not 0 < self.size_min <= self.small_cutoff <= self.size_max:
            raise ValueError("need 0 < size_min <= small_cutoff <= size_max")
        if self.min_targets < 0 or self.max_targets < self.min_targets:
            raise ValueError("invalid target count range")
        if len(self.condition_weights) != len(CONDITIONS):
            raise ValueError(f"need {len(CONDITIONS)} condition weights")


@dataclass
class SceneMeta:
    seed: int
    condition: str
    target_sizes_px: tuple[float, ...]
    distractor_count: int


@dataclass
class Scene:
    image: Tensor                      # [3, H, W], values in [0, 1]
    gts: list[tuple[BBox, int]]
    meta: SceneMeta


# ---------------------------------------------------------------------------
# primitive rendering (vectorized signed-distance splats)
# ---------------------------------------------------------------------------


def _patch_coords(size: int, cx: float, cy: float, half: float):
    x0 = max(0, int(math.floor(cx - half)))
    x1 = min(size, int(math.ceil(cx + half)) + 1)
    y0 = max(0, int(math.floor(cy - half)))
    y1 = min(size, int(math.ceil(cy + half)) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return x0, y0, xs + 0.5 - cx, ys + 0.5 - cy


def _segment_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / max(denom, 1e-9), 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _uav_alpha(size: int, cx: float, cy: float, s: float, angle: float):
    """Anti-aliased alpha mask of a multi-rotor silhouette (cross + discs)."""
    half = s / 2 + 2.0
    x0, y0, px, py = _patch_coords(size, cx, cy, half)
    ca, sa = math.cos(-angle), math.sin(-angle)
    rx = px * ca - py * sa
    ry = px * sa + py * ca
    arm_len = 0.40 * s
    arm_w = max(0.05 * s, 0.4)
    ux, uy = math.sqrt(0.5), math.sqrt(0.5)
    sdf = np.hypot(rx, ry) - 0.17 * s  # body disc
    for dx, dy in ((ux, uy), (ux, -uy)):
        arm = _segment_dist(rx, ry, -arm_len * dx, -arm_len * dy,
                            arm_len * dx, arm_len * dy) - arm_w
        sdf = np.minimum(sdf, arm)
    rotor_r = max(0.13 * s, 0.45)
    for dx, dy in ((ux, uy), (-ux, -uy), (ux, -uy), (-ux, uy)):
        rotor = np.hypot(rx - arm_len * dx, ry - arm_len * dy) - rotor_r
        sdf = np.minimum(sdf, rotor)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)
    return x0, y0, alpha.astype(np.float32)


def _composite(img: np.ndarray, x0: int, y0: int, alpha: np.ndarray,
               color: np.ndarray, opacity: float = 1.0):
    h, w = alpha.shape
    region = img[:, y0:y0 + h, x0:x0 + w]
    a = (alpha * opacity)[None]
    region *= 1.0 - a
    region += a * color[:, None, None]


def _alpha_bbox(x0: int, y0: int, alpha: np.ndarray, thresh: float = 0.05):
    ys, xs = np.nonzero(alpha > thresh)
    return (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1.0, y0 + ys.max() + 1.0)


def _draw_bird(img, rng, size: int):
    s = float(rng.uniform(3.0, 9.0))
    cx = float(rng.uniform(s, size - s))
    cy = float(rng.uniform(s, size * 0.7))
    x0, y0, px, py = _patch_coords(size, cx, cy, s)
    spread = float(rng.uniform(0.3, 0.7))
    wing = s * 0.5
    d1 = _segment_dist(px, py, 0, 0, -wing, -wing * spread)
    d2 = _segment_dist(px, py, 0, 0, wing, -wing * spread)
    sdf = np.minimum(d1, d2) - max(0.35, s * 0.06)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0).astype(np.float32)
    shade = float(rng.uniform(0.15, 0.35))
    _composite(img, x0, y0, alpha, np.full(3, shade, dtype=np.float32),
               opacity=float(rng.uniform(0.7, 0.95)))


def _draw_cloud(img, rng, size: int):
    n_blobs = int(rng.integers(2, 5))
    cx = float(rng.uniform(0, size))
    cy = float(rng.uniform(0, size * 0.6))
    ys, xs = np.mgrid[0:size, 0:size]
    bump = np.zeros((size, size), dtype=np.float32)
    for _ in range(n_blobs):
        bx = cx + float(rng.normal(0, size * 0.06))
        by = cy + float(rng.normal(0, size * 0.025))
        sig = float(rng.uniform(size * 0.03, size * 0.1))
        amp = float(rng.uniform(0.04, 0.12))
        bump += amp * np.exp(-(((xs - bx) ** 2) + (ys - by) ** 2) / (2 * sig * sig))
    img += bump[None]


def _draw_building_edge(img, rng, size: int):
    w = int(rng.integers(size // 8, size // 3))
    x0 = int(rng.integers(0, size - w))
    top = int(rng.integers(int(size * 0.65), size - 2))
    shade = float(rng.uniform(0.1, 0.3))
    block = img[:, top:, x0:x0 + w]
    ramp = np.linspace(1.0, 0.85, block.shape[1], dtype=np.float32)[None, :, None]
    block *= 0.15
    block += shade * ramp


def _apply_condition(img: np.ndarray, condition: str, rng, size: int):
    if condition == "backlight":
        sun_x = float(rng.uniform(0.2, 0.8)) * size
        sun_y = float(rng.uniform(0.05, 0.3)) * size
        ys, xs = np.mgrid[0:size, 0:size]
        r2 = (xs - sun_x) ** 2 + (ys - sun_y) ** 2
        glow = 0.28 * np.exp(-r2 / (2 * (size * 0.35) ** 2)).astype(np.float32)
        img += glow[None]
        img -= 0.5
        img *= 1.12
        img += 0.5
        noise_sigma = 0.008
    elif condition == "fog":
        density = float(rng.uniform(0.25, 0.45))
        img *= 1.0 - density
        img += 0.78 * density
        noise_sigma = 0.012
    elif condition == "dusk":
        img *= float(rng.uniform(0.5, 0.65))
        img += np.array([0.06, 0.02, -0.02], dtype=np.float32)[:, None, None]
        noise_sigma = 0.015
    else:
        rng.uniform()  # keep stream aligned across conditions
        noise_sigma = 0.005
    img += rng.normal(0.0, noise_sigma, img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _sample_size(rng, cfg: SynthConfig) -> float:
    if rng.uniform() < cfg.small_bias:
        return float(rng.uniform(cfg.size_min, cfg.small_cutoff))
    return float(rng.uniform(cfg.small_cutoff, cfg.size_max))


def generate_scene(seed: int, cfg: SynthConfig = SynthConfig()) -> Scene:
    """Render one scene; bit-identical for identical (seed, cfg)."""
    size = cfg.image_size
    ss = np.random.SeedSequence([int(seed), 0x5CEE])
    bg_rng, tgt_rng, dis_rng, cond_rng = (np.random.default_rng(c) for c in ss.spawn(4))

    # sky gradient
    top = np.array([0.42, 0.55, 0.72], dtype=np.float32) + bg_rng.uniform(-0.08, 0.08, 3).astype(np.float32)
    horizon = np.array([0.70, 0.76, 0.82], dtype=np.float32) + bg_rng.uniform(-0.06, 0.06, 3).astype(np.float32)
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32) ** 1.4
    img = (top[:, None, None] * (1.0 - ramp)[None, :, None]
           + horizon[:, None, None] * ramp[None, :, None])
    img = np.ascontiguousarray(np.broadcast_to(img, (3, size, size)).copy())

    # unlabelled clutter
    n_birds = int(dis_rng.integers(0, cfg.max_birds + 1))
    n_clouds = int(dis_rng.integers(0, cfg.max_clouds + 1))
    n_edges = int(dis_rng.integers(0, cfg.max_edges + 1))
    for _ in range(n_clouds):
        _draw_cloud(img, dis_rng, size)
    for _ in range(n_edges):
        _draw_building_edge(img, dis_rng, size)
    for _ in range(n_birds):
        _draw_bird(img, dis_rng, size)

    # labelled targets: place up to the drawn count; fewer is acceptable as
    # long as min_targets fit, otherwise the scene is over capacity
    n_targets = int(tgt_rng.integers(cfg.min_targets, cfg.max_targets + 1))
    gts: list[tuple[BBox, int]] = []
    placed: list[tuple[float, float, float, float]] = []
    sizes: list[float] = []
    for _ in range(n_targets):
        s = _sample_size(tgt_rng, cfg)
        margin = s / 2 + 3.0
        if 2 * margin >= size:
            raise PlacementError(f"target of {s:.0f}px cannot fit in a {size}px image")
        box = None
        for attempt in range(200):
            cx = float(tgt_rng.uniform(margin, size - margin))
            cy = float(tgt_rng.uniform(margin, size - margin))
            cand = (cx - margin, cy - margin, cx + margin, cy + margin)
            if all(cand[2] < p[0] or p[2] < cand[0] or cand[3] < p[1] or p[3] < cand[1]
                   for p in placed):
                box = cand
                break
        if box is None:
            if len(placed) < cfg.min_targets:
                raise PlacementError(
                    f"could only place {len(placed)} of the required "
                    f"{cfg.min_targets} targets in a {size}px image")
            continue
        placed.append(box)
        angle = float(tgt_rng.uniform(0.0, math.pi))
        shade = float(tgt_rng.uniform(0.05, 0.22))
        opacity = float(tgt_rng.uniform(0.88, 1.0))
        x0, y0, alpha = _uav_alpha(size, cx, cy, s, angle)
        _composite(img, x0, y0, alpha, np.full(3, shade, dtype=np.float32), opacity)
        bx1, by1, bx2, by2 = _alpha_bbox(x0, y0, alpha)
        gts.append((BBox.from_xyxy(bx1, by1, bx2, by2, scale=size), UAV_CLASS))
        sizes.append(s)

    condition = str(cond_rng.choice(CONDITIONS, p=np.asarray(cfg.condition_weights)
                                    / np.sum(cfg.condition_weights)))
    _apply_condition(img, condition, cond_rng, size)

    meta = SceneMeta(seed=int(seed), condition=condition,
                     target_sizes_px=tuple(sizes),
                     distractor_count=n_birds + n_clouds + n_edges)
    return Scene(image=Tensor(img), gts=gts, meta=meta)


# ---------------------------------------------------------------------------
# YOLO label files
# ---------------------------------------------------------------------------


def write_labels(scene_or_gts, path) -> None:
    gts = scene_or_gts.gts if isinstance(scene_or_gts, Scene) else scene_or_gts
    with open(path, "w", encoding="ascii") as fh:
        for bbox, cls in gts:
            fh.write(f"{cls} {bbox.cx:.6f} {bbox.cy:.6f} {bbox.w:.6f} {bbox.h:.6f}\n")


def read_labels(path) -> list[tuple[BBox, int]]:
    out: list[tuple[BBox, int]] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                cls = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed number ({exc})") from None
            if cls < 0:
                raise ValueError(f"{path}:{lineno}: negative class id {cls}")
            for name, v in zip(("cx", "cy", "w", "h"), vals):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{path}:{lineno}: {name}={v} outside [0, 1]")
            out.append((BBox(*vals), cls))
    return out


# ---------------------------------------------------------------------------
# binary PPM (P6) images
# ---------------------------------------------------------------------------


def write_image_ppm(image, path) -> None:
    """8-bit binary PPM; accepts a Scene, Tensor or [3,H,W] float array."""
    if isinstance(image, Scene):
        image = image.image
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got shape {arr.shape}")
    _, h, w = arr.shape
    quantised = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantised.transpose(1, 2, 0).tobytes())


def read_image_ppm(path) -> np.ndarray:
    """Read a P6 file back into a [3,H,W] float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: bad magic, expected P6")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError:
        raise ValueError(f"{path}: non-numeric header fields {fields}") from None
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"{path}: truncated raster, {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0
