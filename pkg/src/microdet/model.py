"""The detector: CSP-style backbone, upsample-fusion neck with a stride-4
branch, and anchor-free regression/classification heads per pyramid level.

Two head branches can coexist: the many-to-one training branch and the
one-to-one branch that enables suppression-free decoding.  Box regression
is either direct (softplus distances, the default) or expectation-decoded
over discrete distance bins (kept as an ablation baseline).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from microdet import tensor as T
from microdet.blocks import C3, Conv2d, ConvBNAct, DualAttention, Module, SPPLite
from microdet.tensor import Tensor

LEVEL_STRIDES = {"P2": 4, "P3": 8, "P4": 16}
LEVEL_ORDER = ("P2", "P3", "P4")

# prior probability ~1% keeps early background loss small
CLS_BIAS_INIT = -4.6


def feature_response_size(target_px: float, level: str) -> float:
    """Feature-map footprint (in cells) of a target of ``target_px`` pixels."""
    if target_px <= 0:
        raise ValueError(f"target size must be positive, got {target_px}")
    if level not in LEVEL_STRIDES:
        raise ValueError(f"unknown level {level!r}")
    return target_px / LEVEL_STRIDES[level]


def dfl_expectation(bin_logits: Tensor) -> Tensor:
    """Decode per-side distance as the expectation of a bin distribution.

    The last axis holds n+1 logits for integer bins 0..n; the result drops
    that axis.
    """
    nbins = bin_logits.shape[-1]
    if nbins < 2:
        raise ValueError(f"need at least 2 bins, got last axis {nbins}")
    p = T.softmax(bin_logits, axis=-1)
    idx = Tensor(np.arange(nbins, dtype=np.float32))
    idx = T.expand(idx.reshape(*([1] * (p.ndim - 1)), nbins), p.shape)
    return (p * idx).sum(axis=-1)


def level_anchors(grid: int, stride: int) -> np.ndarray:
    """[grid*grid, 2] cell-center coordinates in pixels, row major."""
    coords = (np.arange(grid, dtype=np.float32) + 0.5) * stride
    ay, ax = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([ax.ravel(), ay.ravel()], axis=1)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 96
    width_multiple: float = 0.25
    depth_multiple: float = 0.34
    num_classes: int = 1
    levels: tuple[str, ...] = ("P2", "P3", "P4")
    use_attention: bool = True
    use_dfl: bool = False
    dfl_bins: int = 8
    o2o_head: bool = True

    def __post_init__(self):
        if self.input_size % 16 != 0:
            raise ValueError(f"input_size {self.input_size} not divisible by 16")
        if not self.levels:
            raise ValueError("levels must be nonempty")
        bad = [lv for lv in self.levels if lv not in LEVEL_STRIDES]
        if bad:
            raise ValueError(f"unknown levels {bad}")
        canon = tuple(lv for lv in LEVEL_ORDER if lv in self.levels)
        object.__setattr__(self, "levels", canon)
        if self.dfl_bins < 1:
            raise ValueError(f"dfl_bins must be >= 1, got {self.dfl_bins}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def box_channels(self) -> int:
        return 4 * (self.dfl_bins + 1) if self.use_dfl else 4


@dataclass
class RawPredictions:
    """Per-level raw head outputs for one branch.

    box[L]: [N, 4, H, W] side distances in stride units (or bin logits,
    [N, 4*(n+1), H, W], when expectation decoding is active);
    cls[L]: [N, num_classes, H, W] logits.  Grid size at level L is
    input_size / stride(L).
    """

    levels: tuple[str, ...]
    box: dict[str, Tensor]
    cls: dict[str, Tensor]
    strides: dict[str, int] = field(default_factory=dict)
    num_classes: int = 1
    use_dfl: bool = False
    dfl_bins: int = 8
    input_size: int = 0

    def grid_cells(self, level: str) -> int:
        g = self.input_size // self.strides[level]
        return g * g

    def total_cells(self) -> int:
        return sum(self.grid_cells(lv) for lv in self.levels)

    def level_offsets(self) -> dict[str, int]:
        out, off = {}, 0
        for lv in self.levels:
            out[lv] = off
            off += self.grid_cells(lv)
        return out


def decode_assigned_boxes(preds: RawPredictions, level: str,
                          img_idx: np.ndarray, cell_idx: np.ndarray
                          ) -> tuple[Tensor, Tensor | None]:
    """Differentiable pixel-space boxes for selected cells of one level.

    Returns ([M,4] xyxy boxes, and the [M,4,n+1] bin logits when
    expectation decoding is active, else None).  This is the regression
    path whose recorded graph must contain no softmax in the default
    (direct-regression) configuration.
    """
    s = preds.strides[level]
    grid = preds.input_size // s
    anchors = level_anchors(grid, s)[np.asarray(cell_idx, dtype=np.int64)]
    raw = T.gather_cells(preds.box[level], img_idx, cell_idx)
    m = raw.shape[0]
    bins = None
    if preds.use_dfl:
        nb = preds.dfl_bins + 1
        bins = raw.reshape(m, 4, nb)
        dist = dfl_expectation(bins)
    else:
        dist = raw.softplus()
    dist = dist * float(s)
    sides = [T.narrow(dist, 1, i, 1).reshape(m) for i in range(4)]
    ax = Tensor(anchors[:, 0])
    ay = Tensor(anchors[:, 1])
    cols = (ax - sides[0], ay - sides[1], ax + sides[2], ay + sides[3])
    return T.concat([c.reshape(m, 1) for c in cols], axis=1), bins


class Backbone(Module):
    """Four stages at strides 2/4/8/16; returns the stride-4/8/16 maps."""

    def __init__(self, rng, channels: tuple[int, int, int, int], depth: int):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem = ConvBNAct(rng, 3, c1, k=3, stride=2)
        self.down2 = ConvBNAct(rng, c1, c2, k=3, stride=2)
        self.stage2 = C3(rng, c2, c2, n=depth)
        self.down3 = ConvBNAct(rng, c2, c3, k=3, stride=2)
        self.stage3 = C3(rng, c3, c3, n=depth)
        self.down4 = ConvBNAct(rng, c3, c4, k=3, stride=2)
        self.stage4 = C3(rng, c4, c4, n=depth)
        self.spp = SPPLite(rng, c4, c4)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        b2 = self.stage2(self.down2(self.stem(x)))
        b3 = self.stage3(self.down3(b2))
        b4 = self.spp(self.stage4(self.down4(b3)))
        return b2, b3, b4


class Neck(Module):
    """Top-down upsample fusion producing the configured pyramid levels.

    The stride-4 map is built by fusing the shallow backbone output with
    the upsampled stride-8 feature through a CSP bottleneck.
    """

    def __init__(self, rng, channels: tuple[int, int, int, int], depth: int,
                 levels: tuple[str, ...]):
        super().__init__()
        _, c2, c3, c4 = channels
        self.levels = levels
        self.lat4 = ConvBNAct(rng, c4, c3, k=1)
        self.fuse3 = C3(rng, 2 * c3, c3, n=depth, shortcut=False)
        if "P2" in levels:
            self.lat3 = ConvBNAct(rng, c3, c2, k=1)
            self.fuse2 = C3(rng, 2 * c2, c2, n=depth, shortcut=False)

    def forward(self, b2: Tensor, b3: Tensor, b4: Tensor) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if "P4" in self.levels:
            out["P4"] = b4
        t4 = self.lat4(b4)
        p3 = self.fuse3(T.concat([T.upsample_nearest2x(t4), b3], axis=1))
        if "P3" in self.levels:
            out["P3"] = p3
        if "P2" in self.levels:
            t3 = self.lat3(p3)
            out["P2"] = self.fuse2(T.concat([T.upsample_nearest2x(t3), b2], axis=1))
        return out


class Head(Module):
    """Per-level prediction tower: 1x1 stem, 1x1 box and class convs.

    Spatial mixing happens in the neck; keeping the tower pointwise makes
    the per-branch cost negligible at high-resolution levels.
    """

    def __init__(self, rng, c_in: int, box_channels: int, num_classes: int):
        super().__init__()
        self.stem = ConvBNAct(rng, c_in, c_in, k=1)
        self.box = Conv2d(rng, c_in, box_channels, k=1, bias=True)
        self.cls = Conv2d(rng, c_in, num_classes, k=1, bias=True,
                          bias_init=CLS_BIAS_INIT)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.stem(x)
        return self.box(h), self.cls(h)


class Detector(Module):
    """Backbone + neck (+ attention) + per-level dual prediction branches."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD7]))
        base = (16, 32, 64, 128)
        chs = tuple(max(4, 2 * round(b * cfg.width_multiple / 2)) for b in base)
        depth = max(1, round(3 * cfg.depth_multiple))
        self.channels = chs
        self.backbone = Backbone(rng, chs, depth)
        self.neck = Neck(rng, chs, depth, cfg.levels)
        level_ch = {"P2": chs[1], "P3": chs[2], "P4": chs[3]}
        if cfg.use_attention:
            self.attention = [DualAttention(rng, level_ch[lv]) for lv in cfg.levels]
        else:
            self.attention = []
        self.heads_o2m = [Head(rng, level_ch[lv], cfg.box_channels, cfg.num_classes)
                          for lv in cfg.levels]
        self.heads_o2o = ([Head(rng, level_ch[lv], cfg.box_channels, cfg.num_classes)
                           for lv in cfg.levels] if cfg.o2o_head else [])

    def forward(self, x: Tensor) -> dict[str, RawPredictions]:
        """Run the detector; returns raw predictions per branch.

        Key "o2m" is always present; "o2o" only when the one-to-one branch
        is configured.
        """
        cfg = self.cfg
        n, c, h, w = x.shape
        if c != 3 or h != cfg.input_size or w != cfg.input_size:
            raise T.ShapeError(
                f"expected input [N,3,{cfg.input_size},{cfg.input_size}], got {x.shape}")
        feats = self.neck(*self.backbone(x))
        if cfg.use_attention:
            feats = {lv: att(feats[lv])
                     for lv, att in zip(cfg.levels, self.attention)}
        out: dict[str, RawPredictions] = {}
        branches = [("o2m", self.heads_o2m)]
        if cfg.o2o_head:
            branches.append(("o2o", self.heads_o2o))
        for name, heads in branches:
            box, cls = {}, {}
            for lv, head in zip(cfg.levels, heads):
                box[lv], cls[lv] = head(feats[lv])
            out[name] = RawPredictions(
                levels=cfg.levels, box=box, cls=cls,
                strides={lv: LEVEL_STRIDES[lv] for lv in cfg.levels},
                num_classes=cfg.num_classes, use_dfl=cfg.use_dfl,
                dfl_bins=cfg.dfl_bins, input_size=cfg.input_size)
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        T.save_checkpoint(path, self.named_tensors())

    def load(self, path) -> None:
        self.load_state(T.load_checkpoint(path))
