"""Dataset directory layout: images/{split}/NNNNNN.ppm + labels + manifest."""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields

import numpy as np

from microdet.assign import BBox
from microdet.config import DataConfig
from microdet.synth import (Scene, SynthConfig, generate_scene, read_image_ppm,
                            read_labels, write_image_ppm, write_labels)

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    """One stored image (uint8 to keep large corpora in RAM) plus labels."""

    image_u8: np.ndarray               # [3, H, W] uint8
    gts: list[tuple[BBox, int]]
    name: str

    def image_f32(self) -> np.ndarray:
        return self.image_u8.astype(np.float32) / 255.0


def split_counts(total: int, fractions) -> tuple[int, int, int]:
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"split fractions {fractions} must be >= 0 and sum to <= 1")
    if len(fractions) != 3:
        raise ValueError("need exactly three split fractions (train, val, test)")
    train = int(round(total * fractions[0]))
    val = int(round(total * fractions[1]))
    test = min(int(round(total * fractions[2])), total - train - val)
    return train, val, max(test, 0)


def write_dataset(data_cfg: DataConfig, out_dir, seed: int = 0,
                  force: bool = False) -> dict:
    """Generate and store a corpus; returns summary statistics."""
    out_dir = str(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} is not empty (use --force to overwrite)")
    synth = data_cfg.synth_config()
    counts = dict(zip(SPLITS, split_counts(data_cfg.count, data_cfg.split)))
    sizes: list[float] = []
    conditions: dict[str, int] = {}
    index = 0
    for split in SPLITS:
        img_dir = os.path.join(out_dir, "images", split)
        lbl_dir = os.path.join(out_dir, "labels", split)
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(lbl_dir, exist_ok=True)
        for _ in range(counts[split]):
            scene = generate_scene(seed + index, synth)
            stem = f"{index:06d}"
            write_image_ppm(scene, os.path.join(img_dir, stem + ".ppm"))
            write_labels(scene, os.path.join(lbl_dir, stem + ".txt"))
            sizes.extend(scene.meta.target_sizes_px)
            conditions[scene.meta.condition] = conditions.get(scene.meta.condition, 0) + 1
            index += 1
    _write_manifest(out_dir, data_cfg, synth, seed, counts)
    sizes_arr = np.asarray(sizes) if sizes else np.zeros(0)
    return {
        "counts": counts,
        "targets": len(sizes),
        "pct_below_20px": float(np.mean(sizes_arr < 20.0)) if sizes else 0.0,
        "conditions": conditions,
    }


def _write_manifest(out_dir, data_cfg: DataConfig, synth: SynthConfig,
                    seed: int, counts: dict) -> None:
    parser = configparser.ConfigParser()
    parser["dataset"] = {
        "seed": str(seed),
        "image_size": str(synth.image_size),
        "class_names": "uav",
        **{f"count_{k}": str(v) for k, v in counts.items()},
    }
    parser["synth"] = {f.name: _fmt(getattr(synth, f.name)) for f in fields(SynthConfig)}
    with open(os.path.join(out_dir, "dataset.cfg"), "w", encoding="ascii") as fh:
        parser.write(fh)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_manifest(data_dir) -> dict:
    path = os.path.join(str(data_dir), "dataset.cfg")
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_split(data_dir, split: str) -> list[Sample]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    img_dir = os.path.join(str(data_dir), "images", split)
    lbl_dir = os.path.join(str(data_dir), "labels", split)
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"missing split directory {img_dir}")
    samples = []
    for fname in sorted(os.listdir(img_dir)):
        if not fname.endswith(".ppm"):
            continue
        stem = fname[:-4]
        img = read_image_ppm(os.path.join(img_dir, fname))
        gts = read_labels(os.path.join(lbl_dir, stem + ".txt"))
        samples.append(Sample(
            image_u8=np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8),
            gts=gts, name=stem))
    return samples


def dataset_hash(data_dir) -> str:
    """Content fingerprint: manifest + label bytes + image file sizes."""
    h = hashlib.sha256()
    root = str(data_dir)
    manifest = os.path.join(root, "dataset.cfg")
    if os.path.exists(manifest):
        with open(manifest, "rb") as fh:
            h.update(fh.read())
    for split in SPLITS:
        lbl_dir = os.path.join(root, "labels", split)
        img_dir = os.path.join(root, "images", split)
        if os.path.isdir(lbl_dir):
            for fname in sorted(os.listdir(lbl_dir)):
                h.update(fname.encode())
                with open(os.path.join(lbl_dir, fname), "rb") as fh:
                    h.update(fh.read())
        if os.path.isdir(img_dir):
            for fname in sorted(os.listdir(img_dir)):
                h.update(fname.encode())
                h.update(str(os.path.getsize(os.path.join(img_dir, fname))).encode())
    return h.hexdigest()
