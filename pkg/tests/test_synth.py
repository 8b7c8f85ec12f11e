"""Scene generator determinism, label geometry, and file format round trips."""

import numpy as np
import pytest

from microdet.assign import BBox
from microdet.synth import (PlacementError, Scene, SynthConfig, generate_scene,
                            read_image_ppm, read_labels, write_image_ppm,
                            write_labels)


def clear_cfg(**kw):
    defaults = dict(image_size=64, condition_weights=(1.0, 0.0, 0.0, 0.0))
    defaults.update(kw)
    return SynthConfig(**defaults)


# ---------------------------------------------------------------------------
# determinism and content
# ---------------------------------------------------------------------------


def test_same_seed_same_scene_bitwise():
    cfg = SynthConfig(image_size=64)
    a = generate_scene(7, cfg)
    b = generate_scene(7, cfg)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    assert a.gts == b.gts
    assert a.meta == b.meta


def test_different_seeds_differ():
    cfg = SynthConfig(image_size=64)
    a = generate_scene(1, cfg)
    b = generate_scene(2, cfg)
    assert not np.array_equal(a.image.data, b.image.data)


def test_zero_targets_pure_background():
    cfg = clear_cfg(min_targets=0, max_targets=0, max_birds=0, max_clouds=0,
                    max_edges=0)
    scene = generate_scene(3, cfg)
    assert scene.gts == []
    assert scene.meta.distractor_count == 0
    assert scene.image.shape == (3, 64, 64)
    assert np.all(scene.image.data >= 0.0) and np.all(scene.image.data <= 1.0)


def test_background_independent_of_target_count():
    with_t = clear_cfg(min_targets=2, max_targets=2, max_birds=1, max_clouds=2, max_edges=1)
    without = clear_cfg(min_targets=0, max_targets=0, max_birds=1, max_clouds=2, max_edges=1)
    a = generate_scene(11, with_t)
    b = generate_scene(11, without)
    # outside the target boxes the images agree exactly
    mask = np.ones((64, 64), dtype=bool)
    for bbox, _ in a.gts:
        x1, y1, x2, y2 = bbox.to_xyxy(64)
        mask[int(y1) - 2:int(y2) + 2, int(x1) - 2:int(x2) + 2] = False
    np.testing.assert_array_equal(a.image.data[:, mask], b.image.data[:, mask])


def test_size_histogram_biased_small():
    cfg = SynthConfig(image_size=128)
    sizes = []
    for seed in range(1000):
        sizes.extend(generate_scene(seed, cfg).meta.target_sizes_px)
    sizes = np.asarray(sizes)
    assert sizes.min() >= cfg.size_min and sizes.max() <= cfg.size_max
    assert np.mean(sizes < 20.0) >= 0.6


def test_label_matches_rendered_extent_within_one_pixel():
    # difference against the target-free render of the same seed recovers
    # each target's pixel support; the label must agree within 1 px
    for seed in range(25):
        cfg_t = clear_cfg(min_targets=1, max_targets=1)
        cfg_0 = clear_cfg(min_targets=0, max_targets=0)
        with_t = generate_scene(seed, cfg_t)
        without = generate_scene(seed, cfg_0)
        diff = np.abs(with_t.image.data - without.image.data).max(axis=0)
        ys, xs = np.nonzero(diff > 1e-3)
        assert len(xs) > 0
        got = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
        bbox = with_t.gts[0][0]
        expect = np.array(bbox.to_xyxy(64))
        assert np.all(np.abs(got - expect) <= 1.0), f"seed {seed}: {got} vs {expect}"


def test_targets_are_darker_than_surround():
    hits = 0
    total = 0
    for seed in range(20):
        scene = generate_scene(seed, clear_cfg(min_targets=1, max_targets=2))
        lum = scene.image.data.mean(axis=0)
        for bbox, _ in scene.gts:
            x1, y1, x2, y2 = (int(v) for v in bbox.to_xyxy(64))
            inner = lum[y1:y2, x1:x2].mean()
            y1s, x1s = max(0, y1 - 4), max(0, x1 - 4)
            surround = lum[y1s:y2 + 4, x1s:x2 + 4].mean()
            total += 1
            hits += inner < surround
    assert hits == total


def test_conditions_cover_all_tags():
    cfg = SynthConfig(image_size=64)
    seen = {generate_scene(seed, cfg).meta.condition for seed in range(60)}
    assert seen == {"clear", "backlight", "fog", "dusk"}


def test_placement_capacity_error():
    cfg = clear_cfg(image_size=32, min_targets=30, max_targets=30,
                    size_min=10.0, small_cutoff=10.0, size_max=10.0)
    with pytest.raises(PlacementError):
        generate_scene(0, cfg)


def test_oversized_target_rejected():
    cfg = clear_cfg(image_size=32, size_min=30.0, small_cutoff=30.0, size_max=30.0)
    with pytest.raises(PlacementError, match="cannot fit"):
        generate_scene(0, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(size_min=10.0, small_cutoff=5.0)
    with pytest.raises(ValueError):
        SynthConfig(min_targets=3, max_targets=1)


# ---------------------------------------------------------------------------
# YOLO label files
# ---------------------------------------------------------------------------


def test_label_line_format(tmp_path):
    path = tmp_path / "l.txt"
    write_labels([(BBox(0.5, 0.5, 0.01, 0.01), 0)], path)
    assert path.read_text() == "0 0.500000 0.500000 0.010000 0.010000\n"
    [(bbox, cls)] = read_labels(path)
    assert cls == 0
    assert bbox == BBox(0.5, 0.5, 0.01, 0.01)


@pytest.mark.parametrize("seed", range(10))
def test_label_round_trip_precision(tmp_path, seed):
    rng = np.random.default_rng(seed)
    gts = []
    for _ in range(12):
        w, h = rng.uniform(0.01, 0.3, 2)
        gts.append((BBox(float(rng.uniform(w / 2, 1 - w / 2)),
                         float(rng.uniform(h / 2, 1 - h / 2)),
                         float(w), float(h)), int(rng.integers(0, 3))))
    path = tmp_path / "labels.txt"
    write_labels(gts, path)
    back = read_labels(path)
    assert len(back) == len(gts)
    for (b0, c0), (b1, c1) in zip(gts, back):
        assert c0 == c1
        for a, b in zip((b0.cx, b0.cy, b0.w, b0.h), (b1.cx, b1.cy, b1.w, b1.h)):
            assert abs(a - b) <= 1e-6


def test_label_out_of_range_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1.5 0.5 0.1 0.1\n")
    with pytest.raises(ValueError, match=":1: cx=1.5"):
        read_labels(path)


def test_label_malformed_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 0.5 0.5 0.1 0.1\n0 0.5 0.5 0.1\n")
    with pytest.raises(ValueError, match=":2: expected 5 fields"):
        read_labels(path)


def test_label_negative_class_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("-1 0.5 0.5 0.1 0.1\n")
    with pytest.raises(ValueError, match="negative class"):
        read_labels(path)


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------


def test_ppm_header(tmp_path):
    path = tmp_path / "img.ppm"
    write_image_ppm(np.full((3, 64, 64), 0.5, dtype=np.float32), path)
    assert path.read_bytes().startswith(b"P6\n64 64\n255\n")


def test_ppm_solid_gray_round_trip(tmp_path):
    path = tmp_path / "gray.ppm"
    img = np.full((3, 16, 16), 0.4, dtype=np.float32)
    write_image_ppm(img, path)
    back = read_image_ppm(path)
    assert np.abs(back - img).max() <= 1.0 / 255.0


@pytest.mark.parametrize("seed", range(10))
def test_ppm_random_round_trip(tmp_path, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 20, 12)).astype(np.float32)
    path = tmp_path / "r.ppm"
    write_image_ppm(img, path)
    back = read_image_ppm(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1.0 / 255.0


def test_ppm_scene_round_trip(tmp_path):
    scene = generate_scene(5, SynthConfig(image_size=64))
    path = tmp_path / "scene.ppm"
    write_image_ppm(scene, path)
    back = read_image_ppm(path)
    assert np.abs(back - scene.image.data).max() <= 1.0 / 255.0


def test_ppm_bad_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        read_image_ppm(path)


def test_ppm_truncated(tmp_path):
    path = tmp_path / "t.ppm"
    write_image_ppm(np.zeros((3, 8, 8), dtype=np.float32), path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated raster"):
        read_image_ppm(path)


def test_ppm_bad_maxval(tmp_path):
    path = tmp_path / "m.ppm"
    path.write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 12)
    with pytest.raises(ValueError, match="maxval"):
        read_image_ppm(path)
