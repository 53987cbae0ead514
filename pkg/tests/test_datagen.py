import dataclasses

import numpy as np
import pytest

from rc3d.datagen import (CLASS_NAMES, EDGE_ENHANCE_KERNEL, TRAJECTORIES, DatasetManifest, SceneSpec,
                          augment_clip, build_clipset, edge_enhance, gaussian_noise, generate_dataset,
                          generate_sample, lanczos_resize, load_clipsets, load_manifest, make_scene_spec,
                          prepare_clip, random_rotate, read_video, rotate, sample_angle, segment_indices,
                          segment_three_frames, split_dataset, write_dataset, write_video)
from rc3d.tensor import InvalidArgument

STATIC = len(TRAJECTORIES) - 1


def spec_for(label, seed=0, **kw):
    return make_scene_spec(label, np.random.default_rng(seed), **kw)


# ---------------------------------------------------------------- scenes and samples

def test_sixteen_classes_and_trajectories():
    assert len(CLASS_NAMES) == 16 == len(TRAJECTORIES)
    assert TRAJECTORIES[STATIC][0] == "static"


@pytest.mark.parametrize("label", range(16))
def test_trajectory_keeps_shape_inside(label):
    for seed in range(5):
        spec = dataclasses.replace(spec_for(label, seed), noise=0.0)
        pts = spec.path(np.linspace(0, 1, 50))
        assert pts.min() >= spec.size - 1e-9 and pts.max() <= spec.render_size - 1 - spec.size + 1e-9
        video = generate_sample(spec, np.random.default_rng(seed), depth_blur=0.0)
        mask = video.depth[:, 0] == np.float32(spec.shape_depth)
        areas = mask.sum(axis=(1, 2))
        assert areas.min() > 0.8 * areas.max()
        border = mask[:, 0].any() or mask[:, -1].any() or mask[:, :, 0].any() or mask[:, :, -1].any()
        assert not border


def test_spec_validation():
    spec = spec_for(0)
    with pytest.raises(InvalidArgument):
        dataclasses.replace(spec, frames=3)
    with pytest.raises(InvalidArgument):
        dataclasses.replace(spec, shape="star")
    with pytest.raises(InvalidArgument):
        dataclasses.replace(spec, start=(1.0, 1.0))


def test_static_class_frames_identical_up_to_noise():
    spec = spec_for(STATIC, 3)
    clean = generate_sample(dataclasses.replace(spec, noise=0.0), np.random.default_rng(1))
    assert all(np.array_equal(clean.rgb[0], f) for f in clean.rgb)
    noisy = generate_sample(spec, np.random.default_rng(1))
    assert np.abs(noisy.rgb - noisy.rgb[:1]).std() < 3 * spec.noise


def test_depth_has_two_modes_at_configured_depths():
    spec = dataclasses.replace(spec_for(2, 5), noise=0.0)
    video = generate_sample(spec, np.random.default_rng(0), depth_blur=0.0)
    values = np.unique(np.round(video.depth, 5))
    np.testing.assert_allclose(sorted(values), sorted([spec.shape_depth, spec.base_depth]), atol=1e-5)
    smooth = generate_sample(spec, np.random.default_rng(0)).depth.ravel()
    hist, edges = np.histogram(smooth, bins=50, range=(0, 1))
    top2 = edges[np.argsort(hist)[-2:]]
    for d in (spec.shape_depth, spec.base_depth):
        assert np.min(np.abs(top2 - d)) < 0.03


def test_generation_is_deterministic_and_in_range():
    spec = spec_for(4, 9)
    a = generate_sample(spec, np.random.default_rng(2))
    b = generate_sample(spec, np.random.default_rng(2))
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.depth.tobytes() == b.depth.tobytes()
    assert 6 <= a.rgb.shape[0] <= 20 and a.rgb.shape[0] == a.depth.shape[0]
    assert a.rgb.min() >= 0 and a.rgb.max() <= 1 and a.depth.min() >= 0 and a.depth.max() <= 1


def test_generate_dataset_labels_and_seeds():
    videos = generate_dataset(1, seed=5, render_size=32)
    assert [v.label for v in videos] == list(range(16))
    assert [v.seed for v in videos] == [5 ^ i for i in range(16)]


# ---------------------------------------------------------------- filters

def test_lanczos_identity_and_constant(rng):
    img = rng.random((3, 20, 24))
    assert np.abs(lanczos_resize(img, (20, 24)) - img).max() < 1e-6
    np.testing.assert_allclose(lanczos_resize(np.full((17, 23), 0.4), (9, 31)), 0.4, atol=1e-6)


def test_lanczos_preserves_low_frequency_amplitude():
    x = np.arange(128)
    img = np.tile(0.5 + 0.3 * np.sin(2 * np.pi * x / 64), (8, 1))
    out = lanczos_resize(img, (8, 64))[4]
    amplitude = (out.max() - out.min()) / 2
    assert abs(amplitude / 0.3 - 1) < 0.02


def test_edge_enhance_kernel_and_constant():
    assert EDGE_ENHANCE_KERNEL.sum() == 1.0
    np.testing.assert_allclose(edge_enhance(np.full((2, 6, 6), 0.37)), 0.37, atol=1e-6)


def test_edge_enhance_step_overshoot():
    img = np.zeros((5, 8))
    img[:, 4:] = 0.6
    out = edge_enhance(img, clamp=False)
    # bright side of the edge: centre 10*0.6, five bright and three dark neighbours
    assert out[2, 4] == pytest.approx((10 * 0.6 - 5 * 0.6) / 2)
    assert out[2, 4] > 0.6
    assert 0.0 <= edge_enhance(img).min() and edge_enhance(img).max() <= 1.0


def test_rotation_identity_and_quarter_turns(rng):
    img = rng.random((2, 15, 15))
    np.testing.assert_allclose(rotate(img, 0.0), img, atol=1e-6)
    np.testing.assert_allclose(random_rotate(img, angle=0.0), img, atol=1e-6)
    out = img
    for _ in range(4):
        out = rotate(out, 90.0)
    assert np.abs(out - img).max() < 1e-2


def test_rotation_fills_with_zero():
    out = rotate(np.ones((9, 9)), 45.0)
    assert out[0, 0] == 0.0 and out[4, 4] == pytest.approx(1.0)


def test_angle_distribution():
    rng = np.random.default_rng(0)
    draws = np.array([sample_angle(rng) for _ in range(100_000)])
    assert draws.min() >= -30 and draws.max() <= 30
    assert abs(draws.mean()) < 0.3
    with pytest.raises(InvalidArgument):
        random_rotate(np.zeros((4, 4)))


def test_gaussian_noise_statistics(rng):
    img = np.full((200, 200), 0.5)
    np.testing.assert_array_equal(gaussian_noise(img, 0.0, rng), img.astype(np.float32))
    out = gaussian_noise(img, 0.05, rng)
    assert abs((out - img).std() / 0.05 - 1) < 0.05
    strong = gaussian_noise(img, 2.0, rng)
    assert strong.min() >= 0.0 and strong.max() <= 1.0


def test_augment_keeps_extent_and_range(rng):
    clip = rng.random((4, 3, 16, 16)).astype(np.float32)
    out = augment_clip(clip, rng)
    assert out.shape == clip.shape and out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- segmentation and clips

def test_segment_indices():
    assert segment_indices(3) == (0, 1, 2)
    assert segment_indices(7) == (0, 3, 6)


def test_segment_pairs_depth_with_rgb():
    video = generate_sample(spec_for(1, 2), np.random.default_rng(0))
    rgb, depth, label = segment_three_frames(video)
    idx = list(segment_indices(video.rgb.shape[0]))
    assert np.array_equal(rgb, video.rgb[idx]) and np.array_equal(depth, video.depth[idx])
    assert label == video.label


def test_prepare_clip_layout():
    video = generate_sample(spec_for(1, 2), np.random.default_rng(0))
    rgb, depth = prepare_clip(video, 32)
    assert rgb.shape == (3, 3, 32, 32) and depth.shape == (1, 3, 32, 32)


# ---------------------------------------------------------------- split and manifest

def test_split_counts():
    labels = [i % 16 for i in range(1600)]
    m = split_dataset(labels, 0.41, seed=3)
    assert all(40 <= c <= 42 for c in m.per_class("valid"))
    assert split_dataset(labels, 0.0, 3).counts == {"train": 1600, "valid": 0}
    assert m.to_json() == split_dataset(labels, 0.41, seed=3).to_json()
    assert set(m.indices("train")).isdisjoint(m.indices("valid"))
    small = split_dataset([i % 16 for i in range(160)], 0.3, 1)
    assert all(c > 0 for c in small.per_class("valid")) and all(c > 0 for c in small.per_class("train"))
    with pytest.raises(InvalidArgument):
        split_dataset(labels, 1.0, 0)


def test_manifest_json_roundtrip():
    m = split_dataset([i % 16 for i in range(32)], 0.25, 0)
    assert DatasetManifest.from_json(m.to_json()) == m


def test_video_disk_roundtrip(tmp_path):
    video = generate_sample(spec_for(6, 1, render_size=32), np.random.default_rng(0), seed=11)
    write_video(tmp_path / "v", video)
    back = read_video(tmp_path / "v")
    assert back.spec == video.spec and back.seed == 11 and back.label == 6
    assert np.abs(back.rgb - video.rgb).max() <= 0.5 / 255 + 1e-6
    assert np.abs(back.depth - video.depth).max() <= 0.5 / 255 + 1e-6


def test_dataset_on_disk(tmp_path):
    videos = generate_dataset(2, seed=1, render_size=32)
    manifest = split_dataset(videos, 0.5, seed=1)
    write_dataset(tmp_path, videos, manifest)
    assert load_manifest(tmp_path) == manifest
    train, valid = load_clipsets(tmp_path, 16)
    assert len(train) == 16 and len(valid) == 16
    assert train.rgb.shape == (16, 3, 3, 16, 16)
    assert sorted(np.concatenate([train.labels, valid.labels]).tolist()) == sorted(v.label for v in videos)
    (tmp_path / manifest.entries[0].path / "meta.txt").unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)


def test_empty_clipset():
    assert len(build_clipset([], 16)) == 0
