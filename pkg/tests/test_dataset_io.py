import json
import os

import numpy as np
import pytest
from PIL import Image
from scipy.ndimage import binary_dilation, binary_erosion

from neurt.dataset_io import (Dataset, fit_bounds, load_dataset, make_scene, ring_cameras,
                              save_synthetic, synthesize)
from neurt.errors import ConfigError
from neurt.images import decode_8bit, encode_8bit
from neurt.lighting import PointLight
from neurt.render import RenderConfig, generate_rays, render_image


def write_manifest(root, frames, fov=0.8, **extra):
    with open(os.path.join(root, "transforms.json"), "w") as fh:
        json.dump({"fov_x": fov, "frames": frames, **extra}, fh)


def write_rgba(path, alpha_value=255, size=4):
    data = np.zeros((size, size, 4), dtype=np.uint8)
    data[..., :3] = 100
    data[..., 3] = alpha_value
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(data, "RGBA").save(path)


def test_identity_pose_manifest(tmp_path):
    for i in range(2):
        write_rgba(str(tmp_path / "images" / f"f{i}.png"))
    write_manifest(str(tmp_path), [{"file_path": f"images/f{i}.png", "transform_matrix": np.eye(4).tolist()}
                                   for i in range(2)])
    ds = load_dataset(str(tmp_path))
    assert len(ds) == 2 and ds.lighting == "learned"
    rays = generate_rays(ds.frames[0].camera)
    assert np.allclose(rays.dirs.mean(0) / np.linalg.norm(rays.dirs.mean(0)), [0, 0, -1])


def test_alpha_mask_binarised(tmp_path):
    write_rgba(str(tmp_path / "images" / "a.png"), alpha_value=255)
    write_manifest(str(tmp_path), [{"file_path": "images/a", "transform_matrix": np.eye(4).tolist()}])
    ds = load_dataset(str(tmp_path))
    assert np.array_equal(ds.frames[0].mask, np.ones((4, 4)))


def test_mask_count_matches_alpha(tmp_path):
    data = np.zeros((6, 6, 4), dtype=np.uint8)
    data[..., 3] = np.random.default_rng(0).integers(0, 256, size=(6, 6))
    os.makedirs(tmp_path / "images")
    Image.fromarray(data, "RGBA").save(tmp_path / "images" / "a.png")
    write_manifest(str(tmp_path), [{"file_path": "images/a.png", "transform_matrix": np.eye(4).tolist()}])
    mask = load_dataset(str(tmp_path)).frames[0].mask
    assert mask.sum() == np.sum(data[..., 3] / 255.0 > 0.5)


def test_explicit_mask_file_wins_over_alpha(tmp_path):
    write_rgba(str(tmp_path / "images" / "a.png"), alpha_value=255)
    os.makedirs(tmp_path / "masks")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "masks" / "a.png")
    write_manifest(str(tmp_path), [{"file_path": "images/a.png", "transform_matrix": np.eye(4).tolist()}])
    assert not load_dataset(str(tmp_path)).frames[0].mask.any()


def test_missing_mask_and_alpha_is_error(tmp_path):
    os.makedirs(tmp_path / "images")
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "images" / "a.png")
    write_manifest(str(tmp_path), [{"file_path": "images/a.png", "transform_matrix": np.eye(4).tolist()}])
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path))


@pytest.mark.parametrize("frames, key", [
    ([{"transform_matrix": np.eye(4).tolist()}], "file_path"),
    ([{"file_path": "images/a.png", "transform_matrix": [[1, 0], [0, 1]]}], "transform_matrix"),
    ([{"file_path": "images/a.png", "transform_matrix": (2 * np.eye(4)).tolist()}], "transform_matrix"),
])
def test_manifest_errors_name_field(tmp_path, frames, key):
    write_rgba(str(tmp_path / "images" / "a.png"))
    write_manifest(str(tmp_path), frames)
    with pytest.raises(ConfigError) as info:
        load_dataset(str(tmp_path))
    assert key in str(info.value) and "frames[0]" in str(info.value)


def test_missing_manifest_and_bad_json(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path))
    (tmp_path / "transforms.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path))


def test_light_index_out_of_range(tmp_path):
    write_rgba(str(tmp_path / "images" / "a.png"))
    write_manifest(str(tmp_path), [{"file_path": "images/a.png", "transform_matrix": np.eye(4).tolist(),
                                    "light_index": 3}])
    (tmp_path / "lights.json").write_text(json.dumps(
        {"lights": [{"light_position": [0, 0, 1], "intensity": [1, 1, 1]}]}))
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path))


def test_dataset_rejects_mixed_resolutions(tiny_root):
    ds = load_dataset(tiny_root)
    f = ds.frames[0]
    small = type(f)(f.image[:8, :8], f.mask[:8, :8], f.camera, f.light, "small")
    with pytest.raises(ConfigError):
        Dataset([f, small], ds.bounds_center, ds.bounds_radius)


def test_synthetic_round_trip(tmp_path):
    scene = make_scene("two_spheres")
    cams = ring_cameras(3, size=24)
    lights = [PointLight([2, 3, 3.0], [30.0] * 3), PointLight([-2, 3, 1.0], [20.0] * 3)]
    save_synthetic(scene, cams, [0, 1, 0], lights, str(tmp_path))
    ds = load_dataset(str(tmp_path))
    assert ds.lighting == "known"
    for cam, frame, li in zip(cams, ds.frames, [0, 1, 0]):
        assert np.abs(frame.camera.c2w - cam.c2w).max() < 1e-6
        assert np.array_equal(frame.light.position, lights[li].position)
        res = render_image(scene.with_light(lights[li]), cam,
                           RenderConfig(visibility="hard", background=(0.0, 0.0, 0.0)))
        expected = decode_8bit(encode_8bit(res.radiance * res.alpha[..., None]))
        assert np.array_equal(frame.image, expected)
        assert np.array_equal(frame.mask, res.alpha)
        rot = frame.camera.c2w[:3, :3]
        assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-5


def test_synthesis_is_bit_identical(tmp_path):
    a = synthesize(str(tmp_path / "a"), "sphere", views=2, test_views=0, size=16)
    b = synthesize(str(tmp_path / "b"), "sphere", views=2, test_views=0, size=16)
    for name in ("transforms.json", "lights.json", "images/r_000.png", "masks/r_001.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a != b


def test_ring_masks_match_analytic_silhouette(tmp_path):
    synthesize(str(tmp_path), "sphere", views=8, test_views=0, size=48)
    ds = load_dataset(str(tmp_path))
    assert len(ds) == 8
    for frame in ds.frames:
        assert frame.mask.any()
        rays = generate_rays(frame.camera)
        # closest approach of each pixel-center ray to the unit sphere at the origin
        t = -np.sum(rays.origins * rays.dirs, axis=1)
        closest = np.linalg.norm(rays.origins + t[:, None] * rays.dirs, axis=1)
        oracle = (closest < 1.0).reshape(frame.mask.shape)
        band = binary_dilation(oracle) & ~binary_erosion(oracle)
        assert np.all(((frame.mask > 0.5) != oracle) <= band)


def test_no_metadata_means_learned_lighting(tiny_root_unlit):
    ds = load_dataset(tiny_root_unlit)
    assert ds.lighting == "learned" and all(f.light is None for f in ds.frames)


def test_fit_bounds_on_ring():
    center, radius = fit_bounds(ring_cameras(8, radius=4.0))
    assert np.allclose(center, 0.0, atol=1e-9)
    assert radius == pytest.approx(2.0)


def test_eight_bit_round_trip_is_identity():
    codes = np.arange(256, dtype=np.uint8)
    assert np.array_equal(encode_8bit(decode_8bit(codes)), codes)
    assert np.array_equal(encode_8bit(decode_8bit(codes, srgb=False), srgb=False), codes)
