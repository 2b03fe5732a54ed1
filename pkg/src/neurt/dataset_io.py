"""Posed multi-view datasets: loading, and synthesis with the forward renderer.

On-disk layout (NeRF-style)::

    root/
      transforms.json         training split manifest
      transforms_test.json    optional held-out split
      transforms_relight.json optional held-out-light split
      lights.json             optional; absent means learned lighting
      images/*.png            RGBA, sRGB-encoded
      masks/*.png             optional explicit masks

Manifest schema::

    {"fov_x": <radians>, "forward": "-z" | "+z",
     "bounds": {"center": [x, y, z], "radius": r},          (optional)
     "frames": [{"file_path": "images/r_000.png",
                 "transform_matrix": [[...4], [...4], [...4], [...4]],
                 "light_index": 0,                           (optional)
                 "mask_path": "masks/r_000.png"}]}           (optional)
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamStore
from .errors import ConfigError
from .geometry import SdfModel
from .images import read_mask, read_png, write_mask, write_png
from .lighting import PointLight, load_lights, save_lights
from .reflectance import AnalyticBsdf, RegionBsdf
from .render import Camera, RenderConfig, Scene, render_image

MANIFESTS = {"train": "transforms.json", "test": "transforms_test.json",
             "relight": "transforms_relight.json"}


@dataclass
class Frame:
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    light: PointLight | None = None
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ConfigError(f"frame {self.name}: image {self.image.shape[:2]} and mask "
                              f"{self.mask.shape} differ", key="mask")


@dataclass
class Dataset:
    frames: list
    bounds_center: np.ndarray
    bounds_radius: float
    lighting: str = "known"
    root: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ConfigError("dataset has no frames", key="frames")
        shapes = {f.image.shape for f in self.frames}
        if len(shapes) != 1:
            raise ConfigError(f"frames have differing resolutions: {sorted(shapes)}", key="frames")
        self.frames = sorted(self.frames, key=lambda f: f.name)

    def __len__(self):
        return len(self.frames)

    @property
    def height(self):
        return self.frames[0].image.shape[0]

    @property
    def width(self):
        return self.frames[0].image.shape[1]


def fit_bounds(cameras):
    """Centroid of the principal axes (least squares) and half the farthest camera distance."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = -cam.c2w[:3, 2] * -cam.forward_z
        d = d / np.linalg.norm(d)
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ cam.origin
    if abs(np.linalg.det(a)) < 1e-9:
        center = np.mean([c.origin for c in cameras], axis=0)
    else:
        center = np.linalg.solve(a, b)
    radius = 0.5 * max(np.linalg.norm(c.origin - center) for c in cameras)
    return center, float(radius)


def _field(entry, key, where):
    if key not in entry:
        raise ConfigError(f"{where}: missing field {key!r}", key=key)
    return entry[key]


def _resolve_image(root, rel):
    path = os.path.join(root, rel)
    if os.path.exists(path):
        return path
    if os.path.exists(path + ".png"):
        return path + ".png"
    raise ConfigError(f"image file not found: {path}", key="file_path")


def load_dataset(root, split="train", srgb=True):
    """Decode a manifest split into a Dataset (images linearised, masks binarised)."""
    manifest_path = os.path.join(root, MANIFESTS.get(split, split))
    if not os.path.exists(manifest_path):
        raise ConfigError(f"manifest not found: {manifest_path}", key="manifest")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest_path}: invalid JSON ({exc})", key="manifest") from exc
    fov = float(_field(manifest, "fov_x", manifest_path))
    forward = manifest.get("forward", "-z")
    if forward not in ("-z", "+z"):
        raise ConfigError(f"{manifest_path}: forward must be '-z' or '+z'", key="forward")
    entries = _field(manifest, "frames", manifest_path)
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{manifest_path}: 'frames' must be a non-empty list", key="frames")
    lights_path = os.path.join(root, "lights.json")
    lights = load_lights(lights_path) if os.path.exists(lights_path) else None

    frames = []
    for i, entry in enumerate(entries):
        where = f"{manifest_path}: frames[{i}]"
        rel = _field(entry, "file_path", where)
        matrix = np.asarray(_field(entry, "transform_matrix", where), dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ConfigError(f"{where}.transform_matrix: expected 4x4, got {matrix.shape}",
                              key=f"frames[{i}].transform_matrix")
        rgb, alpha = read_png(_resolve_image(root, rel), srgb=srgb)
        mask_rel = entry.get("mask_path")
        mask_path = os.path.join(root, mask_rel) if mask_rel else \
            os.path.join(root, "masks", os.path.basename(_resolve_image(root, rel)))
        if os.path.exists(mask_path):
            mask = read_mask(mask_path)
        elif alpha is not None:
            mask = (alpha > 0.5).astype(np.float64)
        else:
            raise ConfigError(f"{where}: no mask file and no alpha channel", key=f"frames[{i}].mask_path")
        h, w = rgb.shape[:2]
        try:
            cam = Camera(matrix, fov, w, h, forward_z=-1.0 if forward == "-z" else 1.0)
        except ConfigError as exc:
            raise ConfigError(f"{where}.{exc.key}: {exc}", key=f"frames[{i}].{exc.key}") from exc
        light = None
        if lights is not None:
            li = entry.get("light_index", 0 if len(lights) == 1 else i)
            if not 0 <= li < len(lights):
                raise ConfigError(f"{where}: light_index {li} out of range for {len(lights)} lights",
                                  key=f"frames[{i}].light_index")
            light = lights[li]
        frames.append(Frame(rgb, mask, cam, light, name=os.path.splitext(os.path.basename(rel))[0]))

    if "bounds" in manifest:
        center = np.asarray(manifest["bounds"]["center"], dtype=np.float64)
        radius = float(manifest["bounds"]["radius"])
    else:
        center, radius = fit_bounds([f.camera for f in frames])
    return Dataset(frames, center, radius, "known" if lights is not None else "learned", root,
                   extra={"split": split})


# ---------------------------------------------------------------------------
# synthetic scenes


def sketch_scene_sdf(centers, radii, k=32.0):
    """An SdfModel holding exactly the given spheres (no residual)."""
    store = ParamStore()
    model = SdfModel(store, n_spheres=len(radii), k=k, residual_sizes=(3, 1), encoding=0,
                     init_radius=0.1)
    model.set_spheres(centers, radii)
    return model


TWO_SPHERES = {
    "centers": [[-0.42, 0.0, 0.0], [0.52, 0.12, 0.1]],
    "radii": [0.5, 0.35],
    "albedos": [[0.8, 0.4, 0.25], [0.3, 0.55, 0.8]],
}


def _nearest_sphere_labels(centers, radii):
    centers = np.asarray(centers)
    radii = np.asarray(radii)

    def labels(x):
        d = np.linalg.norm(x[:, None, :] - centers[None], axis=-1) - radii
        return np.argmin(d, axis=1)

    return labels


def make_scene(name, light=None):
    """Named analytic scenes: ``two_spheres``, ``sphere``, ``sphere_over_plane``."""
    light = light or PointLight([2.0, 3.0, 3.0], [30.0, 30.0, 30.0])
    if name == "two_spheres":
        spec = TWO_SPHERES
        sdf = sketch_scene_sdf(spec["centers"], spec["radii"])
        bsdf = RegionBsdf([AnalyticBsdf(albedo=tuple(a)) for a in spec["albedos"]],
                          _nearest_sphere_labels(spec["centers"], spec["radii"]))
        return Scene(sdf, bsdf, light, bounds_center=(0.0, 0.0, 0.0), bounds_radius=1.6)
    if name == "sphere":
        sdf = sketch_scene_sdf([[0.0, 0.0, 0.0]], [1.0])
        return Scene(sdf, AnalyticBsdf(albedo=(0.8, 0.8, 0.8)), light, bounds_radius=1.5)
    if name == "sphere_over_plane":
        # the ground is a very large sphere; curvature is negligible near the origin
        sdf = sketch_scene_sdf([[0.0, 0.5, 0.0], [0.0, -1000.0, 0.0]], [0.5, 1000.0 - 0.5])
        return Scene(sdf, AnalyticBsdf(albedo=(0.8, 0.8, 0.8)), light, bounds_radius=4.0)
    raise ConfigError(f"unknown scene {name!r}", key="scene")


SCENES = ("two_spheres", "sphere", "sphere_over_plane")


def ring_cameras(count, radius=4.0, elevation_deg=20.0, offset_deg=0.0, fov_deg=40.0, size=128,
                 target=(0.0, 0.0, 0.0)):
    cams = []
    el = np.deg2rad(elevation_deg)
    for i in range(count):
        az = np.deg2rad(offset_deg + 360.0 * i / count)
        eye = np.array([radius * np.cos(el) * np.sin(az), radius * np.sin(el),
                        radius * np.cos(el) * np.cos(az)]) + np.asarray(target)
        cams.append(Camera.look_at(eye, target, fov_x=np.deg2rad(fov_deg), width=size, height=size))
    return cams


def default_lights(count, intensity=30.0, radius=4.0, height=3.0, offset_deg=30.0):
    out = []
    for i in range(count):
        az = np.deg2rad(offset_deg + 360.0 * i / max(count, 1))
        out.append(PointLight([radius * np.sin(az), height, radius * np.cos(az)], [intensity] * 3))
    return out


def save_synthetic(scene: Scene, cameras, light_indices, lights, out, split="train",
                   write_lights=True, srgb=True, threads=1):
    """Render each camera (direct integrator, hard shadows) and write images, masks, manifest."""
    img_dir = os.path.join(out, "images")
    mask_dir = os.path.join(out, "masks")
    try:
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    cfg = RenderConfig(integrator="direct", visibility="hard", background=(0.0, 0.0, 0.0),
                       threads=threads)
    entries = []
    prefix = {"train": "r", "test": "t", "relight": "l"}.get(split, split)
    for i, (cam, li) in enumerate(zip(cameras, light_indices)):
        res = render_image(scene.with_light(lights[li]), cam, cfg)
        fname = f"{prefix}_{i:03d}.png"
        write_png(os.path.join(img_dir, fname), res.radiance * res.alpha[..., None], res.alpha, srgb=srgb)
        write_mask(os.path.join(mask_dir, fname), res.alpha)
        entry = {"file_path": f"images/{fname}", "transform_matrix": cam.c2w.tolist()}
        if write_lights:
            entry["light_index"] = int(li)
        entries.append(entry)
    manifest = {"fov_x": float(cameras[0].fov_x), "forward": "-z",
                "bounds": {"center": list(map(float, scene.bounds_center)),
                           "radius": float(scene.bounds_radius)},
                "frames": entries}
    with open(os.path.join(out, MANIFESTS.get(split, split)), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    if write_lights:
        save_lights(os.path.join(out, "lights.json"), lights)
    return out


def synthesize(out, scene_name="two_spheres", views=16, test_views=4, n_lights=1,
               relight_lights=0, size=128, with_metadata=True, threads=1):
    """Train/test (and optionally relight) splits of a named scene.

    Training frames cycle through ``n_lights`` light positions; the relight
    split renders the test cameras under ``relight_lights`` unseen positions.
    """
    lights = default_lights(n_lights)
    unseen = default_lights(relight_lights, offset_deg=75.0, height=2.0) if relight_lights else []
    all_lights = lights + unseen
    scene = make_scene(scene_name, lights[0])
    train_cams = ring_cameras(views, size=size)
    save_synthetic(scene, train_cams, [i % n_lights for i in range(views)], all_lights, out, "train",
                   write_lights=with_metadata, threads=threads)
    if test_views:
        test_cams = ring_cameras(test_views, elevation_deg=35.0, offset_deg=360.0 / views / 2 + 7.0,
                                 size=size)
        save_synthetic(scene, test_cams, [i % n_lights for i in range(test_views)], all_lights, out,
                       "test", write_lights=with_metadata, threads=threads)
        if relight_lights:
            save_synthetic(scene, test_cams,
                           [n_lights + (i % relight_lights) for i in range(test_views)],
                           all_lights, out, "relight", write_lights=with_metadata, threads=threads)
    return out
