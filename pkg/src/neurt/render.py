"""Cameras, ray generation and the integrators.

Integrators:
    direct           single-bounce shading with next-event estimation
    path             multi-bounce path tracing (cosine-weighted continuation)
    normals          surface normals mapped to [0, 1]^3
    light_direction  incident light direction mapped to [0, 1]^3
    silhouette       logistic of the minimum SDF along each ray
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Params, no_grad
from .diffcore import tape as T
from .errors import ConfigError
from .geometry import (Hits, Rays, SdfField, SilhouetteConfig, TraceConfig, clip_to_sphere,
                       silhouette_estimate, sphere_trace)
from .lighting import OcclusionField, hard_visibility, sample_direct
from .reflectance import sample_bsdf_direction

INTEGRATORS = ("direct", "path", "normals", "light_direction", "silhouette")
VISIBILITY = ("none", "hard", "learned")
SOFTCLAMP_BETA = 40.0


@dataclass
class Camera:
    c2w: np.ndarray
    fov_x: float
    width: int
    height: int
    forward_z: float = -1.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        if not 0.0 < self.fov_x < np.pi:
            raise ConfigError(f"fov_x must be in (0, pi), got {self.fov_x}", key="fov_x")
        rot = self.c2w[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(rot) - 1.0) > 1e-5:
            raise ConfigError("camera-to-world rotation block is not orthonormal", key="transform_matrix")

    @property
    def focal(self):
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)

    @property
    def origin(self):
        return self.c2w[:3, 3].copy()

    def project(self, points):
        """World points (P, 3) -> continuous pixel coordinates (P, 2) as (u, v)."""
        rot, org = self.c2w[:3, :3], self.c2w[:3, 3]
        local = (np.atleast_2d(points) - org) @ rot
        depth = local[:, 2] * self.forward_z
        u = local[:, 0] / depth * self.focal + 0.5 * self.width
        v = -local[:, 1] / depth * self.focal * (-self.forward_z) + 0.5 * self.height
        return np.stack([u, v], axis=-1)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_x=np.deg2rad(40.0), width=128, height=128):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        back = eye - target
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
        return cls(c2w, fov_x, width, height)


@dataclass
class CropSample:
    u0: int
    v0: int
    w: int
    h: int
    jitter: np.ndarray | None = None

    def check(self, camera: Camera):
        if self.u0 < 0 or self.v0 < 0 or self.u0 + self.w > camera.width or self.v0 + self.h > camera.height:
            raise ConfigError("crop rectangle outside the image", key="crop")

    def pixels(self):
        """(v, u) integer pixel coordinates in row-major crop order."""
        vv, uu = np.meshgrid(np.arange(self.v0, self.v0 + self.h), np.arange(self.u0, self.u0 + self.w),
                             indexing="ij")
        return vv.ravel(), uu.ravel()


def generate_rays(camera: Camera, crop: CropSample | None = None) -> Rays:
    """Pinhole rays through pixel centers (plus jitter) of ``crop`` (whole image if None)."""
    crop = crop or CropSample(0, 0, camera.width, camera.height)
    crop.check(camera)
    vv, uu = crop.pixels()
    px = uu + 0.5
    py = vv + 0.5
    if crop.jitter is not None:
        jit = np.asarray(crop.jitter, dtype=np.float64).reshape(-1, 2)
        px = px + jit[:, 0]
        py = py + jit[:, 1]
    f = camera.focal
    x = (px - 0.5 * camera.width) / f
    y = -(py - 0.5 * camera.height) / f
    z = np.full_like(x, camera.forward_z)
    d_cam = np.stack([x, y * -camera.forward_z, z], axis=-1)
    d = d_cam @ camera.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return Rays(o, d, 0.0, np.inf)


@dataclass
class RenderConfig:
    integrator: str = "direct"
    depth: int = 1
    spp: int = 1
    visibility: str = "hard"
    background: tuple = (1.0, 1.0, 1.0)
    trace: TraceConfig = field(default_factory=TraceConfig)
    silhouette: SilhouetteConfig = field(default_factory=SilhouetteConfig)
    threads: int = 1
    tile_rows: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}", key="integrator")
        if self.visibility not in VISIBILITY:
            raise ConfigError(f"unknown visibility mode {self.visibility!r}", key="visibility")
        if self.depth < 1 or self.spp < 1:
            raise ConfigError("depth and spp must be >= 1", key="depth")


@dataclass
class Scene:
    """Everything the integrators need: geometry, reflectance, lighting, bounds."""

    sdf: SdfField
    bsdf: object
    light: object
    occlusion: OcclusionField | None = None
    bounds_center: tuple = (0.0, 0.0, 0.0)
    bounds_radius: float = 2.0
    store: object = None

    def params(self, record=False, **kw):
        store = self.store if self.store is not None else self.sdf.store
        return Params(store, record=record, **kw)

    def with_light(self, light):
        return replace(self, light=light)


@dataclass
class SurfacePoints:
    """Shading points: position and normal (Vars, possibly differentiable) plus a detached normal."""

    x: object
    n: object
    n_detached: np.ndarray

    @classmethod
    def from_hits(cls, hits: Hits, idx=None):
        idx = np.nonzero(hits.converged)[0] if idx is None else idx
        return cls(T.Var(hits.x[idx]), T.Var(hits.normal[idx]), hits.normal[idx])


def softclamp_cos(c):
    """Smooth max(0, cos): softplus(40 c) / 40."""
    return T.softplus(c, beta=SOFTCLAMP_BETA)


def shade_direct(scene: Scene, pts: SurfacePoints, w_o, params=None, visibility="none",
                 trace_cfg: TraceConfig | None = None):
    """V * f * L_i * softclamp(w_i . n) for every shading point; (P, 3) Var."""
    if params is None:
        params = scene.params()
    w_o = T.as_var(w_o)
    w_i, radiance, dist = sample_direct(scene.light, pts.x, params)
    f = scene.bsdf.value(pts.x, pts.n, w_i, w_o, params)
    cos = softclamp_cos(T.dot(w_i, pts.n))
    out = f * radiance * T.expand_dims(cos, -1)
    degenerate = np.linalg.norm(w_i.value + w_o.value, axis=-1) < 1e-8
    if visibility == "hard":
        vis = hard_visibility(scene.sdf, pts.x.value, w_i.value, dist, normal=pts.n_detached,
                              cfg=trace_cfg)
        out = out * (vis * ~degenerate)[:, None]
    elif visibility == "learned":
        if scene.occlusion is None:
            raise ConfigError("learned visibility needs an occlusion field", key="visibility")
        vis = scene.occlusion(pts.x, w_i, params)
        out = out * T.expand_dims(vis, -1)
        if degenerate.any():
            out = out * (~degenerate)[:, None]
    elif degenerate.any():
        out = out * (~degenerate)[:, None]
    return out


def trace_path(scene: Scene, rays: Rays, depth, rng, visibility="hard", trace_cfg=None,
               uniforms=None):
    """Monte Carlo radiance along ``rays`` with next-event estimation at every bounce.

    Returns (radiance (R, 3), camera-ray hit mask).  Bounces past ``depth``
    terminate; escaping secondary rays carry no radiance.  ``uniforms`` may
    supply per-bounce (R, 2) random numbers.
    """
    trace_cfg = trace_cfg or TraceConfig()
    n = len(rays)
    radiance = np.zeros((n, 3))
    throughput = np.ones((n, 3))
    alive = np.arange(n)
    cur = clip_to_sphere(rays, scene.bounds_center, scene.bounds_radius)
    first_hit = None
    with no_grad():
        params = scene.params()
        for bounce in range(depth):
            hits = sphere_trace(scene.sdf, cur, trace_cfg)
            if first_hit is None:
                first_hit = hits.converged.copy()
            keep = np.nonzero(hits.converged)[0]
            if keep.size == 0:
                break
            alive, throughput = alive[keep], throughput[keep]
            pts = SurfacePoints.from_hits(hits, keep)
            w_o = -cur.dirs[keep]
            direct = shade_direct(scene, pts, w_o, params, visibility, trace_cfg).value
            np.add.at(radiance, alive, throughput * direct)
            if bounce == depth - 1:
                break
            u = None if uniforms is None else uniforms[bounce][alive]
            w_new, pdf = sample_bsdf_direction(rng, pts.n_detached, u)
            f = scene.bsdf.value(pts.x, pts.n, T.Var(w_new), T.Var(w_o), params).value
            cos = np.sum(w_new * pts.n_detached, axis=-1)
            throughput = throughput * f * (cos / pdf)[:, None]
            start = pts.x.value + 10.0 * trace_cfg.hit_eps * pts.n_detached
            cur = clip_to_sphere(Rays(start, w_new, 0.0, np.inf), scene.bounds_center,
                                 scene.bounds_radius)
    if first_hit is None:
        first_hit = np.zeros(n, dtype=bool)
    return radiance, first_hit


@dataclass
class RenderResult:
    rgb: np.ndarray
    alpha: np.ndarray
    radiance: np.ndarray

    @property
    def rgba(self):
        return np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)


def _shade_rays(scene: Scene, rays: Rays, cfg: RenderConfig):
    """Raw per-ray output (R, 3) and hit mask for the non-stochastic integrators."""
    n = len(rays)
    out = np.zeros((n, 3))
    clipped = clip_to_sphere(rays, scene.bounds_center, scene.bounds_radius)
    if cfg.integrator == "silhouette":
        with no_grad():
            sil = silhouette_estimate(scene.sdf, clipped, cfg.silhouette, scene.sdf.params(),
                                      soft=False).value
        return np.repeat(sil[:, None], 3, axis=1), sil > 0.5
    hits = sphere_trace(scene.sdf, clipped, cfg.trace)
    idx = np.nonzero(hits.converged)[0]
    if idx.size:
        pts = SurfacePoints.from_hits(hits, idx)
        with no_grad():
            if cfg.integrator == "direct":
                out[idx] = shade_direct(scene, pts, -rays.dirs[idx], scene.params(), cfg.visibility,
                                        cfg.trace).value
            elif cfg.integrator == "normals":
                out[idx] = 0.5 * (pts.n_detached + 1.0)
            elif cfg.integrator == "light_direction":
                w_i, _, _ = sample_direct(scene.light, pts.x, scene.params())
                out[idx] = 0.5 * (w_i.value + 1.0)
    return out, hits.converged


def render_image(scene: Scene, camera: Camera, cfg: RenderConfig | None = None, frame=0):
    """Full-frame render; misses take ``cfg.background`` and alpha 0."""
    cfg = cfg or RenderConfig()
    h, w = camera.height, camera.width
    rows = list(range(0, h, cfg.tile_rows))
    radiance = np.zeros((h * w, 3))
    alpha = np.zeros(h * w)

    def tile(v0):
        rh = min(cfg.tile_rows, h - v0)
        crop = CropSample(0, v0, w, rh)
        rays = generate_rays(camera, crop)
        ids = np.arange(v0 * w, (v0 + rh) * w)
        if cfg.integrator == "path":
            out, hit = _shade_rays_path(scene, rays, cfg, ids, h * w, frame)
        else:
            out, hit = _shade_rays(scene, rays, cfg)
        radiance[ids] = out
        alpha[ids] = hit

    if cfg.threads > 1 and len(rows) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            list(pool.map(tile, rows))
    else:
        for v0 in rows:
            tile(v0)
    radiance = radiance.reshape(h, w, 3)
    alpha = alpha.reshape(h, w)
    rgb = radiance * alpha[..., None] + np.asarray(cfg.background) * (1.0 - alpha[..., None])
    return RenderResult(rgb=rgb, alpha=alpha, radiance=radiance)


def _shade_rays_path(scene, rays, cfg, pixel_ids, n_pixels, frame):
    """Path-traced pixels; random numbers keyed by (seed, frame, sample, pixel)."""
    acc = np.zeros((len(rays), 3))
    hit = np.zeros(len(rays), dtype=bool)
    for s in range(cfg.spp):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, frame, s])))
        table = rng.uniform(size=(cfg.depth, n_pixels, 2))
        uniforms = [table[b][pixel_ids] for b in range(cfg.depth)]
        rad, hit = trace_path(scene, rays, cfg.depth, rng, cfg.visibility, cfg.trace, uniforms)
        acc += rad
    return acc / cfg.spp, hit
