"""Render a trained scene at a dataset's poses and score it against the references."""
from __future__ import annotations

import numpy as np

from .diffcore import no_grad
from .geometry import clip_to_sphere, sphere_trace
from .images import linear_to_srgb
from .metrics import MetricReport, iou, psnr, ssim
from .render import RenderConfig, Scene, generate_rays, render_image


def reference_composite(frame, background=(1.0, 1.0, 1.0)):
    """Premultiplied reference image over a constant background."""
    m = frame.mask[..., None]
    return frame.image * m + np.asarray(background) * (1.0 - m)


def render_frame(scene: Scene, frame, cfg: RenderConfig, lighting="known", frame_index=0):
    sc = scene.with_light(frame.light) if lighting == "known" and frame.light is not None else scene
    return render_image(sc, frame.camera, cfg, frame=frame_index)


def evaluate(scene: Scene, dataset, cfg: RenderConfig | None = None, lighting=None, srgb=True,
             keep_images=False):
    """MetricReport over every frame; images are compared after sRGB encoding when ``srgb``.

    Returns (report, renders) where renders is a list of RenderResult (empty
    unless ``keep_images``).
    """
    cfg = cfg or RenderConfig()
    lighting = lighting or dataset.lighting
    report = MetricReport()
    renders = []
    for i, frame in enumerate(dataset.frames):
        res = render_frame(scene, frame, cfg, lighting, i)
        ref = reference_composite(frame, cfg.background)
        a, b = (linear_to_srgb(res.rgb), linear_to_srgb(ref)) if srgb else \
            (np.clip(res.rgb, 0, 1), np.clip(ref, 0, 1))
        report.add(frame.name, psnr(a, b), ssim(a, b), iou(res.alpha, frame.mask))
        if keep_images:
            renders.append(res)
    return report, renders


def surface_weights(scene: Scene, camera, cfg: RenderConfig | None = None):
    """Per-pixel basis mixture weights (H, W, M) at first hits, plus the hit mask."""
    cfg = cfg or RenderConfig()
    rays = clip_to_sphere(generate_rays(camera), scene.bounds_center, scene.bounds_radius)
    hits = sphere_trace(scene.sdf, rays, cfg.trace)
    m = scene.bsdf.m
    out = np.zeros((len(rays), m))
    if hits.converged.any():
        with no_grad():
            out[hits.converged] = scene.bsdf.weights(hits.x[hits.converged], scene.params()).value
    shape = (camera.height, camera.width)
    return out.reshape(*shape, m), hits.converged.reshape(shape).astype(np.float64)
