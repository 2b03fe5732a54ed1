"""Losses, the staged optimisation loop, and model checkpoints.

Schedule:
    stage 1  silhouette loss only, sketch parameters only, residual gated off
    stage 2  residual gate on; photometric + silhouette losses; reflectance
             (and the light field when lighting is learned) optimised
    stage 3  from ``train.stage3_start`` (if later than stage 2) the light
             and occlusion fields are unfrozen

With learned visibility the occlusion field shades the training renders and is
distilled towards hard shadow-ray visibility with a weighted BCE term.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamWState, ParamStore, Params, adamw_step, backward, load_checkpoint, no_grad
from .diffcore import save_checkpoint
from .diffcore import tape as T
from .config import DEFAULTS
from .errors import ConfigError, UsageError
from .geometry import SdfModel, SilhouetteConfig, TraceConfig, clip_to_sphere, silhouette_estimate
from .geometry import sphere_trace
from .lighting import LearnedLightField, OcclusionField, PointLight, hard_visibility, sample_direct
from .reflectance import ReflectanceModel
from .render import CropSample, Scene, SurfacePoints, generate_rays, shade_direct

PHOTO_EPS = 1e-8
MODEL_KEYS_PREFIX = "model."


# ---------------------------------------------------------------------------
# losses


def photometric_loss(ref, est, eps=PHOTO_EPS):
    """(1/3) [mean|d| + sqrt(mean d^2 + eps) + (mean d^2 + eps)^(1/4)] with d = est - ref."""
    ref_shape = np.shape(T._value(ref))
    est_shape = np.shape(T._value(est))
    if ref_shape != est_shape:
        raise UsageError(f"photometric_loss: shapes differ {ref_shape} vs {est_shape}")
    d = T.as_var(est) - T.as_var(ref)
    mse = T.mean(T.square(d)) + eps
    return (T.mean(T.abs_(d)) + T.sqrt(mse) + T.sqrt(T.sqrt(mse))) / 3.0


def silhouette_loss(mask_ref, mask_est, eps_bce=1e-6):
    """Binary cross-entropy with the estimate clamped to [eps, 1 - eps].

    The clamp is straight-through: saturated estimates still pass the gradient
    of the clamped loss, so a confidently wrong pixel keeps pulling.
    """
    if not 0.0 < eps_bce < 0.5:
        raise ConfigError(f"eps_bce must be in (0, 0.5), got {eps_bce}", key="train.eps_bce")
    m = np.asarray(T._value(mask_ref), dtype=np.float64)
    est = T.as_var(mask_est)
    p = est + (np.clip(est.value, eps_bce, 1.0 - eps_bce) - est.value)
    ll = m * T.log(p) + (1.0 - m) * T.log(1.0 - p)
    return -T.mean(ll)


# ---------------------------------------------------------------------------
# model construction


def model_config(cfg):
    return {k: v for k, v in cfg.items() if k.startswith(MODEL_KEYS_PREFIX)}


def build_model(cfg, bounds_center=(0.0, 0.0, 0.0), bounds_radius=2.0, lighting="known",
                light=None):
    """Fresh Scene whose learnable parts all live in one ParamStore."""
    store = ParamStore()
    seeds = np.random.SeedSequence(int(cfg["model.seed"])).spawn(4)
    rngs = [np.random.default_rng(s) for s in seeds]
    center = np.asarray(bounds_center, dtype=np.float64)
    sdf = SdfModel(store, n_spheres=cfg["model.n_spheres"], k=cfg["model.k"],
                   residual_sizes=tuple(cfg["model.residual_sizes"]),
                   encoding=cfg["model.residual_encoding"], rng=rngs[0], center=center,
                   radius=cfg["model.init_spread"] * bounds_radius,
                   init_radius=cfg["model.init_radius"])
    n_bases = cfg["model.n_bases"]
    bsdf = ReflectanceModel(store, n_bases=n_bases, basis_sizes=tuple(cfg["model.basis_sizes"]),
                            weight_sizes=(3, *cfg["model.weight_hidden"], n_bases),
                            weight_encoding=cfg["model.weight_encoding"], rng=rngs[1])
    if lighting == "learned":
        light = LearnedLightField(store, sizes=tuple(cfg["model.light_sizes"]),
                                  encoding=cfg["model.light_encoding"], rng=rngs[2])
    elif lighting != "known":
        raise ConfigError(f"unknown lighting mode {lighting!r}", key="lighting")
    occlusion = OcclusionField(store, sizes=tuple(cfg["model.occlusion_sizes"]),
                               encoding=cfg["model.occlusion_encoding"], rng=rngs[3])
    return Scene(sdf, bsdf, light, occlusion, bounds_center=tuple(center),
                 bounds_radius=float(bounds_radius), store=store)


def scene_extra(scene: Scene, cfg, lighting, lights=(), step=0):
    return {
        "model": model_config(cfg),
        "lighting": lighting,
        "gate": scene.sdf.gate,
        "bounds": {"center": list(map(float, scene.bounds_center)), "radius": scene.bounds_radius},
        "lights": [lt.to_dict() for lt in lights],
        "step": int(step),
    }


def load_model(path, light_index=0):
    """(Scene, AdamWState or None, extra) from a checkpoint written by ``fit``."""
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}", key="checkpoint")
    store, opt, extra = load_checkpoint(path)
    if "model" not in extra:
        raise ConfigError(f"{path}: checkpoint lacks a model description", key="model")
    cfg = dict(DEFAULTS)
    cfg.update(extra["model"])
    lights = [PointLight.from_dict(d) for d in extra.get("lights", [])]
    light = lights[light_index] if lights else None
    scene = build_model(cfg, extra["bounds"]["center"], extra["bounds"]["radius"],
                        extra["lighting"], light)
    if scene.store.segments != store.segments:
        raise ConfigError(f"{path}: parameter layout does not match its model description",
                          key="model")
    scene.store.values[:] = store.values
    scene.sdf.gate = float(extra.get("gate", 1.0))
    return scene, opt, extra


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    scene: Scene
    opt: AdamWState
    cfg: dict
    lighting: str
    step: int = 0
    frozen_prefixes: tuple = ()
    history: list = field(default_factory=list)

    @property
    def store(self) -> ParamStore:
        return self.scene.store


def make_state(cfg, dataset, scene=None, opt=None, step=0):
    lights = sorted({id(f.light): f.light for f in dataset.frames if f.light is not None}.values(),
                    key=lambda lt: tuple(lt.position))
    if dataset.lighting == "known" and not lights:
        raise ConfigError("dataset declares known lighting but no frame has a light", key="lights")
    if scene is None:
        scene = build_model(cfg, dataset.bounds_center, dataset.bounds_radius, dataset.lighting,
                            lights[0] if lights else None)
    if opt is None:
        opt = AdamWState(lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                         eps=cfg["train.eps"], weight_decay=cfg["train.weight_decay"],
                         lr_scale={scene.sdf.sketch_prefix: cfg["train.lr_sketch_scale"],
                                   f"{scene.sdf.sketch_prefix}.log_k":
                                       cfg["train.lr_sketch_scale"] * cfg["train.lr_k_factor"]})
    return TrainState(scene, opt, cfg, dataset.lighting, step)


def stage_of(cfg, step):
    if step < cfg["train.stage1_steps"]:
        return 1
    if cfg["train.stage3_start"] > 0 and step >= cfg["train.stage3_start"]:
        return 3
    return 2


def frozen_prefixes(state: TrainState, stage):
    """Segment prefixes that stay fixed at ``stage``."""
    sc = state.scene
    all_groups = {
        "sketch": sc.sdf.sketch_prefix,
        "residual": sc.sdf.residual_prefix,
        "bsdf": sc.bsdf.name,
        "light": getattr(sc.light, "name", None),
        "occlusion": sc.occlusion.name if sc.occlusion is not None else None,
    }
    live = {"sketch"}
    if stage >= 2:
        live |= {"residual", "bsdf"}
        if stage == 3 or state.cfg["train.stage3_start"] <= 0:
            if state.lighting == "learned":
                live.add("light")
            if state.cfg["train.visibility"] == "learned":
                live.add("occlusion")
    return tuple(p for g, p in all_groups.items() if p is not None and g not in live)


def _beta(cfg, step):
    b0, b1 = cfg["train.sil_beta"], cfg["train.sil_beta_final"]
    frac = min(step / max(cfg["train.steps"] - 1, 1), 1.0)
    return float(b0 * (b1 / b0) ** frac)


def _lr_factor(cfg, step):
    return float(cfg["train.lr_decay"] ** (step / max(cfg["train.steps"], 1)))


def sample_crop(rng, mask, size, mode):
    """Crop rectangle of ``size`` (clamped to the image); ``mask_bbox`` centres it on the object."""
    h, w = mask.shape
    cw, ch = min(size, w), min(size, h)
    if mode == "mask_bbox" and mask.any():
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        u_lo = int(np.clip(cols[0] - cw // 2, 0, w - cw))
        u_hi = int(np.clip(cols[-1] - cw // 2, 0, w - cw))
        v_lo = int(np.clip(rows[0] - ch // 2, 0, h - ch))
        v_hi = int(np.clip(rows[-1] - ch // 2, 0, h - ch))
    else:
        u_lo, u_hi, v_lo, v_hi = 0, w - cw, 0, h - ch
    u0 = int(rng.integers(u_lo, u_hi + 1))
    v0 = int(rng.integers(v_lo, v_hi + 1))
    jitter = rng.uniform(-0.5, 0.5, size=(cw * ch, 2))
    return CropSample(u0, v0, cw, ch, jitter)


def step_rng(seed, step):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))


def trace_cfg_of(cfg):
    return TraceConfig(hit_eps=cfg["trace.hit_eps"], max_iters=cfg["trace.max_iters"],
                       step_scale=cfg["trace.step_scale"])


def compute_losses(state: TrainState, frame, crop, rng, params, stage):
    """Weighted total loss (Var) and the per-term floats for one crop."""
    cfg = state.cfg
    sc = state.scene
    if frame.light is not None and state.lighting == "known":
        sc = sc.with_light(frame.light)
    rays = generate_rays(frame.camera, crop)
    clipped = clip_to_sphere(rays, sc.bounds_center, sc.bounds_radius)
    vv, uu = crop.pixels()
    mask = frame.mask[vv, uu]

    sil_cfg = SilhouetteConfig(samples=cfg["train.sil_samples"], alpha=cfg["train.sil_alpha"],
                               beta=_beta(cfg, state.step), jitter=True)
    est = silhouette_estimate(sc.sdf, clipped, sil_cfg, params, rng=rng, soft=True)
    l_sil = silhouette_loss(mask, est, cfg["train.eps_bce"])
    total = cfg["train.w_sil"] * l_sil
    terms = {"loss_sil": float(l_sil.value), "loss_photo": 0.0, "loss_occ": 0.0}
    if stage < 2:
        return total, terms

    tcfg = trace_cfg_of(cfg)
    hits = sphere_trace(sc.sdf, clipped, tcfg)
    idx = np.nonzero(hits.converged & (mask > 0.5))[0]
    if idx.size == 0:
        return total, terms
    x0 = hits.x[idx]
    val, g = sc.sdf.value_and_grad(x0, params)
    n_det = hits.normal[idx]
    x = T.Var(x0) - T.expand_dims(val, -1) * n_det
    n = T.normalize(g, eps=1e-18)
    pts = SurfacePoints(x, n, n_det)
    w_o = -rays.dirs[idx]
    vis_mode = cfg["train.visibility"]
    rgb = shade_direct(sc, pts, w_o, params, vis_mode, tcfg)
    ref = frame.image[vv[idx], uu[idx]]
    l_photo = photometric_loss(ref, rgb)
    total = total + cfg["train.w_photo"] * l_photo
    terms["loss_photo"] = float(l_photo.value)
    if vis_mode == "learned":
        with no_grad():
            w_i, _, dist = sample_direct(sc.light, x0, params)
        target = hard_visibility(sc.sdf, x0, w_i.value, dist, normal=n_det, cfg=tcfg)
        occ = sc.occlusion(T.Var(x0), T.Var(w_i.value), params)
        l_occ = silhouette_loss(target, occ, cfg["train.eps_bce"])
        total = total + cfg["train.w_occ"] * l_occ
        terms["loss_occ"] = float(l_occ.value)
    return total, terms


def train_step(state: TrainState, dataset):
    """One optimisation step on one random (frame, crop); returns a metrics record.

    A non-finite loss or gradient aborts the step and leaves all parameters
    untouched; the record then carries ``skipped`` and the offending frame/crop.
    """
    cfg = state.cfg
    t0 = time.perf_counter()
    rng = step_rng(cfg["train.seed"], state.step)
    fi = int(rng.integers(len(dataset.frames)))
    frame = dataset.frames[fi]
    crop = sample_crop(rng, frame.mask, cfg["train.crop"], cfg["train.crop_sampling"])
    stage = stage_of(cfg, state.step)
    state.scene.sdf.gate = 0.0 if stage == 1 else 1.0
    state.frozen_prefixes = frozen_prefixes(state, stage)
    store = state.store
    store.zero_grad()
    params = Params(store, record=True, frozen=state.frozen_prefixes)
    total, terms = compute_losses(state, frame, crop, rng, params, stage)
    record = {"step": state.step, "loss_total": float(total.value), **terms, "stage": stage}
    if not np.isfinite(record["loss_total"]):
        record.update(skipped=True, grad_norm=float("nan"), frame=frame.name,
                      crop=[crop.u0, crop.v0, crop.w, crop.h])
    else:
        if total.requires_grad:
            backward(total)
        gnorm = float(np.sqrt(np.sum(store.grads ** 2)))
        record["grad_norm"] = gnorm
        if not np.isfinite(gnorm):
            record.update(skipped=True, frame=frame.name, crop=[crop.u0, crop.v0, crop.w, crop.h])
        else:
            frozen = store.mask(state.frozen_prefixes)
            base_lr = state.opt.lr
            state.opt.lr = base_lr * _lr_factor(cfg, state.step)
            try:
                adamw_step(state.opt, store, frozen)
            finally:
                state.opt.lr = base_lr
    state.step += 1
    record["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
    state.history.append(record)
    return record


def checkpoint_name(step):
    return f"ckpt_{step:07d}.bin"


def latest_checkpoint(out_dir):
    if not os.path.isdir(out_dir):
        return None
    names = sorted(n for n in os.listdir(out_dir) if n.startswith("ckpt_") and n.endswith(".bin"))
    return os.path.join(out_dir, names[-1]) if names else None


def save_state(state: TrainState, dataset, path):
    lights = []
    for f in dataset.frames:
        if f.light is not None and not any(f.light is lt for lt in lights):
            lights.append(f.light)
    extra = scene_extra(state.scene, state.cfg, state.lighting, lights, state.step)
    extra["train_seed"] = state.cfg["train.seed"]
    save_checkpoint(path, state.store, state.opt, extra)


def fit(cfg, dataset, out_dir, resume=False, progress=None):
    """Run the schedule to ``train.steps``; writes checkpoints, ``final.bin`` and ``metrics.jsonl``.

    With ``resume`` the newest checkpoint in ``out_dir`` is restored (parameters,
    optimiser moments and step) and the loss trace continues from there.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "metrics.jsonl")
    state = None
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is not None:
            scene, opt, extra = load_model(ckpt)
            if extra["lighting"] != dataset.lighting:
                raise ConfigError(f"checkpoint lighting {extra['lighting']!r} does not match the "
                                  f"dataset ({dataset.lighting!r})", key="lighting")
            state = make_state(cfg, dataset, scene=scene, opt=opt, step=extra["step"])
            _truncate_log(log_path, state.step)
    if state is None:
        state = make_state(cfg, dataset)
        open(log_path, "w", encoding="utf-8").close()
    every = max(int(cfg["train.checkpoint_every"]), 1)
    with open(log_path, "a", encoding="utf-8") as log:
        while state.step < cfg["train.steps"]:
            rec = train_step(state, dataset)
            log.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(rec)
            if state.step % every == 0 or state.step == cfg["train.steps"]:
                log.flush()
                save_state(state, dataset, os.path.join(out_dir, checkpoint_name(state.step)))
    final = os.path.join(out_dir, "final.bin")
    save_state(state, dataset, final)
    return final, state


def _truncate_log(path, step):
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        keep = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] < step]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(keep)


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def loss_reduction(records, baseline_step=10):
    """Fractional drop of loss_total from ``baseline_step`` to the mean of the last 5% of steps."""
    base = next(r["loss_total"] for r in records if r["step"] >= baseline_step)
    tail = max(len(records) // 20, 1)
    end = float(np.mean([r["loss_total"] for r in records[-tail:]]))
    return 1.0 - end / base if base > 0 else math.nan
