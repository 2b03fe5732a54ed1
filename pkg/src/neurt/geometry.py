"""Two-level signed distance fields, sphere tracing and silhouette estimation.

The sketch is a smooth minimum over transformed spheres,

    sketch(x) = -(1/k) * log(sum_i exp(-k * (||A_i x - c_i|| - r_i)))

and the full field adds a gated MLP residual.  Radii are stored through a
softplus and k through a log so both stay positive under optimisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp, Params, no_grad
from .diffcore import tape as T
from .errors import DegenerateError


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# rays and hits


@dataclass
class Rays:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(self.dirs, dtype=np.float64))
        n = len(self.origins)
        self.t_near = np.broadcast_to(np.asarray(self.t_near, dtype=np.float64), (n,)).copy()
        self.t_far = np.broadcast_to(np.asarray(self.t_far, dtype=np.float64), (n,)).copy()

    def __len__(self):
        return len(self.origins)

    def at(self, t):
        return self.origins + np.asarray(t)[..., None] * self.dirs

    def subset(self, idx):
        return Rays(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx])

    @classmethod
    def single(cls, origin, direction, t_near=0.0, t_far=1e3):
        return cls(np.asarray(origin)[None], np.asarray(direction)[None], t_near, t_far)


def clip_to_sphere(rays: Rays, center, radius):
    """Tighten [t_near, t_far] to the part of each ray inside a bounding sphere.

    Rays that miss get t_near > t_far.
    """
    oc = rays.origins - np.asarray(center)
    b = np.einsum("ij,ij->i", oc, rays.dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    lo = np.where(ok, np.maximum(rays.t_near, -b - root), np.inf)
    hi = np.where(ok, np.minimum(rays.t_far, -b + root), -np.inf)
    return Rays(rays.origins, rays.dirs, lo, hi)


@dataclass
class Hits:
    t: np.ndarray
    x: np.ndarray
    normal: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class TraceConfig:
    hit_eps: float = 1e-4
    max_iters: int = 128
    step_scale: float = 0.9


@dataclass
class SilhouetteConfig:
    samples: int = 64
    alpha: float = 50.0
    beta: float = 100.0
    jitter: bool = True


# ---------------------------------------------------------------------------
# fields


class SdfField:
    """Interface shared by learned and edited distance fields.

    Subclasses implement ``value``; ``value_and_grad`` defaults to reverse
    mode w.r.t. the query points (gradient not differentiable w.r.t. params).
    """

    store = None

    def params(self, record=False, **kw):
        return Params(self.store, record=record, **kw)

    def value(self, x, params):
        raise NotImplementedError

    def value_and_grad(self, x, params):
        with T.enable_grad():
            xv = T.Var(T._value(x), requires_grad=True)
            val = self.value(xv, params)
            g = T.grad(val, [xv])[0]
        return val, T.Var(g)

    def lipschitz(self) -> float:
        return 1.0

    def evaluate(self, x):
        """Plain numpy evaluation, no recording."""
        with no_grad():
            return self.value(np.asarray(x, dtype=np.float64), self.params()).value


class SdfModel(SdfField):
    """Sphere sketch plus gated MLP residual, parameters held in ``store``."""

    def __init__(self, store, n_spheres=64, k=32.0, residual_sizes=(3, 128, 128, 128, 128, 1),
                 encoding=6, gate=0.0, rng=None, center=(0.0, 0.0, 0.0), radius=1.0,
                 init_radius=0.1, name="sdf"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.store = store
        self.name = name
        self.n = int(n_spheres)
        self.gate = float(gate)
        d = rng.normal(size=(self.n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        u = rng.uniform(size=(self.n, 1)) ** (1.0 / 3.0)
        centers = np.asarray(center) + radius * d * u
        store.add(f"{name}.sketch.centers", centers)
        store.add(f"{name}.sketch.radii", np.full(self.n, inv_softplus(init_radius)))
        store.add(f"{name}.sketch.transforms", np.tile(np.eye(3), (self.n, 1, 1)))
        store.add(f"{name}.sketch.log_k", np.log(k))
        self.residual = Mlp(store, f"{name}.residual", list(residual_sizes), "softplus",
                            encoding=encoding, rng=rng, zero_last=True)

    @property
    def sketch_prefix(self):
        return f"{self.name}.sketch"

    @property
    def residual_prefix(self):
        return f"{self.name}.residual"

    def set_spheres(self, centers, radii, transforms=None, k=None):
        """Overwrite the sketch with explicit spheres (the first len(radii) slots)."""
        centers = np.asarray(centers, dtype=np.float64)
        m = len(centers)
        c = self.store[f"{self.name}.sketch.centers"].copy()
        r = self.store[f"{self.name}.sketch.radii"].copy()
        c[:m] = centers
        r[:m] = inv_softplus(np.asarray(radii, dtype=np.float64))
        self.store[f"{self.name}.sketch.centers"] = c
        self.store[f"{self.name}.sketch.radii"] = r
        if transforms is not None:
            a = self.store[f"{self.name}.sketch.transforms"].copy()
            a[:m] = transforms
            self.store[f"{self.name}.sketch.transforms"] = a
        if k is not None:
            self.store[f"{self.name}.sketch.log_k"] = np.log(k)

    def sketch_terms(self, x, params):
        """Per-sphere signed distances s_i (P, N) plus pieces reused by the gradient."""
        c = params(f"{self.name}.sketch.centers")
        r = T.softplus(params(f"{self.name}.sketch.radii"))
        a = params(f"{self.name}.sketch.transforms")
        y = T.einsum("nij,pj->pni", a, x)
        diff = y - c
        dist = T.norm(diff, axis=-1, eps=1e-18)
        return dist - r, diff, dist, a

    def k(self, params):
        return T.exp(params(f"{self.name}.sketch.log_k"))

    def sketch(self, x, params):
        x = T.as_var(x)
        s, _, _, _ = self.sketch_terms(x, params)
        k = self.k(params)
        return -T.logsumexp(-k * s, axis=1) / k

    def value(self, x, params):
        x = T.as_var(x)
        out = self.sketch(x, params)
        if self.gate != 0.0:
            out = out + self.gate * self.residual(x, params)[:, 0]
        return out

    def value_and_grad(self, x, params):
        """Value (P,) and spatial gradient (P, 3), both differentiable w.r.t. parameters."""
        x = T.as_var(x)
        s, diff, dist, a = self.sketch_terms(x, params)
        k = self.k(params)
        val = -T.logsumexp(-k * s, axis=1) / k
        w = T.softmax(-k * s, axis=1)
        unit = diff / T.expand_dims(dist, -1)
        per_sphere = T.einsum("pni,nij->pnj", unit, a)
        g = T.einsum("pn,pnj->pj", w, per_sphere)
        if self.gate != 0.0:
            r, jac = self.residual.forward_with_jacobian(x, params)
            val = val + self.gate * r[:, 0]
            g = g + self.gate * jac[:, :, 0]
        return val, g

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.float64)
        c = self.store[f"{self.name}.sketch.centers"]
        r = np.logaddexp(0.0, self.store[f"{self.name}.sketch.radii"])
        a = self.store[f"{self.name}.sketch.transforms"]
        k = float(np.exp(self.store[f"{self.name}.sketch.log_k"]))
        y = (x @ a.reshape(-1, 3).T).reshape(len(x), self.n, 3)
        z = -k * (np.sqrt(np.sum((y - c) ** 2, axis=-1) + 1e-18) - r)
        m = z.max(axis=1)
        out = -(np.log(np.exp(z - m[:, None]).sum(axis=1)) + m) / k
        if self.gate != 0.0:
            out = out + self.gate * self.residual.evaluate(x)[:, 0]
        return out

    def lipschitz(self) -> float:
        a = self.store[f"{self.name}.sketch.transforms"]
        return float(np.linalg.norm(a, ord=2, axis=(1, 2)).max())

    def sphere_parameters(self):
        return (self.store[f"{self.name}.sketch.centers"].copy(),
                np.logaddexp(0.0, self.store[f"{self.name}.sketch.radii"]),
                self.store[f"{self.name}.sketch.transforms"].copy(),
                float(np.exp(self.store[f"{self.name}.sketch.log_k"])))


def sketch_sdf(x, centers, radii, transforms=None, k=32.0):
    """Direct numpy smooth-min of transformed spheres (no parameter store)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    if transforms is None:
        transforms = np.tile(np.eye(3), (len(centers), 1, 1))
    y = np.einsum("nij,pj->pni", transforms, x)
    s = np.linalg.norm(y - centers, axis=-1) - radii
    z = -k * s
    m = z.max(axis=1, keepdims=True)
    return -(np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]) / k


def step_factor(field: SdfField, cfg: TraceConfig) -> float:
    """Conservative step multiplier: step_scale / Lipschitz bound, halved with an active residual."""
    f = cfg.step_scale / max(field.lipschitz(), 1e-12)
    if getattr(field, "gate", 0.0) != 0.0:
        f *= 0.5
    return f


# ---------------------------------------------------------------------------
# operations


def sdf(model: SdfField, x):
    x = np.asarray(x, dtype=np.float64)
    out = model.evaluate(np.atleast_2d(x))
    return out if x.ndim == 2 else float(out[0])


def normal(model: SdfField, x):
    """Unit gradient direction at x, via reverse mode w.r.t. the query point."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.atleast_2d(x)
    with no_grad():
        params = model.params()
    xv = T.Var(pts, requires_grad=True)
    g = T.grad(model.value(xv, params), [xv])[0]
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(n < 1e-9):
        raise DegenerateError("vanishing SDF gradient: normal undefined")
    out = g / n
    return out if x.ndim == 2 else out[0]


def sphere_trace(model: SdfField, rays: Rays, cfg: TraceConfig | None = None) -> Hits:
    """March each ray by the (scaled) field value until |SDF| < hit_eps.

    Misses are values: rays leaving [t_near, t_far] or running out of
    iterations come back with ``converged == False``.  A ray that starts
    inside the solid hits at t_near.
    """
    cfg = cfg or TraceConfig()
    n = len(rays)
    factor = step_factor(model, cfg)
    t_start = np.where(np.isfinite(rays.t_near), rays.t_near, 0.0)
    t = t_start.copy()
    active = rays.t_near <= rays.t_far
    hit = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    with no_grad():
        params = model.params()
        for _ in range(cfg.max_iters):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            pts = rays.origins[idx] + t[idx, None] * rays.dirs[idx]
            d = model.evaluate(pts)
            iters[idx] += 1
            done = np.abs(d) < cfg.hit_eps
            hit[idx[done]] = True
            step_idx = idx[~done]
            t[step_idx] += factor * d[~done]
            gone = t[step_idx] > rays.t_far[step_idx]
            inside = t[step_idx] < t_start[step_idx]
            t[step_idx[inside]] = t_start[step_idx[inside]]
            hit[step_idx[inside]] = True
            active[idx[done]] = False
            active[step_idx[gone | inside]] = False
    x = rays.origins + t[:, None] * rays.dirs
    nrm = np.zeros((n, 3))
    if hit.any():
        with no_grad():
            _, g = model.value_and_grad(x[hit], params)
        g = g.value
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        ok = gn[:, 0] > 1e-9
        nrm[hit] = np.where(ok[:, None], g / np.maximum(gn, 1e-12), 0.0)
        sub = np.nonzero(hit)[0]
        hit[sub[~ok]] = False
    return Hits(t=t, x=x, normal=nrm, converged=hit, iterations=iters)


def surface_point(model: SdfField, rays: Rays, hits: Hits, idx, params):
    """x* = x0 - SDF(x0) * n_detached at the marched points of ``idx``.

    The marched t is a constant; this one-step reparameterisation carries
    parameter gradients to the surface location.
    """
    x0 = hits.x[idx]
    val = model.value(x0, params)
    return T.Var(x0) - T.expand_dims(val, -1) * hits.normal[idx]


def ray_samples(rays: Rays, count, rng=None):
    """Stratified sample distances (R, count) over [t_near, t_far]; jittered when rng is given."""
    lo = np.where(np.isfinite(rays.t_near), rays.t_near, 0.0)
    hi = np.where(np.isfinite(rays.t_far), rays.t_far, 0.0)
    span = np.maximum(hi - lo, 0.0)
    u = (np.arange(count) + 0.5) / count
    u = np.broadcast_to(u, (len(rays), count))
    if rng is not None:
        u = (np.arange(count) + rng.uniform(size=(len(rays), count))) / count
    return lo[:, None] + span[:, None] * u


def min_sdf_along_rays(model: SdfField, rays: Rays, params, cfg: SilhouetteConfig, rng=None,
                       soft=True):
    """Minimum of the field over ray samples; soft-min with temperature beta when ``soft``."""
    ts = ray_samples(rays, cfg.samples, rng if cfg.jitter else None)
    pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    vals = model.value(pts.reshape(-1, 3), params).reshape(len(rays), cfg.samples)
    if soft:
        m = -T.logsumexp(-cfg.beta * vals, axis=1) / cfg.beta
    else:
        m = T.vmin(vals, axis=1)
    valid = rays.t_near <= rays.t_far
    if not valid.all():
        m = T.where(valid, m, 1e3)
    return m


def silhouette_estimate(model: SdfField, rays: Rays, cfg: SilhouetteConfig | None = None,
                        params=None, rng=None, soft=False):
    """logistic(-alpha * min SDF along the ray); ~1 where the ray meets the surface."""
    cfg = cfg or SilhouetteConfig()
    if params is None:
        params = model.params()
    m = min_sdf_along_rays(model, rays, params, cfg, rng=rng, soft=soft)
    return T.sigmoid(-cfg.alpha * m)


# ---------------------------------------------------------------------------
# mesh export


def extract_mesh(model: SdfField, center=(0.0, 0.0, 0.0), radius=1.5, resolution=128,
                 chunk=65536):
    """Zero level set by marching cubes over a cube of half-width ``radius``."""
    from skimage.measure import marching_cubes

    axis = np.linspace(-radius, radius, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3) + center
    vals = np.concatenate([model.evaluate(grid[i:i + chunk]) for i in range(0, len(grid), chunk)])
    vals = vals.reshape(resolution, resolution, resolution)
    if vals.min() > 0 or vals.max() < 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    spacing = (axis[1] - axis[0],) * 3
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=spacing)
    return verts - radius + np.asarray(center), faces


def write_obj(path, verts, faces):
    with open(path, "w", encoding="utf-8") as fh:
        for v in verts:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
