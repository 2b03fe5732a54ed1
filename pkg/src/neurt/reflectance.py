"""Rusinkiewicz angles, the neural basis-BSDF mixture, and analytic BSDFs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp, Params, no_grad
from .diffcore import tape as T
from .errors import DegenerateError

HALF_VECTOR_EPS = 1e-8


@dataclass
class RusinkAngles:
    """Cosines of (theta_h, theta_d, phi_d); entries may be Vars or arrays.

    ``valid`` flags samples with both directions above the horizon and a
    well-defined half vector.
    """

    cos_theta_h: object
    cos_theta_d: object
    cos_phi_d: object
    valid: np.ndarray | None = None

    def stacked(self):
        return T.stack([T.as_var(self.cos_phi_d), T.as_var(self.cos_theta_h),
                        T.as_var(self.cos_theta_d)], axis=-1)


def _fallback_tangent(n):
    """A unit vector perpendicular to each n (used when the half vector equals n)."""
    helper = np.where(np.abs(n[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t = np.cross(n, helper)
    return t / np.linalg.norm(t, axis=-1, keepdims=True)


def rusink_angles(n, w_i, w_o, strict=False):
    """Half/difference angle cosines for batches of unit vectors (..., 3).

    The difference azimuth is measured in the frame that takes h to n:
    y_h = normalize(n x h), x_h = y_h x h.
    """
    n, w_i, w_o = T.as_var(n), T.as_var(w_i), T.as_var(w_o)
    squeeze = n.ndim == 1
    if squeeze:
        n, w_i, w_o = (T.reshape(v, (1, 3)) for v in (n, w_i, w_o))
    hsum = w_i + w_o
    hlen = np.linalg.norm(hsum.value, axis=-1)
    degenerate = hlen < HALF_VECTOR_EPS
    if strict and degenerate.any():
        raise DegenerateError("w_i and w_o are antipodal: half vector undefined")
    h = T.normalize(hsum, eps=1e-20)
    cos_th = T.dot(n, h)
    cos_td = T.dot(w_i, h)
    nxh = T.cross(n, h)
    flat = np.linalg.norm(nxh.value, axis=-1) < 1e-7
    if flat.any():
        nxh = T.where(flat[:, None], _fallback_tangent(n.value), nxh)
    y_h = T.normalize(nxh, eps=1e-24)
    x_h = T.cross(y_h, h)
    px = T.dot(w_i, x_h)
    py = T.dot(w_i, y_h)
    cos_pd = px / T.sqrt(px * px + py * py + 1e-18)
    valid = (~degenerate) & (T._value(T.dot(n, w_i)) > 0) & (T._value(T.dot(n, w_o)) > 0)
    out = RusinkAngles(clip_unit(cos_th), clip_unit(cos_td), clip_unit(cos_pd), valid)
    if squeeze:
        out = RusinkAngles(out.cos_theta_h[0], out.cos_theta_d[0], out.cos_phi_d[0], valid[0])
    return out


def clip_unit(v):
    return T.clip(v, -1.0, 1.0)


# ---------------------------------------------------------------------------
# neural mixture


class ReflectanceModel:
    """M basis BSDFs (angles -> RGB) mixed by softmax weights over position."""

    def __init__(self, store, n_bases=8, basis_sizes=(3, 64, 64, 64, 3), weight_sizes=None,
                 weight_encoding=6, rng=None, name="bsdf", gain_init=1.0):
        rng = np.random.default_rng(1) if rng is None else rng
        self.store = store
        self.name = name
        self.m = int(n_bases)
        self.bases = [Mlp(store, f"{name}.basis{i}", list(basis_sizes), "softplus", rng=rng)
                      for i in range(self.m)]
        for i in range(self.m):
            store.add(f"{name}.basis{i}.gain", np.log(np.expm1(gain_init)))
        if weight_sizes is None:
            weight_sizes = (3, 64, 64, 64, self.m)
        self.weight_mlp = Mlp(store, f"{name}.weights", list(weight_sizes), "softplus",
                              encoding=weight_encoding, rng=rng)

    def params(self, record=False, **kw):
        return Params(self.store, record=record, **kw)

    def basis(self, i, angles_stacked, params):
        """(P, 3) non-negative reflectance of basis i: gain * sigmoid(MLP(angles))."""
        raw = self.bases[i](angles_stacked, params)
        gain = T.softplus(params(f"{self.name}.basis{i}.gain"))
        return T.sigmoid(raw) * gain

    def weights(self, x, params):
        return T.softmax(self.weight_mlp(T.as_var(x), params), axis=-1)

    def eval(self, x, angles: RusinkAngles, params, logits=None):
        """sum_i w_i(x) b_i(angles); ``logits`` overrides the weight MLP (testing/editing)."""
        a = angles.stacked()
        if a.ndim == 1:
            a = T.reshape(a, (1, 3))
        w = T.softmax(T.as_var(logits), axis=-1) if logits is not None else self.weights(x, params)
        out = None
        for i in range(self.m):
            term = T.expand_dims(w[:, i], -1) * self.basis(i, a, params)
            out = term if out is None else out + term
        return out

    def value(self, x, n, w_i, w_o, params):
        return self.eval(x, rusink_angles(n, w_i, w_o), params)


def eval_bsdf(model: ReflectanceModel, x, angles: RusinkAngles, params=None):
    if params is None:
        params = model.params()
    with no_grad():
        return model.eval(np.atleast_2d(x), angles, params).value


# ---------------------------------------------------------------------------
# analytic BSDFs


@dataclass
class AnalyticBsdf:
    """``lambertian`` (albedo) or ``phong`` (diffuse + specular lobe)."""

    variant: str = "lambertian"
    albedo: tuple = (0.8, 0.8, 0.8)
    specular: tuple = (0.0, 0.0, 0.0)
    exponent: float = 32.0

    def eval(self, n, w_i, w_o):
        n, w_i, w_o = (np.atleast_2d(T._value(v)) for v in (n, w_i, w_o))
        diffuse = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64) / np.pi, (len(n), 3))
        if self.variant == "lambertian":
            return diffuse.copy()
        if self.variant != "phong":
            raise ValueError(f"unknown analytic BSDF {self.variant!r}")
        r = 2.0 * np.sum(w_i * n, axis=-1, keepdims=True) * n - w_i
        c = np.clip(np.sum(r * w_o, axis=-1, keepdims=True), 0.0, None)
        return diffuse + np.asarray(self.specular) * c ** self.exponent

    def value(self, x, n, w_i, w_o, params=None):
        return T.Var(self.eval(n, w_i, w_o))

    def to_dict(self):
        return {"variant": self.variant, "albedo": list(self.albedo),
                "specular": list(self.specular), "exponent": self.exponent}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("variant", "lambertian"), tuple(d.get("albedo", (0.8, 0.8, 0.8))),
                   tuple(d.get("specular", (0.0, 0.0, 0.0))), float(d.get("exponent", 32.0)))


def eval_analytic(b: AnalyticBsdf, n, w_i, w_o):
    out = b.eval(n, w_i, w_o)
    return out if np.ndim(n) == 2 else out[0]


@dataclass
class RegionBsdf:
    """Piecewise analytic BSDF: ``labels(x)`` picks one of ``parts`` per point."""

    parts: list
    labels: object

    def value(self, x, n, w_i, w_o, params=None):
        x, n, w_i, w_o = (np.atleast_2d(T._value(v)) for v in (x, n, w_i, w_o))
        lab = self.labels(x)
        out = np.zeros((len(lab), 3))
        for j, part in enumerate(self.parts):
            sel = lab == j
            if sel.any():
                out[sel] = part.eval(n[sel], w_i[sel], w_o[sel])
        return T.Var(out)


# ---------------------------------------------------------------------------
# sampling


def local_frame(n):
    t = _fallback_tangent(n)
    b = np.cross(n, t)
    return t, b


def sample_bsdf_direction(rng, n, u=None):
    """Cosine-weighted hemisphere directions about n with pdf (n.w)/pi.

    ``u`` may supply the (P, 2) uniforms directly; otherwise they come from rng.
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    if u is None:
        u = rng.uniform(size=(len(n), 2))
    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    z = np.sqrt(np.maximum(1.0 - u[:, 0], 0.0))
    t, b = local_frame(n)
    d = (r * np.cos(phi))[:, None] * t + (r * np.sin(phi))[:, None] * b + z[:, None] * n
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    # keep strictly above the horizon
    z = np.maximum(np.sum(d * n, axis=-1), 1e-12)
    return d, z / np.pi


def cosine_pdf(n, w):
    return np.maximum(np.sum(np.atleast_2d(n) * np.atleast_2d(w), axis=-1), 0.0) / np.pi


def weight_maps(model: ReflectanceModel, points):
    """(P, M) mixture weights at surface points, for per-basis visualisation."""
    with no_grad():
        return model.weights(np.atleast_2d(points), model.params()).value
