"""Post-training scene edits: wrappers around a trained SDF and BSDF.

Edits never modify the ParamStore; they return new evaluators.  An edit
script is a JSON list of ``{"op": ..., "params": {...}}`` applied in order::

    translate       {"delta": [dx, dy, dz]}
    twist           {"axis": [0, 1, 0], "rate": 1.5, "center": [0, 0, 0]}
    intersect       {"shape": {...}}
    subtract        {"shape": {...}}
    flatten         {"normal": [0, 1, 0], "offset": 0.2, "clamp": 0.3}
    region          {"region": {...}, "edit": {"op": ..., "params": {...}}}
    region_override {"region": {...}, "bsdf": {...}}
    band            {"axis": [0, 0, 1], "period": 0.2, "duty": 0.5, "bsdf": {...}}
    checkerboard    {"cell": 0.25, "bsdf": {...}}

Shapes: ``{"type": "sphere", "center", "radius"}``, ``{"type": "box", "center",
"half_size"}``, ``{"type": "plane", "normal", "offset"}`` or ``{"type": "self"}``
(the unedited model).  Regions: ``{"type": "halfspace", "normal", "offset"}``
(n.x > offset), ``{"type": "sphere", "center", "radius"}``, ``{"type": "box",
"min", "max"}``.  A ``bsdf`` entry is an analytic BSDF description such as
``{"variant": "lambertian", "albedo": [0.9, 0.3, 0.1]}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import no_grad
from .diffcore import tape as T
from .errors import ConfigError
from .geometry import SdfField
from .reflectance import AnalyticBsdf
from .render import Scene


def _vec(v, key):
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ConfigError(f"{key} must be a 3-vector, got {v!r}", key=key)
    return a


def _unit(v, key):
    a = _vec(v, key)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise ConfigError(f"{key} must be non-zero", key=key)
    return a / n


# ---------------------------------------------------------------------------
# regions and primitive shapes


@dataclass(frozen=True)
class Region:
    kind: str
    a: tuple
    b: object

    def __call__(self, x):
        x = np.atleast_2d(T._value(x))
        if self.kind == "halfspace":
            return x @ np.asarray(self.a) > self.b
        if self.kind == "sphere":
            return np.linalg.norm(x - np.asarray(self.a), axis=-1) < self.b
        lo, hi = np.asarray(self.a), np.asarray(self.b)
        return np.all((x >= lo) & (x <= hi), axis=-1)

    @classmethod
    def from_dict(cls, d):
        kind = d.get("type")
        if kind == "halfspace":
            return cls(kind, tuple(_unit(d["normal"], "region.normal")), float(d.get("offset", 0.0)))
        if kind == "sphere":
            return cls(kind, tuple(_vec(d["center"], "region.center")), float(d["radius"]))
        if kind == "box":
            return cls(kind, tuple(_vec(d["min"], "region.min")), tuple(_vec(d["max"], "region.max")))
        raise ConfigError(f"unknown region type {kind!r}", key="region.type")


def shape_value(shape, x):
    """Exact signed distance of a primitive (dict) at Var points x."""
    kind = shape.get("type")
    if kind == "sphere":
        c = _vec(shape["center"], "shape.center")
        return T.norm(x - c, axis=-1, eps=1e-18) - float(shape["radius"])
    if kind == "plane":
        n = _unit(shape["normal"], "shape.normal")
        return T.vsum(x * n, axis=-1) - float(shape.get("offset", 0.0))
    if kind == "box":
        c = _vec(shape["center"], "shape.center")
        half = _vec(shape["half_size"], "shape.half_size")
        q = T.abs_(x - c) - half
        outside = T.norm(T.maximum(q, 0.0), axis=-1, eps=1e-18)
        inside = T.minimum(T.vmax(q, axis=-1), 0.0)
        return outside + inside
    raise ConfigError(f"unknown shape type {kind!r}", key="shape.type")


# ---------------------------------------------------------------------------
# SDF edits: each maps an evaluator f(x, params) to a new one

SELF_MARGIN = 1e-3  # dilation of the subtracted copy in subtract(self), scene units


@dataclass
class Translate:
    delta: np.ndarray
    inflation: float = 1.0

    @property
    def is_identity(self):
        return not np.any(self.delta)

    def wrap(self, f, base):
        return lambda x, p: f(T.as_var(x) - self.delta, p)


@dataclass
class Twist:
    axis: np.ndarray
    rate: float
    center: np.ndarray
    radius: float = 2.0

    @property
    def inflation(self):
        return 1.0 + abs(self.rate) * self.radius

    @property
    def is_identity(self):
        return self.rate == 0.0

    def wrap(self, f, base):
        a = self.axis

        def g(x, p):
            y = T.as_var(x) - self.center
            h = T.vsum(y * a, axis=-1, keepdims=True)
            th = h * self.rate
            c, s = T.cos(th), T.sin(th)
            rot = y * c + T.cross(np.broadcast_to(a, y.shape), y) * s + (h * (1.0 - c)) * a
            return f(rot + self.center, p)

        return g


@dataclass
class Boolean:
    op: str
    shape: dict
    inflation: float = 1.0

    def wrap(self, f, base):
        def other(x, p):
            if self.shape.get("type") == "self":
                return base.value(x, p)
            return shape_value(self.shape, x)

        if self.op == "intersect":
            return lambda x, p: T.maximum(f(x, p), other(T.as_var(x), p))
        # max(f, -f) = |f| still vanishes on the original surface; subtracting a
        # slightly dilated copy keeps the regularised difference empty
        margin = SELF_MARGIN if self.shape.get("type") == "self" else 0.0
        return lambda x, p: T.maximum(f(x, p), margin - other(T.as_var(x), p))


@dataclass
class Flatten:
    """Collapses the slab 0 < n.x - offset < clamp onto the plane (a non-expansive map)."""

    normal: np.ndarray
    offset: float
    clamp: float
    inflation: float = 1.0

    def wrap(self, f, base):
        def g(x, p):
            x = T.as_var(x)
            h = T.vsum(x * self.normal, axis=-1, keepdims=True) - self.offset
            return f(x - T.clip(h, 0.0, self.clamp) * self.normal, p)

        return g


@dataclass
class Restricted:
    """Applies ``inner`` only where ``region`` holds; the seam makes the field
    discontinuous, so the step is additionally halved."""

    region: Region
    inner: object

    @property
    def inflation(self):
        return 2.0 * self.inner.inflation

    @property
    def is_identity(self):
        return getattr(self.inner, "is_identity", False)

    def wrap(self, f, base):
        edited = self.inner.wrap(f, base)

        def g(x, p):
            sel = self.region(x)
            out = f(x, p)
            if sel.any():
                out = T.where(sel, edited(x, p), out)
            return out

        return g


class EditedSdf(SdfField):
    """A trained field seen through an ordered list of edits."""

    def __init__(self, base: SdfField, edits):
        self.base = base
        self.edits = list(edits)
        self.store = base.store
        f = base.value
        for e in self.edits:
            f = e.wrap(f, base)
        self._f = f

    @property
    def gate(self):
        return getattr(self.base, "gate", 0.0)

    @property
    def inflation(self):
        return float(np.prod([e.inflation for e in self.edits])) if self.edits else 1.0

    def value(self, x, params):
        return self._f(T.as_var(x), params)

    def lipschitz(self):
        return self.base.lipschitz() * self.inflation


def apply_sdf_edit(model: SdfField, edits):
    """Composed evaluator; no-op edits are dropped and an empty list returns ``model`` itself."""
    edits = [e for e in edits if not getattr(e, "is_identity", False)]
    return EditedSdf(model, edits) if edits else model


# ---------------------------------------------------------------------------
# BSDF edits


@dataclass
class RegionOverride:
    region: Region
    bsdf: object

    def matches(self, x):
        return self.region(x)


@dataclass
class Band:
    axis: np.ndarray
    period: float
    bsdf: object
    duty: float = 0.5

    def matches(self, x):
        h = np.atleast_2d(T._value(x)) @ self.axis / self.period
        return (h - np.floor(h)) < self.duty


@dataclass
class Checkerboard:
    cell: float
    bsdf: object

    def matches(self, x):
        idx = np.floor(np.atleast_2d(T._value(x)) / self.cell).astype(np.int64)
        return (idx.sum(axis=-1) % 2) == 1


class EditedBsdf:
    """First matching edit supplies the reflectance; unmatched points use the base model."""

    def __init__(self, base, edits):
        self.base = base
        self.edits = list(edits)
        self.name = getattr(base, "name", "bsdf")

    def value(self, x, n, w_i, w_o, params=None):
        out = self.base.value(x, n, w_i, w_o, params)
        for e in reversed(self.edits):
            sel = e.matches(x)
            if sel.any():
                repl = e.bsdf.value(x, n, w_i, w_o, params)
                out = T.where(sel[:, None], repl, out)
        return out

    def __getattr__(self, item):
        return getattr(self.base, item)


def apply_bsdf_edit(refl, edits, x, n, w_i, w_o, params=None):
    """Edited reflectance values (P, 3) at explicit points and directions."""
    if params is None and hasattr(refl, "params"):
        params = refl.params()
    with no_grad():
        return EditedBsdf(refl, edits).value(np.atleast_2d(x), np.atleast_2d(n), np.atleast_2d(w_i),
                                             np.atleast_2d(w_o), params).value


# ---------------------------------------------------------------------------
# edit scripts

SDF_OPS = ("translate", "twist", "intersect", "subtract", "flatten", "region")
BSDF_OPS = ("region_override", "band", "checkerboard")


def _param(p, key, op, default=None):
    if key in p:
        return p[key]
    if default is not None:
        return default
    raise ConfigError(f"edit {op!r}: missing parameter {key!r}", key=f"{op}.{key}")


def _bsdf_of(d, op):
    if not isinstance(d, dict):
        raise ConfigError(f"edit {op!r}: 'bsdf' must be an object", key=f"{op}.bsdf")
    return AnalyticBsdf.from_dict(d)


def parse_sdf_edit(entry, bounds_radius=2.0):
    op, p = entry.get("op"), entry.get("params", {})
    if op == "translate":
        return Translate(_vec(_param(p, "delta", op), "translate.delta"))
    if op == "twist":
        return Twist(_unit(_param(p, "axis", op, [0.0, 1.0, 0.0]), "twist.axis"),
                     float(_param(p, "rate", op)),
                     _vec(_param(p, "center", op, [0.0, 0.0, 0.0]), "twist.center"),
                     float(p.get("radius", bounds_radius)))
    if op in ("intersect", "subtract"):
        shape = _param(p, "shape", op)
        if shape.get("type") not in ("sphere", "plane", "box", "self"):
            raise ConfigError(f"unknown shape type {shape.get('type')!r}", key=f"{op}.shape.type")
        return Boolean(op, shape)
    if op == "flatten":
        return Flatten(_unit(_param(p, "normal", op, [0.0, 1.0, 0.0]), "flatten.normal"),
                       float(_param(p, "offset", op, 0.0)), float(_param(p, "clamp", op, 1e9)))
    if op == "region":
        return Restricted(Region.from_dict(_param(p, "region", op)),
                          parse_sdf_edit(_param(p, "edit", op), bounds_radius))
    raise ConfigError(f"unknown SDF edit op {op!r}", key="op")


def parse_bsdf_edit(entry):
    op, p = entry.get("op"), entry.get("params", {})
    if op == "region_override":
        return RegionOverride(Region.from_dict(_param(p, "region", op)), _bsdf_of(_param(p, "bsdf", op), op))
    if op == "band":
        return Band(_unit(_param(p, "axis", op, [0.0, 0.0, 1.0]), "band.axis"),
                    float(_param(p, "period", op)), _bsdf_of(_param(p, "bsdf", op), op),
                    float(p.get("duty", 0.5)))
    if op == "checkerboard":
        return Checkerboard(float(_param(p, "cell", op)), _bsdf_of(_param(p, "bsdf", op), op))
    raise ConfigError(f"unknown BSDF edit op {op!r}", key="op")


def parse_script(entries, bounds_radius=2.0):
    """(sdf_edits, bsdf_edits) from a list of {op, params}."""
    if not isinstance(entries, list):
        raise ConfigError("edit script must be a JSON list of {op, params}", key="edit")
    sdf_edits, bsdf_edits = [], []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "op" not in entry:
            raise ConfigError(f"edit[{i}] must be an object with an 'op'", key=f"edit[{i}]")
        if entry["op"] in BSDF_OPS:
            bsdf_edits.append(parse_bsdf_edit(entry))
        else:
            sdf_edits.append(parse_sdf_edit(entry, bounds_radius))
    return sdf_edits, bsdf_edits


def load_script(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid edit script ({exc})", key="edit") from exc


def apply_edits(scene: Scene, entries):
    """Scene with edited geometry and reflectance; empty scripts return ``scene`` unchanged."""
    sdf_edits, bsdf_edits = parse_script(entries, scene.bounds_radius)
    if not sdf_edits and not bsdf_edits:
        return scene
    sdf = apply_sdf_edit(scene.sdf, sdf_edits)
    bsdf = EditedBsdf(scene.bsdf, bsdf_edits) if bsdf_edits else scene.bsdf
    store = scene.store if scene.store is not None else scene.sdf.store
    return replace(scene, sdf=sdf, bsdf=bsdf, store=store)
