"""Point lights, the learned light field, and visibility (hard and learned)."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp, Params
from .diffcore import tape as T
from .errors import ConfigError, DegenerateError
from .geometry import Rays, TraceConfig, sphere_trace

FALLBACK_DIRECTION = np.array([0.0, 0.0, 1.0])
INFINITE = np.inf


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(3)
        if np.any(self.intensity < 0):
            raise ConfigError("point light intensity must be non-negative", key="intensity")

    def to_dict(self):
        return {"light_position": self.position.tolist(), "intensity": self.intensity.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["light_position"], d["intensity"])
        except KeyError as exc:
            raise ConfigError(f"light entry missing field {exc.args[0]!r}", key=exc.args[0]) from exc


class LearnedLightField:
    """MLP x -> (direction logits, sqrt-intensity); intensity is the square (>= 0, zero at 0)."""

    def __init__(self, store, sizes=(3, 64, 64, 64, 6), encoding=0, rng=None, name="light",
                 intensity_init=1.5):
        rng = np.random.default_rng(2) if rng is None else rng
        self.store = store
        self.name = name
        bias = np.zeros(sizes[-1])
        bias[2] = 1.0
        bias[3:] = intensity_init
        self.mlp = Mlp(store, f"{name}.field", list(sizes), "softplus", encoding=encoding, rng=rng,
                       last_bias=bias, init_scale=0.5)

    def params(self, record=False, **kw):
        return Params(self.store, record=record, **kw)

    def __call__(self, x, params):
        out = self.mlp(T.as_var(x), params)
        logits = out[:, :3]
        length = np.linalg.norm(logits.value, axis=-1)
        small = length < 1e-9
        direction = T.normalize(logits, eps=1e-30)
        if small.any():
            direction = T.where(small[:, None], np.broadcast_to(FALLBACK_DIRECTION, logits.shape),
                                direction)
        raw = out[:, 3:]
        return direction, raw * raw


class OcclusionField:
    """MLP (x, w_i) -> visibility in (0, 1) through a sigmoid."""

    def __init__(self, store, sizes=(6, 64, 64, 64, 1), encoding=4, rng=None, name="occlusion",
                 bias_init=2.0):
        rng = np.random.default_rng(3) if rng is None else rng
        self.store = store
        self.name = name
        self.mlp = Mlp(store, f"{name}.field", list(sizes), "softplus", encoding=encoding, rng=rng,
                       last_bias=bias_init)

    def params(self, record=False, **kw):
        return Params(self.store, record=record, **kw)

    def __call__(self, x, w_i, params):
        inp = T.concat([T.as_var(x), T.as_var(w_i)], axis=-1)
        return T.sigmoid(self.mlp(inp, params)[:, 0])


def sample_direct(light, x, params=None):
    """(w_i, incident radiance, distance) for each point of x (P, 3).

    Point lights: inverse-square radiance.  Learned fields: MLP direction and
    intensity with an infinite distance.
    """
    x = T.as_var(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, 3))
    if isinstance(light, PointLight):
        to_light = T.Var(light.position) - x
        d2 = T.vsum(T.square(to_light), axis=-1)
        dist = np.sqrt(d2.value)
        if np.any(dist < 1e-6):
            raise DegenerateError("point light coincides with a shading point")
        w_i = to_light / T.expand_dims(T.sqrt(d2), -1)
        radiance = T.Var(light.intensity) / T.expand_dims(d2, -1)
    elif isinstance(light, LearnedLightField):
        if params is None:
            params = light.params()
        w_i, radiance = light(x, params)
        dist = np.full(len(x), INFINITE)
    else:
        raise ConfigError(f"unsupported light type {type(light).__name__}")
    if squeeze:
        return w_i[0], radiance[0], float(dist[0])
    return w_i, radiance, dist


def hard_visibility(sdf, x, w_i, distance, normal=None, cfg: TraceConfig | None = None,
                    offset=None, far=100.0):
    """1 where a shadow ray from x (+ offset along the normal) reaches ``distance`` unblocked."""
    cfg = cfg or TraceConfig()
    x = np.atleast_2d(T._value(x))
    w_i = np.atleast_2d(T._value(w_i))
    distance = np.broadcast_to(np.asarray(distance, dtype=np.float64), (len(x),))
    eps = 10.0 * cfg.hit_eps if offset is None else offset
    start = x if normal is None else x + eps * np.atleast_2d(normal)
    t_far = np.where(np.isfinite(distance), distance, far)
    if normal is None:
        t_near = np.full(len(x), eps)
    else:
        t_near = np.zeros(len(x))
    hits = sphere_trace(sdf, Rays(start, w_i, t_near, t_far), cfg)
    blocked = hits.converged & (hits.t < t_far)
    return (~blocked).astype(np.float64)


def soft_visibility(occ: OcclusionField, x, w_i, params=None):
    if params is None:
        params = occ.params()
    return occ(np.atleast_2d(T._value(x)) if not isinstance(x, T.Var) else x,
               np.atleast_2d(T._value(w_i)) if not isinstance(w_i, T.Var) else w_i, params)


# ---------------------------------------------------------------------------
# metadata files


def save_lights(path, lights):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"lights": [lt.to_dict() for lt in lights]}, fh, indent=2)


def load_lights(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    entries = data["lights"] if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty list of light entries", key="lights")
    out = []
    for i, entry in enumerate(entries):
        try:
            out.append(PointLight.from_dict(entry))
        except ConfigError as exc:
            raise ConfigError(f"{path}: lights[{i}]: {exc}", key=f"lights[{i}].{exc.key}") from exc
    return out

