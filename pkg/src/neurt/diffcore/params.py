"""Flat parameter storage, AdamW, and the checkpoint file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .tape import Var

CHECKPOINT_VERSION = 1


def to_f32(a):
    """Round to the nearest float32 while keeping float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class ParamStore:
    """All learnable scalars in one flat vector, addressed by named segments.

    Segments are appended in creation order and are disjoint and contiguous,
    so ``values``/``grads`` are always fully covered.  Values are kept at
    float32 precision so a checkpoint round trip is exact.
    """

    def __init__(self):
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self.segments: dict[str, tuple[int, tuple[int, ...]]] = {}

    def __len__(self):
        return self.values.size

    def __contains__(self, name):
        return name in self.segments

    def add(self, name, init) -> str:
        if name in self.segments:
            raise ConfigError(f"duplicate parameter segment {name!r}", key=name)
        init = to_f32(init)
        offset = self.values.size
        self.segments[name] = (offset, init.shape)
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.concatenate([self.grads, np.zeros(init.size)])
        return name

    def span(self, name):
        offset, shape = self.segments[name]
        return offset, offset + int(np.prod(shape, dtype=np.int64))

    def __getitem__(self, name):
        lo, hi = self.span(name)
        return self.values[lo:hi].reshape(self.segments[name][1])

    def __setitem__(self, name, value):
        lo, hi = self.span(name)
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), self.segments[name][1])
        self.values[lo:hi] = to_f32(value).ravel()

    def grad(self, name):
        lo, hi = self.span(name)
        return self.grads[lo:hi].reshape(self.segments[name][1])

    def param(self, name, grad_buffer=None) -> Var:
        """Leaf Var over the segment; backward accumulates into ``grad_buffer`` (default: self.grads)."""
        lo, hi = self.span(name)
        shape = self.segments[name][1]
        buf = self.grads if grad_buffer is None else grad_buffer
        return Var(self.values[lo:hi].reshape(shape), requires_grad=True,
                   sink=buf[lo:hi].reshape(shape))

    def zero_grad(self):
        self.grads[:] = 0.0

    def names(self, prefix=""):
        return [n for n in self.segments if n.startswith(prefix)]

    def mask(self, prefixes) -> np.ndarray:
        """Boolean mask over the flat vector selecting segments with any of ``prefixes``."""
        m = np.zeros(self.values.size, dtype=bool)
        for name in self.segments:
            if any(name == p or name.startswith(p + ".") for p in prefixes):
                lo, hi = self.span(name)
                m[lo:hi] = True
        return m

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.values = self.values.copy()
        other.grads = self.grads.copy()
        other.segments = dict(self.segments)
        return other


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0
    lr_scale: dict = field(default_factory=dict)

    def hyperparameters(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "lr_scale": dict(self.lr_scale)}


def _lr_vector(state: AdamWState, params: ParamStore):
    lr = np.full(len(params), state.lr)
    for prefix, scale in state.lr_scale.items():
        lr[params.mask([prefix])] = state.lr * scale
    return lr


def adamw_step(state: AdamWState, params: ParamStore, frozen: np.ndarray | None = None):
    """One AdamW update with decoupled weight decay; grads are left untouched.

    ``frozen`` is a boolean mask of entries that must not change (their
    moments are also kept).
    """
    n = len(params)
    if state.m.size != n:
        state.m = np.zeros(n)
        state.v = np.zeros(n)
    state.t += 1
    live = np.ones(n, dtype=bool) if frozen is None else ~frozen
    g = params.grads[live]
    m = state.beta1 * state.m[live] + (1.0 - state.beta1) * g
    v = state.beta2 * state.v[live] + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    lr = _lr_vector(state, params)[live]
    theta = params.values[live]
    theta = theta - lr * state.weight_decay * theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.m[live] = to_f32(m)
    state.v[live] = to_f32(v)
    params.values[live] = to_f32(theta)
    return params


# ---------------------------------------------------------------------------
# checkpoint files: JSON header, padding, little-endian float32 arrays


def _encode_header(header):
    header = dict(header)
    header["binary_offset"] = 0
    for _ in range(4):
        text = json.dumps(header, sort_keys=True).encode("utf-8")
        offset = int(math.ceil((len(text) + 1) / 64.0) * 64)
        if header["binary_offset"] == offset:
            break
        header["binary_offset"] = offset
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    offset = header["binary_offset"]
    return text + b" " * (offset - len(text) - 1) + b"\n"


def save_checkpoint(path, params: ParamStore, opt: AdamWState | None = None, extra=None):
    arrays = {"values": params.values}
    if opt is not None and opt.m.size == len(params):
        arrays["adam_m"] = opt.m
        arrays["adam_v"] = opt.v
    layout, cursor = {}, 0
    for key, arr in arrays.items():
        layout[key] = {"offset": cursor, "count": int(arr.size)}
        cursor += 4 * arr.size
    header = {
        "format_version": CHECKPOINT_VERSION,
        "segments": [{"name": n, "shape": list(s), "offset": o} for n, (o, s) in params.segments.items()],
        "arrays": layout,
        "hyperparameters": opt.hyperparameters() if opt is not None else {},
        "adam_step": opt.t if opt is not None else 0,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(_encode_header(header))
        for arr in arrays.values():
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed checkpoint header ({exc})") from exc


def load_checkpoint(path):
    """Returns (ParamStore, AdamWState or None, extra dict)."""
    header = read_header(path)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}",
                          key="format_version")
    with open(path, "rb") as fh:
        fh.seek(header["binary_offset"])
        blob = fh.read()

    def array(key):
        info = header["arrays"][key]
        return np.frombuffer(blob, dtype="<f4", count=info["count"],
                             offset=info["offset"]).astype(np.float64)

    params = ParamStore()
    params.values = array("values")
    params.grads = np.zeros(params.values.size)
    for seg in header["segments"]:
        params.segments[seg["name"]] = (seg["offset"], tuple(seg["shape"]))
    opt = None
    if "adam_m" in header["arrays"]:
        hp = header["hyperparameters"]
        opt = AdamWState(lr=hp["lr"], beta1=hp["beta1"], beta2=hp["beta2"], eps=hp["eps"],
                         weight_decay=hp["weight_decay"], m=array("adam_m"), v=array("adam_v"),
                         t=header["adam_step"], lr_scale=dict(hp.get("lr_scale", {})))
    return params, opt, header.get("extra", {})
