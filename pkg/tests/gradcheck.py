"""Central finite-difference checks for tape-built functions."""
import numpy as np

from neurt.diffcore import tape as T

FLOOR = 1e-6


class Leaves:
    """Parameter lookup backed by float64 arrays (no float32 rounding, unlike ParamStore)."""

    def __init__(self, arrays):
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        self.vars = {}

    def __call__(self, name):
        v = self.vars.get(name)
        if v is None:
            v = T.Var(self.arrays[name], requires_grad=True)
            self.vars[name] = v
        return v


def store_arrays(store, prefix=""):
    return {n: store[n].copy() for n in store.names(prefix)}


def directional_errors(fn, arrays, rng, h=1e-6):
    """Relative error between the reverse-mode directional derivative and a central difference.

    ``fn(lookup)`` must return a scalar Var.  One random direction per array.
    """
    leaves = Leaves(arrays)
    out = fn(leaves)
    names = [n for n in arrays if n in leaves.vars]
    grads = T.grad(out, [leaves.vars[n] for n in names])
    errs = {}
    for name, g in zip(names, grads):
        d = rng.normal(size=np.shape(arrays[name]))
        analytic = float(np.sum(g * d))

        def at(step):
            shifted = dict(arrays)
            shifted[name] = np.asarray(arrays[name], dtype=np.float64) + step * d
            return float(fn(Leaves(shifted)).value)

        numeric = (at(h) - at(-h)) / (2 * h)
        errs[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
    return errs


def scalarize(v, rng):
    """Random linear functional of a Var, so every output entry is exercised."""
    w = rng.normal(size=v.shape)
    return T.vsum(v * w)
