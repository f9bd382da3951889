"""Parameters, dense layers, grouped softmax, Adam and gradient checking."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, backward
from .errors import DataError, NumericError

RATIO_FLOOR = 1e-12


class ParamStore:
    """Named float64 arrays that are views into one flat buffer.

    ``grad_flat`` mirrors ``flat``; Adam moments are allocated on first use.
    """

    def __init__(self, shapes):
        self.shapes = {k: tuple(int(d) for d in v) for k, v in dict(shapes).items()}
        self._slices = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape)) if shape else 1
            self._slices[name] = (off, off + size)
            off += size
        self.size = off
        self.flat = np.zeros(off)
        self.grad_flat = np.zeros(off)
        self.adam_m = None
        self.adam_v = None
        self.meta = {}

    @property
    def names(self):
        return list(self.shapes)

    def __contains__(self, name):
        return name in self.shapes

    def __getitem__(self, name):
        a, b = self._slices[name]
        return self.flat[a:b].reshape(self.shapes[name])

    def __setitem__(self, name, value):
        self[name][...] = value

    def grad(self, name):
        a, b = self._slices[name]
        return self.grad_flat[a:b].reshape(self.shapes[name])

    def var(self, name, tape: Tape | None = None) -> Var:
        if tape is None:
            return Var(self[name])
        tape.watch(self)
        return tape.leaf(self[name], self.grad(name))

    def zero_grad(self):
        self.grad_flat[:] = 0.0

    def copy(self):
        out = ParamStore(self.shapes)
        out.flat[:] = self.flat
        out.meta = dict(self.meta)
        return out


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def mlp_shapes(prefix, in_dim, hidden_dims, out_dim):
    dims = [in_dim, *hidden_dims, out_dim]
    shapes = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes[f"{prefix}.{i}.weight"] = (a, b)
        shapes[f"{prefix}.{i}.bias"] = (b,)
    return shapes


def init_mlp(store, prefix, rng, zero_last=False):
    n = mlp_depth(store, prefix)
    for i in range(n):
        w = f"{prefix}.{i}.weight"
        a, b = store.shapes[w]
        store[w] = 0.0 if (zero_last and i == n - 1) else glorot(rng, a, b, (a, b))
        store[f"{prefix}.{i}.bias"] = 0.0


def mlp_depth(store, prefix):
    n = 0
    while f"{prefix}.{n}.weight" in store:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP named {prefix!r} in parameter store")
    return n


def mlp_forward(store: ParamStore, prefix: str, x, tape: Tape | None = None, hidden_dims=None):
    """Dense layers with ReLU between them and a linear last layer.

    ``x`` is one input vector or a matrix holding one input per row.
    """
    depth = mlp_depth(store, prefix)
    if hidden_dims is not None:
        got = [store.shapes[f"{prefix}.{i}.weight"][1] for i in range(depth - 1)]
        if list(hidden_dims) != got:
            raise ValueError(f"{prefix}: hidden dims {list(hidden_dims)} != stored {got}")
    h = ad.lift(x)
    in_dim = store.shapes[f"{prefix}.0.weight"][0]
    if h.shape[-1] != in_dim:
        raise ValueError(f"{prefix}: input width {h.shape[-1]} != {in_dim}")
    for i in range(depth):
        h = h @ store.var(f"{prefix}.{i}.weight", tape) + store.var(f"{prefix}.{i}.bias", tape)
        if i < depth - 1:
            h = ad.relu(h)
    return h


def _group_labels(groups, size):
    if isinstance(groups, np.ndarray) and groups.ndim == 1 and groups.dtype.kind in "iu":
        labels = groups.astype(np.int64)
        if len(labels) != size:
            raise ValueError("group labels must match score length")
        return labels
    labels = np.full(size, -1, dtype=np.int64)
    for gi, members in enumerate(groups):
        members = list(members)
        if not members:
            raise ValueError(f"group {gi} is empty")
        for i in members:
            if labels[i] != -1:
                raise ValueError(f"index {i} appears in more than one group")
            labels[i] = gi
    if np.any(labels < 0):
        raise ValueError("groups do not cover every index")
    return labels


def grouped_softmax(scores, groups, kind="softmax"):
    """Normalize ``scores`` inside each group.

    ``groups`` is either a list of index lists (a partition) or an integer
    label per score. ``kind="ratio"`` divides clamped raw scores by their
    group total instead of exponentiating.
    """
    s = ad.lift(scores)
    sv = s.value
    labels = _group_labels(groups, len(sv))
    G = int(labels.max()) + 1 if len(labels) else 0
    if kind == "softmax":
        mx = np.full(G, -np.inf)
        np.maximum.at(mx, labels, sv)
        e = np.exp(sv - mx[labels])
        den = np.bincount(labels, weights=e, minlength=G)
        y = e / den[labels]

        def vjp(g):
            dot = np.bincount(labels, weights=g * y, minlength=G)
            return (y * (g - dot[labels]),)
    elif kind == "ratio":
        live = sv > RATIO_FLOOR
        z = np.where(live, sv, RATIO_FLOOR)
        den = np.bincount(labels, weights=z, minlength=G)
        y = z / den[labels]

        def vjp(g):
            dot = np.bincount(labels, weights=g * y, minlength=G)
            return ((g - dot[labels]) / den[labels] * live,)
    else:
        raise ValueError(f"unknown softmax kind {kind!r}")
    return ad._op(y, (s,), vjp)


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    g = store.grad_flat
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite gradient at flat index {bad}; step skipped")
    if store.adam_m is None:
        store.adam_m = np.zeros(store.size)
        store.adam_v = np.zeros(store.size)
    m, v = store.adam_m, store.adam_v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    store.flat -= lr * mhat / (np.sqrt(vhat) + eps)


def finite_diff_check(loss_fn, store: ParamStore, h=1e-2, n_probe=20, seed=0, halvings=3):
    """Max relative error between taped gradients and central differences.

    ``loss_fn(store, tape)`` must return the scalar loss; it is called with
    ``tape=None`` for the perturbed evaluations. The numeric derivative uses
    the 5-point central stencil with step ``h``, halved up to ``halvings``
    times while some ReLU switches state inside the stencil. A coordinate
    whose stencil cannot avoid a kink has no usable central difference and
    is swapped for another randomly drawn coordinate.
    """
    tape = Tape()
    out = loss_fn(store, tape)
    if len(tape):
        backward(tape, output=ad.lift(out))
        analytic = store.grad_flat.copy()
    else:
        analytic = np.zeros(store.size)
    with ad.track_kinks() as base:
        loss_fn(store, None)
    base = list(base)
    rng = np.random.default_rng(seed)
    order = rng.permutation(store.size)
    worst, checked = 0.0, 0
    for i in order:
        if checked == n_probe:
            break
        num = _central_difference(loss_fn, store, i, h, halvings, base)
        if num is None:
            continue
        checked += 1
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


def _central_difference(loss_fn, store, i, h, halvings, base):
    orig = store.flat[i]
    step = h
    try:
        for _ in range(halvings + 1):
            vals, smooth = [], True
            for k in (2, 1, -1, -2):
                store.flat[i] = orig + k * step
                with ad.track_kinks() as seen:
                    vals.append(float(ad.value(loss_fn(store, None))))
                smooth = smooth and seen == base
            if smooth:
                return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
            step /= 2
    finally:
        store.flat[i] = orig
    return None


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PICKPT01"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_params(store: ParamStore, path, seed=None, config=None):
    header = {
        "names": store.names,
        "shapes": [list(store.shapes[k]) for k in store.names],
        "seed": seed,
        "config_hash": config_hash(config or {}),
        "config": config or {},
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(store.flat.astype("<f8").tobytes())


def load_params(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    store = ParamStore(dict(zip(header["names"], map(tuple, header["shapes"]))))
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    if data.size != store.size:
        raise DataError(f"{path}: expected {store.size} values, found {data.size}")
    store.flat[:] = data
    store.meta = {"seed": header["seed"], "config": header["config"],
                  "config_hash": header["config_hash"]}
    return store
