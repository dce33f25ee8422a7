"""Small deterministic numpy network engine with hand-written gradients.

Everything works on batches: inputs are ``(n, features)`` arrays and every
``backward`` returns gradients summed over the batch for the upstream
gradient it is given.  Layers keep no hidden state between calls; forward
returns a cache tuple that the matching backward consumes.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("sine", "tanh", "sigmoid", "identity")


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# dense layers


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"
    omega0: float = 30.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")
        if self.activation == "sine" and self.omega0 <= 0:
            raise ValueError("omega0 must be positive for sine layers")

    @classmethod
    def zeros(cls, n_in: int, n_out: int, activation: str = "identity", omega0: float = 30.0):
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out), activation, omega0)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}


def _act(kind, z, omega0):
    if kind == "sine":
        return np.sin(omega0 * z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(kind, z, y, omega0):
    if kind == "sine":
        return omega0 * np.cos(omega0 * z)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    return None


def dense_forward(layer: DenseLayer, x: np.ndarray):
    """``y = act(x W^T + b)`` for a batch ``x`` of shape ``(n, in)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"layer expects {layer.n_in} inputs, got {x.shape[-1]}")
    z = x @ layer.W.T + layer.b
    y = _act(layer.activation, z, layer.omega0)
    return y, (x, z, y)


def dense_backward(layer: DenseLayer, cache, dy: np.ndarray):
    """Return ``(dx, dW, db)`` given the upstream gradient ``dy``."""
    x, z, y = cache
    if dy.shape != y.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match output {y.shape}")
    g = _act_grad(layer.activation, z, y, layer.omega0)
    dz = dy if g is None else dy * g
    dW = dz.T @ x
    db = dz.sum(axis=0)
    dx = dz @ layer.W
    return dx, dW, db


def siren_init(layer: DenseLayer, is_first: bool, omega0: float | None = None, rng=None) -> DenseLayer:
    """Uniform SIREN initialisation, in place; returns the layer.

    First layer: weights in ``±1/fan_in``.  Later layers: ``±sqrt(6/fan_in)/omega0``.
    Biases share the weight bound of their layer.
    """
    rng = np.random.default_rng(rng)
    if omega0 is not None:
        layer.omega0 = omega0
    fan_in = layer.n_in
    bound = 1.0 / fan_in if is_first else math.sqrt(6.0 / fan_in) / layer.omega0
    layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
    layer.b[...] = rng.uniform(-bound, bound, size=layer.b.shape)
    return layer


def uniform_init(layer: DenseLayer, rng=None, gain: float = 1.0) -> DenseLayer:
    """Fan-in scaled uniform init for non-sine layers (``±gain*sqrt(6/(in+out))``)."""
    rng = np.random.default_rng(rng)
    bound = gain * math.sqrt(6.0 / (layer.n_in + layer.n_out))
    layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
    layer.b[...] = 0.0
    return layer


# --------------------------------------------------------------------------
# Cosine-Gaussian kernels


@dataclass
class CgKernel:
    """One Cosine-Gaussian unit ``cos(w|x-a| + b) * exp(beta |x-c|^2)``."""

    a: np.ndarray
    b: float
    c: np.ndarray
    beta: float
    w: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.beta > 0:
            raise ValueError("beta must be <= 0")


def cg_forward(a, b, c, beta, w, g):
    """Vectorised kernels.  ``g``: ``(n, K, 3)``; ``a, c``: ``(K, 3)``; rest ``(K,)``."""
    da = g - a
    r = np.sqrt(np.einsum("nkd,nkd->nk", da, da))
    dc = g - c
    s = np.einsum("nkd,nkd->nk", dc, dc)
    theta = w * r + b
    cos = np.cos(theta)
    env = np.exp(beta * s)
    phi = cos * env
    return phi, (da, r, dc, s, theta, cos, env)


def cg_backward(a, b, c, beta, w, cache, dphi):
    """Gradients ``(dg, da, db, dc, dbeta, dw)`` with parameter grads summed over n."""
    da_vec, r, dc_vec, s, theta, cos, env = cache
    sin_env = -np.sin(theta) * env * dphi  # d/dtheta, scaled by upstream
    cos_env = cos * env * dphi
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[..., None] > 0, da_vec / r[..., None], 0.0)
    g_radial = (sin_env * w)[..., None] * unit
    g_gauss = (cos_env * 2.0 * beta)[..., None] * dc_vec
    dg = g_radial + g_gauss
    d_a = -g_radial.sum(axis=0)
    d_c = -g_gauss.sum(axis=0)
    d_b = sin_env.sum(axis=0)
    d_w = (sin_env * r).sum(axis=0)
    d_beta = (cos_env * s).sum(axis=0)
    return dg, d_a, d_b, d_c, d_beta, d_w


def cg_kernel_forward(k: CgKernel, x) -> float:
    g = np.asarray(x, dtype=float).reshape(1, 1, 3)
    phi, _ = cg_forward(k.a[None], np.array([k.b]), k.c[None], np.array([k.beta]), np.array([k.w]), g)
    return float(phi[0, 0])


def cg_kernel_backward(k: CgKernel, x, dphi: float = 1.0) -> dict:
    """Partials of ``dphi * phi(x)`` w.r.t. every kernel parameter and ``x``."""
    g = np.asarray(x, dtype=float).reshape(1, 1, 3)
    args = (k.a[None], np.array([k.b]), k.c[None], np.array([k.beta]), np.array([k.w]))
    _, cache = cg_forward(*args, g)
    dg, da, db, dc, dbeta, dw = cg_backward(*args, cache, np.array([[dphi]]))
    return {
        "a": da[0],
        "b": float(db[0]),
        "c": dc[0],
        "beta": float(dbeta[0]),
        "w": float(dw[0]),
        "x": dg[0, 0],
    }


# --------------------------------------------------------------------------
# loss


def mse_loss(pred, label):
    """Mean squared error over every entry, and its gradient w.r.t. ``pred``.

    For a batch this is the batch mean of the per-sample ``(1/q) sum (y - yhat)^2``.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    diff = pred - label
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


# --------------------------------------------------------------------------
# parameters and optimiser


class ParamStore(OrderedDict):
    """Ordered mapping ``name -> ndarray`` of trainable tensors."""

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy_arrays(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, epsilon)

    def step(self, grads):
        adam_step(self.state, self.params, grads)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict  # group name -> max relative error
    worst: dict  # group name -> flat index of the worst element
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def failing(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tol]

    def table(self) -> str:
        width = max([len(k) for k in self.errors] + [5])
        lines = [f"{'group':<{width}}  max_rel_err  status"]
        for k, e in self.errors.items():
            lines.append(f"{k:<{width}}  {e:11.3e}  {'ok' if e < self.tol else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    a = np.asarray(analytic, float)
    n = np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def norm_relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def gradient_check(model, x, label, tol: float = 1e-4, h: float = 1e-6, max_elements: int | None = None,
                   rng=None, floor: float = 1e-7, mode: str = "norm") -> GradCheckReport:
    """Compare ``model.loss_and_grads`` against central finite differences.

    ``model`` must expose ``params`` (a mapping of arrays) and
    ``loss_and_grads(x, label) -> (loss, grads)``.  With ``max_elements``
    each group is probed at that many randomly chosen entries.

    ``mode="norm"`` scores each group by ``|a - n| / max(|a|, |n|)`` over the
    probed entries as vectors; ``mode="element"`` takes the worst entry-wise
    ratio, which is dominated by difference noise (about 1e-10 absolute at
    ``h = 1e-6``) on entries whose true derivative is close to zero.
    """
    if mode not in ("norm", "element"):
        raise ValueError("mode must be 'norm' or 'element'")
    rng = np.random.default_rng(rng)
    _, grads = model.loss_and_grads(x, label)
    errors, worst = {}, {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp, _ = model.loss_and_grads(x, label)
            flat[i] = old - h
            lm, _ = model.loss_and_grads(x, label)
            flat[i] = old
            numeric[j] = (lp - lm) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        rel = relative_error(analytic, numeric, floor)
        k = int(np.argmax(rel)) if rel.size else 0
        worst[name] = int(idx[k]) if rel.size else -1
        if mode == "norm":
            errors[name] = norm_relative_error(analytic, numeric, floor) if rel.size else 0.0
        else:
            errors[name] = float(rel[k]) if rel.size else 0.0
    return GradCheckReport(errors, worst, tol)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CIRFCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params, spec_digest: str, meta: dict | None = None, adam: AdamState | None = None):
    """Named-tensor container: magic, version, JSON header, raw little-endian f64."""
    entries = []
    blobs = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    for k, v in params.items():
        add("param/" + k, v)
    opt = None
    if adam is not None:
        opt = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon, "step": adam.step}
        for k in adam.m:
            add("adam_m/" + k, adam.m[k])
            add("adam_v/" + k, adam.v[k])
    header = json.dumps(
        {"spec_digest": spec_digest, "tensors": entries, "adam": opt, "meta": meta or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.array([CKPT_VERSION, len(header)], dtype="<u8").tobytes())
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return ``(params, spec_digest, meta, adam_state_or_None)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = np.frombuffer(raw[8:24], dtype="<u8")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[24 : 24 + int(hlen)])
    body = io.BytesIO(raw[24 + int(hlen) :]).getbuffer()
    params = ParamStore()
    adam = None
    if header["adam"] is not None:
        adam = AdamState(**{k: header["adam"][k] for k in ("lr", "beta1", "beta2", "epsilon", "step")})
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name] = arr
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr
    return params, header["spec_digest"], header["meta"], adam
