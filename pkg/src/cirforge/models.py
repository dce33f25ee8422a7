"""Predictors assembled from :mod:`cirforge.nn` primitives.

All models map raw user positions in meters (or CIR vectors for the channel
mapper) to interleaved CIR vectors and share one small protocol:

``params``             ordered name -> array store (the arrays the layers use)
``forward(x)``         ``(prediction, cache)``
``backward(cache, dy)`` gradient dict keyed like ``params``
``loss_and_grads(x, y)`` MSE loss and its gradients
``project()``          restore parameter constraints after an update
"""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn import (
    DenseLayer,
    ParamStore,
    ShapeError,
    _act,
    cg_backward,
    cg_forward,
    dense_backward,
    dense_forward,
    mse_loss,
    siren_init,
    uniform_init,
)
from .scene import SPEED_OF_LIGHT

VARIANTS = ("cgrbf", "siren", "ae_pipeline", "mimo_cgrbf", "mimo_siren", "channel_mapper", "mlp")
MIMO_ANTENNAS = 64


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    hidden_widths: tuple = ()
    n_kernels: int = 0
    q_out: int = 182
    omega0: float = 30.0
    # angular spatial frequency of the kernels; None -> 2*pi*f/v from the scene
    w_init_mean: float | None = None
    w_init_std: float = 1.0
    kernels_per_group: int = 2
    input_dim: int = 3
    sigma0: float = 30.0
    # "identity" lets the front emit meter-scale coordinates
    front_last_activation: str = "identity"
    # add the raw input position to every front output triple
    coord_skip: bool = True
    activation: str = "sine"  # hidden activation of plain MLP variants
    hidden_omega0: float | None = None
    ae_encoder: tuple = (128, 32)
    ae_decoder: tuple = (32, 128)
    code_dim: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}")
        if self.q_out % 2:
            raise SpecError("q_out must be even (interleaved real/imag)")
        if self.variant in ("cgrbf", "mimo_cgrbf"):
            if not self.hidden_widths:
                raise SpecError("cgrbf needs at least one hidden layer")
            n_l = self.hidden_widths[-1]
            if n_l % 3:
                raise SpecError(f"last hidden width {n_l} not divisible by 3")
            if self.n_kernels != n_l // 3:
                raise SpecError(f"n_kernels must equal {n_l}//3 = {n_l // 3}, got {self.n_kernels}")
            if self.kernels_per_group not in (1, 2):
                raise SpecError("kernels_per_group must be 1 or 2")
        if any(int(h) <= 0 for h in self.hidden_widths):
            raise SpecError("hidden widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hidden_widths", "ae_encoder", "ae_decoder"):
            d[k] = list(d[k])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    if "w_init" in d:
        w = d.pop("w_init") or {}
        d.setdefault("w_init_mean", w.get("mean"))
        d.setdefault("w_init_std", w.get("std", 1.0))
    for k in ("hidden_widths", "ae_encoder", "ae_decoder"):
        if k in d:
            d[k] = tuple(int(v) for v in d[k])
    try:
        return ModelSpec(**d)
    except TypeError as exc:
        raise SpecError(str(exc)) from None


# --------------------------------------------------------------------------
# multiplication instrumentation

_MUL_COUNTER = None


def _matmul(a, b):
    if _MUL_COUNTER is not None:
        rows = a.shape[0] if a.ndim > 1 else 1
        _MUL_COUNTER.append(a.shape[-1] * b.shape[-1] * rows)
    return a @ b


@contextmanager
def count_multiplications():
    """Collect the scalar multiplications of every dense product in the block."""
    global _MUL_COUNTER
    prev, _MUL_COUNTER = _MUL_COUNTER, []
    try:
        yield _MUL_COUNTER
    finally:
        _MUL_COUNTER = prev


def _dense_fwd(layer, x):
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"layer expects {layer.n_in} inputs, got {x.shape[-1]}")
    if _MUL_COUNTER is None:
        return dense_forward(layer, x)
    z = _matmul(x, layer.W.T) + layer.b
    y = _act(layer.activation, z, layer.omega0)
    return y, (x, z, y)


# --------------------------------------------------------------------------
# building blocks


class InputNorm:
    """Fixed affine map of a box onto ``[-1, 1]`` per axis (degenerate axes -> 0)."""

    def __init__(self, lo, hi):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        self.center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        self.inv_half = np.where(half > 0, 1.0 / np.where(half > 0, half, 1.0), 0.0)

    def __call__(self, x):
        return (x - self.center) * self.inv_half

    @classmethod
    def identity(cls, dim: int):
        n = cls(np.zeros(dim), np.zeros(dim))
        n.inv_half = np.ones(dim)
        return n


class MLP:
    """Stack of dense layers with its parameters registered under ``prefix``."""

    def __init__(self, layers: list[DenseLayer], prefix: str = ""):
        self.layers = layers
        self.prefix = prefix

    def register(self, store: ParamStore):
        for i, layer in enumerate(self.layers):
            store[f"{self.prefix}l{i}.W"] = layer.W
            store[f"{self.prefix}l{i}.b"] = layer.b

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = _dense_fwd(layer, x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy, grads):
        for i in range(len(self.layers) - 1, -1, -1):
            dy, dW, db = dense_backward(self.layers[i], caches[i], dy)
            grads[f"{self.prefix}l{i}.W"] = dW
            grads[f"{self.prefix}l{i}.b"] = db
        return dy

    @property
    def widths(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]


def _mlp(widths, hidden_act, out_act, rng, omega0=30.0, prefix="", init="auto", hidden_omega0=None):
    layers = []
    n = len(widths) - 1
    for i in range(n):
        act = hidden_act if i < n - 1 else out_act
        om = omega0 if i == 0 or hidden_omega0 is None else hidden_omega0
        layer = DenseLayer.zeros(widths[i], widths[i + 1], act, om if act == "sine" else omega0)
        if hidden_act == "sine" and init == "auto":
            if act == "sine":
                siren_init(layer, is_first=(i == 0), rng=rng)
            else:
                # linear read-out of a sine stack
                bound = math.sqrt(6.0 / layer.n_in) / omega0
                layer.W[...] = rng.uniform(-bound, bound, layer.W.shape)
                layer.b[...] = rng.uniform(-bound, bound, layer.b.shape)
        else:
            uniform_init(layer, rng)
        layers.append(layer)
    return MLP(layers, prefix)


class _Model:
    spec: ModelSpec
    params: ParamStore

    def predict(self, x, batch: int = 4096):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return self.forward(x[None])[0][0]
        return np.concatenate([self.forward(x[i : i + batch])[0] for i in range(0, len(x), batch)] or [np.zeros((0, self.spec.q_out))])

    def loss_and_grads(self, x, label):
        pred, cache = self.forward(np.atleast_2d(x))
        loss, dpred = mse_loss(pred, np.atleast_2d(label))
        return loss, self.backward(cache, dpred)

    def project(self):
        pass

    def count_params(self) -> int:
        return self.params.count()


class MLPModel(_Model):
    """Plain coordinate network (SIREN, tanh MLP) or channel mapper."""

    def __init__(self, spec: ModelSpec, net: MLP, norm: InputNorm):
        self.spec = spec
        self.net = net
        self.norm = norm
        self.params = ParamStore()
        net.register(self.params)

    def forward(self, x):
        y, caches = self.net.forward(self.norm(np.asarray(x, float)))
        return y, caches

    def backward(self, cache, dy):
        grads = {}
        self.net.backward(cache, dy, grads)
        return grads


class CGrbfModel(_Model):
    """Front sine network -> Cosine-Gaussian kernel layer -> linear combiner.

    The front emits ``n_kernels`` coordinate triples; triple ``i`` feeds
    kernels ``kpg*i .. kpg*i + kpg - 1`` and the linear layer mixes all
    kernel outputs into the CIR vector.
    """

    def __init__(self, spec: ModelSpec, front: MLP, kernels: dict, out: DenseLayer, norm: InputNorm):
        self.spec = spec
        self.front = front
        self.k = kernels
        self.out = out
        self.norm = norm
        self.params = ParamStore()
        front.register(self.params)
        for name in ("a", "b", "c", "beta", "w"):
            self.params[f"kernel.{name}"] = kernels[name]
        self.params["out.W"] = out.W
        self.params["out.b"] = out.b

    @property
    def n_groups(self) -> int:
        return self.spec.n_kernels

    def front_coords(self, x):
        x = np.asarray(x, float)
        h, caches = self.front.forward(self.norm(x))
        g = h.reshape(len(x), self.n_groups, 3)
        if self.spec.coord_skip:
            g = g + x[:, None, :]
        return g, caches

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        g, fcache = self.front_coords(x)
        kpg = self.spec.kernels_per_group
        gk = np.repeat(g, kpg, axis=1) if kpg > 1 else g
        k = self.k
        phi, kcache = cg_forward(k["a"], k["b"], k["c"], k["beta"], k["w"], gk)
        y, ocache = _dense_fwd(self.out, phi)
        return y, (fcache, kcache, ocache, len(x))

    def kernel_outputs(self, x):
        g, _ = self.front_coords(np.atleast_2d(x))
        kpg = self.spec.kernels_per_group
        gk = np.repeat(g, kpg, axis=1) if kpg > 1 else g
        k = self.k
        return cg_forward(k["a"], k["b"], k["c"], k["beta"], k["w"], gk)[0]

    def backward(self, cache, dy):
        fcache, kcache, ocache, n = cache
        grads = {}
        dphi, dW, db = dense_backward(self.out, ocache, dy)
        grads["out.W"], grads["out.b"] = dW, db
        k = self.k
        dg, da, dbk, dc, dbeta, dw = cg_backward(k["a"], k["b"], k["c"], k["beta"], k["w"], kcache, dphi)
        grads.update({"kernel.a": da, "kernel.b": dbk, "kernel.c": dc, "kernel.beta": dbeta, "kernel.w": dw})
        kpg = self.spec.kernels_per_group
        if kpg > 1:
            dg = dg.reshape(n, self.n_groups, kpg, 3).sum(axis=2)
        self.front.backward(fcache, dg.reshape(n, 3 * self.n_groups), grads)
        return {name: grads[name] for name in self.params}

    def project(self):
        np.minimum(self.k["beta"], 0.0, out=self.k["beta"])


class AePipeline(_Model):
    """Auto-encoder baseline: CIR -> code -> CIR, plus position -> code.

    ``forward`` runs the deployed predictor ``decoder(pos2code(position))``;
    the two training stages use :meth:`autoencoder` and :meth:`pos2code_model`.
    """

    def __init__(self, spec, encoder: MLP, decoder: MLP, pos2code: MLP, norm: InputNorm):
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.pos2code = pos2code
        self.norm = norm
        self.stage = 0  # completed training stages
        self.params = ParamStore()
        for net in (encoder, decoder, pos2code):
            net.register(self.params)

    def forward(self, x):
        u = self.norm(np.atleast_2d(np.asarray(x, float)))
        code, pc = self.pos2code.forward(u)
        y, dc = self.decoder.forward(code)
        return y, (pc, dc)

    def backward(self, cache, dy):
        pc, dc = cache
        grads = {}
        dcode = self.decoder.backward(dc, dy, grads)
        self.pos2code.backward(pc, dcode, grads)
        return grads

    def encode(self, cir):
        return self.encoder.forward(np.atleast_2d(cir))[0]

    def autoencoder(self) -> "_SubModel":
        return _SubModel(self, (self.encoder, self.decoder), InputNorm.identity(self.spec.q_out))

    def pos2code_model(self) -> "_SubModel":
        if self.stage < 1:
            raise RuntimeError("pos2code training requires a trained auto-encoder (stage 1) first")
        return _SubModel(self, (self.pos2code,), self.norm)

    def predictor(self) -> "_SubModel":
        """Deployed chain with only pos2code and decoder parameters exposed."""
        return _SubModel(self, (self.pos2code, self.decoder), self.norm)


class _SubModel(_Model):
    """Chain of MLPs of an :class:`AePipeline` trained as one unit."""

    def __init__(self, owner, nets, norm):
        self.owner = owner
        self.nets = nets
        self.norm = norm
        self.spec = owner.spec
        self.params = ParamStore()
        for net in nets:
            net.register(self.params)

    def forward(self, x):
        h = self.norm(np.atleast_2d(np.asarray(x, float)))
        caches = []
        for net in self.nets:
            h, c = net.forward(h)
            caches.append(c)
        return h, caches

    def backward(self, caches, dy):
        grads = {}
        for net, c in zip(reversed(self.nets), reversed(caches)):
            dy = net.backward(c, dy, grads)
        return grads


# --------------------------------------------------------------------------
# construction


def default_w_mean(frequency: float, wave_speed: float = SPEED_OF_LIGHT) -> float:
    return 2 * math.pi * frequency / wave_speed


@dataclass
class BuildContext:
    """Scene facts a model needs at initialisation."""

    bs_position: tuple = (45.0, 48.0, 37.0)
    frequency: float = 3e9
    region_min: tuple = (20.0, 15.0, 1.6)
    region_max: tuple = (120.0, 30.0, 1.6)
    wave_speed: float = SPEED_OF_LIGHT
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_scene(cls, scene):
        return cls(tuple(scene.bs_position), scene.frequency, tuple(scene.ue_region.min),
                   tuple(scene.ue_region.max), scene.wave_speed)

    @property
    def wavelength(self):
        return self.wave_speed / self.frequency


def build_model(spec: ModelSpec, seed: int = 0, ctx: BuildContext | None = None):
    ctx = ctx or BuildContext()
    rng = np.random.default_rng(seed)
    norm = InputNorm(ctx.region_min, ctx.region_max) if spec.input_dim == 3 else InputNorm.identity(spec.input_dim)
    v = spec.variant
    if v in ("siren", "mimo_siren", "mlp", "channel_mapper"):
        act = spec.activation if v in ("mlp",) else ("tanh" if v == "channel_mapper" else "sine")
        widths = [spec.input_dim, *spec.hidden_widths, spec.q_out]
        if v == "channel_mapper":
            norm = InputNorm.identity(spec.input_dim)
        net = _mlp(widths, act, "identity", rng, spec.omega0, hidden_omega0=spec.hidden_omega0)
        return MLPModel(spec, net, norm)
    if v in ("cgrbf", "mimo_cgrbf"):
        return _build_cgrbf(spec, rng, ctx, norm)
    if v == "ae_pipeline":
        enc = _mlp([spec.q_out, *spec.ae_encoder, spec.code_dim], "sigmoid", "sigmoid", rng, prefix="enc.")
        dec = _mlp([spec.code_dim, *spec.ae_decoder, spec.q_out], "sigmoid", "identity", rng, prefix="dec.")
        p2c = _mlp([spec.input_dim, *spec.hidden_widths, spec.code_dim], "tanh", "identity", rng, prefix="p2c.")
        return AePipeline(spec, enc, dec, p2c, norm)
    raise SpecError(f"cannot build variant {v!r}")


def _build_cgrbf(spec, rng, ctx: BuildContext, norm):
    widths = [spec.input_dim, *spec.hidden_widths]
    layers = []
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        act = spec.front_last_activation if last else "sine"
        layer = DenseLayer.zeros(widths[i], widths[i + 1], act, spec.omega0)
        if act == "sine" or i == 0:
            siren_init(layer, is_first=(i == 0), rng=rng)
            if act != "sine":
                layer.W *= 1e-3
                layer.b[...] = 0.0
        else:
            # small read-out so the skip connection dominates at start
            bound = math.sqrt(6.0 / layer.n_in) / spec.omega0
            scale = 1e-2 if spec.coord_skip else 1.0
            layer.W[...] = rng.uniform(-bound, bound, layer.W.shape) * scale
            layer.b[...] = 0.0
        layers.append(layer)
    front = MLP(layers, "front.")

    kpg = spec.kernels_per_group
    n_k = spec.n_kernels * kpg
    lam = ctx.wavelength
    w_mean = spec.w_init_mean if spec.w_init_mean is not None else default_w_mean(ctx.frequency, ctx.wave_speed)
    lo, hi = np.asarray(ctx.region_min, float), np.asarray(ctx.region_max, float)
    kernels = {
        "a": np.asarray(ctx.bs_position, float) + rng.uniform(-lam / 2, lam / 2, (n_k, 3)),
        "b": rng.uniform(0.0, 2 * math.pi, n_k),
        "c": lo + (hi - lo) * rng.random((n_k, 3)),
        "beta": np.full(n_k, -1.0 / (2 * spec.sigma0**2)),
        "w": rng.normal(w_mean, spec.w_init_std, n_k),
    }
    out = DenseLayer.zeros(n_k, spec.q_out, "identity")
    bound = 1.0 / math.sqrt(n_k)
    out.W[...] = rng.uniform(-bound, bound, out.W.shape)
    return CGrbfModel(spec, front, kernels, out, norm)


# --------------------------------------------------------------------------
# cost accounting


def complexity_count(spec: ModelSpec) -> tuple[int, int]:
    """``(multiplications, activations)`` of one C-GRBF forward pass.

    Front: ``d*n_1 + sum n_k n_{k+1}`` multiplications and ``sum n_k``
    activations; each kernel counts as one activation; the combiner costs
    ``q_out`` multiplications per kernel output.  With one kernel per
    coordinate triple this is ``3 n_1 + sum n_k n_{k+1} + m n_l / 3``.
    """
    if spec.variant not in ("cgrbf", "mimo_cgrbf"):
        raise SpecError("complexity_count applies to cgrbf variants only")
    n = list(spec.hidden_widths)
    kernels = spec.kernels_per_group * n[-1] // 3
    mults = spec.input_dim * n[0] + sum(a * b for a, b in zip(n[:-1], n[1:])) + spec.q_out * kernels
    acts = sum(n) + kernels
    return mults, acts


def instrumented_multiplications(model, x=None) -> int:
    """Per-sample multiplications actually performed by ``model.forward``."""
    if x is None:
        x = np.zeros((1, model.spec.input_dim)) + 0.5
    x = np.atleast_2d(x)
    with count_multiplications() as counter:
        model.forward(x)
    return sum(counter) // len(x)


# --------------------------------------------------------------------------
# presets

Q = 182

MODEL_PRESETS: dict[str, ModelSpec] = {
    "table1_siren": ModelSpec("siren", (380, 512, 512, 512, 256), q_out=Q),
    "table2_cgrbf": ModelSpec("cgrbf", (256, 512, 900), n_kernels=300, q_out=Q, kernels_per_group=2),
    "table3_ae": ModelSpec("ae_pipeline", (128, 256, 256, 128), q_out=Q),
    "table5_small_cgrbf": ModelSpec("cgrbf", (128, 256, 600), n_kernels=200, q_out=Q, kernels_per_group=1),
    "table5_small_siren": ModelSpec("siren", (150, 256, 300, 256), q_out=Q),
    "table6_mimo_cgrbf": ModelSpec("mimo_cgrbf", (256, 512, 1050), n_kernels=350, q_out=MIMO_ANTENNAS * Q,
                                   kernels_per_group=1),
    "table6_mimo_siren": ModelSpec("mimo_siren", (512, 768, 1024, 768, 512), q_out=MIMO_ANTENNAS * Q),
    "table7_mapper_2": ModelSpec("channel_mapper", (256, 512, 512, 512), q_out=MIMO_ANTENNAS * Q, input_dim=2 * Q),
    "table7_mapper_4": ModelSpec("channel_mapper", (256, 512, 512, 512), q_out=MIMO_ANTENNAS * Q, input_dim=4 * Q),
    "table7_mapper_8": ModelSpec("channel_mapper", (256, 512, 512, 512), q_out=MIMO_ANTENNAS * Q, input_dim=8 * Q),
    # small instances for gradient checks and smoke runs
    "table2_cgrbf-small": ModelSpec("cgrbf", (8, 12), n_kernels=4, q_out=Q),
    "siren-small": ModelSpec("siren", (16, 16), q_out=Q),
    "ae-small": ModelSpec("ae_pipeline", (8, 8), q_out=Q, ae_encoder=(16, 8), ae_decoder=(8, 16)),
}


def get_spec(name: str) -> ModelSpec:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}") from None


def load_spec(path_or_name: str) -> ModelSpec:
    if path_or_name in MODEL_PRESETS:
        return MODEL_PRESETS[path_or_name]
    import yaml

    with open(path_or_name) as fh:
        return spec_from_dict(yaml.safe_load(fh))
