"""Training loop, evaluation and the preset experiment studies."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .dataset import (
    Dataset,
    DatasetError,
    NoiseSpec,
    antenna_columns,
    generate_dataset,
    generate_mimo_dataset,
    inject_noise,
    scale_fit_apply,
    split,
)
from .models import AePipeline, BuildContext, ModelSpec, build_model, get_spec, spec_from_dict
from .nn import Adam, NonFiniteGradient, load_checkpoint, save_checkpoint
from .presets import UE_HEIGHT, desk_region, paper_scene, paper_scene_mimo, paper_scene_nlos
from .scene import PAPER_WINDOW, Box, auto_window

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 20
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1000
    model_spec: ModelSpec | None = None
    dataset_path: str | None = None
    noise_spec: dict | None = None
    stage2_lr: float = 1e-2  # AE pipeline position -> code regression
    stage1_steps: int | None = None  # AE pipeline auto-encoder; defaults to steps

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.stage2_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")

    def digest(self) -> str:
        d = asdict(self)
        d["model_spec"] = None if self.model_spec is None else self.model_spec.to_dict()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class ConvergenceCurve:
    steps: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    test_nmse: list = field(default_factory=list)  # nan where not evaluated
    model_digest: str = ""
    config_digest: str = ""

    def append(self, step, mse, nmse=math.nan):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("curve steps must be strictly increasing")
        self.steps.append(int(step))
        self.train_mse.append(float(mse))
        self.test_nmse.append(float(nmse))

    @property
    def final_nmse(self) -> float:
        vals = [v for v in self.test_nmse if not math.isnan(v)]
        return vals[-1] if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_mse", "test_nmse"])
        for s, m, t in zip(self.steps, self.train_mse, self.test_nmse):
            w.writerow([s, repr(m), "" if math.isnan(t) else repr(t)])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def moving_average(self, window: int = 200) -> np.ndarray:
        x = np.asarray(self.train_mse)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def nmse(pred, label) -> np.ndarray:
    """Per-record ``sum |y - yhat|^2 / sum |y|^2``."""
    pred, label = np.atleast_2d(pred), np.atleast_2d(label)
    energy = np.sum(label**2, axis=1)
    if np.any(energy == 0):
        raise DatasetError("NMSE undefined for a record with an all-zero label")
    return np.sum((label - pred) ** 2, axis=1) / energy


def evaluate_nmse(model, test: Dataset) -> float:
    """Mean test NMSE on clean labels, in original units."""
    if len(test) == 0:
        raise DatasetError("evaluate_nmse needs a non-empty test split")
    s = test.meta.scale_factor
    pred = model.predict(test.positions) / s
    return float(np.mean(nmse(pred, test.cir / s)))


def _loop(model, x, y, steps, batch, lr, rng, curve, eval_fn, eval_every, step0, ckpt_dir, cfg_digest,
          log_fn=None):
    opt = Adam(model.params, lr=lr)
    n = len(x)
    for i in range(1, steps + 1):
        idx = rng.integers(0, n, batch)
        loss, grads = model.loss_and_grads(x[idx], y[idx])
        step = step0 + i
        if not math.isfinite(loss):
            _abort(model, ckpt_dir, step, cfg_digest, f"non-finite loss {loss}")
        try:
            opt.step(grads)
        except NonFiniteGradient as exc:
            _abort(model, ckpt_dir, step, cfg_digest, str(exc))
        model.project()
        t = eval_fn() if eval_fn is not None and (i % eval_every == 0 or i == steps) else math.nan
        curve.append(step, loss if log_fn is None else log_fn(idx), t)
    return step0 + steps


def _abort(model, ckpt_dir, step, cfg_digest, why):
    path = None
    if ckpt_dir is not None:
        path = Path(ckpt_dir) / f"diverged_step{step}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, model.params, model.spec.digest(), {"step": step, "reason": why, "config": cfg_digest})
    raise TrainingDiverged(f"training diverged at step {step}: {why}" + (f"; checkpoint {path}" if path else ""))


def train(config: TrainConfig, data: Dataset, model=None, ctx=None, ckpt_dir=None):
    """Mini-batch Adam; returns ``(model, ConvergenceCurve)``.

    Batches are drawn with replacement from the training split; inputs and
    labels are the noisy measurements when present.  Test NMSE uses clean
    test records.
    """
    if data.is_test is None:
        raise DatasetError("dataset must be split before training")
    tr, te = data.train(), data.test()
    if len(tr) == 0:
        raise DatasetError("empty training split")
    spec = config.model_spec
    if model is None:
        if spec is None:
            raise ValueError("TrainConfig.model_spec is required")
        model = build_model(spec, config.seed, ctx)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    curve = ConvergenceCurve(config_digest=config.digest())
    eval_fn = (lambda: evaluate_nmse(model, te)) if len(te) else None
    x, y = tr.inputs, tr.labels
    cd = config.digest()
    if isinstance(model, AePipeline):
        ae = model.autoencoder()
        s1 = config.stage1_steps or config.steps
        step = _loop(ae, y, y, s1, config.batch_size, config.lr, rng, curve, None, config.eval_every, 0, ckpt_dir, cd)
        model.stage = 1
        codes = model.encode(y)
        p2c = model.pos2code_model()
        # log the end-to-end CIR error so both stages share units
        log = lambda idx: float(np.mean((model.forward(x[idx])[0] - y[idx]) ** 2))  # noqa: E731
        _loop(p2c, x, codes, config.steps, config.batch_size, config.stage2_lr, rng, curve, eval_fn,
              config.eval_every, step, ckpt_dir, cd, log_fn=log)
        model.stage = 2
    else:
        _loop(model, x, y, config.steps, config.batch_size, config.lr, rng, curve, eval_fn, config.eval_every, 0,
              ckpt_dir, cd)
    curve.model_digest = model.params.digest()
    return model, curve


# --------------------------------------------------------------------------
# model files


def save_model(path, model, ctx, meta: dict | None = None) -> None:
    """Checkpoint carrying everything :func:`load_model` needs to rebuild."""
    info = {"spec": model.spec.to_dict(), "ctx": asdict(ctx), "stage": getattr(model, "stage", None)}
    info.update(meta or {})
    save_checkpoint(path, model.params, model.spec.digest(), info)


def load_model(path):
    """Return ``(model, ctx, meta)`` from a :func:`save_model` file."""
    params, digest, meta, _ = load_checkpoint(path)
    if "spec" not in meta:
        raise ValueError(f"{path}: checkpoint lacks a model spec")
    spec = spec_from_dict(meta["spec"])
    if spec.digest() != digest:
        raise ValueError(f"{path}: spec digest mismatch")
    ctx = BuildContext(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["ctx"].items()})
    model = build_model(spec, 0, ctx)
    if set(params) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the spec")
    for k, v in params.items():
        if model.params[k].shape != v.shape:
            raise ValueError(f"{path}: shape mismatch for {k}")
        model.params[k][...] = v
    if meta.get("stage") is not None:
        model.stage = meta["stage"]
    return model, ctx, meta


# --------------------------------------------------------------------------
# presets

DESK_REGION = desk_region(40.0, 20.0, 3.0, 1.5)
# behind building 5: no LOS, one wall reflection reaches the BS
NLOS_REGION = desk_region(40.0, 17.5, 3.0, 1.5)
PAPER_REGION = Box((20.0, 15.0, UE_HEIGHT), (120.0, 30.0, UE_HEIGHT))

DESK_MODELS = {
    "cgrbf": ModelSpec("cgrbf", (64, 128, 300), n_kernels=100, kernels_per_group=2),
    "siren": ModelSpec("siren", (128, 128, 128)),
    "ae": ModelSpec("ae_pipeline", (128, 256, 256, 128)),
    # near-equal parameter budgets
    "cgrbf_limited": ModelSpec("cgrbf", (32, 64, 150), n_kernels=50, kernels_per_group=2),
    "siren_limited": ModelSpec("siren", (64, 64, 64)),
    "mimo_cgrbf": ModelSpec("mimo_cgrbf", (32, 64, 60), n_kernels=20, kernels_per_group=2),
    "mimo_siren": ModelSpec("mimo_siren", (64, 64)),
    "mapper": ModelSpec("channel_mapper", (128, 128)),
}
PAPER_MODELS = {
    "cgrbf": get_spec("table2_cgrbf"),
    "siren": get_spec("table1_siren"),
    "ae": get_spec("table3_ae"),
    "cgrbf_limited": get_spec("table5_small_cgrbf"),
    "siren_limited": get_spec("table5_small_siren"),
    "mimo_cgrbf": get_spec("table6_mimo_cgrbf"),
    "mimo_siren": get_spec("table6_mimo_siren"),
    "mapper": get_spec("table7_mapper_8"),
}

# nested antenna subsets of the 8 x 8 array (row-major element index)
MAPPER_SUBSETS = {2: (0, 63), 4: (0, 7, 56, 63), 8: (0, 7, 56, 63, 27, 36, 3, 60)}

BASE_CONFIG = {
    "steps": 20_000,
    "batch_size": 20,
    "lr": 1e-4,  # sine layers; see README
    "ae_lr": 1e-3,
    "ae_stage2_lr": 1e-3,
    "ae_stage1_steps": 10_000,
    "ae_stage2_steps": 10_000,
    "mapper_lr": 1e-3,
    "eval_every": 1000,
    "seeds": [0],
    "densities": ["40", "60", "100"],
    "reference_area": 45.0,
    "split_fraction": 0.8,
    "frequency": 3e9,
    "paper_scale": False,
}

PAPER_SCALE = {"steps": 200_000, "lr": 1e-3, "ae_stage2_lr": 1e-2, "ae_stage1_steps": 200_000,
               "ae_stage2_steps": 200_000}

PRESET_DEFAULTS = {
    "density_sweep": {"models": ["cgrbf", "siren", "ae"]},
    "limited_params": {"models": ["cgrbf_limited", "siren_limited"]},
    "pos_noise": {"models": ["cgrbf"], "sigma_m": 0.03},
    "cir_noise_gaussian": {"models": ["cgrbf", "siren"], "target_nmse": [0.01, 0.1]},
    "cir_noise_alpha": {"models": ["cgrbf", "siren"], "alphas": [1.2, 1.5, 1.8], "alpha_scale": 0.1},
    "freq_sweep": {"models": ["cgrbf", "siren"], "frequencies": [3e9, 6e9, 12e9]},
    "nlos_scene": {"models": ["cgrbf", "siren"]},
    # 64-antenna rows are 64x wider; the lowest density keeps memory modest
    "mimo_shared": {"models": ["mimo_cgrbf", "mimo_siren"], "steps": 3000, "eval_every": 500, "mimo_density": "40"},
    "channel_mapping": {"antennas": [2, 4, 8], "steps": 3000, "eval_every": 500, "mimo_density": "40"},
    "latent_periodic_1d": {
        "steps": 5000, "n_samples": 40, "wavelengths": 10, "widths": [128], "eval_every": 500,
        "sine_lr": 1e-3, "tanh_lr": 1e-3, "n_test": 1000,
    },
}


class PresetError(KeyError):
    pass


def preset_config(name: str, overrides: dict | None = None) -> dict:
    if name not in PRESET_DEFAULTS:
        raise PresetError(f"unknown preset {name!r}; choose from {sorted(PRESET_DEFAULTS)}")
    cfg = dict(BASE_CONFIG)
    cfg.update(PRESET_DEFAULTS[name])
    overrides = dict(overrides or {})
    if overrides.get("paper_scale", cfg["paper_scale"]):
        cfg.update(PAPER_SCALE)
    cfg.update(overrides)
    unknown = set(cfg) - set(BASE_CONFIG) - set(PRESET_DEFAULTS[name])
    if unknown:
        raise PresetError(f"unknown override(s) for {name}: {sorted(unknown)}")
    return cfg


def _derive_seed(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class PresetResult:
    name: str
    out_dir: Path
    config: dict
    rows: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    datasets: dict = field(default_factory=dict)

    def nmse(self, **match) -> list:
        return [r["final_nmse"] for r in self.rows if all(r.get(k) == v for k, v in match.items())]


class _Bundle:
    """Collects curves, metric rows and dataset digests for one preset run."""

    def __init__(self, result: PresetResult):
        self.r = result
        self.r.out_dir.mkdir(parents=True, exist_ok=True)

    def dataset(self, key: str, ds: Dataset):
        self.r.datasets[key] = ds.checksum()

    def curve(self, stem: str, curve: ConvergenceCurve, **row):
        path = self.r.out_dir / f"{stem}.csv"
        curve.write(path)
        self.r.curves[stem] = path
        row.update(curve=path.name, final_nmse=curve.final_nmse)
        self.r.rows.append(row)
        logger.info("%s: final test NMSE %.4g", stem, curve.final_nmse)

    def finish(self):
        doc = {
            "preset": self.r.name,
            "config": self.r.config,
            "results": self.r.rows,
            "datasets": dict(sorted(self.r.datasets.items())),
        }
        (self.r.out_dir / "metrics.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
        return self.r


def _models(cfg):
    return PAPER_MODELS if cfg["paper_scale"] else DESK_MODELS


def _scene(cfg, kind="street", frequency=None):
    f = frequency or cfg["frequency"]
    if kind == "nlos":
        return paper_scene_nlos(f, None if cfg["paper_scale"] else NLOS_REGION)
    region = PAPER_REGION if cfg["paper_scale"] else DESK_REGION
    if kind == "mimo":
        return paper_scene_mimo(f, ue_region=region)
    return paper_scene(f, ue_region=region)


def _window(cfg, scene):
    return PAPER_WINDOW if cfg["paper_scale"] else auto_window(scene)


def _prepare(cfg, scene, density, seed, noise=None, tag="", mimo=False):
    """generate -> noise (original units) -> scale -> split."""
    dseed = _derive_seed("data", seed, density, tag)
    gen = generate_mimo_dataset if mimo else generate_dataset
    kw = {} if mimo else {"require_paths": True}
    ds = gen(scene, density, dseed, _window(cfg, scene), cfg["reference_area"], cfg["split_fraction"], **kw)
    if len(ds) < 2:
        raise DatasetError(f"only {len(ds)} records generated; raise the density")
    if noise is not None:
        ds = inject_noise(ds, noise, np.random.default_rng(_derive_seed("noise", seed, density, tag)))
    ds, _ = scale_fit_apply(ds)
    return split(ds, cfg["split_fraction"], dseed)


def _fit(bundle, cfg, key, ds, scene, seed, stem, **row):
    spec = _models(cfg)[key].with_(q_out=ds.q)
    ae = spec.variant == "ae_pipeline"
    steps = int(cfg["ae_stage2_steps"] if ae else cfg["steps"])
    tc = TrainConfig(
        steps=steps, batch_size=int(cfg["batch_size"]), lr=float(cfg["ae_lr"] if ae else cfg["lr"]),
        seed=int(seed), eval_every=int(cfg["eval_every"]), model_spec=spec, stage2_lr=float(cfg["ae_stage2_lr"]),
        stage1_steps=int(cfg["ae_stage1_steps"]) if ae else None,
    )
    _, curve = train(tc, ds, ctx=BuildContext.from_scene(scene), ckpt_dir=bundle.r.out_dir)
    bundle.curve(stem, curve, model=key, seed=int(seed), **row)


def _run_density_models(bundle, cfg, scene_kind="street"):
    scene = _scene(cfg, scene_kind)
    for seed in cfg["seeds"]:
        for d in cfg["densities"]:
            ds = _prepare(cfg, scene, d, seed)
            bundle.dataset(f"d{d}_s{seed}", ds)
            for key in cfg["models"]:
                _fit(bundle, cfg, key, ds, scene, seed, f"{key}_d{d}_s{seed}", density=str(d), noise="none")


def _density_sweep(bundle, cfg):
    _run_density_models(bundle, cfg)


def _limited_params(bundle, cfg):
    _run_density_models(bundle, cfg)


def _nlos_scene(bundle, cfg):
    _run_density_models(bundle, cfg, "nlos")


def _noise_study(bundle, cfg, variants):
    scene = _scene(cfg)
    d = cfg["densities"][-1]
    for seed in cfg["seeds"]:
        for label, noise in variants:
            ds = _prepare(cfg, scene, d, seed, noise, tag=label)
            bundle.dataset(f"{label}_s{seed}", ds)
            realized = ds.meta.noise.get("realized_nmse")
            for key in cfg["models"]:
                row = {"density": str(d), "noise": label}
                if realized is not None:
                    row["realized_noise_nmse"] = realized
                _fit(bundle, cfg, key, ds, scene, seed, f"{key}_{label}_s{seed}", **row)


def _pos_noise(bundle, cfg):
    _noise_study(bundle, cfg, [("clean", None),
                               (f"pos{cfg['sigma_m']}", NoiseSpec("position_gaussian", sigma_m=cfg["sigma_m"]))])


def _cir_noise_gaussian(bundle, cfg):
    v = [("clean", None)] + [(f"gauss{t}", NoiseSpec("cir_gaussian", target_nmse=t)) for t in cfg["target_nmse"]]
    _noise_study(bundle, cfg, v)


def _cir_noise_alpha(bundle, cfg):
    v = [("clean", None)] + [
        (f"alpha{a}", NoiseSpec("cir_alpha_stable", alpha=a, scale=cfg["alpha_scale"])) for a in cfg["alphas"]
    ]
    _noise_study(bundle, cfg, v)


def _freq_sweep(bundle, cfg):
    d = cfg["densities"][-1]
    for seed in cfg["seeds"]:
        for f in cfg["frequencies"]:
            scene = _scene(cfg, frequency=f)
            ds = _prepare(cfg, scene, d, seed, tag=f"f{f:g}")
            bundle.dataset(f"f{f:g}_s{seed}", ds)
            for key in cfg["models"]:
                _fit(bundle, cfg, key, ds, scene, seed, f"{key}_f{f:g}_s{seed}", density=str(d), noise="none",
                     frequency=float(f))


def _mimo_shared(bundle, cfg):
    scene = _scene(cfg, "mimo")
    d = cfg["mimo_density"]
    for seed in cfg["seeds"]:
        ds = _prepare(cfg, scene, d, seed, mimo=True)
        bundle.dataset(f"mimo_s{seed}", ds)
        for key in cfg["models"]:
            _fit(bundle, cfg, key, ds, scene, seed, f"{key}_d{d}_s{seed}", density=str(d), noise="none")


def mapper_dataset(ds: Dataset, antennas) -> Dataset:
    """Re-key a MIMO dataset so inputs are the CIRs of ``antennas``.

    The ``positions`` column of the returned dataset holds the sub-array
    CIR vectors; labels stay the full-array CIR.
    """
    q = ds.q // ds.meta.n_antennas
    cols = antenna_columns(antennas, q)
    return replace(ds, positions=ds.cir[:, cols], positions_noisy=None)


def _channel_mapping(bundle, cfg):
    scene = _scene(cfg, "mimo")
    d = cfg["mimo_density"]
    base = _models(cfg)["mapper"]
    for seed in cfg["seeds"]:
        ds = _prepare(cfg, scene, d, seed, mimo=True)
        bundle.dataset(f"mimo_s{seed}", ds)
        q = ds.q // ds.meta.n_antennas
        for k in cfg["antennas"]:
            sub = mapper_dataset(ds, MAPPER_SUBSETS[int(k)])
            spec = base.with_(input_dim=sub.positions.shape[1], q_out=ds.q)
            tc = TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["mapper_lr"]),
                             seed=int(seed), eval_every=int(cfg["eval_every"]), model_spec=spec)
            _, curve = train(tc, sub, ckpt_dir=bundle.r.out_dir)
            bundle.curve(f"mapper_k{k}_s{seed}", curve, model="mapper", seed=int(seed), antennas=int(k),
                         density=str(d), noise="none", q_per_antenna=q)


def latent_periodic_data(n_samples, wavelengths, rng, n_test=1000):
    """Samples of ``A(x) cos(k x)`` on ``[0, wavelengths]`` (unit wavelength).

    Inputs are mapped to ``[-1, 1]``; ``A`` is a slow positive envelope.
    """
    k = 2 * math.pi

    def f(x):
        return (1.0 + 0.5 * np.sin(2 * math.pi * x / wavelengths)) * np.cos(k * x)

    def enc(x):
        return (2 * x / wavelengths - 1.0)[:, None]

    x_tr = np.sort(rng.uniform(0.0, wavelengths, n_samples))
    x_te = np.linspace(0.0, wavelengths, n_test)
    return enc(x_tr), f(x_tr)[:, None], enc(x_te), f(x_te)[:, None]


def _latent_periodic_1d(bundle, cfg):
    for seed in cfg["seeds"]:
        rng = np.random.default_rng(_derive_seed("latent", seed))
        xtr, ytr, xte, yte = latent_periodic_data(cfg["n_samples"], cfg["wavelengths"], rng, cfg["n_test"])
        for act in ("sine", "tanh"):
            spec = ModelSpec("mlp", tuple(cfg["widths"]), q_out=2, input_dim=1, activation=act)
            model = build_model(spec, seed)
            tc = TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]),
                             lr=float(cfg[f"{act}_lr"]), seed=int(seed), eval_every=int(cfg["eval_every"]),
                             model_spec=spec)
            # second output column is a zero dummy so q stays even
            pad = lambda y: np.hstack([y, np.zeros_like(y)])  # noqa: E731
            rng_b = np.random.default_rng(np.random.SeedSequence([tc.seed, 7]))
            curve = ConvergenceCurve(config_digest=tc.digest())
            test_mse = lambda: float(np.mean((model.predict(xte)[:, :1] - yte) ** 2))  # noqa: E731
            _loop(model, xtr, pad(ytr), tc.steps, tc.batch_size, tc.lr, rng_b, curve, test_mse, tc.eval_every, 0,
                  bundle.r.out_dir, tc.digest())
            curve.model_digest = model.params.digest()
            bundle.curve(f"{act}_s{seed}", curve, model=f"{act}_mlp", seed=int(seed), density=str(cfg["n_samples"]),
                         noise="none", metric="test_mse")


PRESETS = {
    "density_sweep": _density_sweep,
    "limited_params": _limited_params,
    "pos_noise": _pos_noise,
    "cir_noise_gaussian": _cir_noise_gaussian,
    "cir_noise_alpha": _cir_noise_alpha,
    "freq_sweep": _freq_sweep,
    "nlos_scene": _nlos_scene,
    "mimo_shared": _mimo_shared,
    "channel_mapping": _channel_mapping,
    "latent_periodic_1d": _latent_periodic_1d,
}


def run_preset(name: str, overrides: dict | None = None, out_root="runs", stamp: str | None = None) -> PresetResult:
    """Run a preset study; outputs land in ``out_root/<name>/<stamp>/``.

    The stamp defaults to the current UTC time; it only names the
    directory, so file contents depend on the seeds alone.
    """
    cfg = preset_config(name, overrides)
    stamp = stamp or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    out = Path(out_root) / name / stamp
    result = PresetResult(name, out, cfg)
    bundle = _Bundle(result)
    PRESETS[name](bundle, cfg)
    return bundle.finish()
