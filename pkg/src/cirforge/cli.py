"""``cirforge`` command-line entry point.

Exit status: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import os

# BLAS threads are fixed at numpy import time, so honour the override first
_THREADS = os.environ.get("CIRFORGE_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import yaml  # noqa: E402

from . import dataset as dsmod  # noqa: E402
from . import experiments as ex  # noqa: E402
from .models import BuildContext, SpecError, build_model, load_spec  # noqa: E402
from .nn import gradient_check  # noqa: E402
from .presets import SCENES, desk_region, get_scene  # noqa: E402
from .scene import PAPER_WINDOW, SceneError, auto_window, load_scene, trace_batch  # noqa: E402

logger = logging.getLogger("cirforge")

VALIDATION_ERRORS = (SceneError, SpecError, dsmod.DatasetError, ValueError, KeyError, FileNotFoundError,
                     FloatingPointError)


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _floats(text: str):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_scene(name: str, frequency=None, footprint=None):
    kw = {}
    if frequency is not None:
        kw["frequency"] = frequency
    if footprint is not None:
        if len(footprint) != 4:
            raise UsageError("--footprint takes x0,y0,width,depth")
        kw["ue_region"] = desk_region(*footprint)
    if name in SCENES:
        return get_scene(name, **kw)
    scene = load_scene(name)
    if "frequency" in kw:
        scene = scene.replace(frequency=kw["frequency"])
    if "ue_region" in kw:
        scene = scene.replace(ue_region=kw["ue_region"])
    return scene


def parse_noise(text: str | None):
    """``kind[:key=value,...]``, e.g. ``cir_gaussian:target_nmse=0.01``."""
    if not text:
        return None
    kind, _, rest = text.partition(":")
    cfg = {"kind": kind}
    for item in filter(None, rest.split(",")):
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"bad noise option {item!r}; expected key=value")
        cfg[k.strip()] = v.strip()
    return dsmod.NoiseSpec.from_config(cfg)


def _parse_value(v: str):
    return yaml.safe_load(v)


def parse_overrides(items) -> dict:
    out = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} must look like key=value")
        out[k.strip().replace("-", "_")] = _parse_value(v)
    return out


def context_from_meta(meta) -> BuildContext | None:
    if not meta.context:
        return None
    return BuildContext(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.context.items()})


# --------------------------------------------------------------------------
# verbs


def cmd_scene_validate(args) -> int:
    scene = _load_scene(args.scene)
    lo, hi = np.asarray(scene.ue_region.min), np.asarray(scene.ue_region.max)
    t = (np.arange(10) + 0.5) / 10
    probes = lo + (hi - lo) * np.column_stack([t, t[::-1], np.full(10, 0.5)])
    batch = trace_batch(scene, probes)
    valid = np.array(batch.valid).T if batch.chains else np.zeros((10, 0), bool)
    order = np.array([len(c) for c in batch.chains])
    print(f"scene {args.scene}: {len(scene.surfaces)} surfaces, digest {scene.digest()[:16]}")
    print("probe  x        y        z       paths  los  order1  order2")
    for i, p in enumerate(probes):
        v = valid[i]
        counts = [int(np.sum(v & (order == k))) for k in (0, 1, 2)]
        print(f"{i:<5d}  {p[0]:<7.2f}  {p[1]:<7.2f}  {p[2]:<6.2f}  {int(v.sum()):<5d}  {counts[0]:<3d}  "
              f"{counts[1]:<6d}  {counts[2]}")
    w = auto_window(scene)
    print(f"auto window {w.start_s * 1e9:.0f}-{w.end_s * 1e9:.0f} ns, q={w.q}")
    if not valid.any(axis=1).all():
        print("warning: some probe positions have no path", file=sys.stderr)
    return 0


def cmd_dataset_generate(args) -> int:
    scene = _load_scene(args.scene, args.frequency, args.footprint)
    window = PAPER_WINDOW if args.window == "paper" else auto_window(scene)
    noise = parse_noise(args.noise)
    if args.mimo:
        ds = dsmod.generate_mimo_dataset(scene, args.density, args.seed, window, args.reference_area, args.split)
    else:
        ds = dsmod.generate_dataset(scene, args.density, args.seed, window, args.reference_area, args.split,
                                    require_paths=args.require_paths)
    if noise is not None:
        ds = dsmod.inject_noise(ds, noise, np.random.default_rng([args.seed, 3]))
    if len(ds) == 0:
        raise dsmod.DatasetError("no records generated")
    if not args.no_scale:
        ds, _ = dsmod.scale_fit_apply(ds)
    ds = dsmod.split(ds, args.split, args.seed)
    dsmod.serialize(ds, args.out)
    print(f"wrote {len(ds)} records (q={ds.q}) to {args.out}; sha256 {dsmod.file_checksum(args.out)}")
    return 0


def _train_config(args, spec) -> ex.TrainConfig:
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = yaml.safe_load(fh) or {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        raise UsageError("a seed is required: pass --seed or set 'seed' in the config")
    allowed = {"steps", "batch_size", "lr", "seed", "eval_every", "stage2_lr", "stage1_steps"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    return ex.TrainConfig(model_spec=spec, dataset_path=str(args.data), **cfg)


def cmd_train(args) -> int:
    data = dsmod.deserialize(args.data)
    spec = load_spec(args.model).with_(q_out=data.q)
    tc = _train_config(args, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = context_from_meta(data.meta)
    model, curve = ex.train(tc, data, ctx=ctx or BuildContext(), ckpt_dir=out)
    curve.write(out / "curve.csv")
    ex.save_model(out / "model.ckpt", model, ctx or BuildContext(), {"config_digest": tc.digest()})
    summary = {"final_test_nmse": curve.final_nmse, "steps": tc.steps, "model_digest": curve.model_digest}
    (out / "metrics.yaml").write_text(yaml.safe_dump(summary, sort_keys=True))
    print(f"final test NMSE {curve.final_nmse:.6g}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = ex.load_model(args.model_ckpt)
    data = dsmod.deserialize(args.data)
    test = data.test() if data.is_test is not None else data
    if args.all:
        test = data
    value = ex.evaluate_nmse(model, test)
    print(f"NMSE {value:.6g} over {len(test)} records")
    return 0


def cmd_gradcheck(args) -> int:
    spec = load_spec(args.model)
    model = build_model(spec, args.seed)
    rng = np.random.default_rng(args.seed)
    ctx = BuildContext()
    if spec.input_dim == 3:
        lo, hi = np.asarray(ctx.region_min), np.asarray(ctx.region_max)
        x = lo + (hi - lo) * rng.random((args.batch, 3))
    else:
        x = rng.normal(size=(args.batch, spec.input_dim))
    label = rng.normal(size=(args.batch, spec.q_out))
    if spec.variant == "ae_pipeline":
        # the two trainable chains: auto-encoder and position -> CIR predictor
        parts = [("autoencoder", model.autoencoder(), label), ("predictor", model.predictor(), x)]
    else:
        parts = [(spec.variant, model, x)]
    ok = True
    for name, sub, inp in parts:
        report = gradient_check(sub, inp, label, tol=args.tol, max_elements=args.max_elements, rng=rng)
        print(f"[{name}]")
        print(report.table())
        ok &= report.passed
    return 0 if ok else 1


def cmd_preset(args) -> int:
    overrides = parse_overrides(args.overrides)
    if args.paper_scale is not None:
        overrides["paper_scale"] = args.paper_scale
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    res = ex.run_preset(args.name, overrides, out_root=args.out_root, stamp=args.stamp)
    for row in res.rows:
        extra = ", ".join(f"{k}={row[k]}" for k in ("density", "noise") if k in row)
        print(f"{row['curve']}: {row['model']} ({extra}) final {row['final_nmse']:.6g}")
    print(f"{len(res.curves)} curves written to {res.out_dir}")
    return 0


def cmd_export_csv(args) -> int:
    ds = dsmod.deserialize(args.inp)
    dsmod.export_csv(ds, args.out)
    print(f"wrote {len(ds)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cirforge", description="Ray-traced CIR datasets and position-to-CIR networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    s = sub.add_parser("scene-validate", help="check a scene and trace 10 probe positions")
    s.add_argument("scene", help="preset name or scene YAML file")
    s.set_defaults(fn=cmd_scene_validate)

    s = sub.add_parser("dataset-generate", help="sample positions and write a .cirds dataset")
    s.add_argument("--scene", required=True)
    s.add_argument("--density", required=True, help="preset 40/60/100 or a number")
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", help="kind[:key=value,...]")
    s.add_argument("--window", choices=("auto", "paper"), default="auto")
    s.add_argument("--footprint", type=_floats, help="x0,y0,width,depth of the user region")
    s.add_argument("--frequency", type=float)
    s.add_argument("--reference-area", type=float, default=dsmod.DEFAULT_REFERENCE_AREA)
    s.add_argument("--split", type=float, default=0.8)
    s.add_argument("--mimo", action="store_true", help="label at every array element")
    s.add_argument("--require-paths", action="store_true", help="drop positions without any path")
    s.add_argument("--no-scale", action="store_true")
    s.set_defaults(fn=cmd_dataset_generate)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--model", required=True, help="preset name or spec YAML")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="YAML with steps, batch_size, lr, seed, eval_every, stage2_lr")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="test NMSE of a checkpoint")
    s.add_argument("--model-ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--all", action="store_true", help="evaluate every record, not just the test split")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--model", required=True)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=3)
    s.add_argument("--max-elements", type=int, default=40, help="sampled entries per tensor")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("preset", help="run a preset study")
    s.add_argument("name", choices=sorted(ex.PRESETS))
    s.add_argument("overrides", nargs="*", help="key=value config overrides")
    s.add_argument("--paper-scale", type=_bool, default=None, metavar="BOOL")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-root", default="runs")
    s.add_argument("--stamp", help="output directory name (default: UTC time)")
    s.set_defaults(fn=cmd_preset)

    s = sub.add_parser("export-csv", help="write a dataset as CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export_csv)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
