"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary by
``conftest.py``) before asserting.  The full suite trains the desk-scale
studies and takes roughly half an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from cirforge.dataset import NoiseSpec, empirical_nmse, inject_noise, sample_alpha_stable, Dataset, DatasetMeta
from cirforge.experiments import PRESETS, run_preset
from cirforge.models import (
    BuildContext,
    ModelSpec,
    build_model,
    complexity_count,
    get_spec,
    instrumented_multiplications,
)
from cirforge.nn import DenseLayer, ParamStore, cg_backward, cg_forward, dense_backward, dense_forward
from cirforge.nn import gradient_check, mse_loss
from cirforge.scene import PAPER_WINDOW, Box, DelayWindow, Scene, Surface, trace_paths

GRAD_TOL = 1e-4
CTX = BuildContext(region_min=(0.0, 0.0, 1.6), region_max=(3.0, 1.5, 1.6))


# --------------------------------------------------------------------------
# 1. gradient correctness


class _DenseUnit:
    def __init__(self, layer):
        self.layer = layer
        self.params = ParamStore(W=layer.W, b=layer.b)

    def loss_and_grads(self, x, label):
        y, cache = dense_forward(self.layer, x)
        loss, dy = mse_loss(y, label)
        _, dW, db = dense_backward(self.layer, cache, dy)
        return loss, {"W": dW, "b": db}


class _KernelUnit:
    """A bank of Cosine-Gaussian kernels fed per-kernel coordinate triples."""

    def __init__(self, rng, k):
        self.params = ParamStore(
            a=rng.normal(size=(k, 3)),
            b=rng.uniform(0, 2 * math.pi, k),
            c=rng.normal(size=(k, 3)),
            beta=-rng.uniform(0.05, 0.5, k),
            w=rng.uniform(0.5, 4.0, k),
        )

    def _args(self):
        p = self.params
        return p["a"], p["b"], p["c"], p["beta"], p["w"]

    def loss_and_grads(self, g, label):
        phi, cache = cg_forward(*self._args(), g)
        loss, dphi = mse_loss(phi, label)
        _, da, db, dc, dbeta, dw = cg_backward(*self._args(), cache, dphi)
        return loss, {"a": da, "b": db, "c": dc, "beta": dbeta, "w": dw}


def _positions(rng, n):
    return np.column_stack([rng.uniform(0, 3, n), rng.uniform(0, 1.5, n), np.full(n, 1.6)])


def _variant_cases(rng):
    """Small random instance of every model variant as ``(name, model, x, label)``."""
    h = int(rng.integers(2, 6))
    nk = int(rng.integers(1, 4))
    q = 2 * int(rng.integers(1, 5))
    x = _positions(rng, 3)
    cases = []
    cg = ModelSpec("cgrbf", (h, 3 * nk), n_kernels=nk, q_out=q, kernels_per_group=int(rng.integers(1, 3)),
                   sigma0=float(rng.uniform(0.5, 3)), w_init_mean=float(rng.uniform(1, 10)))
    cases.append(("cgrbf", build_model(cg, int(rng.integers(1 << 30)), CTX), x))
    mimo = cg.with_(variant="mimo_cgrbf", q_out=4 * q)
    cases.append(("mimo_cgrbf", build_model(mimo, int(rng.integers(1 << 30)), CTX), x))
    cases.append(("siren", build_model(ModelSpec("siren", (h, h), q_out=q), int(rng.integers(1 << 30)), CTX), x))
    cases.append(("mimo_siren", build_model(ModelSpec("mimo_siren", (h,), q_out=4 * q),
                                            int(rng.integers(1 << 30)), CTX), x))
    tanh = ModelSpec("mlp", (h, h), q_out=q, activation="tanh")
    cases.append(("mlp_tanh", build_model(tanh, int(rng.integers(1 << 30)), CTX), x))
    mapper = ModelSpec("channel_mapper", (h,), q_out=2 * q, input_dim=q)
    cases.append(("channel_mapper", build_model(mapper, int(rng.integers(1 << 30)), CTX), rng.normal(size=(3, q))))
    ae_spec = ModelSpec("ae_pipeline", (h,), q_out=q, ae_encoder=(h,), ae_decoder=(h,))
    ae = build_model(ae_spec, int(rng.integers(1 << 30)), CTX)
    cir = rng.normal(size=(3, q))
    cases.append(("ae_autoencoder", ae.autoencoder(), cir, cir))
    cases.append(("ae_predictor", ae.predictor(), x))
    return [c if len(c) == 4 else (*c, rng.normal(size=(3, c[1].spec.q_out))) for c in cases]


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240101)
    worst = {}
    worst_elem = {}
    for _ in range(50):
        cases = []
        for act in ("sine", "tanh", "sigmoid", "identity"):
            n_in, n_out = (int(v) for v in rng.integers(1, 6, 2))
            layer = DenseLayer(rng.normal(size=(n_out, n_in)) * 0.5, rng.normal(size=n_out) * 0.2, act,
                               float(rng.uniform(1, 30)))
            cases.append((f"dense_{act}", _DenseUnit(layer), rng.normal(size=(4, n_in)), rng.normal(size=(4, n_out))))
        k = int(rng.integers(1, 5))
        cases.append(("cg_kernel", _KernelUnit(rng, k), rng.normal(size=(4, k, 3)), rng.normal(size=(4, k))))
        cases.extend(_variant_cases(rng))
        for name, model, x, label in cases:
            rep = gradient_check(model, x, label, tol=GRAD_TOL)
            worst[name] = max(worst.get(name, 0.0), max(rep.errors.values()))
            el = gradient_check(model, x, label, tol=GRAD_TOL, mode="element")
            worst_elem[name] = max(worst_elem.get(name, 0.0), max(el.errors.values()))
    elapsed = time.perf_counter() - t0
    max_err = max(worst.values())
    ok = max_err < GRAD_TOL and elapsed < 60
    detail = f"{len(worst)} kinds x 50, max rel err {max_err:.2e} (per-element worst {max(worst_elem.values()):.2e}), " \
             f"{elapsed:.0f}s"
    assert verdict(1, "analytic gradients match central differences", ok, detail), worst


# --------------------------------------------------------------------------
# 2. ray-tracing oracle


def _brute_force_length(tx, rx, s: Surface, n=2000):
    iu, iv = {0: (1, 2), 1: (0, 2), 2: (0, 1)}[s.axis]
    u = np.linspace(s.min_u, s.max_u, n)
    v = np.linspace(s.min_v, s.max_v, n)
    dt = (tx[s.axis] - s.plane_coord) ** 2
    dr = (rx[s.axis] - s.plane_coord) ** 2
    d1 = np.sqrt(((u - tx[iu]) ** 2)[:, None] + ((v - tx[iv]) ** 2)[None, :] + dt)
    d2 = np.sqrt(((u - rx[iu]) ** 2)[:, None] + ((v - rx[iv]) ** 2)[None, :] + dr)
    return float((d1 + d2).min())


def test_criterion_2_ray_tracing_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_nlos = 0.0
    los_exact = True
    region = Box((-100.0, -100.0, -100.0), (100.0, 100.0, 100.0))
    for i in range(100):
        axis = int(rng.integers(3))
        plane = float(rng.uniform(-5, 5))
        # both ends on the same side of the wall
        side = 1.0 if rng.random() < 0.5 else -1.0
        tx, rx = rng.uniform(-10, 10, (2, 3))
        tx[axis] = plane + side * rng.uniform(0.5, 10)
        rx[axis] = plane + side * rng.uniform(0.5, 10)
        iu, iv = {0: (1, 2), 1: (0, 2), 2: (0, 1)}[axis]
        # specular point, then a rectangle that contains it
        ht, hr = abs(tx[axis] - plane), abs(rx[axis] - plane)
        mirror_pt = tx + (rx - tx) * ht / (ht + hr)
        lo_u, hi_u = mirror_pt[iu] - rng.uniform(0.5, 5), mirror_pt[iu] + rng.uniform(0.5, 5)
        lo_v, hi_v = mirror_pt[iv] - rng.uniform(0.5, 5), mirror_pt[iv] + rng.uniform(0.5, 5)
        wall = Surface(1, "xyz"[axis], plane, lo_u, hi_u, lo_v, hi_v, float(rng.uniform(2, 10)))
        scene = Scene((wall,), tuple(rx), 3e9, region, max_reflection_order=1)
        paths = trace_paths(scene, tx)
        los = [p for p in paths if p.order == 0]
        nlos = [p for p in paths if p.order == 1]
        # exact up to the last bit of the rounded Euclidean distance
        d = math.dist(tx, rx)
        los_exact &= len(los) == 1 and abs(los[0].length_m - d) <= math.ulp(d)
        if len(nlos) != 1:
            worst_nlos = math.inf
            continue
        worst_nlos = max(worst_nlos, abs(nlos[0].length_m - _brute_force_length(tx, rx, wall)))
    elapsed = time.perf_counter() - t0
    ok = worst_nlos < 1e-4 and los_exact and elapsed < 120
    detail = f"max |NLOS - Fermat| {worst_nlos:.2e} m, LOS exact {los_exact}, {elapsed:.0f}s"
    assert verdict(2, "single-wall image method matches Fermat brute force", ok, detail)


# --------------------------------------------------------------------------
# 3. vectorisation constant


def test_criterion_3_q_is_182(verdict):
    q = DelayWindow(220e-9, 310e-9, 1e-9).q
    ok = q == 182 and PAPER_WINDOW.q == 182
    assert verdict(3, "220-310 ns at 1 ns gives q = 182", ok, f"q={q}")


# --------------------------------------------------------------------------
# 4. parameter counts and complexity formula


def test_criterion_4_parameter_counts(verdict):
    cg = build_model(get_spec("table5_small_cgrbf")).count_params()
    sr = build_model(get_spec("table5_small_siren")).count_params()
    rng = np.random.default_rng(4)
    formula_ok = True
    for _ in range(20):
        hidden = tuple(int(v) for v in rng.integers(1, 64, int(rng.integers(0, 3))))
        nk = int(rng.integers(1, 30))
        spec = ModelSpec("cgrbf", (*hidden, 3 * nk), n_kernels=nk, q_out=2 * int(rng.integers(1, 100)),
                         kernels_per_group=int(rng.integers(1, 3)))
        formula_ok &= instrumented_multiplications(build_model(spec, 0, CTX)) == complexity_count(spec)[0]
    ok = cg == 192_576 and sr == 193_411 and formula_ok
    detail = f"cgrbf {cg:,} (want 192,576), siren {sr:,} (want 193,411), formula vs counter on 20 specs: {formula_ok}"
    assert verdict(4, "table-5 parameter counts and complexity formula", ok, detail)


# --------------------------------------------------------------------------
# 5. latent periodicity


def test_criterion_5_latent_periodicity(verdict, tmp_path):
    t0 = time.perf_counter()
    res = run_preset("latent_periodic_1d", out_root=tmp_path, stamp="run")
    sine = res.nmse(model="sine_mlp")[0]
    tanh = res.nmse(model="tanh_mlp")[0]
    elapsed = time.perf_counter() - t0
    ok = sine <= 0.1 * tanh and elapsed < 300
    detail = f"sine {sine:.3g} vs tanh {tanh:.3g} (ratio {sine / tanh:.3g}), {elapsed:.0f}s"
    assert verdict(5, "sine MLP beats tanh MLP by 10x on a latent-periodic target", ok, detail)


# --------------------------------------------------------------------------
# 6. ordering across densities


def test_criterion_6_density_ordering(verdict, tmp_path):
    t0 = time.perf_counter()
    res = run_preset("density_sweep", {"seeds": [0, 1, 2]}, out_root=tmp_path, stamp="run")
    elapsed = time.perf_counter() - t0
    dens = res.config["densities"]
    med = {(m, d): float(np.median(res.nmse(model=m, density=str(d)))) for m in ("cgrbf", "siren", "ae")
           for d in dens}
    hi, lo = str(dens[-1]), str(dens[0])
    a = med[("cgrbf", hi)] * 3 <= med[("ae", hi)] and med[("siren", hi)] * 3 <= med[("ae", hi)]
    b = med[("cgrbf", lo)] <= med[("siren", lo)]
    mono = {m: all(med[(m, str(d1))] >= med[(m, str(d2))] for d1, d2 in zip(dens, dens[1:]))
            for m in ("cgrbf", "siren", "ae")}
    table = "; ".join(f"{m} " + "/".join(f"{med[(m, str(d))]:.3g}" for d in dens) for m in ("cgrbf", "siren", "ae"))
    verdict("6a", "C-GRBF and SIREN 3x below AE at the highest density", a, table)
    verdict("6b", "C-GRBF median <= SIREN median at the lowest density", b,
            f"{med[('cgrbf', lo)]:.3g} vs {med[('siren', lo)]:.3g}")
    verdict("6c", "every model's median NMSE non-increasing in density", all(mono.values()), str(mono))
    verdict("6t", "density sweep runtime under 30 minutes", elapsed < 1800, f"{elapsed / 60:.1f} min")
    assert a and b and all(mono.values()) and elapsed < 1800, table


# --------------------------------------------------------------------------
# 7. noise calibration


def test_criterion_7_noise_calibration(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for target in (0.001, 0.01, 0.1, 1.0):
        for seed in range(5):
            cir = rng.normal(size=(1000, 182)) * rng.uniform(0.1, 10, (1000, 1))
            ds = Dataset(np.zeros((1000, 3)), cir, DatasetMeta(scene_hash="", density=1.0, seed=seed, q=182))
            noisy = inject_noise(ds, NoiseSpec("cir_gaussian", target_nmse=target), seed)
            realized = empirical_nmse(noisy.cir_noisy - noisy.cir, noisy.cir)
            worst = max(worst, abs(realized / target - 1))
    x = sample_alpha_stable(2.0, 1.0, np.random.default_rng(12), 1_000_000)
    var_err = abs(x.var() / 2.0 - 1)
    ok = worst < 0.01 and var_err < 0.02
    detail = f"worst Gaussian NMSE deviation {worst:.2%}, alpha=2 variance deviation {var_err:.2%}"
    assert verdict(7, "noise injection calibrated", ok, detail)


# --------------------------------------------------------------------------
# 8. robustness to position noise


def test_criterion_8_position_noise(verdict, tmp_path):
    res = run_preset("pos_noise", out_root=tmp_path, stamp="run")
    clean = res.nmse(model="cgrbf", noise="clean")[0]
    noisy = res.nmse(model="cgrbf", noise=f"pos{res.config['sigma_m']}")[0]
    ok = noisy / clean < 10
    detail = f"clean {clean:.3g}, sigma 0.03 m {noisy:.3g}, factor {noisy / clean:.2f}"
    assert verdict(8, "position noise degrades C-GRBF by less than 10x", ok, detail)


# --------------------------------------------------------------------------
# 9. channel mapping


def test_criterion_9_channel_mapping(verdict, tmp_path):
    res = run_preset("channel_mapping", out_root=tmp_path, stamp="run")
    v = {k: res.nmse(antennas=k)[0] for k in (2, 4, 8)}
    ok = v[8] <= v[4] <= v[2]
    detail = ", ".join(f"{k} antennas {v[k]:.3g}" for k in (2, 4, 8))
    assert verdict(9, "mapping NMSE non-increasing in input antennas", ok, detail)


# --------------------------------------------------------------------------
# 10. determinism

TINY = {"steps": 6, "eval_every": 3, "ae_stage1_steps": 4, "ae_stage2_steps": 4, "densities": [2, 3, 4]}
TINY_EXTRA = {
    "mimo_shared": {"mimo_density": 2},
    "channel_mapping": {"mimo_density": 2},
    "latent_periodic_1d": {"n_test": 50},
}


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_criterion_10_determinism(name, verdict, tmp_path):
    over = {**TINY, **TINY_EXTRA.get(name, {})}
    a = run_preset(name, over, out_root=tmp_path, stamp="a")
    b = run_preset(name, over, out_root=tmp_path, stamp="b")
    files = sorted(p.name for p in a.out_dir.iterdir() if p.suffix in (".csv", ".yaml"))
    same = files == sorted(p.name for p in b.out_dir.iterdir() if p.suffix in (".csv", ".yaml"))
    same = same and all((a.out_dir / f).read_bytes() == (b.out_dir / f).read_bytes() for f in files)
    n_csv = sum(f.endswith(".csv") for f in files)
    assert verdict(10, f"byte-identical re-run of {name}", same and n_csv > 0, f"{n_csv} CSVs")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
