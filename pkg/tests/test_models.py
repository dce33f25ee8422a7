import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from cirforge.models import (
    MIMO_ANTENNAS,
    MODEL_PRESETS,
    BuildContext,
    ModelSpec,
    SpecError,
    build_model,
    complexity_count,
    default_w_mean,
    get_spec,
    instrumented_multiplications,
    load_spec,
    spec_from_dict,
)
from cirforge.nn import gradient_check

CTX = BuildContext(region_min=(0.0, 0.0, 1.6), region_max=(3.0, 1.5, 1.6))


def dense_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def test_parameter_count_audit_small_cgrbf():
    model = build_model(get_spec("table5_small_cgrbf"))
    front = dense_params([3, 128, 256, 600])
    kernels = 200 * (3 + 1 + 3 + 1 + 1)  # a, b, c, beta, w
    combiner = 200 * 182 + 182
    assert model.count_params() == front + kernels + combiner == 226_118


def test_parameter_count_audit_small_siren():
    model = build_model(get_spec("table5_small_siren"))
    assert model.count_params() == dense_params([3, 150, 256, 300, 256, 182]) == 240_186


def test_complexity_formula_values():
    spec = ModelSpec("cgrbf", (128, 256, 600), n_kernels=200, kernels_per_group=1)
    assert complexity_count(spec) == (223_152, 1_184)
    tiny = ModelSpec("cgrbf", (3,), n_kernels=1, q_out=6, kernels_per_group=1)
    assert complexity_count(tiny) == (15, 4)


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.integers(1, 40), min_size=0, max_size=3),
    st.integers(1, 12),
    st.integers(1, 20),
    st.sampled_from([1, 2]),
)
def test_complexity_matches_instrumented_counter(hidden, n_k, half_q, kpg):
    spec = ModelSpec("cgrbf", (*hidden, 3 * n_k), n_kernels=n_k, q_out=2 * half_q, kernels_per_group=kpg)
    model = build_model(spec, 0, CTX)
    assert instrumented_multiplications(model) == complexity_count(spec)[0]


def test_complexity_rejects_other_variants():
    with pytest.raises(SpecError):
        complexity_count(get_spec("siren-small"))


def test_spec_validation():
    with pytest.raises(SpecError):
        ModelSpec("transformer")
    with pytest.raises(SpecError):
        ModelSpec("cgrbf", (8, 10), n_kernels=3)
    with pytest.raises(SpecError):
        ModelSpec("cgrbf", (8, 12), n_kernels=3)
    with pytest.raises(SpecError):
        ModelSpec("siren", (8,), q_out=181)
    with pytest.raises(SpecError):
        spec_from_dict({"variant": "siren", "bogus": 1})


def test_spec_dict_round_trip_and_w_init_alias():
    spec = get_spec("table2_cgrbf")
    assert spec_from_dict(spec.to_dict()) == spec
    d = spec.to_dict()
    del d["w_init_mean"], d["w_init_std"]
    d["w_init"] = {"mean": 50.0, "std": 2.0}
    alt = spec_from_dict(d)
    assert (alt.w_init_mean, alt.w_init_std) == (50.0, 2.0)
    assert alt.digest() != spec.digest()


def test_load_spec_from_yaml(tmp_path):
    path = tmp_path / "m.yaml"
    path.write_text("variant: siren\nhidden_widths: [4, 4]\nq_out: 10\n")
    assert load_spec(str(path)) == ModelSpec("siren", (4, 4), q_out=10)
    assert load_spec("siren-small") is MODEL_PRESETS["siren-small"]
    with pytest.raises(KeyError):
        get_spec("nope")


def test_default_kernel_frequency_is_wavenumber():
    assert default_w_mean(3e9) == pytest.approx(62.88, abs=0.01)
    model = build_model(ModelSpec("cgrbf", (30, 300), n_kernels=100, w_init_std=1.0), 0, CTX)
    assert model.params["kernel.w"].mean() == pytest.approx(62.88, abs=0.3)


def test_kernel_pairs_share_front_coordinates():
    model = build_model(get_spec("table2_cgrbf-small"), 0, CTX)
    x = np.array([[1.0, 0.5, 1.6]])
    g, _ = model.front_coords(x)
    phi = model.kernel_outputs(x)
    k = model.k
    for j in range(phi.shape[1]):
        gi = g[0, j // 2]
        expected = math.cos(k["w"][j] * np.linalg.norm(gi - k["a"][j]) + k["b"][j]) * math.exp(
            k["beta"][j] * np.sum((gi - k["c"][j]) ** 2)
        )
        assert phi[0, j] == pytest.approx(expected, rel=1e-12)


def test_coordinate_skip_starts_near_input():
    model = build_model(get_spec("table2_cgrbf"), 0, CTX)
    x = np.array([[1.0, 0.5, 1.6], [2.5, 1.0, 1.6]])
    g, _ = model.front_coords(x)
    assert np.abs(g - x[:, None, :]).max() < 0.05


def test_output_is_linear_in_combiner_weights():
    model = build_model(get_spec("table2_cgrbf-small"), 1, CTX)
    x = np.array([[0.3, 1.1, 1.6]])
    base = model.predict(x)
    model.params["out.W"] *= 2.0
    model.params["out.b"] *= 2.0
    assert_allclose(model.predict(x), 2 * base, rtol=1e-12)


def test_project_clamps_beta():
    model = build_model(get_spec("table2_cgrbf-small"), 0, CTX)
    model.params["kernel.beta"][:] = 0.3
    model.project()
    assert np.all(model.params["kernel.beta"] <= 0)


def test_mimo_output_width():
    spec = ModelSpec("mimo_siren", (8,), q_out=MIMO_ANTENNAS * 182)
    y = build_model(spec, 0, CTX).predict(np.zeros((2, 3)))
    assert y.shape == (2, 64 * 182)


def test_channel_mapper_uses_raw_inputs():
    spec = ModelSpec("channel_mapper", (6,), q_out=8, input_dim=4)
    model = build_model(spec, 0, CTX)
    assert_allclose(model.norm(np.arange(4.0)), np.arange(4.0))
    assert all(layer.activation == "tanh" for layer in model.net.layers[:-1])


def test_ae_pipeline_stages():
    model = build_model(get_spec("ae-small"), 0, CTX)
    with pytest.raises(RuntimeError):
        model.pos2code_model()
    codes = model.encode(np.zeros((4, 182)))
    assert codes.shape == (4, 3)
    assert np.all((codes > 0) & (codes < 1))
    model.stage = 1
    sub = model.pos2code_model()
    assert set(sub.params) == {k for k in model.params if k.startswith("p2c.")}
    pred = model.predictor()
    assert_allclose(pred.predict(np.ones((2, 3))), model.predict(np.ones((2, 3))))


def test_build_is_deterministic_per_seed():
    a = build_model(get_spec("table2_cgrbf-small"), 7, CTX)
    b = build_model(get_spec("table2_cgrbf-small"), 7, CTX)
    c = build_model(get_spec("table2_cgrbf-small"), 8, CTX)
    assert a.params.digest() == b.params.digest() != c.params.digest()


@pytest.mark.parametrize("name", ["table2_cgrbf-small", "siren-small"])
def test_full_model_gradients(name):
    model = build_model(get_spec(name), 0, CTX)
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(0, 3, 3), rng.uniform(0, 1.5, 3), np.full(3, 1.6)])
    y = rng.normal(size=(3, 182)) * 0.1
    report = gradient_check(model, x, y, max_elements=20, rng=0)
    assert report.passed, report.table()


def test_ae_submodel_gradients():
    model = build_model(get_spec("ae-small"), 0, CTX)
    rng = np.random.default_rng(1)
    cir = rng.normal(size=(3, 182)) * 0.1
    assert gradient_check(model.autoencoder(), cir, cir, max_elements=20, rng=0).passed
    x = np.column_stack([rng.uniform(0, 3, 3), rng.uniform(0, 1.5, 3), np.full(3, 1.6)])
    assert gradient_check(model.predictor(), x, cir, max_elements=20, rng=0).passed
