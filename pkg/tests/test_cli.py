import numpy as np
import pytest
import yaml

from cirforge.cli import main, parse_noise, parse_overrides, UsageError
from cirforge.dataset import NoiseSpec, arrays_checksum, deserialize, import_csv

FOOTPRINT = "40,20,0.3,0.3"


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.cirds"
    rc = main(["dataset-generate", "--scene", "paper_scene", "--density", "3", "--seed", "1",
               "--out", str(path), "--footprint", FOOTPRINT, "--require-paths"])
    assert rc == 0
    return path


def test_unknown_verb_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["dataset-generate", "--scene", "paper_scene", "--density", "40", "--out", "x.cirds"]) == 2


def test_unknown_scene_is_validation_error(tmp_path, capsys):
    rc = main(["dataset-generate", "--scene", str(tmp_path / "missing.yaml"), "--density", "1", "--seed", "0",
               "--out", str(tmp_path / "x.cirds")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_scene_validate_reports_probes(capsys):
    assert main(["scene-validate", "paper_scene"]) == 0
    out = capsys.readouterr().out
    assert "q=182" in out
    assert len([line for line in out.splitlines() if line[:1].isdigit()]) == 10


def test_dataset_generate_writes_split_scaled_file(data_file):
    ds = deserialize(data_file)
    assert ds.is_test is not None and ds.is_test.any()
    assert np.max(np.abs(ds.cir)) == pytest.approx(1.0)
    assert ds.meta.seed == 1


def test_dataset_generate_is_reproducible(tmp_path, data_file):
    again = tmp_path / "again.cirds"
    main(["dataset-generate", "--scene", "paper_scene", "--density", "3", "--seed", "1",
          "--out", str(again), "--footprint", FOOTPRINT, "--require-paths"])
    assert again.read_bytes() == data_file.read_bytes()


def test_noise_option(tmp_path):
    out = tmp_path / "n.cirds"
    rc = main(["dataset-generate", "--scene", "paper_scene", "--density", "3", "--seed", "2", "--out", str(out),
               "--footprint", FOOTPRINT, "--noise", "cir_gaussian:target_nmse=0.05"])
    assert rc == 0
    ds = deserialize(out)
    assert ds.meta.noise["realized_nmse"] == pytest.approx(0.05, rel=0.05)
    bad = main(["dataset-generate", "--scene", "paper_scene", "--density", "3", "--seed", "2",
                "--out", str(out), "--noise", "cir_alpha_stable:target_nmse=0.1"])
    assert bad == 1


def test_parse_helpers():
    assert parse_noise("position_gaussian:sigma_m=0.05") == NoiseSpec("position_gaussian", sigma_m=0.05)
    assert parse_noise(None) is None
    with pytest.raises(UsageError):
        parse_noise("cir_gaussian:target_nmse")
    assert parse_overrides(["steps=10", "seeds=[0,1]", "paper-scale=false"]) == {
        "steps": 10, "seeds": [0, 1], "paper_scale": False}
    with pytest.raises(UsageError):
        parse_overrides(["steps"])


def test_export_csv_round_trip(tmp_path, data_file):
    out = tmp_path / "d.csv"
    assert main(["export-csv", "--in", str(data_file), "--out", str(out)]) == 0
    ds = deserialize(data_file)
    pos, cir = import_csv(out)
    assert arrays_checksum(pos, cir) == arrays_checksum(ds.positions, ds.cir)


def test_train_then_eval(tmp_path, data_file, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("steps: 30\neval_every: 10\nlr: 0.001\n")
    out = tmp_path / "run"
    assert main(["train", "--model", "table2_cgrbf-small", "--data", str(data_file), "--config", str(cfg),
                 "--out", str(out), "--seed", "0"]) == 0
    assert (out / "curve.csv").read_text().startswith("step,train_mse,test_nmse\n")
    metrics = yaml.safe_load((out / "metrics.yaml").read_text())
    capsys.readouterr()
    assert main(["eval", "--model-ckpt", str(out / "model.ckpt"), "--data", str(data_file)]) == 0
    printed = float(capsys.readouterr().out.split()[1])
    assert printed == pytest.approx(metrics["final_test_nmse"], rel=1e-5)


def test_train_requires_seed(tmp_path, data_file):
    rc = main(["train", "--model", "siren-small", "--data", str(data_file), "--out", str(tmp_path / "r")])
    assert rc == 2


def test_train_rejects_unknown_config_key(tmp_path, data_file):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("seed: 0\nmomentum: 0.9\n")
    rc = main(["train", "--model", "siren-small", "--data", str(data_file), "--config", str(cfg),
               "--out", str(tmp_path / "r")])
    assert rc == 2


@pytest.mark.parametrize("model", ["table2_cgrbf-small", "siren-small", "ae-small"])
def test_gradcheck_passes(model, capsys):
    assert main(["gradcheck", "--model", model, "--max-elements", "10"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_preset_writes_curves_and_is_idempotent(tmp_path):
    args = ["preset", "density_sweep", "steps=5", "eval_every=5", "ae_stage1_steps=5", "ae_stage2_steps=5",
            "densities=[2,3,4]", "--out-root", str(tmp_path)]
    assert main(args + ["--stamp", "a"]) == 0
    assert main(args + ["--stamp", "b"]) == 0
    a, b = tmp_path / "density_sweep" / "a", tmp_path / "density_sweep" / "b"
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert len(csvs) == 9
    assert "cgrbf_d2_s0.csv" in csvs and "ae_d4_s0.csv" in csvs
    for name in csvs + ["metrics.yaml"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_preset_rejects_unknown_override(tmp_path):
    assert main(["preset", "density_sweep", "nonsense=1", "--out-root", str(tmp_path)]) == 1
