import io

import numpy as np
import pytest

from snflow.cli import main

LINEAR = """
[experiment]
seed = {seed}

[problem]
type = linear_gaussian
dim = 2
n_components = 2
scale = {scale}

[training]
steps = {steps}
batch_size = 64
lr = 0.005

[evaluation]
n_y = 2
n_samples = 200

[chain]
n_layers = 2
interp_steps = 1

[layer.1]
type = deterministic
n_blocks = 2
hidden = 16

[layer.2]
type = mala
a1 = 0.001
a2 = 0.05
n_steps = 2
t = 1
"""

MIXED = """
[problem]
type = mixed_noise
dim = 3
obs_dim = 5
surrogate_hidden = 8
surrogate_samples = 200
surrogate_steps = 50

[training]
steps = 0

[evaluation]
n_y = 1
n_samples = 100
baseline_steps = 20

[chain]
n_layers = 2

[layer.1]
type = deterministic
n_blocks = 1
hidden = 8

[layer.2]
type = rw
n_steps = 2
t = 1
"""


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def trained(tmp_path):
    cfg = write(tmp_path, LINEAR.format(seed=0, scale=0.1, steps=150))
    code, text = run("train", "--config", cfg, "--out-dir", tmp_path / "run")
    assert code == 0, text
    return tmp_path / "run"


def read_samples(path):
    lines = path.read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=len(header) + 1, ndmin=2)
    return header, data


def test_oracle_check_passes():
    code, text = run("oracle-check", "--config", "configs/oracle_2d.ini")
    assert code == 0
    assert text.startswith("PASS")


def test_oracle_check_zero_operator(tmp_path):
    cfg = write(tmp_path, LINEAR.format(seed=0, scale=0.0, steps=0))
    code, text = run("oracle-check", "--config", cfg)
    assert code == 0
    assert "posterior equals the prior" in text


def test_oracle_check_not_applicable(tmp_path, capsys):
    code, _ = run("oracle-check", "--config", write(tmp_path, MIXED))
    assert code == 2
    assert "not applicable" in capsys.readouterr().err


def test_train_writes_artifacts_and_lowers_loss(trained):
    assert (trained / "model.npz").is_file()
    assert "[training]" in (trained / "config.resolved.ini").read_text()
    losses = np.loadtxt(trained / "loss_trace.csv", delimiter=",", skiprows=1)[:, 1]
    assert len(losses) == 150
    assert losses[-30:].mean() < losses[:30].mean()


def test_train_zero_steps_and_reproducibility(tmp_path):
    cfg = write(tmp_path, LINEAR.format(seed=4, scale=0.1, steps=0))
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--out-dir", tmp_path / name, "--deterministic")[0] == 0
    assert (tmp_path / "a" / "model.npz").read_bytes() == (tmp_path / "b" / "model.npz").read_bytes()
    # the resolved config re-runs to the same model
    assert run("train", "--config", tmp_path / "a" / "config.resolved.ini",
               "--out-dir", tmp_path / "c")[0] == 0
    assert (tmp_path / "c" / "model.npz").read_bytes() == (tmp_path / "a" / "model.npz").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, LINEAR.format(seed=4, scale=0.1, steps=2))
    run("train", "--config", cfg, "--out-dir", tmp_path / "a")
    run("train", "--config", cfg, "--out-dir", tmp_path / "b", "--seed", 5)
    assert "seed = 5" in (tmp_path / "b" / "config.resolved.ini").read_text()
    assert (tmp_path / "a" / "model.npz").read_bytes() != (tmp_path / "b" / "model.npz").read_bytes()


def test_invalid_layer_index_fails_before_compute(tmp_path, capsys):
    cfg = write(tmp_path, LINEAR.format(seed=0, scale=0.1, steps=5).replace("t = 1", "t = 4"))
    code, _ = run("train", "--config", cfg, "--out-dir", tmp_path / "run")
    assert code == 2
    assert "outside 0..1" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_sample_is_reproducible(trained, tmp_path):
    args = ["sample", "--model", trained / "model.npz", "--y", "0.01,-0.02", "--n", 50, "--seed", 9]
    run(*args, "--out", tmp_path / "s1.csv")
    run(*args, "--out", tmp_path / "s2.csv")
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    header, data = read_samples(tmp_path / "s1.csv")
    assert data.shape == (50, 2)
    assert any("model_sha256" in h for h in header)
    assert any(h.startswith("# seed 9") for h in header)


def test_sample_zero_rows_is_header_only(trained, tmp_path):
    code, _ = run("sample", "--model", trained / "model.npz", "--y", "0,0", "--n", 0,
                  "--out", tmp_path / "empty.csv")
    assert code == 0
    lines = (tmp_path / "empty.csv").read_text().splitlines()
    assert lines[-1] == "x_1,x_2"
    assert all(l.startswith("#") for l in lines[:-1])


def test_identity_chain_samples_standard_normal(tmp_path):
    text = LINEAR.format(seed=0, scale=0.1, steps=0)
    text = text.replace("n_layers = 2", "n_layers = 1").split("[layer.2]")[0]
    run("train", "--config", write(tmp_path, text), "--out-dir", tmp_path / "id")
    run("sample", "--model", tmp_path / "id" / "model.npz", "--y", "0,0", "--n", 40_000,
        "--out", tmp_path / "s.csv")
    _, data = read_samples(tmp_path / "s.csv")
    np.testing.assert_allclose(data.mean(0), 0.0, atol=0.03)
    np.testing.assert_allclose(np.cov(data.T), np.eye(2), atol=0.03)


def test_sample_rejects_wrong_observation_size(trained, capsys):
    code, _ = run("sample", "--model", trained / "model.npz", "--y", "1,2,3")
    assert code == 2
    assert "expects 2" in capsys.readouterr().err


def test_missing_model_file(tmp_path, capsys):
    code, _ = run("evaluate", "--model", tmp_path / "nope.npz", "--out-dir", tmp_path)
    assert code == 2
    assert "model file not found" in capsys.readouterr().err


def test_evaluate_writes_metrics(trained, tmp_path):
    code, text = run("evaluate", "--model", trained / "model.npz", "--out-dir", tmp_path / "ev")
    assert code == 0
    rows = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "y_index,metric,value"
    assert any(r.startswith("mean,w1_noise_floor") for r in rows)
    assert "w1:" in text


def test_model_config_mismatch(trained, tmp_path):
    data = dict(np.load(trained / "model.npz"))
    data["params"] = data["params"][:-1]
    np.savez(tmp_path / "bad.npz", **data)
    code, _ = run("sample", "--model", tmp_path / "bad.npz", "--y", "0,0")
    assert code == 2


def test_baseline_and_mixed_noise_pipeline(tmp_path):
    cfg = write(tmp_path, MIXED)
    code, _ = run("baseline", "--config", cfg, "--out-dir", tmp_path / "bl", "--n", 30)
    assert code == 0
    header, data = read_samples(tmp_path / "bl" / "baseline.csv")
    assert data.shape == (30, 3)
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "m")[0] == 0
    code, text = run("evaluate", "--model", tmp_path / "m" / "model.npz", "--out-dir", tmp_path / "m")
    assert code == 0
    assert "binned_kl:" in text and "coverage:" in text
