import json

import numpy as np
import pytest

from ttbayes import io as tio
from ttbayes.cli import main
from ttbayes.tt_format import random_tt, tt_contract


@pytest.fixture
def tensor_file(tmp_path, rng):
    t = tt_contract(random_tt((4, 4, 4), (1, 2, 2, 1), rng))
    path = tmp_path / "t.tbt"
    tio.write_tensor(path, t + 0.05 * rng.standard_normal(t.shape))
    return path


def test_tt_svd_writes_tt_and_manifest(tensor_file):
    assert main(["tt-svd", str(tensor_file), "--eps", "0.1", "--quiet"]) == 0
    out = tensor_file.with_suffix(".ttt")
    assert tio.read_tt(out).order == 3
    manifest = json.loads((tensor_file.parent / "manifest.json").read_text())
    assert manifest["outputs"] == [str(out)]
    assert manifest["exit_code"] == 0 and "tt_svd" in manifest["timings"]


def test_decompose_ut_inspect(tensor_file, capsys):
    d = tensor_file.parent
    assert main(["decompose", str(tensor_file), "--prior", "flat", "--ranks", "1,2,2,1",
                 "--sigma2", "0.0025", "--max-sweeps", "4", "--quiet"]) == 0
    model = d / "t.tbm"
    assert (d / "t.trace.csv").read_text().startswith("sweep,eps_meas")
    assert main(["decompose", str(tensor_file), "--prior", str(model), "--alg", "bayes",
                 "--max-sweeps", "2", "-o", str(d / "u.tbm"), "--quiet"]) == 0
    assert main(["ut", str(model), "--alpha", "1", "--variances", "--quiet"]) == 0
    for name in ("t.mean.ttt", "t.cov.ttm", "t.var.csv"):
        assert (d / name).exists()
    for name in ("t.tbt", "t.tbm", "t.mean.ttt", "t.cov.ttm"):
        capsys.readouterr()
        assert main(["inspect", str(d / name), "--rewrite", str(d / "copy.bin"), "--quiet"]) == 0
        assert json.loads(capsys.readouterr().out)["format"]
        assert (d / name).read_bytes() == (d / "copy.bin").read_bytes()


def test_exit_codes(tensor_file, tmp_path):
    assert main(["decompose", str(tensor_file), "--prior", "flat", "--bogus"]) == 1
    assert main(["nosuch"]) == 1
    assert main(["decompose", str(tensor_file), "--prior", "flat", "--quiet"]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope")
    assert main(["inspect", str(bad), "--quiet"]) == 2
    assert main(["tt-svd", str(tmp_path / "missing.tbt"), "--eps", "0.1", "--quiet"]) == 2


def test_numerical_failure_exit(tmp_path):
    from ttbayes.als_engine import BayesTDModel
    from ttbayes.gaussian import GaussianComponent

    model = BayesTDModel("tt", (2, 2), (1, 1, 1),
                         [GaussianComponent(np.ones(1 * 2), np.array([[1.0, 0.0], [0.0, -1.0]])),
                          GaussianComponent(np.ones(2), np.eye(2))], 1.0)
    tio.write_model(tmp_path / "neg.tbm", model)
    assert main(["ut", str(tmp_path / "neg.tbm"), "--alpha", "1", "--quiet"]) == 3


def test_experiment_reproducible(tmp_path, monkeypatch):
    cfg = tmp_path / "conv.json"
    cfg.write_text(json.dumps({"trials": 3, "max_sweeps": 3}))
    assert main(["experiment", "convergence", str(cfg), "--out-dir", str(tmp_path / "a"),
                 "--quiet"]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    rerun = tmp_path / "rerun.json"
    rerun.write_text(json.dumps(manifest["config"]))
    assert main(["experiment", "convergence", str(rerun), "--out-dir", str(tmp_path / "b"),
                 "--quiet"]) == 0
    for name in ("trials.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    monkeypatch.setenv("TTBAYES_SEED", "9")
    assert main(["experiment", "convergence", str(cfg), "--out-dir", str(tmp_path / "c"),
                 "--quiet"]) == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["seed"] == 9
    assert (tmp_path / "a" / "trials.csv").read_bytes() != (tmp_path / "c" / "trials.csv").read_bytes()


def test_experiment_image(tmp_path, cat_image_path):
    from PIL import Image

    small = tmp_path / "small.pgm"
    Image.open(cat_image_path).resize((16, 16)).save(small)
    cfg = tmp_path / "cat.json"
    cfg.write_text(json.dumps({"image": "small.pgm", "image_size": 16, "n_samples": 2,
                               "sample_grid": [1, 2], "max_sweeps": 2, "prior_b": 1000.0}))
    assert main(["experiment", "image", str(cfg), "--out-dir", str(tmp_path / "o"),
                 "--quiet"]) == 0
    out = tmp_path / "o"
    assert (out / "reconstruction_bayes.pgm").read_bytes()[:2] == b"P5"
    lines = (out / "errors.csv").read_text().splitlines()
    assert lines[0] == "algorithm,n_samples,eps_truth" and len(lines) == 5


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "x.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["experiment", "convergence", str(cfg), "--quiet"]) == 1


def test_json_logs(tensor_file, capsys):
    assert main(["tt-svd", str(tensor_file), "--ranks", "1,2,2,1", "--json-logs"]) == 0
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["level"] == "INFO"
