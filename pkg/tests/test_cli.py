import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tfce_grf import volio
from tfce_grf.cli import main


@pytest.fixture(scope="module")
def phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    pre = str(d / "ph")
    assert main(["phantom", pre, "--dims", "20", "--subjects", "10", "--amplitude", "1.0", "--seed", "3"]) == 0
    stack, _ = volio.load_stack(pre + ".stack.nii")
    from tfce_grf.sim import one_sample_t_to_z
    mask = volio.load(pre + ".mask.nii")[0].data != 0
    z = one_sample_t_to_z(stack, mask)
    volio.save(str(d / "z.nii"), z)
    return d, pre


def test_phantom_outputs(phantom):
    d, pre = phantom
    for suffix in (".stack.nii", ".truth.nii", ".mask.nii", ".json"):
        assert os.path.exists(pre + suffix)
    rep = json.loads(open(pre + ".json").read())
    assert rep["config"]["seed"] == 3 and rep["results"]["phantom"]["dims"] == [20, 20, 20]


def test_phantom_seed_reproducible(tmp_path):
    for tag in ("a", "b"):
        assert main(["phantom", str(tmp_path / tag), "--dims", "12", "--subjects", "3", "--seed", "9"]) == 0
    assert (tmp_path / "a.stack.nii").read_bytes() == (tmp_path / "b.stack.nii").read_bytes()


def test_phantom_entropy_seed_recorded(tmp_path):
    assert main(["phantom", str(tmp_path / "e"), "--dims", "12", "--subjects", "3"]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert isinstance(rep["config"]["seed"], int) and rep["config"]["seed_source"] == "entropy"


def test_enhance_hybrid(phantom):
    d, _ = phantom
    pre = str(d / "enh")
    rc = main(["enhance", "--method", "hybrid", "--n-levels", "500", "--fwhm", "3.5", "3.5", "3.5",
               str(d / "z.nii"), pre])
    assert rc == 0
    for key in ("S", "p", "z"):
        assert os.path.exists(f"{pre}.{key}.nii")
    rep = json.loads(open(pre + ".json").read())
    assert rep["results"]["n_levels"] == 500 and rep["results"]["n_significant"] > 0
    p = volio.load(pre + ".p.nii")[0].data
    mask = volio.load(str(d / "ph.mask.nii"))[0].data != 0
    assert p.min() > 0 and p.max() <= 1
    assert (p[~mask] == 1).all()


def test_enhance_residuals_and_fdr(phantom):
    d, pre0 = phantom
    pre = str(d / "enh2")
    rc = main(["enhance", "--method", "ptfce", "--residuals", pre0 + ".stack.nii", "--correction",
               "bh-fdr", "--two-sided", str(d / "z.nii"), pre])
    assert rc == 0
    rep = json.loads(open(pre + ".json").read())
    assert rep["results"]["provenance"]["pipeline"] == "two_sided"


def test_enhance_tfce(phantom):
    d, _ = phantom
    pre = str(d / "tf")
    assert main(["enhance", "--method", "etfce", str(d / "z.nii"), pre]) == 0
    assert os.path.exists(pre + ".score.nii")


def test_smoothest(phantom, capsys):
    d, pre = phantom
    assert main(["smoothest", pre + ".stack.nii", "--mask", pre + ".mask.nii"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert len(rep["results"]["fwhm_vox"]) == 3


def test_experiment_json_and_csv(tmp_path):
    out = tmp_path / "null.json"
    assert main(["experiment", "null_fwer", "--realisations", "3", "--dims", "16", "--subjects", "10",
                 "--seed", "7", "-o", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["results"]["config"]["seed"] == 7
    assert rep["results"]["summary"]["hybrid"]["rejections"] <= 1
    csv = tmp_path / "null.csv"
    assert main(["experiment", "null_fwer", "--realisations", "2", "--dims", "16", "--subjects", "10",
                 "--seed", "7", "--format", "csv", "-o", str(csv)]) == 0
    assert csv.read_text().splitlines()[0].startswith("realisation")


def test_perm(phantom):
    d, pre = phantom
    out = str(d / "perm")
    assert main(["perm", pre + ".stack.nii", out, "--B", "10", "--seed", "1", "--mask", pre + ".mask.nii"]) == 0
    rep = json.loads(open(out + ".json").read())
    assert rep["results"]["min_p"] == pytest.approx(1 / 11)
    assert len(rep["results"]["null_max"]) == 10


def test_bench(phantom, tmp_path):
    d, pre = phantom
    out = tmp_path / "bench.json"
    assert main(["bench", str(d / "z.nii"), "--repeats", "3", "--fwhm", "3.5", "3.5", "3.5",
                 "--stack", pre + ".stack.nii", "--B", "2", "-o", str(out)]) == 0
    res = json.loads(out.read_text())["results"]
    assert res["warmup_discarded"] and res["repeats"] == 3
    for name in ("tfce", "etfce", "ptfce", "hybrid", "perm_etfce"):
        assert len(res["methods"][name]["times"]) == 3


def test_compare(phantom, capsys):
    d, _ = phantom
    assert main(["compare", str(d / "z.nii"), str(d / "z.nii"), "--threshold", "4.87"]) == 0
    res = json.loads(capsys.readouterr().out)["results"]
    assert res["r"] == pytest.approx(1.0) and res["max_abs_dz"] == 0 and res["dice"] == 1.0


def test_exit_codes(phantom, tmp_path, capsys):
    d, _ = phantom
    assert main([]) == 1
    assert main(["compare", "a.nii"]) == 1
    assert main(["enhance", "--method", "hybrid", str(d / "z.nii"), str(tmp_path / "x")]) == 1
    assert main(["enhance", str(tmp_path / "missing.nii"), str(tmp_path / "x")]) == 2
    (tmp_path / "bad.nii").write_bytes(b"\0" * 400)
    assert main(["compare", str(tmp_path / "bad.nii"), str(d / "z.nii"), "--threshold", "1"]) == 2
    assert main(["experiment", "nope"]) == 2


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "tfce_grf.cli", "experiment", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "realisations" in r.stdout
