import json
import subprocess
import sys

import numpy as np
import pytest

from nuq.cli import build_parser, main
from nuq.io import NiftiVolume, read_nifti, write_nifti
from nuq.posterior import load_posterior


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, sigma, seed in (("raw", 0.10, 1), ("clean", 0.02, 2), ("zero", 0.0, 0)):
        assert main(["phantom", "--out", str(root / name), "--dims", "5,5,4",
                     "--sigma", str(sigma), "--seed", str(seed)]) == 0
    for name in ("raw", "zero"):
        d = root / name
        assert main(["fit", "--dwi", str(d / "dwi.nii.gz"), "--bval", str(d / "dwi.bval"),
                     "--bvec", str(d / "dwi.bvec"), "--mask", str(d / "mask.nii.gz"),
                     "--out", str(d / "post")]) == 0
    return root


def dataset_args(d, flag="--dwi"):
    return [flag, d / "dwi.nii.gz", "--bval", d / "dwi.bval", "--bvec", d / "dwi.bvec"]


def test_help_lists_flags_and_defaults(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"phantom", "fit", "sample", "map", "score", "compare", "group"}
    for name, p in sub.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
        assert "default" in text
    assert run(capsys, "score", "--help")[0] == 0


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "phantom", "--out", tmp_path / "p", "--sigma", "-0.1")[0] == 2
    assert run(capsys, "phantom", "--out", tmp_path / "p", "--dims", "3,3")[0] == 2


def test_phantom_and_fit(workspace, capsys):
    post = workspace / "raw" / "post"
    assert (post / "manifest.json").exists()
    manifest = json.loads((post / "manifest.json").read_text())
    assert manifest["d"] == 7 and manifest["n_valid"] == 100
    assert load_posterior(post).valid.all()
    truth = read_nifti(workspace / "raw" / "truth_fa.nii.gz").data
    assert truth.shape == (5, 5, 4) and truth.max() == pytest.approx(0.9)


def test_fit_missing_bvec(workspace, capsys, tmp_path):
    d = workspace / "raw"
    code, _, err = run(capsys, "fit", "--dwi", d / "dwi.nii.gz", "--bval", d / "dwi.bval",
                       "--bvec", d / "missing.bvec", "--out", tmp_path / "post")
    assert code == 2 and "missing.bvec" in err


def test_fit_validation_report(workspace, capsys, tmp_path):
    d = workspace / "raw"
    (tmp_path / "x.bval").write_text(" ".join(["1000"] * 36) + "\n")
    (tmp_path / "x.bvec").write_text("\n".join([" ".join(["1"] * 36), " ".join(["0"] * 36),
                                                " ".join(["0"] * 36)]) + "\n")
    code, _, err = run(capsys, "fit", "--dwi", d / "dwi.nii.gz", "--bval", tmp_path / "x.bval",
                       "--bvec", tmp_path / "x.bvec", "--out", tmp_path / "post")
    assert code == 2 and "missing b0" in err


def test_fit_rerun_byte_identical(workspace, capsys, tmp_path):
    d = workspace / "raw"
    for out in ("a", "b"):
        assert run(capsys, "fit", *dataset_args(d), "--out", tmp_path / out)[0] == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_score(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "score", "--posterior", workspace / "zero" / "post")
    assert code == 0 and json.loads(out)["score"] == 0.0

    post = workspace / "raw" / "post"
    code, out, _ = run(capsys, "score", "--posterior", post, "--region", "2,2,1", "--draws", "1",
                       "--seed", "3", "--out", tmp_path / "r.json")
    rep = json.loads(out)
    assert code == 0 and rep == json.loads((tmp_path / "r.json").read_text())
    assert rep["voxel_count"] == 1 and rep["m_per_set"] == 1
    assert run(capsys, "sample", "--posterior", post, "--draws", "2", "--seed", "3",
               "--out", tmp_path / "s.nii.gz")[0] == 0
    z = read_nifti(tmp_path / "s.nii.gz").data[2, 2, 1]
    assert rep["score"] == pytest.approx((z[0] - z[1]) ** 2, rel=1e-12, abs=1e-18)

    assert run(capsys, "score", "--posterior", post, "--region", "0:9")[0] == 2
    assert run(capsys, "score", "--posterior", tmp_path / "nothing")[0] == 2
    assert run(capsys, "score", "--posterior", post, "--kernel", "polynomial", "--degree", "1")[0] == 2


def test_map(workspace, capsys, tmp_path):
    post = workspace / "raw" / "post"
    for name in ("a.nii.gz", "b.nii.gz"):
        assert run(capsys, "map", "--posterior", post, "--pairs", "4", "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert np.all(read_nifti(tmp_path / "a.nii.gz").data > 0)
    assert run(capsys, "map", "--posterior", post, "--pairs", "0", "--out", tmp_path / "c.nii.gz")[0] == 2


def test_compare(workspace, capsys, tmp_path):
    raw, clean = workspace / "raw", workspace / "clean"
    common = ["--bval", raw / "dwi.bval", "--bvec", raw / "dwi.bvec", "--draws", "20", "--pairs", "2"]
    code, out, _ = run(capsys, "compare", "--raw", raw / "dwi.nii.gz", "--processed",
                       raw / "dwi.nii.gz", *common, "--out", tmp_path / "same")
    assert code == 0 and json.loads(out)["delta"] == 0
    code, out, _ = run(capsys, "compare", "--raw", raw / "dwi.nii.gz", "--processed",
                       clean / "dwi.nii.gz", *common, "--out", tmp_path / "better")
    assert code == 0 and json.loads(out)["delta"] < 0
    code, out, _ = run(capsys, "compare", "--raw", clean / "dwi.nii.gz", "--processed",
                       raw / "dwi.nii.gz", *common, "--out", tmp_path / "worse")
    rep = json.loads(out)
    assert code == 3 and rep["processed_worse_than_raw"] and rep["delta"] > 0
    assert (tmp_path / "worse" / "processed_nuq_map.nii.gz").exists()

    (tmp_path / "other.bval").write_text(" ".join(["0"] * 4 + ["1200"] * 32) + "\n")
    code, _, err = run(capsys, "compare", "--raw", raw / "dwi.nii.gz", "--processed",
                       clean / "dwi.nii.gz", *common, "--processed-bval", tmp_path / "other.bval",
                       "--out", tmp_path / "mismatch")
    assert code == 2 and "fingerprint" in err


def write_cohort(root, shift, seed=0, n=4, m=20):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(2 * n):
        label = "A" if i < n else "B"
        z = 0.5 + (shift if label == "A" else 0) + 0.01 * rng.standard_normal((3, 3, 2, m))
        write_nifti(NiftiVolume(data=z), root / f"s{i}.nii.gz")
        subjects.append({"path": f"s{i}.nii.gz", "label": label})
    (root / "cohort.json").write_text(json.dumps({"subjects": subjects}))
    return root / "cohort.json"


def test_group(capsys, tmp_path):
    (tmp_path / "shift").mkdir()
    code, out, _ = run(capsys, "group", "--manifest", write_cohort(tmp_path / "shift", 0.2),
                       "--out", tmp_path / "g1")
    assert code == 0 and json.loads(out)["frac_abs_t_gt_threshold"] == 1.0
    assert read_nifti(tmp_path / "g1" / "t_map.nii.gz").data.shape == (3, 3, 2)

    (tmp_path / "null").mkdir()
    code, out, _ = run(capsys, "group", "--manifest", write_cohort(tmp_path / "null", 0.0),
                       "--out", tmp_path / "g0")
    assert code == 0 and json.loads(out)["median_abs_t"] < 2

    (tmp_path / "shift" / "s0.nii.gz").unlink()
    assert run(capsys, "group", "--manifest", tmp_path / "shift" / "cohort.json",
               "--out", tmp_path / "g2")[0] == 2


def test_phantom_seed_determinism(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "phantom", "--out", tmp_path / name, "--dims", "3,3,3", "--sigma", "0.05",
                   "--preset", "uniform_iso", "--seed", "7")[0] == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_threads_env(workspace, capsys, tmp_path, monkeypatch):
    post = workspace / "raw" / "post"
    monkeypatch.setenv("NUQ_THREADS", "1")
    one = run(capsys, "score", "--posterior", post, "--draws", "5")[1]
    monkeypatch.setenv("NUQ_THREADS", "4")
    four = run(capsys, "score", "--posterior", post, "--draws", "5")[1]
    assert one == four


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nuq", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("nuq ")
