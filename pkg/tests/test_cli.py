import csv
import json

import numpy as np
import pytest

from conftest import tiny_model
from ldmic.cli import EXIT_DATA, EXIT_INCOMPATIBLE, EXIT_OK, EXIT_USAGE, run
from ldmic.data_io import ModelParameters, load_group, load_manifest, read_image, save_checkpoint
from ldmic.entropy.codec import infer
from ldmic.evaluation import RDCurve, RDPoint, emit_rd
from ldmic.synthetic import make_dataset, write_dataset


@pytest.fixture
def workspace(tmp_path):
    manifest = write_dataset(make_dataset(3, seed=0, size=64), tmp_path / "data")
    ckpt = tmp_path / "c.ldmc"
    save_checkpoint(ModelParameters(tiny_model("ldmic"), lam=2048), ckpt)
    return tmp_path, manifest, ckpt


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["compress", "--bogus"]) == EXIT_USAGE
    assert run(["train", "--out", "x", "--variant", "nope"]) == EXIT_USAGE
    lines = _err(capsys)
    assert all(line.startswith("error: usage:") for line in lines) and len(lines) == 3


def test_compress_decompress_roundtrip(workspace, capsys):
    tmp, manifest, ckpt = workspace
    assert run(["compress", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                "--group", "g0001", "--out", str(tmp / "g.ldmb")]) == EXIT_OK
    first = (tmp / "g.ldmb").read_bytes()
    assert run(["compress", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                "--group", "g0001", "--out", str(tmp / "g.ldmb")]) == EXIT_OK
    assert (tmp / "g.ldmb").read_bytes() == first
    assert run(["decompress", "--checkpoint", str(ckpt), "--input", str(tmp / "g.ldmb"),
                "--out", str(tmp / "rec")]) == EXIT_OK
    group = load_group(load_manifest(manifest), "g0001")
    ref = infer(tiny_model("ldmic"), group.views)
    for k in range(2):
        got = read_image(tmp / "rec" / f"g_v{k}.png")
        np.testing.assert_array_equal(got, np.rint(ref.views[k] * 255) / 255)


def test_batch_compress(workspace):
    tmp, manifest, ckpt = workspace
    (tmp / "out").mkdir()
    assert run(["compress", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                "--out", str(tmp / "out")]) == EXIT_OK
    assert sorted(p.name for p in (tmp / "out").iterdir()) == ["g0000.ldmb", "g0001.ldmb", "g0002.ldmb"]


def test_data_and_incompatibility_errors(workspace, capsys):
    tmp, manifest, ckpt = workspace
    assert run(["compress", "--checkpoint", str(ckpt), "--manifest", str(tmp / "none.json"),
                "--out", str(tmp / "x.ldmb")]) == EXIT_DATA
    (tmp / "junk.ldmb").write_bytes(b"LDMBjunk")
    assert run(["decompress", "--checkpoint", str(ckpt), "--input", str(tmp / "junk.ldmb"),
                "--out", str(tmp / "r")]) == EXIT_DATA
    run(["compress", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--group", "g0000",
         "--out", str(tmp / "a.ldmb")])
    other = tmp / "sep.ldmc"
    save_checkpoint(ModelParameters(tiny_model("sep_enc_dec")), other)
    assert run(["decompress", "--checkpoint", str(other), "--input", str(tmp / "a.ldmb"),
                "--out", str(tmp / "r")]) == EXIT_INCOMPATIBLE
    lines = _err(capsys)
    assert [l.split(":")[1].strip() for l in lines] == ["data", "data", "incompatible"]


def test_eval_and_bdrate(workspace, capsys):
    tmp, manifest, ckpt = workspace
    rd = tmp / "rd.csv"
    for _ in range(2):
        assert run(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                    "--label", "tiny", "--out", str(rd)]) == EXIT_OK
    rows = list(csv.DictReader(open(rd)))
    assert len(rows) == 1 and rows[0]["label"] == "tiny" and rows[0]["metric"] == "psnr"
    assert (tmp / "rd.png").exists()
    curve = RDCurve("x", "psnr", [RDPoint(r, q) for r, q in [(0.1, 30), (0.2, 32), (0.4, 34), (0.8, 36)]])
    emit_rd([curve], tmp / "a.csv")
    capsys.readouterr()
    assert run(["bdrate", "--anchor", str(tmp / "a.csv"), "--test", str(tmp / "a.csv")]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "BD-rate: 0.00%"


def test_rate_region(tmp_path, capsys):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"shape": [2, 2], "p": [0.45, 0.05, 0.05, 0.45]}))
    assert run(["rate-region", "--pmf", str(path), "--rates", "0.8,0.8", "0.4,0.4"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "H(X1|X2)=0.46900" in out and "H(X1,X2)=1.46900" in out
    assert "0.8,0.8: R1=0.80000 R2=0.80000 admissible" in out
    assert "0.4,0.4: R1=0.40000 R2=0.40000 inadmissible" in out
    path.write_text(json.dumps({"p": [[0.5, 0.6], [0, 0]]}))
    assert run(["rate-region", "--pmf", str(path)]) == EXIT_DATA


def test_dump_latents(workspace):
    tmp, manifest, ckpt = workspace
    assert run(["dump-latents", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                "--group", "g0000", "--out", str(tmp / "lat")]) == EXIT_OK
    img = read_image(tmp / "lat" / "g0000_v0_latent.png")
    # 8 channels tiled 3x3 with 1px gutters over a 4x4 latent
    assert img.shape == (15, 15, 3)


def test_train_writes_checkpoint_metrics_and_plot(tmp_path):
    argv = ["train", "--synthetic", "4", "--lambda", "2048", "--variant", "ldmic_fast", "--epochs", "1",
            "--batch-size", "2", "--crop", "64", "--M", "8", "--N", "4", "--out", str(tmp_path / "m.ldmc")]
    assert run(argv) == EXIT_OK
    first = (tmp_path / "m.ldmc").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 1 and rows[0]["variant"] == "ldmic_fast" and float(rows[0]["lambda"]) == 2048
    assert (tmp_path / "m.png").exists()
    assert run(argv) == EXIT_OK
    assert (tmp_path / "m.ldmc").read_bytes() == first
    assert len(list(csv.DictReader(open(tmp_path / "m.csv")))) == 1
