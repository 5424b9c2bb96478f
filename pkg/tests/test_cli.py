import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from nr_attack import cli, tensorfile
from nr_attack.data import png_text

TINY = {"seed": 3, "data": {"n": 12, "size": 8, "holdout": 4},
        "generator": {"depth": 2, "base_channels": 4},
        "train": {"epochs": 1, "batch_size": 4},
        "bench": {"latency": False, "grid_k": 2}}


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


def write_config(tmp_path, doc=TINY, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def corpus(tmp_path):
    assert run("synth", "--seed", 1, "--n", 16, "--size", 32, "--out", tmp_path / "corpus") == 0
    return tmp_path / "corpus"


def test_synth_writes_pngs_and_manifest(corpus):
    assert len(list(corpus.glob("*.png"))) == 16
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert len(manifest["entries"]) == 16 and manifest["target_size"] == [32, 32]


def test_synth_creates_nested_output_dir(tmp_path):
    assert run("synth", "--n", 2, "--size", 8, "--out", tmp_path / "a" / "b") == 0
    assert (tmp_path / "a" / "b" / "manifest.json").exists()


def test_synth_zero_images_is_usage_error(tmp_path, capsys):
    assert run("synth", "--n", 0, "--out", tmp_path / "x") == 2
    err = capsys.readouterr().err
    assert "data.n" in err and json.loads(err.strip().splitlines()[-1])["exit_code"] == 2


def test_train_writes_metric_in_header(tmp_path, corpus):
    out = tmp_path / "gen_fc7.fw"
    assert run("train", "--metric", "frozen_cnn:7", "--data", corpus / "manifest.json", "--epochs", 1,
               "--out", out) == 0
    header, _ = tensorfile.read(out)
    assert header["kind"] == "facpa" and header["metric"] == "frozen_cnn:7"
    assert len(header["config_digest"]) == 64


def test_train_uap_mode(tmp_path, corpus):
    out = tmp_path / "uap.fw"
    assert run("train", "--mode", "uap", "--metric", "sobel_sharpness", "--data", corpus / "manifest.json",
               "--epochs", 1, "--out", out) == 0
    header, tensors = tensorfile.read(out)
    assert header["kind"] == "uap" and list(tensors) == ["uap_delta"]
    assert np.abs(tensors["uap_delta"]).max() <= np.float32(10 / 255)


def test_train_twice_identical(tmp_path, corpus):
    args = ["train", "--metric", "frozen_cnn:7", "--data", corpus / "manifest.json", "--epochs", 1]
    assert run(*args, "--out", tmp_path / "a.fw") == 0
    assert run(*args, "--out", tmp_path / "b.fw") == 0
    assert (tmp_path / "a.fw").read_bytes() == (tmp_path / "b.fw").read_bytes()


def test_attack_facpa_single_image(tmp_path, corpus):
    weights = tmp_path / "g.fw"
    run("train", "--metric", "frozen_cnn:7", "--data", corpus / "manifest.json", "--epochs", 1, "--out", weights)
    img = corpus / "synth_1_00000.png"
    assert run("attack", img, "--kind", "facpa", "--metric", "frozen_cnn:7", "--weights", weights,
               "--out", tmp_path / "adv") == 0
    pngs, recs = list((tmp_path / "adv").glob("*.png")), list((tmp_path / "adv").glob("synth*.json"))
    assert len(pngs) == 1 and len(recs) == 1
    rec = json.loads(recs[0].read_text())
    assert rec["attack"] == "facpa" and rec["linf"] < 10 / 255
    assert {"score_before", "score_after", "gain", "rel_gain_pct"} <= set(rec)


def test_attack_zero_iters_pixel_identical(tmp_path, corpus):
    img = corpus / "synth_1_00003.png"
    assert run("attack", img, "--kind", "ifgsm", "--iters", 0, "--metric", "sobel_sharpness",
               "--out", tmp_path / "adv") == 0
    (out,) = (tmp_path / "adv").glob("*.png")
    assert np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(img)))


def test_attack_missing_weights(tmp_path, corpus, capsys):
    code = run("attack", corpus / "synth_1_00000.png", "--kind", "facpa", "--weights", tmp_path / "nope.fw",
               "--out", tmp_path / "adv")
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "not found" in err["error"] and err["path"].endswith("nope.fw")
    assert not (tmp_path / "adv").exists()


def test_attack_bad_image_is_runtime_error(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    assert run("attack", tmp_path / "x.png", "--kind", "ifgsm", "--out", tmp_path / "adv") == 3


def test_bench_full_matrix_and_rerun(tmp_path):
    cfg = write_config(tmp_path)
    assert run("bench", "--config", cfg, "--out", tmp_path / "b1") == 0
    assert run("bench", "--config", cfg, "--out", tmp_path / "b2") == 0
    csv1 = (tmp_path / "b1" / "report.csv").read_bytes()
    assert csv1 == (tmp_path / "b2" / "report.csv").read_bytes()
    rows = csv1.decode().strip().splitlines()[1:]
    assert len(rows) == 12
    assert len(list((tmp_path / "b1").glob("grid_*.png"))) == 12
    for name in ("facpa_frozen_cnn-7.fw", "uap_sobel_sharpness.fw"):
        assert (tmp_path / "b1" / "artifacts" / name).read_bytes() == (tmp_path / "b2" / "artifacts" / name).read_bytes()


def test_bench_with_latency(tmp_path):
    doc = {**TINY, "metric": {"ids": ["sobel_sharpness"]},
           "attacks": [{"kind": "ifgsm", "iters": 2}],
           "bench": {"latency": True, "measured_runs": 3, "warmup_runs": 1}}
    assert run("bench", "--config", write_config(tmp_path, doc), "--out", tmp_path / "b") == 0
    lat = (tmp_path / "b" / "latency.csv").read_text().splitlines()
    assert len(lat) == 2 and "ms" in (tmp_path / "b" / "report.md").read_text()


def test_bench_unknown_kind_fails_before_work(tmp_path):
    doc = {**TINY, "attacks": [{"kind": "ifgsm"}, {"kind": "deepfool"}]}
    assert run("bench", "--config", write_config(tmp_path, doc), "--out", tmp_path / "b") == 2
    assert not (tmp_path / "b").exists()


def test_bench_missing_weights_without_training(tmp_path):
    doc = {**TINY, "attacks": [{"kind": "facpa"}], "bench": {"train_missing": False, "latency": False}}
    assert run("bench", "--config", write_config(tmp_path, doc), "--out", tmp_path / "b") == 2


def test_verify_accepts_and_detects_tampering(tmp_path, capsys):
    cfg = write_config(tmp_path, {**TINY, "metric": {"ids": ["sobel_sharpness"]}})
    assert run("bench", "--config", cfg, "--out", tmp_path / "b") == 0
    assert run("verify", tmp_path / "b") == 0
    out = capsys.readouterr().out
    assert "OK" in out and "MISMATCH" not in out
    assert run("verify", tmp_path / "b" / "report.csv", "--config", cfg) == 0
    other = write_config(tmp_path, {**TINY, "seed": 99}, "other.json")
    assert run("verify", tmp_path / "b" / "report.csv", "--config", other) == 3
    assert "MISMATCH" in capsys.readouterr().out


def test_verify_png_digest(tmp_path, corpus):
    png = corpus / "synth_1_00000.png"
    assert len(png_text(png)["config_digest"]) == 64
    assert run("verify", png) == 0
    Image.open(png).save(tmp_path / "stripped.png")
    (tmp_path / "run_config.json").write_bytes((corpus / "run_config.json").read_bytes())
    assert run("verify", tmp_path / "stripped.png") == 3


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("NR_ATTACK_THREADS", "zero")
    assert run("synth", "--n", 1, "--out", tmp_path / "s") == 2
    monkeypatch.setenv("NR_ATTACK_THREADS", "1")
    assert run("synth", "--n", 1, "--size", 8, "--out", tmp_path / "s") == 0


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, {"data": {"n": 3, "size": 8}})
    assert run("synth", "--config", cfg, "--n", 2, "--out", tmp_path / "s") == 0
    assert len(list((tmp_path / "s").glob("*.png"))) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "nr_attack", "synth", "--n", "1", "--size", "8",
                        "--out", str(tmp_path / "s")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "nr_attack", "bench", "--config", str(tmp_path / "none.json")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "cannot read config" in r.stderr
