import base64
import json
import subprocess
import sys

import numpy as np
import pytest

from murreid import cli, corpus, dsp, models

from conftest import http, serving

SMALL_FLAGS = ["--embed-dim", "8", "--hidden", "8", "--audio-proj", "8", "--pool-rows", "2", "--text-length", "16"]


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out-dir", str(out), "--n-classes", "3", "--per-class", "12",
                     "--placement", "both", "--p-text", "1.0", "--seed", "4"]) == 0
    return out


def _split(capsys, corpus_dir, name="split.tsv", *extra):
    rc, out, err = run(capsys, "split", "--manifest", corpus_dir / "manifest.tsv", "--out", corpus_dir / name,
                       "--seed", 3, *extra)
    assert rc == 0, err
    return json.loads(out)


def _train(capsys, corpus_dir, kind, out_name, *extra):
    rc, out, err = run(capsys, "train", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
                       "--model-kind", kind, "--out", corpus_dir / out_name, "--epochs", 2, "--lr", 5e-3,
                       "--batch-size", 8, "--seed", 1, *SMALL_FLAGS, *extra)
    assert rc == 0, err
    return json.loads(out)


def test_split_defaults(capsys, corpus_dir):
    counts = _split(capsys, corpus_dir)
    assert counts == {"train": 25, "val": 5, "test": 6, "excluded_by_duration": 0}
    sm = corpus.read_split(corpus_dir / "split.tsv")
    assert sm.ratios == (0.7, 0.15, 0.15) and sm.mode == "random-sentence" and sm.seed == 3


def test_split_speaker_disjoint(capsys, corpus_dir):
    _split(capsys, corpus_dir, "spk.tsv", "--mode", "speaker-disjoint")
    utts = corpus.parse_manifest(corpus_dir / "manifest.tsv")
    sm = corpus.read_split(corpus_dir / "spk.tsv")
    seen = {}
    for u in utts:
        seen.setdefault(u.speaker_id, set()).add(sm.assignment[u.id])
    assert all(len(v) == 1 for v in seen.values())


def test_split_applies_duration_filter(capsys, corpus_dir):
    counts = _split(capsys, corpus_dir, "short.tsv", "--max-duration", 0.9)
    utts = corpus.parse_manifest(corpus_dir / "manifest.tsv")
    kept = sum(u.duration_s < 0.9 for u in utts)
    assert counts["excluded_by_duration"] == len(utts) - kept > 0
    assert counts["train"] + counts["val"] + counts["test"] == kept


def test_missing_manifest_exits_2(capsys, tmp_path):
    rc, out, err = run(capsys, "split", "--manifest", tmp_path / "none.tsv", "--out", tmp_path / "s.tsv")
    assert rc == 2 and out == ""
    assert "none.tsv" in err and "error" in err


def test_bad_ratios_exit_2(capsys, corpus_dir):
    rc, _, err = run(capsys, "split", "--manifest", corpus_dir / "manifest.tsv", "--out", corpus_dir / "x.tsv",
                     "--ratios", "0.5,0.5,0.5")
    assert rc == 2 and "sum to 1" in err


def test_train_eval_predict(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    report = _train(capsys, corpus_dir, "text", "text.bin")
    assert report["kind"] == "text" and report["config"]["epochs"] == 2
    rc, out, err = run(capsys, "eval", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
                       "--model", corpus_dir / "text.bin")
    assert rc == 0, err
    lines = out.splitlines()
    assert lines[0] == "dialect\tprecision\trecall\tf1\tsupport"
    assert len(lines) == 25 and lines[-1].startswith("# accuracy=")
    assert sum(int(ln.split("\t")[4]) for ln in lines[1:24]) == 6
    rc, out, _ = run(capsys, "predict", "--model", corpus_dir / "text.bin", "--transcript", "murre_1 kapyö")
    payload = json.loads(out)
    assert rc == 0 and len(payload["top"]) == 5
    assert abs(sum(payload["scores"].values()) - 1) <= 1e-9
    assert payload["top"][0][0] == payload["code"]


def test_eval_kind_mismatch(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    _train(capsys, corpus_dir, "text", "text.bin")
    rc, _, err = run(capsys, "eval", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
                     "--model", corpus_dir / "text.bin", "--model-kind", "fusion")
    assert rc == 2 and "text model" in err


def test_train_requires_kind(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    rc, _, err = run(capsys, "train", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
                     "--out", corpus_dir / "x.bin")
    assert rc == 2 and "--model-kind" in err


def test_repeated_runs_are_byte_identical(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    r1 = _train(capsys, corpus_dir, "fusion", "f1.bin")
    r2 = _train(capsys, corpus_dir, "fusion", "f2.bin")
    assert r1 == r2
    assert (corpus_dir / "f1.bin").read_bytes() == (corpus_dir / "f2.bin").read_bytes()
    evals = [
        run(capsys, "eval", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
            "--model", corpus_dir / name)[1]
        for name in ("f1.bin", "f2.bin")
    ]
    assert evals[0] == evals[1]


def test_seed_env_and_config_precedence(capsys, corpus_dir, monkeypatch):
    manifest = corpus_dir / "manifest.tsv"
    monkeypatch.setenv("MURREID_SEED", "3")
    run(capsys, "split", "--manifest", manifest, "--out", corpus_dir / "env.tsv")
    assert corpus.read_split(corpus_dir / "env.tsv").seed == 3
    conf = corpus_dir / "split.conf"
    conf.write_text("# split settings\nseed = 8\nratios = 0.5,0.25,0.25\n", encoding="utf-8")
    run(capsys, "split", "--manifest", manifest, "--out", corpus_dir / "conf.tsv", "--config", conf)
    sm = corpus.read_split(corpus_dir / "conf.tsv")
    assert sm.seed == 8 and sm.ratios == (0.5, 0.25, 0.25)
    run(capsys, "split", "--manifest", manifest, "--out", corpus_dir / "flag.tsv", "--config", conf, "--seed", 9)
    assert corpus.read_split(corpus_dir / "flag.tsv").seed == 9
    monkeypatch.setenv("MURREID_SEED", "abc")
    rc, _, err = run(capsys, "split", "--manifest", manifest, "--out", corpus_dir / "bad.tsv")
    assert rc == 2 and "MURREID_SEED" in err


def test_barely_trained_model_is_near_chance(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    _train(capsys, corpus_dir, "text", "raw.bin", "--max-steps", 1, "--lr", 1e-6)
    rc, out, _ = run(capsys, "eval", "--manifest", corpus_dir / "manifest.tsv", "--split", corpus_dir / "split.tsv",
                     "--model", corpus_dir / "raw.bin", "--full-precision")
    acc = float(out.splitlines()[-1].split("=")[1])
    assert rc == 0 and acc <= 1 / 3 + 0.1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "murreid.cli", "eval", "--manifest", str(tmp_path / "m.tsv"),
                           "--split", str(tmp_path / "s.tsv"), "--model", str(tmp_path / "nope.bin")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "nope.bin" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "murreid.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "serve" in proc.stdout


def _wav_b64(path):
    return base64.b64encode(path.read_bytes()).decode("ascii")


def test_serve_fusion_contract(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    _train(capsys, corpus_dir, "fusion", "serve.bin")
    model = models.load_bundle(corpus_dir / "serve.bin")
    wav = corpus_dir / "wav" / "synth_01_0003.wav"
    with serving(model) as url:
        assert http(url + "/healthz") == (200, "ok")
        status, body = http(url + "/classify", {"transcript": "murre_1 lolo", "audio_wav_base64": _wav_b64(wav)})
        assert status == 200
        assert abs(sum(body["scores"].values()) - 1) <= 1e-9
        assert len(body["scores"]) == 23
        assert http(url + "/classify", {"transcript": "murre_1"})[0] == 422
        assert http(url + "/classify", b"{not json")[0] == 400
        assert http(url + "/classify", {"transcript": 5})[0] == 400
        assert http(url + "/classify", {"transcript": "x", "audio_wav_base64": "!!!"})[0] == 400
        assert http(url + "/classify", {"transcript": "x", "audio_wav_base64": base64.b64encode(b"RIFF").decode()})[0] == 400
        assert http(url + "/nowhere")[0] == 404
    rc, out, _ = run(capsys, "predict", "--model", corpus_dir / "serve.bin", "--transcript", "murre_1 lolo",
                     "--wav", wav)
    cli_payload = json.loads(out)
    assert cli_payload["code"] == body["code"]
    for code, s in body["scores"].items():
        assert abs(s - cli_payload["scores"][code]) <= 1e-12


def test_serve_text_model_ignores_missing_audio(capsys, corpus_dir):
    _split(capsys, corpus_dir)
    _train(capsys, corpus_dir, "text", "text.bin")
    model = models.load_bundle(corpus_dir / "text.bin")
    with serving(model) as url:
        status, body = http(url + "/classify", {"transcript": ""})
        assert status == 200 and body["code"] in {d.code for d in corpus.DIALECTS}
        expected = models.predict(model, "")[1]
        np.testing.assert_allclose([body["scores"][d.code] for d in model.labels], expected, atol=1e-12)


def test_decode_wav_helper_used_by_predict(tmp_path, capsys, corpus_dir):
    _split(capsys, corpus_dir)
    _train(capsys, corpus_dir, "fusion", "serve.bin")
    (tmp_path / "bad.wav").write_bytes(b"garbage")
    rc, _, err = run(capsys, "predict", "--model", corpus_dir / "serve.bin", "--transcript", "x",
                     "--wav", tmp_path / "bad.wav")
    assert rc == 2 and err
    rc, _, err = run(capsys, "predict", "--model", corpus_dir / "serve.bin", "--transcript", "x")
    assert rc == 2 and "audio required" in err
    assert dsp.decode_wav(corpus_dir / "wav" / "synth_00_0000.wav").sample_rate_hz == 16000
