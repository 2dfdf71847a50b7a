import contextlib
import json
import sys
import threading
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from murreid import cli, corpus, models, nn, synth  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_utt(uid, dialect_index=0, speaker="s", duration=1.0, text="a b", audio=""):
    return corpus.Utterance(
        id=uid,
        speaker_id=speaker,
        dialect=corpus.DIALECTS[dialect_index],
        transcript_dialectal=text,
        audio_path=audio,
        duration_s=duration,
        sample_rate_hz=16000,
    )


SMALL = models.ModelConfig(embed_dim=8, hidden=8, text_layers=1, audio_proj=8, pool_rows=2, text_length=16)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """4-class split-placement corpus, 24 utterances per class."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = synth.SynthConfig(n_classes=4, per_class=24, placement="split", p_text=1.0,
                            duration_s=(0.3, 0.6), seed=5)
    utts = synth.generate(cfg, out)
    sm = corpus.split(utts, seed=5)
    return out, utts, sm


@pytest.fixture(scope="session")
def small_text_model(small_synth):
    out, utts, sm = small_synth
    cfg = nn.TrainConfig(learning_rate=5e-3, epochs=3, batch_size=8, seed=3)
    return models.train_text_only(sm.select(utts, "train"), sm.select(utts, "val"), cfg,
                                  models.ModelConfig(embed_dim=8, hidden=8, text_layers=2, text_length=16))


@pytest.fixture(scope="session")
def small_fusion_model(small_synth):
    out, utts, sm = small_synth
    cfg = nn.TrainConfig(learning_rate=5e-3, epochs=2, batch_size=8, seed=3)
    return models.train_fusion(sm.select(utts, "train"), sm.select(utts, "val"), cfg, SMALL, audio_root=out)


@contextlib.contextmanager
def serving(model):
    """Run the HTTP endpoint on an ephemeral port; yields the base URL."""
    server = cli.make_server(model, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()


def http(url, body=None):
    """(status, parsed body) for GET (body None) or POST of raw bytes / a JSON-able object."""
    if body is not None and not isinstance(body, bytes):
        body = json.dumps(body).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="GET" if body is None else "POST")
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            status, raw = resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        status, raw = exc.code, exc.read()
    try:
        return status, json.loads(raw)
    except ValueError:
        return status, raw.decode("utf-8")
