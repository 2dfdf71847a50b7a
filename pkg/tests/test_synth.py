from collections import Counter

import numpy as np
import pytest

from murreid import corpus, dsp, synth


def _gen(tmp_path, **kw):
    cfg = synth.SynthConfig(**{"n_classes": 4, "per_class": 50, "duration_s": (0.2, 0.4), "seed": 1, **kw})
    return cfg, synth.generate(cfg, tmp_path)


def test_counts_and_manifest(tmp_path):
    cfg, utts = _gen(tmp_path)
    assert len(utts) == 200
    assert Counter(u.dialect.index for u in utts) == {k: 50 for k in range(4)}
    assert corpus.parse_manifest(tmp_path / "manifest.tsv") == utts
    assert len({u.speaker_id for u in utts}) == 4 * cfg.speakers_per_class


def test_text_placement_markers(tmp_path):
    _, utts = _gen(tmp_path, placement="text", p_text=1.0)
    for u in utts:
        tokens = u.transcript_dialectal.split()
        assert synth.marker_token(u.dialect.index) in tokens
        assert sum(t.startswith("murre_") for t in tokens) == 1


def test_audio_placement_text_is_class_independent(tmp_path):
    _, utts = _gen(tmp_path, placement="audio")
    assert not any("murre_" in u.transcript_dialectal for u in utts)
    # chi-square test of independence: class x filler-word bucket (4 x 4, 9 dof)
    table = np.zeros((4, 4))
    index = {w: i for i, w in enumerate(synth.FILLER)}
    for u in utts:
        for w in u.transcript_dialectal.split():
            table[u.dialect.index, index[w] * 4 // len(synth.FILLER)] += 1
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    chi2 = float(((table - expected) ** 2 / expected).sum())
    assert chi2 < 27.88  # p = 0.001 critical value


def test_split_placement_partitions_modalities(tmp_path):
    cfg, utts = _gen(tmp_path, placement="split", p_text=1.0)
    sep = synth.describe(cfg)
    assert sep.text_classes == (0, 1) and sep.audio_classes == (2, 3)
    for u in utts:
        marked = "murre_" in u.transcript_dialectal
        assert marked == (u.dialect.index < 2)
    # audio-marked classes carry their tone, text-marked classes are noise only
    ref = dsp.DspConfig()
    centers = dsp.mel_centers_hz(ref)
    for u in utts[::25]:
        frames = dsp.load_features(tmp_path / u.audio_path, ref).frames.mean(axis=0)
        if u.dialect.index >= 2:
            target = int(np.argmin(np.abs(centers - cfg.tones()[u.dialect.index])))
            assert int(np.argmax(frames)) == target
        else:
            assert frames.max() - frames.min() < 5.0


def test_describe_cases():
    both = synth.describe(synth.SynthConfig(n_classes=3, placement="both"))
    assert both.carries(2) == {"text": True, "audio": True}
    text = synth.describe(synth.SynthConfig(n_classes=3, placement="text"))
    assert text.audio_classes == () and "audio-only classifier expected at chance" in text.notes
    none = synth.describe(synth.SynthConfig(n_classes=3, placement="split", p_text=0.0))
    assert none.text_classes == () and none.audio_classes == (1, 2)


def test_wavs_decode_exactly_and_fit_the_filter(tmp_path):
    _, utts = _gen(tmp_path, duration_s=(0.5, 1.5), per_class=5)
    assert corpus.filter_by_duration(utts, 10.0) == utts
    for u in utts:
        w = dsp.decode_wav(tmp_path / u.audio_path)
        assert w.sample_rate_hz == 16000
        assert len(w.samples) / 16000 == u.duration_s
        np.testing.assert_array_equal(np.round(w.samples * 32768), w.samples * 32768)


def test_generation_is_seeded(tmp_path):
    _, a = _gen(tmp_path / "a", per_class=4)
    _, b = _gen(tmp_path / "b", per_class=4)
    _, c = _gen(tmp_path / "c", per_class=4, seed=2)
    assert a == b
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    assert (tmp_path / "a/wav/synth_03_0002.wav").read_bytes() == (tmp_path / "b/wav/synth_03_0002.wav").read_bytes()
    assert [u.transcript_dialectal for u in a] != [u.transcript_dialectal for u in c]


def test_default_tones_are_distinct_filter_centers():
    tones = synth.default_tones(23)
    assert len(set(tones)) == 23 and all(t < 8000 for t in tones)
    centers = dsp.mel_centers_hz(dsp.DspConfig())
    assert all(np.min(np.abs(centers - t)) < 1e-9 for t in tones)


@pytest.mark.parametrize("kw", [{"n_classes": 0}, {"n_classes": 24}, {"placement": "x"}, {"p_text": 1.5},
                                {"duration_s": (1.0, 10.0)}, {"tones_hz": (100.0, 100.0), "n_classes": 2}])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        synth.SynthConfig(**kw).validate()
