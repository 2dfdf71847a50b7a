import math

import pytest
from hypothesis import given, settings, strategies as st

from murreid import corpus
from murreid.corpus import CorpusError

from conftest import make_utt


def test_registry_is_a_bijection():
    assert len(corpus.DIALECTS) == 23
    names = {d.name for d in corpus.DIALECTS}
    codes = {d.code for d in corpus.DIALECTS}
    assert len(names) == len(codes) == 23
    for d in corpus.DIALECTS:
        assert corpus.REGISTRY.by_name(d.name) is corpus.REGISTRY.by_code(d.code) is corpus.REGISTRY.by_index(d.index)
        assert 1 <= len(d.code) <= 3


def test_registry_codes_and_reference_counts():
    codes = [d.code for d in corpus.DIALECTS]
    assert codes == ["EH", "EK", "EP", "ES", "ESa", "EKS", "IS", "KH", "K", "KK", "KP", "LS",
                     "LU", "LP", "LKS", "P", "PKS", "PVS", "PH", "PK", "PP", "PS", "PSa"]
    assert corpus.REFERENCE_SENTENCE_COUNTS["KH"] == 8026
    assert corpus.REFERENCE_SENTENCE_COUNTS["EH"] == 1860


def test_parse_manifest_line_example(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("u1\tsp1\tKaakkois-Häme\t9.2\t16000\ta.wav\tmie läksin\tminä lähdin\n", encoding="utf-8")
    (u,) = corpus.parse_manifest(path)
    assert u.dialect.code == "KH"
    assert u.duration_s == 9.2
    assert u.transcript_normalized == "minä lähdin"
    assert u.audio_path == "a.wav"


def test_empty_manifest(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("", encoding="utf-8")
    assert corpus.parse_manifest(path) == []


def test_unknown_dialect_is_named(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("u1\tsp\tKainuu\t1\t16000\ta.wav\tx\t\nu2\tsp\tLappi\t1\t16000\tb.wav\tx\t\n", encoding="utf-8")
    with pytest.raises(CorpusError, match=r"line 2: unknown dialect 'Lappi'"):
        corpus.parse_manifest(path)


@pytest.mark.parametrize(
    "body, message",
    [
        ("u1\tsp\tKainuu\t1\n", "line 1"),
        ("u1\tsp\tKainuu\tx\t16000\ta.wav\tt\t\n", "line 1"),
        ("u1\tsp\tKainuu\t1\t16000\ta.wav\tt\t\nu1\tsp\tKainuu\t1\t16000\ta.wav\tt\t\n", "duplicate"),
        ("u1\tsp\tKainuu\t0\t16000\ta.wav\tt\t\n", "zero duration"),
    ],
)
def test_malformed_manifests(tmp_path, body, message):
    path = tmp_path / "m.tsv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(CorpusError, match=message):
        corpus.parse_manifest(path)


_text = st.text(st.characters(blacklist_characters="\t\n\r", blacklist_categories=("Cs",)), max_size=20)


@st.composite
def utterance_lists(draw):
    n = draw(st.integers(0, 12))
    out = []
    for i in range(n):
        out.append(corpus.Utterance(
            id=f"id{i}",
            speaker_id=draw(_text),
            dialect=draw(st.sampled_from(corpus.DIALECTS)),
            transcript_dialectal=draw(_text),
            audio_path=draw(st.sampled_from(["", "w/a.wav"])),
            duration_s=draw(st.floats(0.001, 100, allow_nan=False)),
            sample_rate_hz=draw(st.integers(1, 96000)),
            transcript_normalized=draw(st.one_of(st.none(), _text.filter(bool))),
        ))
    return out


@given(utterance_lists())
@settings(max_examples=60, deadline=None)
def test_manifest_round_trip(tmp_path_factory, utts):
    path = tmp_path_factory.mktemp("rt") / "m.tsv"
    corpus.write_manifest(utts, path)
    assert corpus.parse_manifest(path) == utts


def test_filter_boundary_is_strict():
    utts = [make_utt(f"u{i}", duration=d) for i, d in enumerate([9.99, 10.0, 10.01])]
    assert [u.duration_s for u in corpus.filter_by_duration(utts, 10.0)] == [9.99]
    assert corpus.filter_by_duration([], 10.0) == []
    ones = [make_utt(f"u{i}", duration=1.0) for i in range(4)]
    assert corpus.filter_by_duration(ones) == ones


@given(st.lists(st.floats(0.01, 20, allow_nan=False), max_size=30), st.floats(0.5, 15))
def test_filter_properties(durations, max_s):
    utts = [make_utt(f"u{i}", duration=d) for i, d in enumerate(durations)]
    kept = corpus.filter_by_duration(utts, max_s)
    assert all(u.duration_s < max_s for u in kept)
    assert [u for u in utts if u.duration_s < max_s] == kept
    assert corpus.filter_by_duration(kept, max_s) == kept


def test_filter_rejects_nonpositive_limit():
    with pytest.raises(CorpusError):
        corpus.filter_by_duration([], 0)


def test_splitmix_reference_values():
    # published splitmix64 outputs for seed 1234567
    rng = corpus.SplitMix64(1234567)
    assert [rng.next() for _ in range(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
    ]


@pytest.mark.parametrize("n, sizes", [(20, (14, 3, 3)), (1, (0, 0, 1)), (100, (70, 15, 15)), (7, (4, 1, 2)), (90, (63, 13, 14))])
def test_split_sizes_floor_rule(n, sizes):
    utts = [make_utt(f"u{i}") for i in range(n)]
    sm = corpus.split(utts, (0.7, 0.15, 0.15), seed=1)
    assert tuple(sm.counts().values()) == sizes


def test_split_errors():
    utts = [make_utt(f"u{i}", speaker=f"s{i % 2}") for i in range(10)]
    with pytest.raises(CorpusError, match="sum to 1"):
        corpus.split(utts, (0.5, 0.2, 0.2))
    with pytest.raises(CorpusError, match="empty"):
        corpus.split([], (0.7, 0.15, 0.15))
    with pytest.raises(CorpusError, match="at least 3 speakers"):
        corpus.split(utts, mode="speaker-disjoint")


def test_speaker_disjoint_example():
    utts = [make_utt(f"s{s}_u{i}", speaker=f"s{s}") for s in range(10) for i in range(10)]
    sm = corpus.split(utts, seed=7, mode="speaker-disjoint")
    where = {}
    for u in utts:
        where.setdefault(u.speaker_id, set()).add(sm.assignment[u.id])
    assert all(len(p) == 1 for p in where.values())
    assert all(c > 0 for c in sm.counts().values())


@st.composite
def corpora(draw):
    n = draw(st.integers(1, 60))
    n_spk = draw(st.integers(1, 12))
    return [make_utt(f"u{i}", speaker=f"s{draw(st.integers(0, n_spk - 1))}") for i in range(n)]


@given(corpora(), st.integers(0, 2**64 - 1))
@settings(max_examples=100, deadline=None)
def test_split_is_deterministic_partition(utts, seed):
    sm = corpus.split(utts, seed=seed)
    assert sm.assignment.keys() == {u.id for u in utts}
    again = corpus.split(utts, seed=seed)
    assert again.assignment == sm.assignment
    n = len(utts)
    assert sm.counts()["train"] == math.floor(n * 0.7)


def test_split_file_round_trip(tmp_path):
    utts = [make_utt(f"u{i}", speaker=f"s{i % 4}") for i in range(30)]
    sm = corpus.split(utts, seed=11, mode="speaker-disjoint")
    corpus.write_split(sm, tmp_path / "s.tsv")
    text = (tmp_path / "s.tsv").read_text()
    assert text.startswith("# seed=11 ratios=0.7,0.15,0.15 mode=speaker-disjoint\n")
    back = corpus.read_split(tmp_path / "s.tsv")
    assert back.assignment == sm.assignment and back.seed == 11 and back.mode == "speaker-disjoint"


def test_compute_stats():
    empty = corpus.compute_stats([])
    assert set(empty.sentences.values()) == {0} and empty.total == 0
    utts = [make_utt(f"u{i}", dialect_index=7, speaker=f"s{i % 2}", duration=2.0) for i in range(3)]
    stats = corpus.compute_stats(utts)
    assert stats.sentences["KH"] == 3
    assert sum(stats.sentences.values()) == 3
    assert stats.audio_seconds["KH"] == 6.0
    assert stats.speakers["KH"] == 2


def test_stats_reproduce_reference_counts():
    # a manifest whose per-dialect sizes match the released corpus table
    utts = [
        make_utt(f"{d.code}_{i}", dialect_index=d.index)
        for d in corpus.DIALECTS
        for i in range(corpus.REFERENCE_SENTENCE_COUNTS[d.code])
    ]
    stats = corpus.compute_stats(utts)
    assert stats.sentences == corpus.REFERENCE_SENTENCE_COUNTS
    assert stats.sentences["KH"] == 8026 and stats.sentences["EH"] == 1860
