"""Corpus manifests, the dialect label registry, duration filtering and splits."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Literal, Sequence

PARTITIONS = ("train", "val", "test")
SplitMode = Literal["random-sentence", "speaker-disjoint"]
SPLIT_MODES = ("random-sentence", "speaker-disjoint")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)

_MASK64 = (1 << 64) - 1


class CorpusError(ValueError):
    """Raised for malformed manifests, unknown labels and impossible splits."""


@dataclass(frozen=True)
class DialectLabel:
    name: str
    code: str
    index: int


# Registry order; the sentence counts are what the released corpus contains.
_TABLE = [
    ("Etelä-Häme", "EH", 1860),
    ("Etelä-Karjala", "EK", 813),
    ("Etelä-Pohjanmaa", "EP", 2684),
    ("Etelä-Satakunta", "ES", 848),
    ("Etelä-Savo", "ESa", 1744),
    ("Eteläinen Keski-Suomi", "EKS", 2168),
    ("Inkerinsuomalaismurteet", "IS", 4035),
    ("Kaakkois-Häme", "KH", 8026),
    ("Kainuu", "K", 3995),
    ("Keski-Karjala", "KK", 1640),
    ("Keski-Pohjanmaa", "KP", 900),
    ("Länsi-Satakunta", "LS", 1288),
    ("Länsi-Uusimaa", "LU", 1171),
    ("Länsipohja", "LP", 1026),
    ("Läntinen Keski-Suomi", "LKS", 857),
    ("Peräpohjola", "P", 1913),
    ("Pohjoinen Keski-Suomi", "PKS", 733),
    ("Pohjoinen Varsinais-Suomi", "PVS", 3885),
    ("Pohjois-Häme", "PH", 859),
    ("Pohjois-Karjala", "PK", 4292),
    ("Pohjois-Pohjanmaa", "PP", 1801),
    ("Pohjois-Satakunta", "PS", 2371),
    ("Pohjois-Savo", "PSa", 2344),
]

DIALECTS: tuple[DialectLabel, ...] = tuple(
    DialectLabel(name, code, i) for i, (name, code, _) in enumerate(_TABLE)
)
NUM_DIALECTS = len(DIALECTS)
REFERENCE_SENTENCE_COUNTS: dict[str, int] = {code: n for _, code, n in _TABLE}


class Registry:
    """Closed name/code/index lookup over a set of dialect labels."""

    def __init__(self, labels: Sequence[DialectLabel] = DIALECTS):
        self.labels = tuple(labels)
        self._by_name = {d.name: d for d in self.labels}
        self._by_code = {d.code: d for d in self.labels}
        if len(self._by_name) != len(self.labels) or len(self._by_code) != len(self.labels):
            raise CorpusError("dialect names and codes must be unique")
        if [d.index for d in self.labels] != list(range(len(self.labels))):
            raise CorpusError("dialect indices must be dense and ordered")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def by_name(self, name: str) -> DialectLabel:
        try:
            return self._by_name[name]
        except KeyError:
            raise CorpusError(f"unknown dialect {name!r}") from None

    def by_code(self, code: str) -> DialectLabel:
        try:
            return self._by_code[code]
        except KeyError:
            raise CorpusError(f"unknown dialect code {code!r}") from None

    def by_index(self, index: int) -> DialectLabel:
        if not 0 <= index < len(self.labels):
            raise CorpusError(f"dialect index {index} out of range")
        return self.labels[index]


REGISTRY = Registry()


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    dialect: DialectLabel
    transcript_dialectal: str
    audio_path: str
    duration_s: float
    sample_rate_hz: int
    transcript_normalized: str | None = None


# ---------------------------------------------------------------------------
# manifest TSV


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value:
        raise CorpusError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def format_manifest_line(u: Utterance) -> str:
    fields = [
        u.id,
        u.speaker_id,
        u.dialect.name,
        repr(float(u.duration_s)),
        str(u.sample_rate_hz),
        u.audio_path,
        u.transcript_dialectal,
        u.transcript_normalized or "",
    ]
    return "\t".join(_check_field(f, "manifest field") for f in fields)


def write_manifest(utts: Iterable[Utterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in utts:
            fh.write(format_manifest_line(u) + "\n")


def parse_manifest_line(line: str, registry: Registry = REGISTRY, lineno: int = 0) -> Utterance:
    cols = line.split("\t")
    if len(cols) == 7:
        cols.append("")
    if len(cols) != 8:
        raise CorpusError(f"line {lineno}: expected 7 or 8 tab-separated columns, got {len(cols)}")
    uid, speaker, dialect_name, dur, rate, audio_path, text, norm = cols
    if not uid:
        raise CorpusError(f"line {lineno}: empty utterance id")
    try:
        duration = float(dur)
        sample_rate = int(rate)
    except ValueError:
        raise CorpusError(f"line {lineno}: bad duration/sample rate {dur!r}/{rate!r}") from None
    if not math.isfinite(duration) or duration < 0:
        raise CorpusError(f"line {lineno}: duration must be a finite value >= 0, got {dur!r}")
    if sample_rate <= 0:
        raise CorpusError(f"line {lineno}: sample rate must be positive, got {rate!r}")
    if audio_path and duration == 0:
        raise CorpusError(f"line {lineno}: utterance {uid!r} has audio but zero duration")
    try:
        dialect = registry.by_name(dialect_name)
    except CorpusError:
        raise CorpusError(f"line {lineno}: unknown dialect {dialect_name!r}") from None
    return Utterance(
        id=uid,
        speaker_id=speaker,
        dialect=dialect,
        transcript_dialectal=text,
        audio_path=audio_path,
        duration_s=duration,
        sample_rate_hz=sample_rate,
        transcript_normalized=norm or None,
    )


def parse_manifest(path: str | Path, registry: Registry = REGISTRY) -> list[Utterance]:
    """Read a manifest TSV; raises CorpusError with the line number on bad records."""
    utts: list[Utterance] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw[:-1] if raw.endswith("\n") else raw
            if line.endswith("\r"):
                line = line[:-1]
            if not line:
                continue
            u = parse_manifest_line(line, registry, lineno)
            if u.id in seen:
                raise CorpusError(f"line {lineno}: duplicate utterance id {u.id!r}")
            seen.add(u.id)
            utts.append(u)
    return utts


def filter_by_duration(utts: Sequence[Utterance], max_s: float = 10.0) -> list[Utterance]:
    """Keep utterances strictly shorter than ``max_s`` seconds."""
    if max_s <= 0:
        raise CorpusError("max_s must be positive")
    return [u for u in utts if u.duration_s < max_s]


# ---------------------------------------------------------------------------
# splitting


class SplitMix64:
    """64-bit splitmix generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        # rejection sampling removes modulo bias
        limit = _MASK64 - (_MASK64 + 1) % bound
        while True:
            r = self.next()
            if r <= limit:
                return r % bound


def shuffle(items: Sequence, seed: int) -> list:
    """Fisher-Yates shuffle driven by SplitMix64."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    mode: str
    assignment: dict[str, str] = field(default_factory=dict)

    def ids(self, partition: str) -> list[str]:
        return [uid for uid, p in self.assignment.items() if p == partition]

    def counts(self) -> dict[str, int]:
        c = Counter(self.assignment.values())
        return {p: c.get(p, 0) for p in PARTITIONS}

    def select(self, utts: Sequence[Utterance], partition: str) -> list[Utterance]:
        return [u for u in utts if self.assignment.get(u.id) == partition]


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise CorpusError("ratios must be (train, val, test)")
    r = tuple(float(x) for x in ratios)
    if any(x < 0 or not math.isfinite(x) for x in r):
        raise CorpusError(f"ratios must be finite and nonnegative: {r}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {sum(r)!r}")
    return r  # type: ignore[return-value]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor-rule partition sizes; the remainder goes to test.

    Ratios are taken at their shortest decimal value so that, e.g.,
    90 * 0.7 floors to 63 rather than to 62 through binary rounding.
    """
    r0, r1 = (Fraction(repr(float(r))) for r in ratios[:2])
    train_end = math.floor(n * r0)
    val_end = math.floor(n * (r0 + r1))
    val_end = min(max(val_end, train_end), n)
    return train_end, val_end - train_end, n - val_end


def split(
    utts: Sequence[Utterance],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    mode: str = "random-sentence",
) -> SplitManifest:
    r = _check_ratios(ratios)
    if not utts:
        raise CorpusError("cannot split an empty corpus")
    if mode not in SPLIT_MODES:
        raise CorpusError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    manifest = SplitManifest(seed=seed, ratios=r, mode=mode)
    if mode == "random-sentence":
        order = shuffle([u.id for u in utts], seed)
        n_train, n_val, _ = split_sizes(len(order), r)
        for i, uid in enumerate(order):
            manifest.assignment[uid] = (
                "train" if i < n_train else "val" if i < n_train + n_val else "test"
            )
    else:
        manifest.assignment = _speaker_disjoint(utts, r, seed)
    return manifest


def _speaker_disjoint(utts: Sequence[Utterance], ratios, seed: int) -> dict[str, str]:
    by_speaker: dict[str, list[str]] = defaultdict(list)
    for u in utts:
        by_speaker[u.speaker_id].append(u.id)
    speakers = shuffle(sorted(by_speaker), seed)
    if len(speakers) < 3:
        raise CorpusError(f"speaker-disjoint split needs at least 3 speakers, got {len(speakers)}")

    n_train, n_val, _ = split_sizes(len(utts), ratios)
    quotas = [n_train, n_val, math.inf]
    # partitions that must still receive at least one speaker
    wanted = [p for p in range(3) if ratios[p] > 0] or [2]

    assign: dict[str, str] = {}
    filled = [0, 0, 0]
    part = 0
    while part < 2 and quotas[part] == 0 and part not in wanted:
        part += 1
    for k, spk in enumerate(speakers):
        left = len(speakers) - k
        later = [p for p in wanted if p > part]
        if part < 2 and filled[part] > 0 and left <= len(later):
            part = later[0]
        for uid in by_speaker[spk]:
            assign[uid] = PARTITIONS[part]
        filled[part] += len(by_speaker[spk])
        while part < 2 and filled[part] >= quotas[part] and (filled[part] or part not in wanted):
            part += 1
    return {u.id: assign[u.id] for u in utts}


def format_split(manifest: SplitManifest) -> str:
    ratios = ",".join(repr(x) for x in manifest.ratios)
    lines = [f"# seed={manifest.seed} ratios={ratios} mode={manifest.mode}"]
    lines += [f"{uid}\t{p}" for uid, p in manifest.assignment.items()]
    return "\n".join(lines) + "\n"


def write_split(manifest: SplitManifest, path: str | Path) -> None:
    Path(path).write_text(format_split(manifest), encoding="utf-8")


def read_split(path: str | Path) -> SplitManifest:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    header = lines[0] if lines else ""
    if not header.startswith("# "):
        raise CorpusError("split file is missing its '# seed=... ratios=... mode=...' header")
    meta = dict(kv.split("=", 1) for kv in header[2:].split() if "=" in kv)
    try:
        seed = int(meta["seed"])
        ratios = tuple(float(x) for x in meta["ratios"].split(","))
        mode = meta["mode"]
    except (KeyError, ValueError):
        raise CorpusError(f"malformed split header: {header!r}") from None
    manifest = SplitManifest(seed=seed, ratios=ratios, mode=mode)  # type: ignore[arg-type]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 2 or cols[1] not in PARTITIONS:
            raise CorpusError(f"line {lineno}: expected '<id>\\t<train|val|test>'")
        if cols[0] in manifest.assignment:
            raise CorpusError(f"line {lineno}: duplicate id {cols[0]!r}")
        manifest.assignment[cols[0]] = cols[1]
    return manifest


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CorpusStats:
    sentences: dict[str, int]
    audio_seconds: dict[str, float]
    speakers: dict[str, int]
    total: int

    @property
    def n_speakers(self) -> int:
        return sum(self.speakers.values())


def compute_stats(utts: Iterable[Utterance], registry: Registry = REGISTRY) -> CorpusStats:
    sentences = {d.code: 0 for d in registry}
    seconds = {d.code: 0.0 for d in registry}
    speakers: dict[str, set[str]] = {d.code: set() for d in registry}
    total = 0
    for u in utts:
        sentences[u.dialect.code] += 1
        seconds[u.dialect.code] += u.duration_s
        speakers[u.dialect.code].add(u.speaker_id)
        total += 1
    return CorpusStats(
        sentences=sentences,
        audio_seconds=seconds,
        speakers={k: len(v) for k, v in speakers.items()},
        total=total,
    )
