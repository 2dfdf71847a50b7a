"""Synthetic dialect corpora with controllable text and audio class markers.

Class ``k`` can carry a marker token ``murre_k`` in its transcripts, a sine
tone at ``f_k`` in its audio, or both. Placement ``split`` puts text markers
on the first half of the classes and tones on the second half, so only a
model that listens can separate every class.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import DIALECTS, Utterance, write_manifest
from .dsp import DspConfig, Waveform, encode_pcm16, mel_centers_hz, write_wav

PLACEMENTS = ("text", "audio", "both", "split")

_SYLLABLES = ["ka", "mi", "sa", "lo", "te", "vä", "hu", "nie", "ruo", "pyö", "jo", "äl"]
FILLER = tuple(a + b for a, b in itertools.product(_SYLLABLES, repeat=2))


def marker_token(k: int) -> str:
    return f"murre_{k}"


def default_tones(n_classes: int, dsp: DspConfig = DspConfig()) -> tuple[float, ...]:
    """Tone per class at mel filter centers spread evenly over the filterbank."""
    centers = mel_centers_hz(dsp)
    lo, hi = 2, len(centers) - 3
    if n_classes == 1:
        return (float(centers[lo]),)
    idx = [lo + round(k * (hi - lo) / (n_classes - 1)) for k in range(n_classes)]
    return tuple(float(centers[i]) for i in idx)


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    per_class: int = 200
    placement: str = "split"
    p_text: float = 0.8
    tones_hz: tuple[float, ...] | None = None
    tone_amplitude: float = 0.3
    noise_amplitude: float = 0.05
    sentence_length: tuple[int, int] = (4, 10)
    duration_s: tuple[float, float] = (0.5, 1.5)
    speakers_per_class: int = 5
    sample_rate_hz: int = 16000
    seed: int = 0

    def tones(self) -> tuple[float, ...]:
        return self.tones_hz if self.tones_hz is not None else default_tones(self.n_classes)

    def validate(self) -> None:
        if not 1 <= self.n_classes <= len(DIALECTS):
            raise ValueError(f"n_classes must be in [1, {len(DIALECTS)}]")
        if self.per_class < 1 or self.speakers_per_class < 1:
            raise ValueError("per_class and speakers_per_class must be >= 1")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if not 0 <= self.p_text <= 1:
            raise ValueError("p_text must be in [0, 1]")
        tones = self.tones()
        if len(tones) < self.n_classes or len(set(tones[: self.n_classes])) != self.n_classes:
            raise ValueError("need one distinct tone frequency per class")
        if any(not 0 < f < self.sample_rate_hz / 2 for f in tones):
            raise ValueError("tone frequencies must lie below Nyquist")
        lo, hi = self.sentence_length
        if not 1 <= lo <= hi:
            raise ValueError("sentence_length must satisfy 1 <= lo <= hi")
        dlo, dhi = self.duration_s
        if not 0 < dlo <= dhi < 10.0:
            raise ValueError("durations must lie in (0, 10) s")


@dataclass(frozen=True)
class Separability:
    text_classes: tuple[int, ...]
    audio_classes: tuple[int, ...]
    n_classes: int
    notes: list[str] = field(default_factory=list)

    def carries(self, k: int) -> dict[str, bool]:
        return {"text": k in self.text_classes, "audio": k in self.audio_classes}


def describe(cfg: SynthConfig) -> Separability:
    """Which modality carries class signal for each class."""
    ks = tuple(range(cfg.n_classes))
    half = cfg.n_classes // 2
    text_cls = {
        "text": ks, "both": ks, "audio": (), "split": ks[:half],
    }[cfg.placement]
    audio_cls = {
        "text": (), "both": ks, "audio": ks, "split": ks[half:],
    }[cfg.placement]
    if cfg.p_text == 0:
        text_cls = ()
    notes = []
    if not audio_cls:
        notes.append("audio-only classifier expected at chance")
    if not text_cls:
        notes.append("text-only classifier expected at chance")
    if text_cls and cfg.p_text < 1:
        notes.append(f"text markers present in {cfg.p_text:.0%} of marked-class transcripts")
    return Separability(tuple(text_cls), tuple(audio_cls), cfg.n_classes, notes)


def _transcript(rng: np.random.Generator, cfg: SynthConfig, k: int, marked: bool) -> str:
    n = int(rng.integers(cfg.sentence_length[0], cfg.sentence_length[1] + 1))
    words = [FILLER[i] for i in rng.integers(0, len(FILLER), size=n)]
    if marked and rng.random() < cfg.p_text:
        words.insert(int(rng.integers(0, n + 1)), marker_token(k))
    return " ".join(words)


def _audio(rng: np.random.Generator, cfg: SynthConfig, k: int, toned: bool) -> np.ndarray:
    dur = rng.uniform(*cfg.duration_s)
    n = max(1, int(round(dur * cfg.sample_rate_hz)))
    x = rng.normal(0.0, cfg.noise_amplitude, size=n)
    if toned:
        t = np.arange(n) / cfg.sample_rate_hz
        x += cfg.tone_amplitude * np.sin(2 * np.pi * cfg.tones()[k] * t + rng.uniform(0, 2 * np.pi))
    # snap to the PCM16 grid so the written file decodes to exactly these values
    return encode_pcm16(np.clip(x, -1.0, 1.0)).astype(np.float64) / 32768.0


def generate(cfg: SynthConfig, out_dir: str | Path) -> list[Utterance]:
    """Write ``manifest.tsv`` and ``wav/*.wav`` under out_dir; returns the utterances."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic corpus to {out}: {exc}") from exc
    sep = describe(cfg)
    rng = np.random.default_rng(cfg.seed)
    utts = []
    for k in range(cfg.n_classes):
        for j in range(cfg.per_class):
            uid = f"synth_{k:02d}_{j:04d}"
            text = _transcript(rng, cfg, k, k in sep.text_classes)
            samples = _audio(rng, cfg, k, k in sep.audio_classes)
            rel = f"wav/{uid}.wav"
            write_wav(out / rel, Waveform(samples, cfg.sample_rate_hz))
            utts.append(
                Utterance(
                    id=uid,
                    speaker_id=f"spk_{k:02d}_{j % cfg.speakers_per_class}",
                    dialect=DIALECTS[k],
                    transcript_dialectal=text,
                    audio_path=rel,
                    duration_s=len(samples) / cfg.sample_rate_hz,
                    sample_rate_hz=cfg.sample_rate_hz,
                )
            )
    write_manifest(utts, out / "manifest.tsv")
    return utts
