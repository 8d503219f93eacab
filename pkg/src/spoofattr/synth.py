"""Synthetic desk-scale corpus with controllable acoustic-model and vocoder cues.

Each spoofed utterance is a harmonic source at its voice's fundamental,
shaped by a formant envelope (the "acoustic model" cue, jittered per
utterance) and passed through a fixed feed-forward comb filter (the
"vocoder" cue). Bonafide audio uses a vibrato source with free formants and
no comb. A per-utterance speaker embedding is emitted alongside so that the
voice clustering step has something realistic to work on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import soundfile as sf
import yaml

from .corpus import BONAFIDE_LABELS, AttributeLabelSet, CorpusManifest, Utterance, write_manifest
from .protocol import EmbeddingSet, write_embeddings

# formant centres (Hz) and spectral tilt (dB per kHz)
ACOUSTIC_REGISTRY = {
    "am0": {"formants": (500.0, 1500.0, 2500.0), "tilt": -3.0},
    "am1": {"formants": (750.0, 1150.0, 2900.0), "tilt": -4.0},
    "am2": {"formants": (350.0, 2100.0, 3100.0), "tilt": -2.5},
    "am3": {"formants": (620.0, 1750.0, 3600.0), "tilt": -3.5},
    "am4": {"formants": (420.0, 1000.0, 2300.0), "tilt": -5.0},
    "am5": {"formants": (850.0, 1900.0, 4100.0), "tilt": -2.0},
}

# feed-forward comb y[n] = x[n] + gain * x[n - delay]; notches at odd
# multiples of rate / (2 * delay) when gain > 0
VOCODER_REGISTRY = {
    "voc0": {"delay": 3, "gain": 0.95},
    "voc1": {"delay": 5, "gain": 0.95},
    "voc2": {"delay": 8, "gain": 0.95},
    "voc3": {"delay": 11, "gain": 0.95},
    "voc4": {"delay": 16, "gain": 0.95},
    "voc5": {"delay": 21, "gain": 0.95},
}

SPEAKER_EMB_DIM = 32


@dataclass
class SynthClass:
    acoustic: str
    vocoder: str
    voices: tuple[int, ...] | None = None


@dataclass
class SynthSpec:
    classes: list[SynthClass]
    n_voices: int = 12
    samples_per_class: int = 20
    bonafide_samples: int = 20
    n_bonafide_speakers: int = 6
    duration_s: float = 1.0
    rate: int = 16000
    seed: int = 0
    noise_db: float = -35.0
    formant_jitter: float = 0.06
    speaker_noise: float = 0.15

    def __post_init__(self):
        self.classes = [c if isinstance(c, SynthClass) else _parse_class(c) for c in self.classes]
        if not self.classes:
            raise ValueError("synthetic spec needs at least one class")
        for name in ("n_voices", "samples_per_class", "n_bonafide_speakers", "rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.bonafide_samples < 0 or self.duration_s <= 0:
            raise ValueError("bonafide_samples must be >= 0 and duration_s > 0")
        for c in self.classes:
            if c.acoustic not in ACOUSTIC_REGISTRY:
                raise ValueError(f"unknown acoustic signature {c.acoustic!r}")
            if c.vocoder not in VOCODER_REGISTRY:
                raise ValueError(f"unknown vocoder signature {c.vocoder!r}")
            if c.voices is not None and any(not 0 <= v < self.n_voices for v in c.voices):
                raise ValueError(f"voice index out of range in {c}")


def _parse_class(item) -> SynthClass:
    if isinstance(item, dict):
        voices = item.get("voices")
        return SynthClass(item["acoustic"], item["vocoder"], tuple(voices) if voices is not None else None)
    acoustic, vocoder = item
    return SynthClass(acoustic, vocoder)


def grid_spec(n_acoustic: int = 4, n_vocoder: int = 5, **kw) -> SynthSpec:
    """All acoustic x vocoder pairings from the head of each registry."""
    acoustics = list(ACOUSTIC_REGISTRY)[:n_acoustic]
    vocoders = list(VOCODER_REGISTRY)[:n_vocoder]
    return SynthSpec([SynthClass(a, v) for a in acoustics for v in vocoders], **kw)


def load_spec(path) -> SynthSpec:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if "grid" in doc:
        grid = doc.pop("grid")
        return grid_spec(grid.get("acoustic", 4), grid.get("vocoder", 5), **doc)
    return SynthSpec(**doc)


def voice_f0(voice: int, n_voices: int) -> float:
    """Fundamentals spread geometrically over 90-260 Hz."""
    return 90.0 * (260.0 / 90.0) ** (voice / max(n_voices - 1, 1))


def _envelope(freqs, formants, tilt, bandwidth=160.0):
    gain = np.full_like(freqs, 0.05)
    for fc in formants:
        gain += np.exp(-0.5 * ((freqs - fc) / bandwidth) ** 2)
    return gain * 10 ** (tilt * freqs / 1000.0 / 20.0)


def _harmonic_source(rng, n, rate, f0, formants, tilt, vibrato=0.0):
    t = np.arange(n) / rate
    drift = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    if vibrato:
        drift = drift + vibrato * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * drift) / rate
    n_harm = int((rate / 2 - 200) // (f0 * 1.05))
    ks = np.arange(1, n_harm + 1)
    amps = _envelope(ks * f0, formants, tilt)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    x = amps @ np.sin(ks[:, None] * phase[None, :] + offsets[:, None])
    # aspiration noise shaped by the same envelope
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    spec *= 0.3 * _envelope(np.fft.rfftfreq(n, 1 / rate), formants, tilt)
    x += np.fft.irfft(spec, n)
    am = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    return x * am


def comb(x: np.ndarray, delay: int, gain: float) -> np.ndarray:
    y = x.copy()
    y[delay:] += gain * x[:-delay]
    return y


def _finish(x, rng, noise_db):
    x = x / (np.max(np.abs(x)) + 1e-12) * 0.5
    x = x + 10 ** (noise_db / 20) * 0.5 * rng.standard_normal(x.size)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def render_spoof(spec: SynthSpec, cls: SynthClass, voice: int, rng) -> np.ndarray:
    n = int(round(spec.duration_s * spec.rate))
    ac = ACOUSTIC_REGISTRY[cls.acoustic]
    formants = [f * (1 + spec.formant_jitter * rng.standard_normal()) for f in ac["formants"]]
    tilt = ac["tilt"] * (1 + 0.2 * rng.standard_normal())
    f0 = voice_f0(voice, spec.n_voices) * (1 + 0.01 * rng.standard_normal())
    x = _harmonic_source(rng, n, spec.rate, f0, formants, tilt)
    voc = VOCODER_REGISTRY[cls.vocoder]
    return _finish(comb(x, voc["delay"], voc["gain"]), rng, spec.noise_db)


def render_bonafide(spec: SynthSpec, speaker: int, rng) -> np.ndarray:
    n = int(round(spec.duration_s * spec.rate))
    formants = sorted(rng.uniform([300, 900, 2200], [900, 2300, 4000]))
    f0 = voice_f0(speaker, spec.n_bonafide_speakers) * 1.07
    x = _harmonic_source(rng, n, spec.rate, f0, formants, rng.uniform(-5, -2), vibrato=0.03)
    return _finish(x, rng, spec.noise_db)


def _speaker_centres(seed, count, tag):
    rng = np.random.default_rng([seed, tag])
    return rng.standard_normal((count, SPEAKER_EMB_DIM))


def synth_corpus(spec: SynthSpec, out_dir) -> CorpusManifest:
    """Write WAVs, ``manifest.tsv`` and ``speaker_emb.emb`` under ``out_dir``.

    Every file draws from its own generator seeded by (master seed, index),
    so output is bit-identical across runs.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    voice_centres = _speaker_centres(spec.seed, spec.n_voices, 1)
    speaker_centres = _speaker_centres(spec.seed, spec.n_bonafide_speakers, 2)
    rows, emb_ids, emb_rows = [], [], []
    index = 0

    def emit(uid, audio, utt, labels, centre, rng):
        path = out / "wav" / f"{uid}.wav"
        sf.write(str(path), audio, spec.rate, subtype="FLOAT")
        rows.append((utt, labels))
        emb_ids.append(uid)
        emb_rows.append(centre + spec.speaker_noise * rng.standard_normal(SPEAKER_EMB_DIM))

    for ci, cls in enumerate(spec.classes):
        voices = cls.voices or tuple(range(spec.n_voices))
        labels = AttributeLabelSet("text", cls.acoustic, cls.vocoder)
        for j in range(spec.samples_per_class):
            rng = np.random.default_rng([spec.seed, index])
            voice = voices[j % len(voices)]
            uid = f"syn_{index:06d}"
            audio = render_spoof(spec, cls, voice, rng)
            utt = Utterance(uid, f"wav/{uid}.wav", "und", f"{cls.acoustic}+{cls.vocoder}", False,
                            None, f"voice:{voice}")
            emit(uid, audio, utt, labels, voice_centres[voice], rng)
            index += 1
    for j in range(spec.bonafide_samples):
        rng = np.random.default_rng([spec.seed, index])
        speaker = j % spec.n_bonafide_speakers
        uid = f"syn_{index:06d}"
        audio = render_bonafide(spec, speaker, rng)
        utt = Utterance(uid, f"wav/{uid}.wav", "und", "bonafide", True, f"spk{speaker}", f"spk:spk{speaker}")
        emit(uid, audio, utt, BONAFIDE_LABELS, speaker_centres[speaker], rng)
        index += 1

    manifest = CorpusManifest(tuple(rows), f"synthetic:seed{spec.seed}")
    write_manifest(manifest, out / "manifest.tsv")
    write_embeddings(out / "speaker_emb.emb", EmbeddingSet(tuple(emb_ids), np.vstack(emb_rows)))
    return manifest
