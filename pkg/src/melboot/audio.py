"""Audio frontend: WAV IO, resampling, log-mel features, synthetic corpus.

The model consumes a normalized log-mel spectrogram, time frames by mel bins.
Frame layout is fixed at the classic 25 ms Hann window / 10 ms hop at 16 kHz;
everything the upstream literature leaves open is pinned here: HTK mel scale,
peak-1 triangular filters, natural log with a 1e-10 floor, no edge padding,
periodic Hann window.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import make_rng

LOG_FLOOR = 1e-10


class WavFormatError(ValueError):
    """Malformed WAV container; message carries the byte offset."""


class UnsupportedWavError(ValueError):
    """Well-formed WAV but an encoding this reader does not handle."""


class TooShortError(ValueError):
    """Clip shorter than a single analysis window."""


class NormalizationStateError(RuntimeError):
    """Normalization applied twice, or stats requested before applying."""


@dataclass
class WaveClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("WaveClip needs at least one sample")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    data: np.ndarray  # [frames, mel_bins]
    normalized: bool = False
    norm_mean: float = 0.0
    norm_std: float = 1.0

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.data.shape[1]


# ----------------------------------------------------------------------
# WAV container


def load_wav(path) -> WaveClip:
    """Read a RIFF WAV file: PCM16 or IEEE float32, first channel only."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise WavFormatError(f"{path}: not enough bytes for a RIFF header (byte 0)")
    if blob[0:4] != b"RIFF":
        raise WavFormatError(f"{path}: missing RIFF magic at byte 0")
    if blob[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: missing WAVE form type at byte 8")

    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        size = int.from_bytes(blob[pos + 4 : pos + 8], "little")
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {chunk_id!r} truncated at byte {pos}")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too small at byte {pos}")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            raw = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise WavFormatError(f"{path}: no fmt chunk before byte {pos}")
    if raw is None:
        raise WavFormatError(f"{path}: no data chunk before byte {pos}")

    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1:
        raise WavFormatError(f"{path}: zero channels declared")
    if audio_format == 1 and bits == 16:
        ints = np.frombuffer(raw[: (len(raw) // 2) * 2], dtype="<i2")
        samples = ints.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        floats = np.frombuffer(raw[: (len(raw) // 4) * 4], dtype="<f4")
        samples = np.clip(floats.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedWavError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits}); "
            "only PCM16 and float32 are readable"
        )
    if channels > 1:
        samples = samples[: (samples.size // channels) * channels : channels].copy()
    if samples.size == 0:
        raise WavFormatError(f"{path}: empty data chunk")
    return WaveClip(samples=samples, sample_rate_hz=int(rate))


def write_wav(path, samples: np.ndarray, sample_rate_hz: int, encoding: str = "pcm16"):
    """Minimal WAV writer (mono) used by the synthetic corpus generator."""
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if encoding == "pcm16":
        payload = (np.round(samples * 32767.0).astype("<i2")).tobytes()
        audio_format, bits = 1, 16
    elif encoding == "float32":
        payload = samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        sample_rate_hz,
        sample_rate_hz * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


# ----------------------------------------------------------------------
# resampling and features


def resample(clip: WaveClip, target_hz: int) -> WaveClip:
    """Linear-interpolation resampling; identity when rates already match."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if clip.sample_rate_hz == target_hz:
        return clip
    n_out = int(round(clip.samples.size * target_hz / clip.sample_rate_hz))
    n_out = max(n_out, 1)
    positions = np.arange(n_out) * (clip.sample_rate_hz / target_hz)
    out = np.interp(positions, np.arange(clip.samples.size), clip.samples)
    return WaveClip(samples=out, sample_rate_hz=target_hz)


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mels):
    return 700.0 * (10.0 ** (np.asarray(mels, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate_hz: int) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular HTK-mel filters, peak 1, spanning 0 Hz to Nyquist."""
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, bin_freqs.size), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def log_mel(clip: WaveClip, n_mels: int = 128, win_ms: float = 25.0, hop_ms: float = 10.0) -> MelSpectrogram:
    """Log-mel spectrogram of a 16 kHz clip; frames = 1 + (len - win) // hop."""
    if clip.sample_rate_hz != 16000:
        raise ValueError(f"log_mel expects 16 kHz input, got {clip.sample_rate_hz} Hz; resample first")
    sr = clip.sample_rate_hz
    win = int(round(win_ms * sr / 1000.0))
    hop = int(round(hop_ms * sr / 1000.0))
    if clip.samples.size < win:
        raise TooShortError(f"clip of {clip.samples.size} samples is shorter than one {win}-sample window")
    n_frames = 1 + (clip.samples.size - win) // hop

    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    frames = clip.samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(n_mels, win, sr)
    mel_power = power @ fb.T
    return MelSpectrogram(data=np.log(np.maximum(mel_power, LOG_FLOOR)))


def crop_frames(spec: MelSpectrogram, frames: int) -> MelSpectrogram:
    """Center-crop (or floor-pad) the time axis to exactly `frames` rows."""
    t = spec.frames
    if t >= frames:
        start = (t - frames) // 2
        data = spec.data[start : start + frames]
    else:
        pad = np.full((frames - t, spec.mel_bins), np.log(LOG_FLOOR), dtype=spec.data.dtype)
        data = np.concatenate([spec.data, pad], axis=0)
    return replace(spec, data=data.copy())


def normalize(spec: MelSpectrogram, mean: float, std: float) -> MelSpectrogram:
    if std <= 0:
        raise ValueError("std must be positive")
    if spec.normalized:
        raise NormalizationStateError("spectrogram is already normalized")
    return MelSpectrogram(
        data=(spec.data - mean) / std,
        normalized=True,
        norm_mean=float(mean),
        norm_std=float(std),
    )


def denormalize(spec: MelSpectrogram) -> MelSpectrogram:
    if not spec.normalized:
        raise NormalizationStateError("spectrogram is not normalized")
    return MelSpectrogram(data=spec.data * spec.norm_std + spec.norm_mean)


# ----------------------------------------------------------------------
# synthetic labeled corpus (desk-scale stand-in for a real audio dataset)

SYNTH_CLASSES = ("tone", "chirp", "noise_burst", "am_tone")


@dataclass
class CorpusItem:
    clip_id: str
    wav_path: Path
    label: int
    class_name: str


def synth_clip(class_name: str, rng: np.random.Generator, n_samples: int, sample_rate_hz: int) -> WaveClip:
    """One clip of the named class. Classes occupy distinct spectro-temporal
    signatures so a linear probe on decent features can separate them:

    tone        steady sinusoid, 500-2000 Hz
    chirp       repeating fast upward sweep across 500-6000 Hz
    noise_burst broadband noise gated on/off at 6-14 Hz
    am_tone     3000-6000 Hz carrier, amplitude-modulated at 15-35 Hz
    """
    t = np.arange(n_samples) / sample_rate_hz
    amp = rng.uniform(0.4, 0.8)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if class_name == "tone":
        f = rng.uniform(500.0, 2000.0)
        s = amp * np.sin(2.0 * np.pi * f * t + phase)
    elif class_name == "chirp":
        period = rng.uniform(0.15, 0.35)
        frac = (t / period + rng.uniform(0.0, 1.0)) % 1.0
        inst_freq = 500.0 + (6000.0 - 500.0) * frac
        s = amp * np.sin(2.0 * np.pi * np.cumsum(inst_freq) / sample_rate_hz + phase)
    elif class_name == "noise_burst":
        gate_hz = rng.uniform(6.0, 14.0)
        env = ((t * gate_hz + rng.uniform(0.0, 1.0)) % 1.0 < 0.5).astype(np.float64)
        s = rng.uniform(-1.0, 1.0, size=n_samples) * amp * env
    elif class_name == "am_tone":
        carrier = rng.uniform(3000.0, 6000.0)
        mod = rng.uniform(15.0, 35.0)
        envelope = 0.5 + 0.5 * np.sin(2.0 * np.pi * mod * t + rng.uniform(0.0, 2.0 * np.pi))
        s = amp * np.sin(2.0 * np.pi * carrier * t + phase) * envelope
    else:
        raise ValueError(f"unknown synth class {class_name!r}")
    return WaveClip(samples=s, sample_rate_hz=sample_rate_hz)


def synth_items(seed: int, n_clips: int, classes=SYNTH_CLASSES, duration_s: float = 1.0, sample_rate_hz: int = 16000):
    """In-memory corpus: list of (clip_id, WaveClip, label, class_name).

    Per-clip RNG is derived from (seed, clip index), so generation is
    reproducible regardless of call order or worker count.
    """
    classes = tuple(classes)
    if n_clips < 2 * len(classes):
        raise ValueError(f"need at least {2 * len(classes)} clips for {len(classes)} classes")
    if n_clips % len(classes) != 0:
        raise ValueError(f"n_clips={n_clips} must be divisible by {len(classes)} for class balance")
    n_samples = int(round(duration_s * sample_rate_hz))
    out = []
    for i in range(n_clips):
        label = i % len(classes)
        name = classes[label]
        clip = synth_clip(name, make_rng(seed, "clip", i), n_samples, sample_rate_hz)
        out.append((f"clip_{i:04d}", clip, label, name))
    return out


def make_synth_corpus(out_dir, seed: int, n_clips: int, classes=SYNTH_CLASSES, duration_s: float = 1.0, sample_rate_hz: int = 16000) -> Path:
    """Write WAVs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip_id, clip, label, name in synth_items(seed, n_clips, classes, duration_s, sample_rate_hz):
        fname = f"{clip_id}.wav"
        write_wav(out_dir / fname, clip.samples, clip.sample_rate_hz, encoding="pcm16")
        lines.append(f"{fname}\t{label}\t{name}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest_path) -> list[CorpusItem]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    items = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest_path}:{lineno}: expected 'path<TAB>label<TAB>class'")
        fname, label, name = parts
        items.append(CorpusItem(clip_id=Path(fname).stem, wav_path=root / fname, label=int(label), class_name=name))
    if not items:
        raise ValueError(f"{manifest_path}: empty manifest")
    return items


def model_input(clip: WaveClip, n_mels: int, frames: int) -> MelSpectrogram:
    """Frontend pipeline up to (but not including) normalization."""
    clip = resample(clip, 16000)
    return crop_frames(log_mel(clip, n_mels=n_mels), frames)


def corpus_stats(specs: list[MelSpectrogram]) -> tuple[float, float]:
    """Scalar mean/std over every element of the given (unnormalized) spectrograms."""
    stacked = np.concatenate([s.data.reshape(-1) for s in specs])
    std = float(stacked.std())
    return float(stacked.mean()), (std if std > 0 else 1.0)
