"""Audio ingestion, fixed-rate framing, and the synthetic "beep language"
corpus used for desk-scale training.

Each vocabulary symbol is rendered as a pure sine tone at its own frequency;
silence gaps separate tones, so the ground-truth speech mask is exact at the
frame grid (tone and gap durations are quantized to whole frames).
"""

from __future__ import annotations

import json
import string
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    InvalidSpecError,
    UnsupportedFormatError,
)

SAMPLE_RATE = 16000
FRAME_DURATION_S = 0.02  # 320 samples at 16 kHz
TONE_AMPLITUDE = 0.5
BASE_FREQ_HZ = 400.0
FREQ_SPACING_HZ = 300.0


@dataclass(frozen=True)
class SampleBuffer:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples",
                           np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise InvalidSpecError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidSpecError("samples must be finite")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray  # (T, samples_per_frame) or (T, feat_dim)
    frame_duration_s: float = FRAME_DURATION_S
    origin_offset_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "frames",
                           np.asarray(self.frames, dtype=np.float64))
        if self.frame_duration_s <= 0:
            raise InvalidSpecError("frame duration must be positive")

    def __len__(self):
        return self.frames.shape[0]

    def frame_time_s(self, t: int) -> float:
        return self.origin_offset_s + t * self.frame_duration_s


@dataclass(frozen=True)
class Utterance:
    audio: SampleBuffer
    transcript: tuple[str, ...]
    speech_mask: np.ndarray  # bool, one entry per canonical frame
    id: str

    def __post_init__(self):
        object.__setattr__(self, "speech_mask",
                           np.asarray(self.speech_mask, dtype=bool))
        n_frames = int(self.audio.duration_s / FRAME_DURATION_S + 0.5)
        if len(self.speech_mask) != n_frames:
            raise DimensionError("speech_mask length does not match frames",
                                 len(self.speech_mask), n_frames)


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 5
    utterance_count: int = 200
    symbols_per_utterance: tuple[int, int] = (2, 4)
    tone_duration_s: tuple[float, float] = (0.10, 0.24)
    gap_duration_s: tuple[float, float] = (0.12, 0.40)
    noise_amplitude: float = 0.005
    seed: int = 7

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidSpecError("vocab_size must be >= 2")
        if self.utterance_count < 1:
            raise InvalidSpecError("utterance_count must be >= 1")
        for name in ("symbols_per_utterance", "tone_duration_s", "gap_duration_s"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise InvalidSpecError(f"{name} range invalid: [{lo}, {hi}]")
        if self.noise_amplitude < 0:
            raise InvalidSpecError("noise_amplitude must be >= 0")


def default_vocab(vocab_size: int) -> list[str]:
    letters = string.ascii_lowercase
    if vocab_size <= len(letters):
        return list(letters[:vocab_size])
    return [f"t{k}" for k in range(vocab_size)]


def symbol_frequency_hz(index: int) -> float:
    return BASE_FREQ_HZ + FREQ_SPACING_HZ * index


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> SampleBuffer:
    """Read a RIFF PCM 16-bit mono file; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return SampleBuffer(samples=samples, sample_rate_hz=rate)


def write_wav(path, buf: SampleBuffer) -> None:
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buf.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# framing


def frame_stream(buf: SampleBuffer,
                 frame_duration_s: float = FRAME_DURATION_S) -> FrameSequence:
    """Chop a buffer into non-overlapping fixed-duration windows; a trailing
    partial window is dropped."""
    if frame_duration_s <= 0:
        raise InvalidSpecError("frame duration must be positive")
    window = int(round(frame_duration_s * buf.sample_rate_hz))
    n = len(buf.samples) // window if window > 0 else 0
    frames = buf.samples[:n * window].reshape(n, window)
    return FrameSequence(frames=frames, frame_duration_s=frame_duration_s)


# ---------------------------------------------------------------------------
# synthetic corpus


def _frames_from_range(rng, lo_s: float, hi_s: float) -> int:
    dur = rng.uniform(lo_s, hi_s)
    return max(1, int(round(dur / FRAME_DURATION_S)))


def gen_synthetic_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Deterministic alternation of silence gaps and pure tones; one tone per
    emitted symbol, white noise over the whole signal."""
    rng = np.random.default_rng(spec.seed)
    vocab = default_vocab(spec.vocab_size)
    window = int(round(FRAME_DURATION_S * SAMPLE_RATE))
    utts = []
    for u in range(spec.utterance_count):
        n_sym = int(rng.integers(spec.symbols_per_utterance[0],
                                 spec.symbols_per_utterance[1] + 1))
        pieces: list[np.ndarray] = []
        mask: list[np.ndarray] = []
        transcript: list[str] = []
        for k in range(n_sym + 1):
            gap_frames = _frames_from_range(rng, *spec.gap_duration_s)
            pieces.append(np.zeros(gap_frames * window))
            mask.append(np.zeros(gap_frames, dtype=bool))
            if k == n_sym:
                break
            sym = int(rng.integers(0, spec.vocab_size))
            transcript.append(vocab[sym])
            tone_frames = _frames_from_range(rng, *spec.tone_duration_s)
            n_samp = tone_frames * window
            t = np.arange(n_samp) / SAMPLE_RATE
            phase = rng.uniform(0.0, 2.0 * np.pi)
            pieces.append(TONE_AMPLITUDE
                          * np.sin(2.0 * np.pi * symbol_frequency_hz(sym) * t + phase))
            mask.append(np.ones(tone_frames, dtype=bool))
        samples = np.concatenate(pieces)
        if spec.noise_amplitude > 0:
            samples = samples + rng.normal(0.0, spec.noise_amplitude, len(samples))
        samples = np.clip(samples, -1.0, 1.0)
        utts.append(Utterance(
            audio=SampleBuffer(samples=samples),
            transcript=tuple(transcript),
            speech_mask=np.concatenate(mask),
            id=f"utt{u:04d}",
        ))
    return utts


# ---------------------------------------------------------------------------
# on-disk corpus: JSON-lines manifest + WAVs + binary masks

_MASK_MAGIC = b"VMSK"


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack("<I", len(mask)))
        fh.write(mask.astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MASK_MAGIC:
        raise FormatError(f"{path}: bad mask magic {blob[:4]!r}")
    (n,) = struct.unpack_from("<I", blob, 4)
    body = blob[8:]
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} mask bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).astype(bool)


def write_corpus(out_dir, utts: list[Utterance], vocab: list[str]) -> Path:
    """Write WAVs, masks, and a JSON-lines manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for utt in utts:
            wav_path = out / f"{utt.id}.wav"
            mask_path = out / f"{utt.id}.mask"
            write_wav(wav_path, utt.audio)
            write_mask(mask_path, utt.speech_mask)
            fh.write(json.dumps({
                "id": utt.id,
                "wav_path": wav_path.name,
                "transcript": " ".join(utt.transcript),
                "mask_path": mask_path.name,
            }) + "\n")
    (out / "vocab.json").write_text(json.dumps({"vocab": vocab}))
    return manifest


def read_corpus(manifest_path) -> tuple[list[Utterance], list[str]]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    utts = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{manifest_path}: bad manifest line: {exc}")
            buf = read_wav(base / rec["wav_path"])
            mask = read_mask(base / rec["mask_path"])
            transcript = tuple(rec["transcript"].split())
            utts.append(Utterance(audio=buf, transcript=transcript,
                                  speech_mask=mask, id=rec["id"]))
    vocab_file = base / "vocab.json"
    if vocab_file.exists():
        vocab = json.loads(vocab_file.read_text())["vocab"]
    else:
        vocab = sorted({tok for u in utts for tok in u.transcript})
    return utts, vocab
