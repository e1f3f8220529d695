"""Online VAD&ASR state machine.

Per pushed frame: score it, update the frames-to-process counter ``c`` and
the trailing-silence counter ``b``, raise the speaking flag once
``c - b >= min_speech``, and flush the pending speech span either when it
reaches the ASR chunk capacity (forced-length) or when ``min_silence``
consecutive sub-threshold frames arrive while speaking (end-of-utterance).
The flush decision uses the speaking flag *before* the long-silence
falsification, otherwise end-of-utterance flushes would be unreachable.

Additional reset rule: while not speaking, a window that is pure silence
(``b == c``) or whose silence run reached ``min_silence`` is discarded. This
makes every kept window start at a supra-threshold frame and bounds any
flushed span by capacity + min_silence frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .audio import FRAME_DURATION_S, FrameSequence
from .decode import BeamConfig, beam_search, greedy_decode
from .errors import DataError, InvalidSpecError
from .model import ModelParams, PosteriorGrid, forward, vad_score_frames
from . import autodiff as ad

FORCED = "forced-length"
END_OF_UTT = "end-of-utterance"
FINALIZE = "finalize"


@dataclass(frozen=True)
class StreamerConfig:
    vad_threshold: float = 0.45
    min_speech_frames: int = 5      # C: 0.1 s at 20 ms frames
    min_silence_frames: int = 30    # B: 0.6 s
    max_chunk_frames: int = 150     # l: ASR queue capacity, 3.0 s
    splice_frames: int = 32         # 0.64 s context on each side
    frame_duration_s: float = FRAME_DURATION_S

    def __post_init__(self):
        if not (0.0 <= self.vad_threshold <= 1.0):
            raise InvalidSpecError("vad_threshold must be in [0, 1]")
        if self.min_speech_frames < 1 or self.min_silence_frames < 1:
            raise InvalidSpecError("min speech/silence must be >= 1 frame")
        if self.max_chunk_frames < self.min_speech_frames:
            raise InvalidSpecError("chunk capacity must be >= min speech")
        if self.splice_frames < 0:
            raise InvalidSpecError("splice_frames must be >= 0")


@dataclass(frozen=True)
class SegmentEvent:
    start_s: float
    end_s: float
    text: tuple[str, ...]
    cause: str

    def as_dict(self):
        return {"start_s": self.start_s, "end_s": self.end_s,
                "text": " ".join(self.text), "cause": self.cause}


@dataclass(frozen=True)
class BoundarySpan:
    start_frame: int
    end_frame: int
    cause: str


# ---------------------------------------------------------------------------
# scorers and decoders


class ExternalScores:
    """Per-frame VAD scores computed elsewhere (e.g. a real acoustic model)."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    def __call__(self, frame, index: int) -> float:
        if index >= len(self.scores):
            raise DataError(f"no external score for frame {index}")
        return float(self.scores[index])


class ModelScorer:
    """Cheap VAD path of the model, evaluated frame-by-frame.

    Keeps only the last few frames: the encoder is frame-local and the VAD
    conv is causal, so the newest probability needs just its receptive field.
    """

    def __init__(self, model: ModelParams):
        self.model = model
        self._buf: list[np.ndarray] = []

    def __call__(self, frame, index: int) -> float:
        self._buf.append(np.asarray(frame, dtype=np.float64))
        width = self.model.dims.vad_kernel_width
        self._buf = self._buf[-width:]
        probs = vad_score_frames(FrameSequence(np.stack(self._buf)), self.model)
        return float(probs.data[-1])


class ModelDecoder:
    """Decode a flushed window: full forward over span + splice context,
    then beam search (or greedy) over the span's posterior rows only."""

    def __init__(self, model: ModelParams, beam: Optional[BeamConfig] = None):
        self.model = model
        self.beam = beam

    def __call__(self, window_frames: np.ndarray, span_start: int,
                 span_len: int) -> tuple[str, ...]:
        art = forward(FrameSequence(window_frames), self.model)
        rows = art.log_posteriors.array[span_start:span_start + span_len]
        sub = PosteriorGrid(log_probs=ad.Tensor(rows),
                            vocab=self.model.vocab,
                            blank_index=len(self.model.vocab))
        if self.beam is None:
            return greedy_decode(sub)
        hyps = beam_search(sub, self.beam)
        return hyps[0].tokens if hyps else ()


# ---------------------------------------------------------------------------
# the state machine


class Streamer:
    """Single-writer online VAD&ASR pipeline over pushed frames."""

    def __init__(self, config: StreamerConfig,
                 scorer: Callable[[np.ndarray, int], float],
                 decoder: Optional[Callable] = None):
        self.config = config
        self.scorer = scorer
        self.decoder = decoder
        self._t = 0                 # absolute index of the next frame
        self._c = 0                 # frames accumulated in the window
        self._b = 0                 # trailing sub-threshold run
        self._speaking = False
        self._window_start = 0      # absolute index of the window's frame 0
        self._frames: list[np.ndarray] = []
        self._frame_base = 0        # absolute index of _frames[0]
        self.events: list[SegmentEvent] = []
        self.boundaries: list[BoundarySpan] = []

    # -- frame bookkeeping

    def _store(self, frame) -> None:
        self._frames.append(np.asarray(frame, dtype=np.float64))

    def _prune(self) -> None:
        keep_from = max(0, self._window_start - self.config.splice_frames)
        drop = keep_from - self._frame_base
        if drop > 0:
            del self._frames[:drop]
            self._frame_base = keep_from

    def _emit(self, start: int, end: int, cause: str) -> SegmentEvent:
        cfg = self.config
        text: tuple[str, ...] = ()
        if self.decoder is not None:
            ws = max(self._frame_base, start - cfg.splice_frames)
            we = min(self._t, end + cfg.splice_frames)
            window = np.stack(self._frames[ws - self._frame_base:
                                           we - self._frame_base])
            text = self.decoder(window, start - ws, end - start)
        ev = SegmentEvent(start_s=start * cfg.frame_duration_s,
                          end_s=end * cfg.frame_duration_s,
                          text=text, cause=cause)
        self.events.append(ev)
        self.boundaries.append(BoundarySpan(start, end, cause))
        return ev

    # -- Algorithm-1 transitions

    def push_frame(self, frame) -> Optional[SegmentEvent]:
        cfg = self.config
        idx = self._t
        self._t += 1
        self._store(frame)
        try:
            theta = float(self.scorer(frame, idx))
        except Exception as exc:
            raise DataError(f"VAD scorer failed at frame {idx}: {exc}") from exc

        self._c += 1
        if theta >= cfg.vad_threshold:
            self._b = 0
        else:
            self._b += 1
        speech_len = self._c - self._b
        if speech_len >= cfg.min_speech_frames:
            self._speaking = True

        forced = speech_len >= cfg.max_chunk_frames
        end_of_utt = self._b >= cfg.min_silence_frames and self._speaking

        event = None
        if forced or end_of_utt:
            if speech_len >= cfg.min_speech_frames:
                event = self._emit(self._window_start,
                                   self._window_start + speech_len,
                                   FORCED if forced else END_OF_UTT)
            # forced flushes continue the same utterance; end-of-utterance
            # flushes close it
            self._speaking = forced
            self._reset_window()
        elif self._b == self._c or self._b >= cfg.min_silence_frames:
            # window is pure silence (or a sub-minimum blip followed by a
            # long silence) while not speaking: nothing worth keeping
            self._speaking = False
            self._reset_window()
        return event

    def _reset_window(self) -> None:
        self._c = 0
        self._b = 0
        self._window_start = self._t
        self._prune()

    def finalize(self) -> Optional[SegmentEvent]:
        """Flush a trailing utterance once the stream has ended."""
        cfg = self.config
        speech_len = self._c - self._b
        event = None
        if self._speaking and speech_len >= cfg.min_speech_frames:
            event = self._emit(self._window_start,
                               self._window_start + speech_len, FINALIZE)
        self._speaking = False
        self._reset_window()
        return event


def run_offline_reference(scores: Sequence[float],
                          config: StreamerConfig) -> list[BoundarySpan]:
    """Whole-sequence transliteration of the same transition rules; segment
    boundaries only, no decoding. Testing oracle for ``push_frame``."""
    c = b = 0
    speaking = False
    window_start = 0
    out: list[BoundarySpan] = []
    for t, theta in enumerate(scores):
        c += 1
        b = 0 if theta >= config.vad_threshold else b + 1
        if c - b >= config.min_speech_frames:
            speaking = True
        forced = c - b >= config.max_chunk_frames
        end_of_utt = b >= config.min_silence_frames and speaking
        if forced or end_of_utt:
            if c - b >= config.min_speech_frames:
                out.append(BoundarySpan(window_start, window_start + (c - b),
                                        FORCED if forced else END_OF_UTT))
            speaking = forced
            c = b = 0
            window_start = t + 1
        elif b == c or b >= config.min_silence_frames:
            speaking = False
            c = b = 0
            window_start = t + 1
    if speaking and c - b >= config.min_speech_frames:
        out.append(BoundarySpan(window_start, window_start + (c - b), FINALIZE))
    return out


def validate_events(events: Sequence[SegmentEvent],
                    config: StreamerConfig) -> None:
    """Raise DataError if the event stream violates the streamer contract."""
    prev_end = -1.0
    dur = config.frame_duration_s
    max_span = (config.max_chunk_frames + config.min_silence_frames) * dur
    for i, ev in enumerate(events):
        if ev.end_s <= ev.start_s:
            raise DataError(f"event {i}: empty or negative span")
        if ev.start_s < prev_end - 1e-9:
            raise DataError(f"event {i}: overlaps previous event")
        span = ev.end_s - ev.start_s
        if span < config.min_speech_frames * dur - 1e-9:
            raise DataError(f"event {i}: span below minimum speech length")
        if span > max_span + 1e-9:
            raise DataError(f"event {i}: span exceeds capacity bound")
        if ev.cause not in (FORCED, END_OF_UTT, FINALIZE):
            raise DataError(f"event {i}: unknown cause {ev.cause!r}")
        prev_end = ev.end_s


# ---------------------------------------------------------------------------
# event file format: JSON-lines


def write_events(path, events: Sequence[SegmentEvent]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev.as_dict()) + "\n")


def read_events(path) -> list[SegmentEvent]:
    events = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                events.append(SegmentEvent(
                    start_s=float(rec["start_s"]), end_s=float(rec["end_s"]),
                    text=tuple(rec["text"].split()), cause=rec["cause"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}: bad event line: {exc}") from exc
    return events
