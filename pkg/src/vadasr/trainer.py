"""Two-stage training recipe and evaluation loops.

Stage 1 trains the ASR branch alone (CTC only, vad weight 0). Stage 2
finetunes the full multi-task objective with random-size chunk-hopping.
A VAD-only baseline trains just the encoder + VAD head for the MTL-vs-STL
comparison. Learning rates follow a tri-stage schedule (linear warmup,
hold, linear decay); constants are rescaled for desk-scale runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .audio import FRAME_DURATION_S, SAMPLE_RATE, Utterance, frame_stream
from .chunking import plan_chunks, sample_chunk_len
from .decode import BeamConfig, beam_search, greedy_decode
from .errors import DataError, InfeasibleTargetError, NumericError
from .losses import bce_loss, ctc_loss, mtl_loss
from .metrics import error_report_from_counts, edit_counts, segments_to_mask, vad_metrics
from .model import (ModelDims, ModelParams, encode_features, forward,
                    vad_forward, vad_score_frames)
from .streamer import ModelDecoder, ModelScorer, Streamer, StreamerConfig


@dataclass
class TrainConfig:
    stage: str = "asr_only"            # asr_only | mtl | vad_only
    learning_rate: float = 5e-3
    epochs: int = 24
    batch_size: int = 4
    chunk_min_s: float = 0.5
    chunk_max_s: float = 3.0
    splice_s: float = 0.5
    vad_weight: float = 1.0
    seed: int = 0
    schedule_fractions: tuple[float, float, float] = (0.1, 0.4, 0.5)
    grad_clip: float = 5.0
    use_chunking: bool | None = None   # default: only in the mtl stage

    def __post_init__(self):
        if self.stage not in ("asr_only", "mtl", "vad_only"):
            raise DataError(f"unknown training stage {self.stage!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise DataError("learning_rate, epochs, batch_size must be positive")
        if self.use_chunking is None:
            self.use_chunking = self.stage == "mtl"


@dataclass
class TrainReport:
    ctc_curve: list[float] = field(default_factory=list)
    ce_curve: list[float] = field(default_factory=list)
    total_curve: list[float] = field(default_factory=list)
    final_dev_cer: Optional[float] = None
    final_dev_vad: Optional[dict] = None
    wall_clock_s: float = 0.0
    skipped_infeasible: int = 0
    param_count: int = 0
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "ctc_curve": self.ctc_curve, "ce_curve": self.ce_curve,
            "total_curve": self.total_curve,
            "final_dev_cer": self.final_dev_cer,
            "final_dev_vad": self.final_dev_vad,
            "wall_clock_s": self.wall_clock_s,
            "skipped_infeasible": self.skipped_infeasible,
            "param_count": self.param_count,
            **self.extras,
        }


# ---------------------------------------------------------------------------
# optimizer


def tri_stage_lr(step: int, total_steps: int, peak_lr: float,
                 fractions: tuple[float, float, float] = (0.1, 0.4, 0.5)) -> float:
    """Linear warmup, constant hold, linear decay; lr(0) = 0."""
    warm = max(1, int(total_steps * fractions[0]))
    hold = int(total_steps * fractions[1])
    if step < warm:
        return peak_lr * step / warm
    if step < warm + hold:
        return peak_lr
    decay_steps = max(1, total_steps - warm - hold)
    frac = min(1.0, (step - warm - hold) / decay_steps)
    return peak_lr * (1.0 - frac)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ad.Tensor],
             grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient for {name!r}: "
                    f"|g|max={np.abs(g[np.isfinite(g)]).max() if np.any(np.isfinite(g)) else 'n/a'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


# ---------------------------------------------------------------------------
# shared loop


def _utterance_loss(model: ModelParams, utt: Utterance, vad_weight: float,
                    layout) -> tuple[ad.Tensor, float, float]:
    """Returns (loss node, ctc value, ce value) for one utterance."""
    frames = frame_stream(utt.audio)
    art = forward(frames, model, layout)
    ctc = ctc_loss(art.log_posteriors, utt.transcript)
    bce = bce_loss(art.speech_probs, utt.speech_mask[:len(frames)])
    joint = mtl_loss(ctc, bce, vad_weight)
    node = ctc.node if vad_weight == 0.0 else joint.node
    return node, ctc.loss, bce.loss


def _vad_only_loss(model: ModelParams, utt: Utterance) -> tuple[ad.Tensor, float]:
    frames = frame_stream(utt.audio)
    z = encode_features(frames, model)
    _, probs = vad_forward(z, model)
    bce = bce_loss(probs, utt.speech_mask[:len(frames)])
    return bce.node, bce.loss


def _run_training(model: ModelParams, corpus: Sequence[Utterance],
                  config: TrainConfig,
                  trainable: Sequence[str]) -> TrainReport:
    report = TrainReport()
    report.param_count = sum(model.params[n].size for n in trainable)
    rng = np.random.default_rng(config.seed)
    opt = Adam()
    n = len(corpus)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    splice_frames = int(round(config.splice_s / FRAME_DURATION_S))
    step = 0
    t0 = time.time()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        ep_ctc, ep_ce, ep_total, ep_count = 0.0, 0.0, 0.0, 0
        for bstart in range(0, n, config.batch_size):
            batch = order[bstart:bstart + config.batch_size]
            body_frames = (sample_chunk_len(rng, config.chunk_min_s,
                                            config.chunk_max_s)
                           if config.use_chunking else None)
            grads: dict[str, np.ndarray] = {}
            for ui in batch:
                utt = corpus[int(ui)]
                n_frames = len(frame_stream(utt.audio))
                layout = (plan_chunks(n_frames, body_frames, splice_frames,
                                      splice_frames)
                          if body_frames is not None else None)
                with ad.Tape() as tape:
                    try:
                        if config.stage == "vad_only":
                            node, ce_val = _vad_only_loss(model, utt)
                            ctc_val = 0.0
                        else:
                            node, ctc_val, ce_val = _utterance_loss(
                                model, utt, config.vad_weight, layout)
                    except InfeasibleTargetError:
                        report.skipped_infeasible += 1
                        continue
                    gmap = ad.backward(tape, node)
                for name in trainable:
                    g = gmap.get(model.params[name])
                    if g is None:
                        continue
                    if name in grads:
                        grads[name] += g
                    else:
                        grads[name] = g.copy()
                ep_ctc += ctc_val
                ep_ce += ce_val
                ep_total += ctc_val + config.vad_weight * ce_val
                ep_count += 1
            if grads:
                for g in grads.values():
                    g /= max(1, len(batch))
                clip_gradients(grads, config.grad_clip)
                lr = tri_stage_lr(step, total_steps, config.learning_rate,
                                  config.schedule_fractions)
                opt.step(model.params, grads, lr)
            step += 1
        denom = max(1, ep_count)
        report.ctc_curve.append(ep_ctc / denom)
        report.ce_curve.append(ep_ce / denom)
        report.total_curve.append(ep_total / denom)
    report.wall_clock_s = time.time() - t0
    return report


def _attach_dev_metrics(model: ModelParams, report: TrainReport,
                        dev_corpus: Optional[Sequence[Utterance]]) -> None:
    if not dev_corpus:
        return
    ev = evaluate(model, dev_corpus, mode="segmented")
    report.final_dev_cer = ev["cer"]
    report.final_dev_vad = {k: ev[k] for k in ("deter", "fa", "miss")}


# ---------------------------------------------------------------------------
# stages


def train_stage1_asr(model: ModelParams, corpus: Sequence[Utterance],
                     config: TrainConfig,
                     dev_corpus: Optional[Sequence[Utterance]] = None
                     ) -> tuple[ModelParams, TrainReport]:
    """Single-task ASR: CTC only; cross-task attention stays in the graph
    with whatever the untrained VAD branch produces."""
    if config.stage != "asr_only":
        raise DataError("stage must be asr_only")
    config.vad_weight = 0.0
    model = model.copy()
    report = _run_training(model, corpus, config,
                           trainable=list(model.params))
    _attach_dev_metrics(model, report, dev_corpus)
    return model, report


def train_stage2_mtl(model: ModelParams, corpus: Sequence[Utterance],
                     config: TrainConfig,
                     dev_corpus: Optional[Sequence[Utterance]] = None
                     ) -> tuple[ModelParams, TrainReport]:
    """Joint CTC + VAD finetuning with freshly sampled chunk layouts."""
    if config.stage != "mtl":
        raise DataError("stage must be mtl")
    model = model.copy()
    report = _run_training(model, corpus, config,
                           trainable=list(model.params))
    _attach_dev_metrics(model, report, dev_corpus)
    return model, report


def train_vad_stl_baseline(corpus: Sequence[Utterance], config: TrainConfig,
                           vocab: list[str],
                           dims: Optional[ModelDims] = None,
                           dev_corpus: Optional[Sequence[Utterance]] = None
                           ) -> tuple[ModelParams, TrainReport]:
    """Single-task VAD on the same CNN architecture (encoder + VAD head)."""
    if config.stage != "vad_only":
        raise DataError("stage must be vad_only")
    model = ModelParams.init(vocab, dims, seed=config.seed)
    report = _run_training(model, corpus, config,
                           trainable=list(ModelParams.VAD_BRANCH))
    if dev_corpus:
        counts = _vad_counts(model, dev_corpus)
        rep = _vad_report_from_counts(*counts)
        report.final_dev_vad = rep
    return model, report


# ---------------------------------------------------------------------------
# evaluation


def _vad_counts(model: ModelParams, corpus: Sequence[Utterance],
                threshold: float = 0.5) -> tuple[int, int, int]:
    n_fa = n_miss = n_total = 0
    for utt in corpus:
        frames = frame_stream(utt.audio)
        probs = vad_score_frames(frames, model).data
        hyp = probs >= threshold
        ref = utt.speech_mask[:len(frames)]
        n_fa += int(np.sum(hyp & ~ref))
        n_miss += int(np.sum(~hyp & ref))
        n_total += len(ref)
    return n_fa, n_miss, n_total


def _vad_report_from_counts(n_fa: int, n_miss: int, n_total: int) -> dict:
    return {"deter": (n_fa + n_miss) / n_total, "fa": n_fa / n_total,
            "miss": n_miss / n_total}


def build_dev_stream(corpus: Sequence[Utterance], seed: int = 1234,
                     gap_range_s: tuple[float, float] = (0.5, 2.0),
                     noise_amplitude: float = 0.005
                     ) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Concatenate utterances with silence gaps into one long stream.

    Returns (samples, frame speech mask, reference token sequence).
    """
    rng = np.random.default_rng(seed)
    window = int(round(FRAME_DURATION_S * SAMPLE_RATE))
    pieces, masks, ref = [], [], []

    def gap():
        g_frames = max(1, int(round(rng.uniform(*gap_range_s) / FRAME_DURATION_S)))
        pieces.append(rng.normal(0.0, noise_amplitude, g_frames * window)
                      if noise_amplitude > 0 else np.zeros(g_frames * window))
        masks.append(np.zeros(g_frames, dtype=bool))

    gap()
    for utt in corpus:
        n_frames = len(utt.speech_mask)
        pieces.append(utt.audio.samples[:n_frames * window])
        masks.append(utt.speech_mask)
        ref.extend(utt.transcript)
        gap()
    return np.concatenate(pieces), np.concatenate(masks), tuple(ref)


def evaluate(model: ModelParams, corpus: Sequence[Utterance],
             beam: Optional[BeamConfig] = None, mode: str = "segmented",
             l_asr_s: float = 3.0, stream_seed: int = 1234,
             streamer_config: Optional[StreamerConfig] = None) -> dict:
    """Score a trained model.

    ``segmented``: decode each utterance whole (oracle segmentation).
    ``streaming``: run the online pipeline over one concatenated stream with
    ASR chunk capacity ``l_asr_s`` and score events against the
    concatenated reference.
    """
    if not corpus:
        raise DataError("cannot evaluate on an empty corpus")
    if mode == "segmented":
        n_sub = n_del = n_ins = ref_len = 0
        for utt in corpus:
            frames = frame_stream(utt.audio)
            art = forward(frames, model)
            hyp = (greedy_decode(art.log_posteriors) if beam is None
                   else beam_search(art.log_posteriors, beam)[0].tokens)
            s, d, i = edit_counts(utt.transcript, hyp)
            n_sub += s
            n_del += d
            n_ins += i
            ref_len += len(utt.transcript)
        rep = error_report_from_counts(n_sub, n_del, n_ins, ref_len)
        vad = _vad_report_from_counts(*_vad_counts(model, corpus))
        return {**rep.as_dict(), **vad, "n_utts": len(corpus)}

    if mode != "streaming":
        raise DataError(f"unknown evaluation mode {mode!r}")
    samples, ref_mask, ref_tokens = build_dev_stream(corpus, seed=stream_seed)
    window = int(round(FRAME_DURATION_S * SAMPLE_RATE))
    frames = samples[:len(samples) // window * window].reshape(-1, window)
    cfg = streamer_config or StreamerConfig(
        max_chunk_frames=max(int(round(l_asr_s / FRAME_DURATION_S)), 5))
    streamer = Streamer(cfg, ModelScorer(model), ModelDecoder(model, beam))
    for fr in frames:
        streamer.push_frame(fr)
    streamer.finalize()
    hyp_tokens: list[str] = []
    for ev in streamer.events:
        hyp_tokens.extend(ev.text)
    s, d, i = edit_counts(ref_tokens, hyp_tokens)
    rep = error_report_from_counts(s, d, i, len(ref_tokens))
    ev_mask = segments_to_mask(streamer.events, len(frames), FRAME_DURATION_S)
    vad = vad_metrics(ref_mask[:len(frames)], ev_mask)
    return {**rep.as_dict(), "deter": vad.deter, "fa": vad.fa,
            "miss": vad.miss, "n_utts": len(corpus),
            "n_events": len(streamer.events),
            "events": streamer.events}
