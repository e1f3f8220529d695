"""Toy two-branch network: a convolutional feature encoder feeding a cheap
VAD head (grouped temporal conv + sigmoid FC) and a transformer context block
whose output queries the VAD features through cross-task attention before the
CTC prediction head.

The encoder's receptive field is exactly one 20 ms frame (kernel == stride in
both conv layers), so VAD scores are computable frame-by-frame online.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import FrameSequence
from .chunking import ChunkLayout, whole_utterance_layout
from .errors import DataError, DimensionError, LayoutError, UsageError

FRAME_SAMPLES = 320
CONV1_WIDTH = 16   # stride 16: 320 -> 20 positions per frame
CONV2_WIDTH = 20   # stride 20: 20 positions -> 1 latent per frame


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    conv1_channels: int = 16
    ffn_dim: int = 64
    vad_kernel_width: int = 5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise UsageError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}")


@dataclass(frozen=True)
class PosteriorGrid:
    """Per-frame log-probabilities over vocabulary plus trailing blank."""

    log_probs: ad.Tensor  # (T, |V|+1)
    vocab: list[str]
    blank_index: int

    def __post_init__(self):
        if self.blank_index != len(self.vocab):
            raise UsageError("blank must be the last grid column")
        if self.log_probs.shape[-1] != len(self.vocab) + 1:
            raise DimensionError("grid width != |V|+1",
                                 self.log_probs.shape, len(self.vocab) + 1)

    @property
    def array(self) -> np.ndarray:
        return self.log_probs.data

    def __len__(self):
        return self.log_probs.shape[0]


@dataclass
class ForwardArtifacts:
    Z: ad.Tensor                 # (T, d) encoder latents
    H_vad: ad.Tensor             # (T, d) VAD hidden features
    speech_probs: ad.Tensor      # (T,)
    C: ad.Tensor                 # (T, d) context vectors
    G: ad.Tensor                 # (T, d) fused vectors
    log_posteriors: PosteriorGrid


_POSENC_CACHE: dict[int, np.ndarray] = {}


def positional_encoding(T: int, d: int) -> np.ndarray:
    cached = _POSENC_CACHE.get(d)
    if cached is None or cached.shape[0] < T:
        n = max(T, 512)
        pos = np.arange(n)[:, None]
        i = np.arange(d // 2)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / d)
        enc = np.zeros((n, d))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        _POSENC_CACHE[d] = cached = enc
    return cached[:T]


class ModelParams:
    """Parameter store plus dims/vocab; mutation happens only in training."""

    def __init__(self, vocab: list[str], dims: ModelDims,
                 params: dict[str, ad.Tensor]):
        if dims.vocab_size != len(vocab):
            raise UsageError("dims.vocab_size != len(vocab)")
        self.vocab = list(vocab)
        self.dims = dims
        self.params = params
        self.attention_evals = 0  # instrumentation for the cheap-VAD check

    @classmethod
    def init(cls, vocab: list[str], dims: ModelDims | None = None,
             seed: int = 0) -> "ModelParams":
        dims = dims or ModelDims(vocab_size=len(vocab))
        rng = np.random.default_rng(seed)
        d, c1, f = dims.d_model, dims.conv1_channels, dims.ffn_dim
        K = dims.vocab_size + 1

        def w(name, shape, fan_in):
            return ad.Tensor(rng.normal(0.0, math.sqrt(1.0 / fan_in), shape),
                             name=name)

        def zeros(name, shape):
            return ad.Tensor(np.zeros(shape), name=name)

        def ones(name, shape):
            return ad.Tensor(np.ones(shape), name=name)

        p = {
            "enc1_k": w("enc1_k", (c1, 1, CONV1_WIDTH), CONV1_WIDTH),
            "enc1_b": zeros("enc1_b", (c1, 1)),
            "enc2_k": w("enc2_k", (d, c1, CONV2_WIDTH), c1 * CONV2_WIDTH),
            "enc2_b": zeros("enc2_b", (d, 1)),
            "enc_ln_g": ones("enc_ln_g", (d,)),
            "enc_ln_b": zeros("enc_ln_b", (d,)),
            "vad_k": w("vad_k", (d, 1, dims.vad_kernel_width),
                       dims.vad_kernel_width),
            "vad_b": zeros("vad_b", (d, 1)),
            "vad_fc_w": w("vad_fc_w", (d, 1), d),
            "vad_fc_b": zeros("vad_fc_b", (1,)),
            "ctx_wq": w("ctx_wq", (d, d), d),
            "ctx_wk": w("ctx_wk", (d, d), d),
            "ctx_wv": w("ctx_wv", (d, d), d),
            "ctx_wo": w("ctx_wo", (d, d), d),
            "ctx_ln1_g": ones("ctx_ln1_g", (d,)),
            "ctx_ln1_b": zeros("ctx_ln1_b", (d,)),
            "ffn_w1": w("ffn_w1", (d, f), d),
            "ffn_b1": zeros("ffn_b1", (f,)),
            "ffn_w2": w("ffn_w2", (f, d), f),
            "ffn_b2": zeros("ffn_b2", (d,)),
            "ctx_ln2_g": ones("ctx_ln2_g", (d,)),
            "ctx_ln2_b": zeros("ctx_ln2_b", (d,)),
            "xattn_wq": w("xattn_wq", (d, d), d),
            "xattn_wk": w("xattn_wk", (d, d), d),
            "xattn_wv": w("xattn_wv", (d, d), d),
            "xattn_wo": w("xattn_wo", (d, d), d),
            "asr_w": w("asr_w", (d, K), d),
            "asr_b": zeros("asr_b", (K,)),
        }
        return cls(vocab, dims, p)

    VAD_BRANCH = ("enc1_k", "enc1_b", "enc2_k", "enc2_b", "enc_ln_g",
                  "enc_ln_b", "vad_k", "vad_b", "vad_fc_w", "vad_fc_b")

    CROSS_TASK = ("xattn_wq", "xattn_wk", "xattn_wv", "xattn_wo")

    def vad_subset(self) -> dict[str, ad.Tensor]:
        return {k: self.params[k] for k in self.VAD_BRANCH}

    def copy(self) -> "ModelParams":
        cloned = {k: ad.Tensor(v.data.copy(), name=k)
                  for k, v in self.params.items()}
        return ModelParams(self.vocab, self.dims, cloned)

    def save(self, path) -> None:
        path = Path(path)
        ad.save_params(path, self.params)
        sidecar = {
            "vocab": self.vocab,
            "dims": {
                "vocab_size": self.dims.vocab_size,
                "d_model": self.dims.d_model,
                "n_heads": self.dims.n_heads,
                "conv1_channels": self.dims.conv1_channels,
                "ffn_dim": self.dims.ffn_dim,
                "vad_kernel_width": self.dims.vad_kernel_width,
            },
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        params = ad.load_params(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        dims = ModelDims(**sidecar["dims"])
        return cls(sidecar["vocab"], dims, params)


# ---------------------------------------------------------------------------
# forward ops


def encode_features(frames: FrameSequence, model: ModelParams) -> ad.Tensor:
    """Convolutional encoder: one latent vector per 320-sample frame."""
    T = len(frames)
    if T == 0:
        raise DataError("cannot encode an empty frame sequence")
    if frames.frames.shape[1] != FRAME_SAMPLES:
        raise DimensionError("expected 320-sample frames (16 kHz, 20 ms)",
                             frames.frames.shape)
    p = model.params
    x = ad.Tensor(frames.frames.reshape(1, T * FRAME_SAMPLES))
    h1 = ad.relu(ad.add(ad.conv1d(x, p["enc1_k"], stride=CONV1_WIDTH),
                        p["enc1_b"]))
    h2 = ad.relu(ad.add(ad.conv1d(h1, p["enc2_k"], stride=CONV2_WIDTH),
                        p["enc2_b"]))
    return ad.layer_norm(ad.transpose(h2), p["enc_ln_g"], p["enc_ln_b"])


def vad_forward(Z: ad.Tensor, model: ModelParams) -> tuple[ad.Tensor, ad.Tensor]:
    """Cheap VAD branch: causal depthwise temporal conv + per-frame sigmoid."""
    p = model.params
    d = model.dims.d_model
    width = model.dims.vad_kernel_width
    zt = ad.transpose(Z)  # (d, T)
    h = ad.relu(ad.add(
        ad.grouped_conv1d(zt, p["vad_k"], groups=d, padding=(width - 1, 0)),
        p["vad_b"]))
    h_vad = ad.transpose(h)  # (T, d)
    logits = ad.add(ad.matmul(h_vad, p["vad_fc_w"]), p["vad_fc_b"])
    probs = ad.reshape(ad.sigmoid(logits), (Z.shape[0],))
    return h_vad, probs


def vad_score_frames(frames: FrameSequence, model: ModelParams) -> ad.Tensor:
    """Low-cost VAD path: encoder + VAD head only, no attention, no ASR."""
    before = model.attention_evals
    Z = encode_features(frames, model)
    _, probs = vad_forward(Z, model)
    assert model.attention_evals == before  # structural guarantee
    return probs


def _mha(x_q: ad.Tensor, x_kv: ad.Tensor, wq, wk, wv, wo, n_heads: int,
         model: ModelParams) -> ad.Tensor:
    model.attention_evals += 1
    d = wq.shape[1]
    dh = d // n_heads
    q = ad.matmul(x_q, wq)
    k = ad.matmul(x_kv, wk)
    v = ad.matmul(x_kv, wv)
    heads = []
    for h in range(n_heads):
        qs = ad.slice_cols(q, h * dh, (h + 1) * dh)
        ks = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vs = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qs, ad.transpose(ks)), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        heads.append(ad.matmul(attn, vs))
    return ad.matmul(ad.concat(heads, axis=1), wo)


def context_forward(Z: ad.Tensor, model: ModelParams,
                    layout: ChunkLayout | None = None) -> ad.Tensor:
    """Transformer block over encoder latents; with a layout, attention for
    each chunk sees only left ctx + body + right ctx and only body positions
    produce output."""
    p = model.params
    T, d = Z.shape
    if layout is None:
        layout = whole_utterance_layout(T)
    if layout.total_T != T:
        raise LayoutError(f"layout covers {layout.total_T} frames, Z has {T}")
    zp = ad.add(Z, ad.Tensor(positional_encoding(T, d)))
    bodies = []
    for ch in layout.chunks:
        ws, we = ch.window
        xw = ad.slice_rows(zp, ws, we)
        a = _mha(xw, xw, p["ctx_wq"], p["ctx_wk"], p["ctx_wv"], p["ctx_wo"],
                 model.dims.n_heads, model)
        x1 = ad.layer_norm(ad.add(xw, a), p["ctx_ln1_g"], p["ctx_ln1_b"])
        ff = ad.add(ad.matmul(
            ad.relu(ad.add(ad.matmul(x1, p["ffn_w1"]), p["ffn_b1"])),
            p["ffn_w2"]), p["ffn_b2"])
        x2 = ad.layer_norm(ad.add(x1, ff), p["ctx_ln2_g"], p["ctx_ln2_b"])
        b0, b1 = ch.body
        bodies.append(ad.slice_rows(x2, b0 - ws, b1 - ws))
    return bodies[0] if len(bodies) == 1 else ad.concat(bodies, axis=0)


def cross_task_attend(C: ad.Tensor, H_vad: ad.Tensor,
                      model: ModelParams) -> ad.Tensor:
    """Residual cross-task attention: queries from the ASR context vectors,
    keys/values from the VAD hidden features."""
    if C.shape[0] != H_vad.shape[0]:
        raise DimensionError("C and H_vad disagree on frame count",
                             C.shape, H_vad.shape)
    p = model.params
    fused = _mha(C, H_vad, p["xattn_wq"], p["xattn_wk"], p["xattn_wv"],
                 p["xattn_wo"], model.dims.n_heads, model)
    return ad.add(C, fused)


def asr_head(G: ad.Tensor, model: ModelParams) -> PosteriorGrid:
    p = model.params
    logits = ad.add(ad.matmul(G, p["asr_w"]), p["asr_b"])
    return PosteriorGrid(log_probs=ad.log_softmax(logits, axis=-1),
                         vocab=model.vocab,
                         blank_index=len(model.vocab))


def forward(frames: FrameSequence, model: ModelParams,
            layout: ChunkLayout | None = None) -> ForwardArtifacts:
    Z = encode_features(frames, model)
    h_vad, probs = vad_forward(Z, model)
    C = context_forward(Z, model, layout)
    G = cross_task_attend(C, h_vad, model)
    grid = asr_head(G, model)
    return ForwardArtifacts(Z=Z, H_vad=h_vad, speech_probs=probs, C=C, G=G,
                            log_posteriors=grid)
