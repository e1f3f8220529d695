"""Shape contracts, structural identities, and chunked-attention equivalence."""

import numpy as np
import pytest

import vadasr.autodiff as ad
from vadasr.audio import FrameSequence
from vadasr.chunking import plan_chunks, whole_utterance_layout
from vadasr.errors import DataError, DimensionError, LayoutError, UsageError
from vadasr.model import (
    FRAME_SAMPLES,
    ModelDims,
    ModelParams,
    cross_task_attend,
    encode_features,
    forward,
    positional_encoding,
    vad_forward,
    vad_score_frames,
)

VOCAB = ["a", "b", "c"]


def small_model(seed=0, **dim_kwargs):
    dims = ModelDims(vocab_size=len(VOCAB), **dim_kwargs)
    return ModelParams.init(VOCAB, dims, seed=seed)


def random_frames(rng, T):
    return FrameSequence(frames=rng.normal(0.0, 0.1, size=(T, FRAME_SAMPLES)))


class TestDims:
    def test_heads_must_divide(self):
        with pytest.raises(UsageError):
            ModelDims(vocab_size=3, d_model=32, n_heads=5)

    def test_vocab_size_must_match(self):
        with pytest.raises(UsageError):
            ModelParams(VOCAB, ModelDims(vocab_size=7), {})


class TestShapes:
    def test_forward_shapes(self, rng):
        model = small_model()
        T = 9
        art = forward(random_frames(rng, T), model)
        d = model.dims.d_model
        assert art.Z.shape == (T, d)
        assert art.H_vad.shape == (T, d)
        assert art.speech_probs.shape == (T,)
        assert art.C.shape == (T, d)
        assert art.G.shape == (T, d)
        assert art.log_posteriors.array.shape == (T, len(VOCAB) + 1)
        # posterior rows normalize
        assert np.allclose(np.exp(art.log_posteriors.array).sum(axis=1), 1.0)
        # speech probs are probabilities
        p = art.speech_probs.data
        assert np.all((p > 0) & (p < 1))

    def test_empty_input_rejected(self):
        model = small_model()
        with pytest.raises(DataError):
            encode_features(FrameSequence(frames=np.zeros((0, FRAME_SAMPLES))),
                            model)

    def test_wrong_frame_width_rejected(self, rng):
        model = small_model()
        with pytest.raises(DimensionError):
            encode_features(FrameSequence(frames=rng.normal(size=(4, 100))),
                            model)


class TestStructuralIdentities:
    def test_encoder_is_frame_local(self, rng):
        # perturbing frame j leaves latents of all other frames untouched
        model = small_model()
        frames = random_frames(rng, 8)
        base = encode_features(frames, model).data
        mod = frames.frames.copy()
        mod[3] += rng.normal(0.0, 1.0, FRAME_SAMPLES)
        pert = encode_features(FrameSequence(frames=mod), model).data
        changed = np.any(base != pert, axis=1)
        assert changed[3]
        assert not changed[:3].any() and not changed[4:].any()

    def test_vad_conv_is_causal(self, rng):
        # perturbing frame j never changes VAD features before j
        model = small_model()
        frames = random_frames(rng, 10)
        z = encode_features(frames, model)
        base = vad_forward(z, model)[1].data
        mod = frames.frames.copy()
        mod[6] += 1.0
        z2 = encode_features(FrameSequence(frames=mod), model)
        pert = vad_forward(z2, model)[1].data
        assert np.array_equal(base[:6], pert[:6])
        assert base[6] != pert[6]

    def test_vad_score_frames_skips_attention(self, rng):
        model = small_model()
        before = model.attention_evals
        vad_score_frames(random_frames(rng, 6), model)
        assert model.attention_evals == before
        forward(random_frames(rng, 6), model)
        assert model.attention_evals == before + 2  # context + cross-task

    def test_vad_scores_match_full_forward(self, rng):
        model = small_model()
        frames = random_frames(rng, 7)
        cheap = vad_score_frames(frames, model).data
        full = forward(frames, model).speech_probs.data
        assert np.array_equal(cheap, full)

    def test_zero_value_projection_makes_fusion_identity(self, rng):
        # with W_v = 0 the cross-task attention adds nothing: G == C
        model = small_model()
        model.params["xattn_wv"] = ad.Tensor(
            np.zeros_like(model.params["xattn_wv"].data), name="xattn_wv")
        art = forward(random_frames(rng, 6), model)
        assert np.allclose(art.G.data, art.C.data, atol=1e-14)

    def test_single_frame_attention_is_identity_weight(self, rng):
        # with T = 1 the attention weight is exactly 1, so fused output is
        # C + (v W_o) for the single value row
        model = small_model()
        frames = random_frames(rng, 1)
        art = forward(frames, model)
        p = model.params
        v = art.H_vad.data @ p["xattn_wv"].data
        expect = art.C.data + v @ p["xattn_wo"].data
        assert np.allclose(art.G.data, expect, atol=1e-12)

    def test_cross_task_length_mismatch(self, rng):
        model = small_model()
        with pytest.raises(DimensionError):
            cross_task_attend(ad.Tensor(rng.normal(size=(4, 32))),
                              ad.Tensor(rng.normal(size=(5, 32))), model)


class TestChunkedAttention:
    def test_single_covering_chunk_equals_unchunked(self, rng):
        model = small_model()
        frames = random_frames(rng, 12)
        whole = forward(frames, model, whole_utterance_layout(12))
        default = forward(frames, model, None)
        assert np.allclose(whole.log_posteriors.array,
                           default.log_posteriors.array, atol=1e-12)

    def test_full_context_chunks_equal_unchunked(self, rng):
        # chunks whose contexts reach both stream ends see everything, so
        # the result must match the unchunked forward
        model = small_model()
        T = 10
        frames = random_frames(rng, T)
        layout = plan_chunks(T, body_len=4, left_len=T, right_len=T)
        chunked = forward(frames, model, layout)
        whole = forward(frames, model, None)
        assert np.allclose(chunked.log_posteriors.array,
                           whole.log_posteriors.array, atol=1e-9)

    def test_narrow_context_changes_output(self, rng):
        model = small_model()
        T = 20
        frames = random_frames(rng, T)
        layout = plan_chunks(T, body_len=5, left_len=2, right_len=2)
        chunked = forward(frames, model, layout)
        whole = forward(frames, model, None)
        assert not np.allclose(chunked.log_posteriors.array,
                               whole.log_posteriors.array, atol=1e-6)

    def test_body_rows_depend_only_on_window(self, rng):
        # perturbing a frame outside a chunk's window leaves that chunk's
        # context rows unchanged
        model = small_model()
        T = 20
        layout = plan_chunks(T, body_len=5, left_len=3, right_len=3)
        frames = random_frames(rng, T)
        base = forward(frames, model, layout).C.data
        mod = frames.frames.copy()
        mod[19] += 1.0  # outside window of chunk 0 ([0, 8))
        pert_frames = FrameSequence(frames=mod)
        pert = forward(pert_frames, model, layout).C.data
        assert np.allclose(base[:5], pert[:5], atol=1e-12)

    def test_layout_length_mismatch(self, rng):
        model = small_model()
        frames = random_frames(rng, 8)
        with pytest.raises(LayoutError):
            forward(frames, model, whole_utterance_layout(9))


class TestGradients:
    def test_full_model_finite_difference(self, rng):
        # small dims keep the parameter count tractable
        dims = ModelDims(vocab_size=2, d_model=4, n_heads=2,
                         conv1_channels=2, ffn_dim=4, vad_kernel_width=3)
        model = ModelParams.init(["a", "b"], dims, seed=1)
        frames = FrameSequence(
            frames=rng.normal(0.0, 0.1, size=(4, FRAME_SAMPLES)))
        names = ["enc2_k", "vad_k", "ctx_wq", "xattn_wv", "asr_w",
                 "ctx_ln1_g", "vad_fc_w"]
        tensors = [model.params[n] for n in names]
        w = rng.normal(size=(4, 3))
        wp = rng.normal(size=4)

        def f(params):
            art = forward(frames, model)
            return ad.add(
                ad.sum_all(ad.mul(art.log_posteriors.log_probs, w)),
                ad.sum_all(ad.mul(art.speech_probs, wp)))

        assert ad.finite_diff_check(f, tensors) < 1e-4


class TestSaveLoad:
    def test_round_trip(self, rng, tmp_path):
        model = small_model(seed=3)
        path = tmp_path / "model.ckpt"
        model.save(path)
        back = ModelParams.load(path)
        assert back.vocab == model.vocab
        assert back.dims == model.dims
        frames = random_frames(rng, 5)
        a = forward(frames, model).log_posteriors.array
        b = forward(frames, back).log_posteriors.array
        assert np.array_equal(a, b)

    def test_copy_is_deep(self):
        model = small_model()
        clone = model.copy()
        clone.params["asr_b"].data[0] = 99.0
        assert model.params["asr_b"].data[0] == 0.0


class TestPositionalEncoding:
    def test_values(self):
        enc = positional_encoding(3, 4)
        assert enc.shape == (3, 4)
        assert np.allclose(enc[0], [0, 1, 0, 1])
        assert enc[1, 0] == pytest.approx(np.sin(1.0))
        assert enc[2, 2] == pytest.approx(np.sin(2.0 / 100.0))

    def test_cache_consistency(self):
        a = positional_encoding(600, 8)  # force regrow past default cache
        b = positional_encoding(10, 8)
        assert np.array_equal(a[:10], b)
