"""CTC against a brute-force enumeration oracle, BCE, and the joint loss."""

import math

import numpy as np
import pytest

import vadasr.autodiff as ad
from vadasr.errors import (
    DataError,
    DimensionError,
    InfeasibleTargetError,
    VocabularyError,
)
from vadasr.losses import (
    bce_loss,
    ctc_loss,
    ctc_loss_bruteforce,
    min_frames_required,
    mtl_loss,
)
from vadasr.model import PosteriorGrid

from conftest import random_grid


def uniform_grid(T, vocab_size):
    K = vocab_size + 1
    logp = np.full((T, K), -np.log(K))
    vocab = [chr(ord("a") + i) for i in range(vocab_size)]
    return PosteriorGrid(log_probs=ad.Tensor(logp), vocab=vocab,
                         blank_index=vocab_size)


class TestCtcHandValues:
    def test_two_frame_uniform_single_token(self):
        # paths a-, -a, aa out of 4 equally likely -> p = 3/4
        grid = uniform_grid(2, 1)
        res = ctc_loss(grid, ("a",))
        assert res.loss == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_single_frame_single_token(self):
        grid = uniform_grid(1, 1)
        res = ctc_loss(grid, ("a",))
        assert res.loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_repeat_needs_blank(self):
        # target "aa" over 3 uniform frames: only path a-a, p = 1/8
        grid = uniform_grid(3, 1)
        res = ctc_loss(grid, ("a", "a"))
        assert res.loss == pytest.approx(3 * math.log(2.0), abs=1e-12)

    def test_empty_target(self):
        # all-blank path only
        grid = uniform_grid(3, 1)
        res = ctc_loss(grid, ())
        assert res.loss == pytest.approx(3 * math.log(2.0), abs=1e-12)

    def test_deterministic_grid_certain_path(self):
        logp = np.log(np.array([[0.7, 0.2, 0.1],
                                [0.1, 0.2, 0.7]]))
        grid = PosteriorGrid(log_probs=ad.Tensor(logp), vocab=["a", "b"],
                             blank_index=2)
        # target "a": alignments a-, aa, -a
        expect = -math.log(0.7 * 0.7 + 0.7 * 0.1 + 0.1 * 0.1)
        assert ctc_loss(grid, ("a",)).loss == pytest.approx(expect, abs=1e-12)


class TestCtcOracle:
    @pytest.mark.parametrize("T,V", [(1, 1), (2, 1), (3, 1), (4, 1),
                                     (2, 2), (3, 2), (4, 2), (5, 2),
                                     (3, 3), (4, 3)])
    def test_matches_bruteforce(self, rng, T, V):
        for _ in range(20):
            grid = random_grid(rng, T, V)
            L = rng.integers(0, min(T, 3) + 1)
            target = tuple(rng.choice(grid.vocab) for _ in range(L))
            idx = np.array([grid.vocab.index(t) for t in target], dtype=int)
            if T < min_frames_required(idx):
                with pytest.raises(InfeasibleTargetError):
                    ctc_loss(grid, target)
                continue
            res = ctc_loss(grid, target)
            oracle = ctc_loss_bruteforce(grid, target)
            assert res.loss == pytest.approx(oracle, abs=1e-9)

    def test_gradient_rows_are_posteriors(self, rng):
        for _ in range(20):
            grid = random_grid(rng, 6, 3)
            res = ctc_loss(grid, ("a", "b"))
            rowsums = (-res.grad_log_probs).sum(axis=1)
            assert np.allclose(rowsums, 1.0, atol=1e-12)
            assert np.all(-res.grad_log_probs >= -1e-15)

    def test_gradient_by_finite_difference(self, rng):
        grid = random_grid(rng, 5, 2)
        target = ("a", "b")

        def f(params):
            g = PosteriorGrid(log_probs=params[0], vocab=grid.vocab,
                              blank_index=grid.blank_index)
            return ctc_loss(g, target).node

        err = ad.finite_diff_check(f, [grid.log_probs])
        assert err < 1e-6


class TestCtcValidation:
    def test_unknown_token(self, rng):
        grid = random_grid(rng, 4, 2)
        with pytest.raises(VocabularyError):
            ctc_loss(grid, ("z",))

    def test_integer_targets(self, rng):
        grid = random_grid(rng, 4, 2)
        assert ctc_loss(grid, (0, 1)).loss == ctc_loss(grid, ("a", "b")).loss
        with pytest.raises(VocabularyError):
            ctc_loss(grid, (5,))

    def test_infeasible(self, rng):
        grid = random_grid(rng, 2, 2)
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(grid, ("a", "a"))  # needs 3 frames

    def test_bruteforce_size_guard(self, rng):
        grid = random_grid(rng, 30, 3)
        with pytest.raises(DataError):
            ctc_loss_bruteforce(grid, ("a",))

    def test_min_frames_required(self):
        assert min_frames_required(np.array([], dtype=int)) == 0
        assert min_frames_required(np.array([0, 1, 2])) == 3
        assert min_frames_required(np.array([0, 0, 1, 1])) == 6


class TestBce:
    def test_hand_value(self):
        # -ln 0.7 on a single frame
        res = bce_loss(np.array([0.7]), np.array([True]))
        assert res.loss == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_mean_over_frames(self):
        res = bce_loss(np.array([0.7, 0.3]), np.array([True, False]))
        assert res.loss == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_clamp_extreme_probs_finite(self):
        res = bce_loss(np.array([0.0, 1.0]), np.array([True, False]))
        assert math.isfinite(res.loss)
        # clamped coordinates get zero gradient
        assert np.all(res.grad_probs == 0.0)

    def test_gradient_hand_value(self):
        # d/dp of -ln p at p=0.5 is -2; mean over 1 frame
        res = bce_loss(np.array([0.5]), np.array([True]))
        assert res.grad_probs[0] == pytest.approx(-2.0, abs=1e-12)

    def test_gradient_by_finite_difference(self, rng):
        p = ad.Tensor(rng.uniform(0.05, 0.95, size=8))
        y = rng.random(8) > 0.5

        def f(params):
            return bce_loss(params[0], y).node

        assert ad.finite_diff_check(f, [p]) < 1e-7

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss(np.array([0.5, 0.5]), np.array([True]))


class TestMtl:
    def test_weighted_sum(self, rng):
        grid = random_grid(rng, 5, 2)
        ctc = ctc_loss(grid, ("a",))
        ce = bce_loss(rng.uniform(0.1, 0.9, 5), rng.random(5) > 0.5)
        for w in (0.0, 0.5, 1.0, 2.0):
            m = mtl_loss(ctc, ce, vad_weight=w)
            assert m.total == pytest.approx(ctc.loss + w * ce.loss, abs=1e-12)
            assert m.ctc_part == ctc.loss and m.ce_part == ce.loss

    def test_accepts_plain_floats(self):
        m = mtl_loss(1.5, 0.25, vad_weight=2.0)
        assert m.total == 2.0 and m.node is None

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            mtl_loss(float("inf"), 0.0)

    def test_node_gradient_composes(self, rng):
        grid = random_grid(rng, 5, 2)
        probs = ad.Tensor(rng.uniform(0.1, 0.9, 5))
        y = rng.random(5) > 0.5
        w = 0.7
        with ad.Tape() as tape:
            ctc = ctc_loss(grid, ("a", "b"))
            ce = bce_loss(probs, y)
            m = mtl_loss(ctc, ce, vad_weight=w)
            grads = ad.backward(tape, m.node)
        assert np.allclose(grads[grid.log_probs], ctc.grad_log_probs)
        assert np.allclose(grads[probs], w * ce.grad_probs)
