"""Training objectives: CTC (forward-backward), per-frame BCE for the VAD
head, and their unweighted joint combination.

Sign convention: everything here is a quantity to *minimize* (negative log
likelihood), so the joint loss is ctc + vad_weight * bce.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError, InfeasibleTargetError, VocabularyError
from .kernels import ctc_forward_backward

PROB_CLAMP = 1e-7
BRUTEFORCE_LIMIT = 10 ** 6


@dataclass
class CtcResult:
    loss: float
    grad_log_probs: np.ndarray
    node: ad.Tensor  # scalar, differentiable when the grid was taped


@dataclass
class BceResult:
    loss: float
    grad_probs: np.ndarray
    node: ad.Tensor


@dataclass
class MtlLoss:
    total: float
    ctc_part: float
    ce_part: float
    vad_weight: float = 1.0
    node: ad.Tensor | None = None


def _target_indices(grid, target) -> np.ndarray:
    idx = []
    for tok in target:
        if isinstance(tok, str):
            try:
                idx.append(grid.vocab.index(tok))
            except ValueError:
                raise VocabularyError(f"target token {tok!r} not in vocabulary")
        else:
            tok = int(tok)
            if not (0 <= tok < grid.blank_index):
                raise VocabularyError(f"target index {tok} out of range")
            idx.append(tok)
    return np.asarray(idx, dtype=np.int64)


def min_frames_required(target_idx: np.ndarray) -> int:
    repeats = int(np.sum(target_idx[1:] == target_idx[:-1])) if len(target_idx) > 1 else 0
    return len(target_idx) + repeats


def ctc_loss(grid, target) -> CtcResult:
    """Negative log-likelihood of ``target`` under the posterior grid,
    marginalized over all collapsing alignments, plus its exact gradient."""
    logp = grid.log_probs
    tensor_in = logp if isinstance(logp, ad.Tensor) else ad.Tensor(logp)
    arr = tensor_in.data
    T = arr.shape[0]
    idx = _target_indices(grid, target)
    if T < min_frames_required(idx):
        raise InfeasibleTargetError(
            f"target needs >= {min_frames_required(idx)} frames, grid has {T}")
    loss, grad = ctc_forward_backward(arr, idx, grid.blank_index)
    node = ad.custom(loss, (tensor_in,), lambda g: (g * grad,))
    return CtcResult(loss=loss, grad_log_probs=grad, node=node)


def _collapse(alignment, blank: int) -> tuple:
    out = []
    prev = -1
    for a in alignment:
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return tuple(out)


def ctc_loss_bruteforce(grid, target) -> float:
    """Oracle: -log sum over all K^T alignments that collapse to the target.

    Only for tiny instances; complements the recursion in tests.
    """
    logp = grid.log_probs
    arr = logp.data if isinstance(logp, ad.Tensor) else np.asarray(logp)
    T, K = arr.shape
    if K ** T > BRUTEFORCE_LIMIT:
        raise DataError(f"instance too large for enumeration: {K}^{T}")
    idx = tuple(_target_indices(grid, target))
    blank = grid.blank_index
    total = -math.inf
    for alignment in itertools.product(range(K), repeat=T):
        if _collapse(alignment, blank) != idx:
            continue
        lp = sum(arr[t, a] for t, a in enumerate(alignment))
        total = np.logaddexp(total, lp)
    return float(-total)


def bce_loss(speech_probs, speech_mask) -> BceResult:
    """Per-frame-mean binary cross entropy between predicted speech
    probabilities and the boolean reference mask."""
    tensor_in = (speech_probs if isinstance(speech_probs, ad.Tensor)
                 else ad.Tensor(speech_probs))
    p_raw = tensor_in.data.reshape(-1)
    y = np.asarray(speech_mask, dtype=np.float64).reshape(-1)
    if p_raw.shape != y.shape:
        raise DimensionError("prediction/mask length mismatch",
                             p_raw.shape, y.shape)
    inside = (p_raw > PROB_CLAMP) & (p_raw < 1.0 - PROB_CLAMP)
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    T = len(y)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    grad = (-(y / p - (1.0 - y) / (1.0 - p)) / T) * inside
    grad = grad.reshape(tensor_in.shape)
    node = ad.custom(loss, (tensor_in,), lambda g: (g * grad,))
    return BceResult(loss=loss, grad_probs=grad, node=node)


def _part_value(part) -> float:
    if isinstance(part, (CtcResult, BceResult)):
        return part.loss
    if isinstance(part, ad.Tensor):
        return part.item()
    return float(part)


def _part_node(part) -> ad.Tensor | None:
    if isinstance(part, (CtcResult, BceResult)):
        return part.node
    if isinstance(part, ad.Tensor):
        return part
    return None


def mtl_loss(ctc_part, ce_part, vad_weight: float = 1.0) -> MtlLoss:
    """Joint objective: total = ctc + vad_weight * ce (vad_weight 1.0 gives
    the plain unweighted sum)."""
    cv, ev = _part_value(ctc_part), _part_value(ce_part)
    if not (math.isfinite(cv) and math.isfinite(ev)):
        raise DataError(f"loss parts must be finite, got ctc={cv} ce={ev}")
    cn, en = _part_node(ctc_part), _part_node(ce_part)
    node = None
    if cn is not None and en is not None:
        node = ad.add(cn, ad.scale(en, vad_weight))
    return MtlLoss(total=cv + vad_weight * ev, ctc_part=cv, ce_part=ev,
                   vad_weight=vad_weight, node=node)
