"""Chunk-hopping plans: non-overlapping body chunks with spliced left/right
context ranges. Contexts only widen what attention may see; they never
produce output rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, LayoutError

FRAME_DURATION_S = 0.02


@dataclass(frozen=True)
class Chunk:
    body: tuple[int, int]       # [start, stop)
    left_ctx: tuple[int, int]   # possibly empty (start == stop)
    right_ctx: tuple[int, int]

    @property
    def window(self) -> tuple[int, int]:
        return self.left_ctx[0], self.right_ctx[1]


@dataclass(frozen=True)
class ChunkLayout:
    chunks: tuple[Chunk, ...]
    total_T: int

    def __post_init__(self):
        pos = 0
        for i, ch in enumerate(self.chunks):
            b0, b1 = ch.body
            if b0 != pos or b1 <= b0:
                raise LayoutError(f"chunk {i} body {ch.body} breaks coverage at {pos}")
            if ch.left_ctx[1] != b0 or ch.right_ctx[0] != b1:
                raise LayoutError(f"chunk {i} contexts must adjoin the body")
            if ch.left_ctx[0] < 0 or ch.right_ctx[1] > self.total_T:
                raise LayoutError(f"chunk {i} context out of bounds")
            pos = b1
        if self.chunks and pos != self.total_T:
            raise LayoutError(f"bodies cover [0,{pos}) but total_T={self.total_T}")
        if not self.chunks and self.total_T != 0:
            raise LayoutError("empty layout with nonzero total_T")


def whole_utterance_layout(total_T: int) -> ChunkLayout:
    if total_T == 0:
        return ChunkLayout(chunks=(), total_T=0)
    return ChunkLayout(
        chunks=(Chunk(body=(0, total_T), left_ctx=(0, 0),
                      right_ctx=(total_T, total_T)),),
        total_T=total_T)


def plan_chunks(total_T: int, body_len: int, left_len: int = 0,
                right_len: int = 0) -> ChunkLayout:
    """Bodies of ``body_len`` frames (last one possibly shorter) with contexts
    clipped at the stream boundaries."""
    if body_len < 1:
        raise InvalidSpecError("body_len must be >= 1")
    if left_len < 0 or right_len < 0:
        raise InvalidSpecError("context lengths must be >= 0")
    if total_T == 0:
        return ChunkLayout(chunks=(), total_T=0)
    chunks = []
    for start in range(0, total_T, body_len):
        stop = min(start + body_len, total_T)
        chunks.append(Chunk(
            body=(start, stop),
            left_ctx=(max(0, start - left_len), start),
            right_ctx=(stop, min(total_T, stop + right_len)),
        ))
    return ChunkLayout(chunks=tuple(chunks), total_T=total_T)


def sample_chunk_len(rng: np.random.Generator, min_s: float = 0.5,
                     max_s: float = 3.0,
                     frame_duration_s: float = FRAME_DURATION_S) -> int:
    """Random chunk length, uniform in seconds, converted to frames."""
    if min_s > max_s:
        raise InvalidSpecError("min_s must be <= max_s")
    dur = rng.uniform(min_s, max_s)
    return max(1, int(round(dur / frame_duration_s)))


def stitch_outputs(per_chunk_outputs, layout: ChunkLayout) -> np.ndarray:
    """Concatenate per-body outputs back to full stream length."""
    if len(per_chunk_outputs) != len(layout.chunks):
        raise LayoutError(f"{len(per_chunk_outputs)} outputs for "
                          f"{len(layout.chunks)} chunks")
    rows = []
    for out, ch in zip(per_chunk_outputs, layout.chunks):
        out = np.asarray(out)
        if out.shape[0] != ch.body[1] - ch.body[0]:
            raise LayoutError(f"chunk output rows {out.shape[0]} != body "
                              f"length {ch.body[1] - ch.body[0]}")
        rows.append(out)
    if not rows:
        return np.zeros((0,))
    return np.concatenate(rows, axis=0)
