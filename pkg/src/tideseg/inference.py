"""Streaming per-frame inference with a fixed-size embedding buffer.

The engine keeps the T most recently produced frame embeddings (projected,
N/2 channels).  Each step encodes and projects only the incoming frame,
reads the buffer as temporal context BEFORE pushing the new embedding, and
decodes with the current frame's skip features.  The buffer starts as T
copies of the first frame's embedding, so for frames f1, f2, f3 at T=2 the
context seen is [e1,e1], [e1,e1], [e1,e2] and the buffer ends as [e2,e3].

After the first step every frame costs exactly one encoder invocation;
batch-assembled forward passes over the same clip produce the same scores
for every frame index with a full set of true predecessors.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import Tensor
from .data import Frame, SegmentationMask
from .errors import ConfigError, DataError, StreamError


class EmbeddingBuffer:
    """Ordered store of exactly T embeddings, oldest first."""

    def __init__(self, first_embedding: np.ndarray, t: int):
        if t < 0:
            raise ConfigError(f"buffer length T must be >= 0, got {t}")
        self.t = t
        self.slots: list[np.ndarray] = [np.array(first_embedding)] * t

    def snapshot(self) -> list[np.ndarray]:
        return list(self.slots)

    def push(self, embedding: np.ndarray) -> None:
        if self.t == 0:
            return
        self.slots = self.slots[1:] + [np.array(embedding)]


def init_buffer(first_embedding: np.ndarray, t: int) -> EmbeddingBuffer:
    return EmbeddingBuffer(first_embedding, t)


class StreamEngine:
    """Single-stream sequential inference; steps must be called in order."""

    def __init__(self, cfg: net.NetworkConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.buffer: EmbeddingBuffer | None = None
        self._frame_shape: tuple | None = None
        self.steps_taken = 0

    def step(self, frame: Frame) -> tuple[SegmentationMask, np.ndarray]:
        """Segment one frame; returns (mask, class scores (3, H, W))."""
        image = frame.image
        if self._frame_shape is None:
            self._frame_shape = image.shape
        elif image.shape != self._frame_shape:
            raise StreamError(
                f"frame {frame.frame_index} has shape {image.shape}; stream started "
                f"with {self._frame_shape}"
            )
        cfg, params = self.cfg, self.params
        with ad.no_grad():
            deepest, skips = net.encode_batch(image[None].astype(cfg.np_dtype), cfg, params)
            emb = net.project_batch(deepest, cfg, params)
            if self.buffer is None:
                self.buffer = EmbeddingBuffer(emb.data[0], cfg.t)
            context = self.buffer.snapshot()
            vol = net.build_context_volume_batch([Tensor(c[None]) for c in context], emb)
            ctx_feat = net.aggregate_temporal_batch(vol, cfg, params)
            scores, _ = net.fuse_and_decode_batch(emb, ctx_feat, skips, cfg, params)
            self.buffer.push(emb.data[0])
        self.steps_taken += 1
        scores0 = scores.data[0]
        return SegmentationMask(net.scores_to_mask(scores0)), scores0


def run_sequence(
    frames: list[Frame],
    cfg: net.NetworkConfig,
    params: dict[str, Tensor],
) -> tuple[list[SegmentationMask], list[dict]]:
    """Fold a StreamEngine over the frames.

    Returns the masks plus one timing record per frame:
    ``{"frame_index", "seconds"}``.
    """
    if not frames:
        raise DataError("cannot run inference over an empty frame sequence")
    engine = StreamEngine(cfg, params)
    masks: list[SegmentationMask] = []
    timings: list[dict] = []
    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        mask, _ = engine.step(frame)
        timings.append({"frame_index": i, "seconds": time.perf_counter() - t0})
        masks.append(mask)
    return masks, timings
