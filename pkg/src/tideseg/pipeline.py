"""End-to-end glue: run the network over a corpus and score the masks."""
from __future__ import annotations

import numpy as np

from . import network as net
from .data import CorpusManifest, SegmentationMask, TemporalSample
from .errors import DataError
from .evaluation import (
    DetectionReport,
    EvalConfig,
    FrameResult,
    evaluate_frame,
    summarize,
)
from .training import CorpusCache


def predict_mask(
    sample: TemporalSample, cfg: net.NetworkConfig, params: dict
) -> SegmentationMask:
    scores = net.forward(sample, cfg, params)
    return SegmentationMask(net.scores_to_mask(scores).astype(np.int64))


def evaluate_samples(
    samples: list[TemporalSample],
    masks: list[SegmentationMask],
    eval_cfg: EvalConfig,
) -> tuple[DetectionReport, list[FrameResult]]:
    results = []
    for sample, mask in zip(samples, masks):
        if sample.annotation is None:
            raise DataError("cannot evaluate a sample without an annotation")
        results.append(evaluate_frame(mask, sample.annotation, eval_cfg))
    return summarize(results, eval_cfg), results


def evaluate_model_on_manifest(
    manifest: CorpusManifest,
    cfg: net.NetworkConfig,
    params: dict,
    eval_cfg: EvalConfig,
) -> DetectionReport:
    """Predict every manifest entry with explicit context and summarize."""
    cache = CorpusCache(manifest, cfg.t)
    masks = [predict_mask(s, cfg, params) for s in cache.samples]
    report, _ = evaluate_samples(cache.samples, masks, eval_cfg)
    return report
