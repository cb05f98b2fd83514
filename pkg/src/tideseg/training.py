"""Training: loss, dual-subset sampling, augmentation and the train loop.

The loss is pixel cross-entropy plus a weighted separation term: the squared
cosine similarity between each image's mean water feature vector and mean
obstacle feature vector at the decoder input (zero when a class is absent).

Batches draw each element independently: a fair coin picks the base or the
extension subset, then an index is drawn uniformly inside it, so the rarer
subset is seen as often as the common one.

Encoder gradients flow only through the target frame and the most recent
``grad_context_depth`` context frames; older context frames are encoded
outside the tape (values identical, encoder gradients severed, projection
and aggregation gradients preserved).

All randomness derives from one seed through named SeedSequence children
(``init``, ``sampler``, ``augment``), so a run is reproducible on one device.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network as net
from .autodiff import Tensor
from .data import (
    OBSTACLE,
    WATER,
    CorpusManifest,
    Frame,
    FrameAnnotation,
    SegmentationMask,
    TemporalSample,
    load_annotation,
    load_frame,
)
from .errors import ConfigError, DataError, RuntimeFailure


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: ``base`` scaled by ``factor`` at each milestone epoch."""

    base: float = 2e-3
    milestones: tuple[int, ...] = (30,)
    factor: float = 0.2

    def __post_init__(self):
        if self.base < 0 or self.factor < 0:
            raise ConfigError("learning rate and decay factor must be >= 0")
        if any(m < 0 for m in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ConfigError("lr milestones must be sorted non-negative epochs")

    def at(self, epoch: int) -> float:
        lr = self.base
        for m in self.milestones:
            if epoch >= m:
                lr *= self.factor
        return lr

    def to_dict(self) -> dict:
        return {"base": self.base, "milestones": list(self.milestones), "factor": self.factor}

    @classmethod
    def from_dict(cls, d: dict) -> "LrSchedule":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    separation_loss_weight: float = 0.01
    class_weights: tuple[float, float, float] = (3.0, 1.0, 1.0)
    augment_flip: bool = True
    augment_jitter: bool = True
    grad_context_depth: int = 1
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.separation_loss_weight < 0:
            raise ConfigError("separation_loss_weight must be >= 0")
        if len(self.class_weights) != 3 or any(w <= 0 for w in self.class_weights):
            raise ConfigError("class_weights needs 3 positive values (obstacle, water, sky)")
        if self.grad_context_depth < 0:
            raise ConfigError("grad_context_depth must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr.to_dict(),
            "seed": self.seed,
            "separation_loss_weight": self.separation_loss_weight,
            "class_weights": list(self.class_weights),
            "augment_flip": self.augment_flip,
            "augment_jitter": self.augment_jitter,
            "grad_context_depth": self.grad_context_depth,
            "steps_per_epoch": self.steps_per_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr" in d:
            d["lr"] = LrSchedule.from_dict(d["lr"])
        if "class_weights" in d:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------
def separation_term(decoder_input: Tensor, labels: np.ndarray) -> Tensor:
    """Squared cosine similarity between per-image mean water and obstacle
    feature vectors at the decoder input; images missing a class add 0.

    ``labels`` is (B, H, W) at full resolution; it is center-sampled down to
    the decoder input's grid.
    """
    b, n, h, w = decoder_input.shape
    stride = labels.shape[1] // h
    if stride * h != labels.shape[1] or labels.shape[2] // w != stride:
        raise ConfigError(
            f"labels {labels.shape[1:]} not an integer multiple of feature grid {(h, w)}"
        )
    off = stride // 2
    ds = labels[:, off::stride, off::stride]

    dtype = decoder_input.data.dtype
    eps = 1e-8
    terms = []
    for cls in (WATER, OBSTACLE):
        mask = (ds == cls).astype(dtype)[:, None]
        count = np.maximum(mask.sum(axis=(2, 3)), 1.0)
        mean = ad.mul(ad.tsum(ad.mul(decoder_input, mask), axis=(2, 3)), 1.0 / count)
        terms.append((mean, mask.sum(axis=(2, 3))[:, 0] > 0))
    (m_w, has_w), (m_o, has_o) = terms
    valid = (has_w & has_o).astype(dtype)

    dot = ad.tsum(ad.mul(m_w, m_o), axis=1)
    nw = ad.tsum(ad.mul(m_w, m_w), axis=1)
    no = ad.tsum(ad.mul(m_o, m_o), axis=1)
    cos2 = ad.div(ad.mul(dot, dot), ad.add(ad.mul(nw, no), eps))
    return ad.mul(ad.tsum(ad.mul(cos2, valid)), 1.0 / b)


def segmentation_loss(
    scores: Tensor,
    labels: np.ndarray,
    decoder_input: Tensor | None = None,
    separation_weight: float = 0.0,
    class_weights: tuple[float, float, float] | None = None,
) -> tuple[Tensor, float, float]:
    """Total loss tensor plus (cross-entropy, separation) values for logging.

    ``class_weights`` rebalances the pixel loss; obstacles cover a few
    percent of a frame, so upweighting them keeps recall from stalling.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if not np.isin(labels, (0, 1, 2)).all():
        raise DataError("ground-truth labels outside {0,1,2}")
    if scores.shape[0] != labels.shape[0] or scores.shape[2:] != labels.shape[1:]:
        raise ConfigError(f"scores {scores.shape} do not match labels {labels.shape}")
    ce = ad.cross_entropy_logits(scores, labels, weights=class_weights)
    if separation_weight > 0 and decoder_input is not None:
        sep = separation_term(decoder_input, labels)
        total = ad.add(ce, ad.mul(sep, separation_weight))
        return total, float(ce.data), float(sep.data)
    return ce, float(ce.data), 0.0


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
class BatchSampler:
    """Per-draw fair coin between subsets, uniform within the chosen one."""

    def __init__(self, base_indices, extension_indices, rng: np.random.Generator):
        self.base = list(base_indices)
        self.extension = list(extension_indices)
        if not self.base or not self.extension:
            raise ConfigError("both sampler subsets must be non-empty")
        self.rng = rng

    @classmethod
    def from_manifest(cls, manifest: CorpusManifest, rng: np.random.Generator) -> "BatchSampler":
        return cls(manifest.subset_indices("base"), manifest.subset_indices("extension"), rng)

    def draw(self) -> int:
        pool = self.base if self.rng.random() < 0.5 else self.extension
        return pool[int(self.rng.integers(len(pool)))]

    def sample(self, k: int) -> list[int]:
        return [self.draw() for _ in range(k)]


class UniformSampler:
    """Uniform fallback for single-subset corpora."""

    def __init__(self, count: int, rng: np.random.Generator):
        if count < 1:
            raise ConfigError("cannot sample from an empty corpus")
        self.count = count
        self.rng = rng

    def sample(self, k: int) -> list[int]:
        return [int(self.rng.integers(self.count)) for _ in range(k)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def _flip_annotation(ann: FrameAnnotation, width: int) -> FrameAnnotation:
    return FrameAnnotation(
        mask=SegmentationMask(ann.mask.labels[:, ::-1].copy()),
        obstacle_boxes=tuple((width - x1, y0, width - x0, y1) for x0, y0, x1, y1 in ann.obstacle_boxes),
        water_edge=tuple((width - 1 - x, y) for x, y in ann.water_edge),
        danger_zone=ann.danger_zone[:, ::-1].copy(),
    )


def augment(
    sample: TemporalSample,
    rng: np.random.Generator,
    flip: bool = True,
    jitter: bool = True,
) -> TemporalSample:
    """Flip (p=0.5) and brightness/contrast jitter, applied identically to
    the target, every context frame and the annotation; returns the sample
    unchanged when no transform fires."""
    do_flip = flip and rng.random() < 0.5
    if jitter:
        contrast = rng.uniform(0.95, 1.05)
        brightness = rng.uniform(-0.02, 0.02)
    else:
        contrast, brightness = 1.0, 0.0
    if not do_flip and contrast == 1.0 and brightness == 0.0:
        return sample

    def tx(frame: Frame) -> Frame:
        img = frame.image
        if do_flip:
            img = img[:, :, ::-1]
        img = np.clip((img - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0).astype(img.dtype)
        return Frame(img, frame.sequence_id, frame.frame_index)

    annotation = sample.annotation
    if annotation is not None and do_flip:
        annotation = _flip_annotation(annotation, sample.target.width)
    return TemporalSample(
        target=tx(sample.target),
        context=tuple(tx(f) for f in sample.context),
        annotation=annotation,
    )


# ---------------------------------------------------------------------------
# restricted forward
# ---------------------------------------------------------------------------
def restricted_forward(
    sample: TemporalSample,
    cfg: net.NetworkConfig,
    params: dict[str, Tensor],
    grad_context_depth: int = 1,
) -> tuple[Tensor, Tensor]:
    """Forward of one sample with encoder gradients restricted to the target
    and the ``grad_context_depth`` most recent context frames.  Values are
    identical to the unrestricted forward; returns (scores, decoder_input)."""
    target, context = net._sample_arrays(sample, cfg)
    return net.forward_batch(target, context, cfg, params, grad_context_depth=grad_context_depth)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# corpus cache
# ---------------------------------------------------------------------------
class CorpusCache:
    """Loads every frame and annotation of a manifest once into memory and
    assembles TemporalSamples with the most recent ``t`` context frames."""

    def __init__(self, manifest: CorpusManifest, t: int):
        if t > manifest.t:
            raise ConfigError(
                f"network needs T={t} context frames, manifest provides only {manifest.t}"
            )
        self.manifest = manifest
        self.t = t
        frames: dict[str, Frame] = {}
        annotations: dict[str, FrameAnnotation] = {}
        self.samples: list[TemporalSample] = []
        for e in manifest.entries:
            for rel in (e.target_path, *e.context_paths):
                if rel not in frames:
                    frames[rel] = load_frame(manifest.root / rel, e.sequence_id)
            ann = None
            if e.annotation_path:
                if e.annotation_path not in annotations:
                    annotations[e.annotation_path] = load_annotation(manifest.root / e.annotation_path)
                ann = annotations[e.annotation_path]
            ctx = e.context_paths[manifest.t - t :] if t else ()
            self.samples.append(
                TemporalSample(
                    target=frames[e.target_path],
                    context=tuple(frames[p] for p in ctx),
                    annotation=ann,
                )
            )

    def __len__(self) -> int:
        return len(self.samples)


def _batch_arrays(samples: list[TemporalSample], cfg: net.NetworkConfig):
    targets = np.stack([s.target.image for s in samples]).astype(cfg.np_dtype)
    if cfg.t:
        contexts = np.stack(
            [np.stack([f.image for f in s.context]) for s in samples]
        ).astype(cfg.np_dtype)
    else:
        contexts = np.zeros((len(samples), 0, *targets.shape[1:]), dtype=cfg.np_dtype)
    labels = np.stack([s.annotation.mask.labels for s in samples])
    return targets, contexts, labels


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
def train(
    manifest: CorpusManifest,
    cfg: net.NetworkConfig,
    tc: TrainConfig,
    checkpoint_path: Path | str,
    log_path: Path | str | None = None,
) -> dict[str, Tensor]:
    """Run the full loop and write a checkpoint plus a JSONL loss log.

    ``grad_context_depth`` is capped at the network's T.  Corpora with both
    subsets use the fair-coin sampler; single-subset corpora fall back to
    uniform sampling (noted in the log).  Aborts with a diagnostic naming
    the step if the loss goes non-finite.
    """
    cache = CorpusCache(manifest, cfg.t)
    for i, s in enumerate(cache.samples):
        if s.annotation is None:
            raise DataError(f"training entry {i} has no annotation")

    ss = np.random.SeedSequence(tc.seed)
    init_ss, sampler_ss, augment_ss = ss.spawn(3)
    params = net.init_params(cfg, seed=init_ss)
    sampler_rng = np.random.default_rng(sampler_ss)
    augment_rng = np.random.default_rng(augment_ss)

    counts = manifest.subset_counts()
    if counts["base"] and counts["extension"]:
        sampler = BatchSampler.from_manifest(manifest, sampler_rng)
        sampler_kind = "fair-coin"
    else:
        sampler = UniformSampler(len(cache), sampler_rng)
        sampler_kind = "uniform (single subset)"

    opt = Adam(params)
    depth = min(tc.grad_context_depth, cfg.t)
    steps_per_epoch = tc.steps_per_epoch or max(1, math.ceil(len(cache) / tc.batch_size))

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    history: list[dict] = []
    try:
        if log_file:
            log_file.write(
                json.dumps({"event": "start", "sampler": sampler_kind, "samples": len(cache),
                            "steps_per_epoch": steps_per_epoch, "config": tc.to_dict()}) + "\n"
            )
        step = 0
        for epoch in range(tc.epochs):
            lr = tc.lr.at(epoch)
            for _ in range(steps_per_epoch):
                picked = [cache.samples[i] for i in sampler.sample(tc.batch_size)]
                batch = [
                    augment(s, augment_rng, flip=tc.augment_flip, jitter=tc.augment_jitter)
                    for s in picked
                ]
                targets, contexts, labels = _batch_arrays(batch, cfg)
                scores, decoder_input = net.forward_batch(
                    targets, contexts, cfg, params, grad_context_depth=depth
                )
                loss, ce, sep = segmentation_loss(
                    scores, labels, decoder_input, tc.separation_loss_weight,
                    class_weights=tc.class_weights,
                )
                if not np.isfinite(loss.data):
                    raise RuntimeFailure(
                        f"non-finite loss at step {step} (epoch {epoch}): ce={ce}, sep={sep}"
                    )
                loss.backward()
                opt.step(lr)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": float(loss.data),
                    "ce": ce,
                    "sep": sep,
                    "lr": lr,
                }
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                step += 1
    finally:
        if log_file:
            log_file.close()

    meta = {
        "train_config": tc.to_dict(),
        "final_loss": history[-1]["loss"] if history else None,
        "steps": len(history),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    net.save_checkpoint(checkpoint_path, cfg, params, meta=meta)
    return params
