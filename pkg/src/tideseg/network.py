"""Segmentation network: shared per-frame encoder, temporal context module
and skip-connection decoder.

Architecture (desk scale, backbone-agnostic by contract):

  * encoder: a stack of strided 3x3 conv + ReLU stages; every stage except
    the deepest doubles as a skip feature for the decoder.  The deepest map
    has N channels.
  * temporal context: a shared linear 1x1 conv projects each frame's deepest
    map to N/2 channels; the T context embeddings plus the target embedding
    are stacked (oldest first, target last) into a (T+1, N/2, h, w) volume
    and aggregated to (N/2, h, w) by one of three variants:
      - conv3d: a single learned (T+1) x k x k convolution, no temporal
        padding, zero-padded spatially, followed by ReLU
      - avgpool_1x1: parameter-free mean over the temporal axis
      - avgpool_3x3: mean over the temporal axis and a zero-padded 3x3
        spatial window (divisor is the full (T+1)*9 window)
  * decoder: concatenates the target embedding with the aggregated context
    (restoring exactly N channels), then alternates nearest upsampling with
    skip-feature merges down to the first stage's resolution; a 1x1 head
    produces 3-class scores, upsampled to the input resolution.

Parameters are plain name -> Tensor dicts; initialization is centered
uniform with 1/sqrt(fan_in) bounds, drawn from a seeded generator.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TemporalSample
from .errors import ConfigError, DataError

AGGREGATIONS = ("conv3d", "avgpool_1x1", "avgpool_3x3")


@dataclass(frozen=True)
class NetworkConfig:
    """Shape and variant parameters of the network."""

    t: int = 5
    n: int = 24
    encoder: tuple[tuple[int, int], ...] = ((12, 2), (16, 2), (24, 2))
    aggregation: str = "conv3d"
    spatial_kernel: int = 3
    num_classes: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.t < 0:
            raise ConfigError(f"context length T must be >= 0, got {self.t}")
        if self.n <= 0 or self.n % 2 != 0:
            raise ConfigError(f"N must be a positive even integer, got {self.n}")
        if not self.encoder:
            raise ConfigError("encoder needs at least one stage")
        for ch, st in self.encoder:
            if ch <= 0 or st not in (1, 2):
                raise ConfigError(f"bad encoder stage ({ch}, {st}); stride must be 1 or 2")
        if self.encoder[-1][0] != self.n:
            raise ConfigError(
                f"deepest encoder stage has {self.encoder[-1][0]} channels, expected N={self.n}"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.spatial_kernel not in (1, 3, 5):
            raise ConfigError(f"spatial kernel must be one of 1,3,5, got {self.spatial_kernel}")
        if self.num_classes != 3:
            raise ConfigError("this network predicts exactly 3 classes")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def total_stride(self) -> int:
        s = 1
        for _, st in self.encoder:
            s *= st
        return s

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "n": self.n,
            "encoder": [list(stage) for stage in self.encoder],
            "aggregation": self.aggregation,
            "spatial_kernel": self.spatial_kernel,
            "num_classes": self.num_classes,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = tuple(tuple(stage) for stage in d["encoder"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape map implied by the configuration."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, (ch, _) in enumerate(cfg.encoder):
        shapes[f"enc{i}.w"] = (ch, cin, 3, 3)
        shapes[f"enc{i}.b"] = (ch,)
        cin = ch
    half = cfg.n // 2
    shapes["proj.w"] = (half, cfg.n, 1, 1)
    shapes["proj.b"] = (half,)
    if cfg.aggregation == "conv3d":
        k = cfg.spatial_kernel
        shapes["tcm.w"] = (half, cfg.t + 1, half, k, k)
        shapes["tcm.b"] = (half,)
    shapes["fuse.w"] = (cfg.n, cfg.n, 3, 3)
    shapes["fuse.b"] = (cfg.n,)
    width = cfg.n
    for i in range(len(cfg.encoder) - 2, -1, -1):
        skip_ch = cfg.encoder[i][0]
        shapes[f"dec{i}.w"] = (skip_ch, width + skip_ch, 3, 3)
        shapes[f"dec{i}.b"] = (skip_ch,)
        width = skip_ch
    shapes["head.w"] = (cfg.num_classes, width, 1, 1)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0) -> dict[str, Tensor]:
    """Centered-uniform fan-in initialization from a seeded generator."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        w_shape = shape if name.endswith(".w") else shapes[name[:-2] + ".w"]
        fan_in = int(np.prod(w_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(
            rng.uniform(-bound, bound, size=shape).astype(cfg.np_dtype), requires_grad=True
        )
    return params


def save_checkpoint(path: Path | str, cfg: NetworkConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    arrays = {f"param:{k}": v.data for k, v in params.items()}
    np.savez(
        str(path),
        __config__=np.frombuffer(json.dumps(cfg.to_dict()).encode(), dtype=np.uint8),
        __meta__=np.frombuffer(json.dumps(meta or {}).encode(), dtype=np.uint8),
        **arrays,
    )


def load_checkpoint(path: Path | str) -> tuple[NetworkConfig, dict[str, Tensor], dict]:
    """Load a checkpoint, validating every parameter shape against its config."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(str(path)) as z:
        cfg = NetworkConfig.from_dict(json.loads(bytes(z["__config__"]).decode()))
        meta = json.loads(bytes(z["__meta__"]).decode())
        expected = param_shapes(cfg)
        params: dict[str, Tensor] = {}
        stored = {k[len("param:"):] for k in z.files if k.startswith("param:")}
        if stored != set(expected):
            missing = sorted(set(expected) - stored)
            extra = sorted(stored - set(expected))
            raise DataError(f"checkpoint {path}: parameter set mismatch "
                            f"(missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            arr = z[f"param:{name}"]
            if arr.shape != shape:
                raise DataError(
                    f"checkpoint {path}: parameter {name} has shape {arr.shape}, "
                    f"config implies {shape}"
                )
            params[name] = Tensor(arr.astype(cfg.np_dtype), requires_grad=True)
    return cfg, params, meta


# ---------------------------------------------------------------------------
# encoder instrumentation
# ---------------------------------------------------------------------------
_encode_listeners: list = []


@contextmanager
def count_encoder_invocations():
    """Counts frames pushed through the encoder inside the block."""
    counter = {"frames": 0}
    _encode_listeners.append(counter)
    try:
        yield counter
    finally:
        _encode_listeners.remove(counter)


# ---------------------------------------------------------------------------
# forward building blocks (batched tensors)
# ---------------------------------------------------------------------------
def encode_batch(x, cfg: NetworkConfig, params: dict[str, Tensor]) -> tuple[Tensor, list[Tensor]]:
    """Shared encoder over (B, 3, H, W); returns deepest map and skip features."""
    t = ad.as_tensor(x)
    b, c, h, w = t.shape
    if c != 3:
        raise ConfigError(f"encoder expects 3 input channels, got {c}")
    if h % cfg.total_stride or w % cfg.total_stride:
        raise ConfigError(
            f"input {h}x{w} not divisible by total encoder stride {cfg.total_stride}"
        )
    for counter in _encode_listeners:
        counter["frames"] += b
    outs = []
    for i, (_, stride) in enumerate(cfg.encoder):
        t = ad.relu(ad.conv2d(t, params[f"enc{i}.w"], params[f"enc{i}.b"], stride=stride, pad=1))
        outs.append(t)
    return outs[-1], outs[:-1]


def project_batch(f: Tensor, cfg: NetworkConfig, params: dict[str, Tensor]) -> Tensor:
    """Shared linear 1x1 projection from N to N/2 channels."""
    if f.shape[1] != cfg.n:
        raise ConfigError(f"projection expects {cfg.n} channels, got {f.shape[1]}")
    return ad.conv2d(f, params["proj.w"], params["proj.b"])


def build_context_volume_batch(context: list[Tensor], target: Tensor) -> Tensor:
    """Stack context embeddings (oldest first) and the target embedding last."""
    for i, e in enumerate(context):
        if e.shape != target.shape:
            raise ConfigError(
                f"context embedding {i} has shape {e.shape}, target has {target.shape}"
            )
    return ad.stack(list(context) + [target], axis=1)


def aggregate_temporal_batch(vol: Tensor, cfg: NetworkConfig, params: dict[str, Tensor]) -> Tensor:
    """Collapse the (B, T+1, N/2, h, w) volume to (B, N/2, h, w) context features."""
    b, t1, c, h, w = vol.shape
    if t1 != cfg.t + 1:
        raise ConfigError(f"volume has temporal extent {t1}, config implies {cfg.t + 1}")
    if cfg.aggregation == "avgpool_1x1":
        return ad.tmean(vol, axis=1)
    if cfg.aggregation == "avgpool_3x3":
        pooled = ad.tsum(vol, axis=1)
        return ad.mul(ad.box_sum3x3(pooled), 1.0 / (t1 * 9))
    k = cfg.spatial_kernel
    w3 = params["tcm.w"]
    flat = ad.reshape(vol, (b, t1 * c, h, w))
    wflat = ad.reshape(w3, (w3.shape[0], t1 * c, k, k))
    return ad.relu(ad.conv2d(flat, wflat, params["tcm.b"], stride=1, pad=(k - 1) // 2))


def fuse_and_decode_batch(
    target_emb: Tensor,
    ctx: Tensor,
    skips: list[Tensor],
    cfg: NetworkConfig,
    params: dict[str, Tensor],
) -> tuple[Tensor, Tensor]:
    """Concatenate embedding and context, decode to full-resolution scores.

    Returns (scores, decoder_input); the latter feeds the separation loss.
    """
    if target_emb.shape != ctx.shape:
        raise ConfigError(
            f"target embedding {target_emb.shape} and context features {ctx.shape} differ"
        )
    if len(skips) != len(cfg.encoder) - 1:
        raise ConfigError(f"expected {len(cfg.encoder) - 1} skip features, got {len(skips)}")
    decoder_input = ad.concat([target_emb, ctx], axis=1)
    if decoder_input.shape[1] != cfg.n:
        raise ConfigError(
            f"decoder input has {decoder_input.shape[1]} channels, expected N={cfg.n}"
        )
    x = ad.relu(ad.conv2d(decoder_input, params["fuse.w"], params["fuse.b"], stride=1, pad=1))
    for i in range(len(cfg.encoder) - 2, -1, -1):
        x = ad.upsample_nearest(x, cfg.encoder[i + 1][1])
        skip = skips[i]
        if skip.shape[2:] != x.shape[2:]:
            raise ConfigError(
                f"skip feature {i} is {skip.shape[2:]}, decoder path is {x.shape[2:]}"
            )
        x = ad.concat([x, skip], axis=1)
        x = ad.relu(ad.conv2d(x, params[f"dec{i}.w"], params[f"dec{i}.b"], stride=1, pad=1))
    scores = ad.conv2d(x, params["head.w"], params["head.b"])
    scores = ad.upsample_nearest(scores, cfg.encoder[0][1])
    return scores, decoder_input


def forward_batch(
    targets: np.ndarray,
    contexts: np.ndarray,
    cfg: NetworkConfig,
    params: dict[str, Tensor],
    grad_context_depth: int | None = None,
) -> tuple[Tensor, Tensor]:
    """Full forward over a batch.

    ``targets``: (B, 3, H, W); ``contexts``: (B, T, 3, H, W), oldest first.
    With ``grad_context_depth=d``, context frames older than the most recent
    ``d`` are encoded outside the tape, severing encoder gradients for them
    while leaving values (and projection/TCM gradients) untouched.

    Returns (scores, decoder_input).
    """
    targets = np.asarray(targets, dtype=cfg.np_dtype)
    if targets.ndim != 4:
        raise ConfigError(f"targets must be (B, 3, H, W), got {targets.shape}")
    bsz = targets.shape[0]
    contexts = np.asarray(contexts, dtype=cfg.np_dtype)
    if cfg.t == 0:
        if contexts.size and contexts.shape[1:2] != (0,):
            raise ConfigError("config has T=0 but context frames were supplied")
        contexts = contexts.reshape(bsz, 0, *targets.shape[1:])
    if contexts.shape != (bsz, cfg.t, *targets.shape[1:]):
        raise ConfigError(
            f"contexts must be {(bsz, cfg.t, *targets.shape[1:])}, got {contexts.shape}"
        )

    depth = cfg.t if grad_context_depth is None else min(grad_context_depth, cfg.t)
    n_old = cfg.t - depth

    feats_target, skips = encode_batch(targets, cfg, params)
    groups: list[Tensor] = []
    if n_old > 0:
        flat_old = contexts[:, :n_old].reshape(bsz * n_old, *targets.shape[1:])
        with ad.no_grad():
            feats_old, _ = encode_batch(flat_old, cfg, params)
        groups.append(Tensor(feats_old.data))
    if depth > 0:
        flat_new = contexts[:, n_old:].reshape(bsz * depth, *targets.shape[1:])
        feats_new, _ = encode_batch(flat_new, cfg, params)
        groups.append(feats_new)
    groups.append(feats_target)

    emb_all = project_batch(ad.concat(groups, axis=0), cfg, params)
    ctx_embs = [ad.narrow(emb_all, 0, s * bsz, bsz) for s in range(cfg.t)]
    target_emb = ad.narrow(emb_all, 0, cfg.t * bsz, bsz)

    vol = build_context_volume_batch(ctx_embs, target_emb)
    ctx_feat = aggregate_temporal_batch(vol, cfg, params)
    return fuse_and_decode_batch(target_emb, ctx_feat, skips, cfg, params)


# ---------------------------------------------------------------------------
# single-sample surface
# ---------------------------------------------------------------------------
def _sample_arrays(sample: TemporalSample, cfg: NetworkConfig) -> tuple[np.ndarray, np.ndarray]:
    if len(sample.context) != cfg.t:
        raise ConfigError(
            f"sample has {len(sample.context)} context frames, config expects T={cfg.t}"
        )
    target = sample.target.image[None].astype(cfg.np_dtype)
    if cfg.t:
        context = np.stack([f.image for f in sample.context])[None].astype(cfg.np_dtype)
    else:
        context = np.zeros((1, 0, *sample.target.image.shape), dtype=cfg.np_dtype)
    return target, context


def forward(sample: TemporalSample, cfg: NetworkConfig, params: dict[str, Tensor]) -> np.ndarray:
    """Class scores (3, H, W) for one temporal sample (no gradients)."""
    target, context = _sample_arrays(sample, cfg)
    with ad.no_grad():
        scores, _ = forward_batch(target, context, cfg, params)
    return scores.data[0]


def encode(frame_image: np.ndarray, cfg: NetworkConfig, params: dict[str, Tensor]):
    """Encode one (3, H, W) frame; returns (deepest (N, h, w), skip list)."""
    with ad.no_grad():
        deepest, skips = encode_batch(frame_image[None].astype(cfg.np_dtype), cfg, params)
    return deepest.data[0], [s.data[0] for s in skips]


def project(feature_map: np.ndarray, cfg: NetworkConfig, params: dict[str, Tensor]) -> np.ndarray:
    with ad.no_grad():
        return project_batch(ad.as_tensor(feature_map[None]), cfg, params).data[0]


def build_context_volume(context: list[np.ndarray], target: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        vol = build_context_volume_batch(
            [ad.as_tensor(e[None]) for e in context], ad.as_tensor(target[None])
        )
    return vol.data[0]


def aggregate_temporal(vol: np.ndarray, cfg: NetworkConfig, params: dict[str, Tensor]) -> np.ndarray:
    with ad.no_grad():
        return aggregate_temporal_batch(ad.as_tensor(vol[None]), cfg, params).data[0]


def fuse_and_decode(
    target_emb: np.ndarray,
    ctx: np.ndarray,
    skips: list[np.ndarray],
    cfg: NetworkConfig,
    params: dict[str, Tensor],
) -> np.ndarray:
    with ad.no_grad():
        scores, _ = fuse_and_decode_batch(
            ad.as_tensor(target_emb[None]),
            ad.as_tensor(ctx[None]),
            [ad.as_tensor(s[None]) for s in skips],
            cfg,
            params,
        )
    return scores.data[0]


def scores_to_mask(scores: np.ndarray) -> np.ndarray:
    """Argmax class decision; returns (H, W) uint8 labels."""
    return np.argmax(scores, axis=-3).astype(np.uint8)
