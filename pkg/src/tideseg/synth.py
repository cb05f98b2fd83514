"""Synthetic maritime sequence generator with exact ground truth.

Scenes are constructed so that a single frame carries no reliable cue for
the hard decisions while the temporal axis resolves them:

  * sky and water draw their texture from the same distribution (same
    filter, same contrast, same palette), so the waterline is invisible in
    any one frame; water texture re-warps every frame, sky stays still.
  * obstacles are static shapes alpha-blended into the water: dark ellipses
    (hulls, buoys) and small bright blocks (markers).  Their position and
    blend strength never change.
  * reflections are rendered through the same blend op with shapes, shades
    and sizes drawn from the same distributions as the dark obstacles, but
    their blend strength pulses over time and their position bobs by a few
    pixels.  At peak blend a reflection is indistinguishable from an
    obstacle in one frame; across frames only obstacles hold still.
  * glitter is rendered as bright blocks of the same size and shade range
    as the bright markers, confined to a band below the waterline, that
    relocate from frame to frame.

Ground truth follows the scene, not the pixels: obstacle shapes are
labeled obstacle, reflections and glitter are water, the waterline
polyline is the horizon row, and the danger zone is the bottom band of
the image.  Reflection-free calm scenes are tagged ``base``; reflection
and glitter scenes are tagged ``extension``.

Corpus recipes are small human-editable JSON records, e.g.::

    {"seed": 7, "height": 48, "width": 80, "frames_per_scene": 10,
     "base_scenes": 20, "extension_scenes": 20, "t": 5, "pad_context": false}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import (
    OBSTACLE,
    SKY,
    WATER,
    CorpusManifest,
    Frame,
    FrameAnnotation,
    ManifestEntry,
    SegmentationMask,
    VALID_SUBSETS,
    padded_context,
    write_annotation,
    write_frame_image,
    write_manifest,
)
from .errors import ConfigError, DataError

RECIPE_KEYS = {
    "seed": int,
    "height": int,
    "width": int,
    "frames_per_scene": int,
    "base_scenes": int,
    "extension_scenes": int,
    "t": int,
    "pad_context": bool,
}

# maximum per-frame integer offset a reflection may bob by
REFLECTION_BOB = 2
# glitter blocks are this many pixels square and live in a band this many
# rows below the waterline
GLITTER_SIZE = 3
GLITTER_BAND = 6


@dataclass(frozen=True)
class ObjectSpec:
    """One shape blended into the water texture.

    ``shade`` is the shape's intensity, ``alpha`` its blend strength
    against the texture behind it (1.0 = fully opaque).  Shapes with
    ``reflection=True`` are mirage artifacts: they keep the same footprint
    but pulse in blend strength and bob in position over time, and they
    are labeled water in the ground truth.
    """

    x: int
    top: int
    width: int
    height: int
    shade: float
    alpha: float = 1.0
    shape: str = "ellipse"
    reflection: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"object size {self.width}x{self.height} must be positive")
        if self.shape not in ("ellipse", "block"):
            raise ConfigError(f"unknown object shape {self.shape!r}")
        if not (0.0 <= self.shade <= 1.0 and 0.0 < self.alpha <= 1.0):
            raise ConfigError("object shade must be in [0,1] and alpha in (0,1]")


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of one rendered sequence."""

    seed: int
    sequence_id: str
    subset: str
    height: int = 48
    width: int = 80
    horizon: int = 20
    n_frames: int = 10
    objects: tuple[ObjectSpec, ...] = ()
    warp_amplitude: float = 2.5
    warp_period: float = 8.0
    reflection_strength: float = 0.0
    glitter_density: float = 0.0
    glitter_flicker: float = 1.0
    danger_fraction: float = 0.4

    def __post_init__(self):
        if self.subset not in VALID_SUBSETS:
            raise ConfigError(f"scene subset must be one of {VALID_SUBSETS}")
        if self.height < 16 or self.width < 16:
            raise ConfigError("scene dimensions must be at least 16x16")
        if not 0 < self.horizon < self.height:
            raise ConfigError(f"horizon row {self.horizon} outside image of height {self.height}")
        if self.n_frames < 1:
            raise ConfigError("sequence length must be >= 1")
        if self.warp_amplitude < 0 or self.warp_period <= 0:
            raise ConfigError("warp amplitude must be >= 0 and period > 0")
        if not 0.0 <= self.reflection_strength <= 1.0:
            raise ConfigError("reflection strength must lie in [0, 1]")
        if self.glitter_density < 0 or not 0.0 <= self.glitter_flicker <= 1.0:
            raise ConfigError("glitter density must be >= 0 and flicker in [0, 1]")
        if not 0.0 < self.danger_fraction < 1.0:
            raise ConfigError("danger fraction must lie in (0, 1)")
        for obj in self.objects:
            if obj.x < 0 or obj.x + obj.width > self.width:
                raise ConfigError(f"object at x={obj.x} width={obj.width} overflows width {self.width}")
            margin = REFLECTION_BOB if obj.reflection else 0
            if obj.top - margin <= self.horizon:
                raise ConfigError(
                    f"object rows [{obj.top}, {obj.top + obj.height}) must sit fully "
                    f"below the waterline at row {self.horizon}"
                )
            if obj.top + obj.height + margin > self.height:
                raise ConfigError(
                    f"object rows [{obj.top}, {obj.top + obj.height}) overflow height {self.height}"
                )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def _unit_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    # tanh bounds the field to (-1, 1): surface texture must never get as
    # dark as an obstacle, or appearance alone could not separate them
    return np.tanh((f - f.mean()) / (sd if sd > 0 else 1.0))


def _object_pixels(obj: ObjectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index arrays of the object's pixel footprint."""
    ys, xs = np.mgrid[0 : obj.height, 0 : obj.width]
    if obj.shape == "ellipse":
        ry, rx = obj.height / 2.0, obj.width / 2.0
        inside = ((ys + 0.5 - ry) / ry) ** 2 + ((xs + 0.5 - rx) / rx) ** 2 <= 1.0
    else:
        inside = np.ones_like(ys, dtype=bool)
    if not inside.any():
        raise ConfigError(f"object footprint {obj.width}x{obj.height} renders no pixels")
    return ys[inside] + obj.top, xs[inside] + obj.x


def _scene_annotation(spec: SceneSpec) -> FrameAnnotation:
    labels = np.full((spec.height, spec.width), WATER, dtype=np.uint8)
    labels[: spec.horizon] = SKY
    boxes = []
    for obj in spec.objects:
        if obj.reflection:
            continue  # reflections are water artifacts, not obstacles
        ys, xs = _object_pixels(obj)
        labels[ys, xs] = OBSTACLE
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
    zone = np.zeros((spec.height, spec.width), dtype=bool)
    zone[spec.height - int(round(spec.danger_fraction * spec.height)) :] = True
    return FrameAnnotation(
        mask=SegmentationMask(labels),
        obstacle_boxes=tuple(boxes),
        water_edge=((0, spec.horizon), (spec.width - 1, spec.horizon)),
        danger_zone=zone,
    )


def generate_sequence(spec: SceneSpec) -> tuple[list[Frame], list[FrameAnnotation]]:
    """Render all frames of one scene plus their (identical) annotations."""
    h, w, h0 = spec.height, spec.width, spec.horizon
    ss = np.random.SeedSequence(spec.seed)
    rng = np.random.default_rng(ss)
    frame_rngs = [np.random.default_rng(child) for child in ss.spawn(spec.n_frames)]

    pad = int(np.ceil(spec.warp_amplitude)) + 2
    canvas = (h + 2 * pad, w + 2 * pad)
    sky_pad = 0.5 + 0.12 * _unit_noise(rng, canvas, 2.0)
    water_pad = 0.5 + 0.12 * _unit_noise(rng, canvas, 2.0)
    palette = np.clip(np.array([0.62, 0.76, 0.90]) + rng.uniform(-0.015, 0.015, 3), 0.0, 1.0)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase_x = np.pi * _unit_noise(rng, (h, w), 5.0)
    phase_y = np.pi * _unit_noise(rng, (h, w), 5.0)
    amp = spec.warp_amplitude
    omega = 2.0 * np.pi / spec.warp_period

    # the sky gets one fixed warp of the same magnitude so both regions
    # carry identical interpolation statistics; only water's warp moves
    sky_phase_x = np.pi * _unit_noise(rng, (h, w), 5.0)
    sky_phase_y = np.pi * _unit_noise(rng, (h, w), 5.0)
    sky_gray = map_coordinates(
        sky_pad,
        [yy + pad + amp * np.sin(sky_phase_y), xx + pad + amp * np.cos(sky_phase_x)],
        order=1,
    )

    statics = []      # (rows, cols, shade, alpha) blended every frame as-is
    reflections = []  # (rows, cols, shade, pulse_omega, phase_alpha, phase_y, phase_x)
    for obj in spec.objects:
        ys, xs = _object_pixels(obj)
        if obj.reflection:
            # reflections shimmer faster than the swell so a short context
            # window always sees both their bright and their faded phase
            pulse_omega = 2.0 * np.pi / rng.uniform(3.0, 6.0)
            reflections.append((ys, xs, obj.shade, pulse_omega, *rng.uniform(0.0, 2.0 * np.pi, 3)))
        else:
            statics.append((ys, xs, obj.shade, obj.alpha))

    band_top = h0 + 1
    band_rows = np.arange(band_top, min(h0 + GLITTER_BAND, h - GLITTER_SIZE))
    n_dots = int(rng.poisson(spec.glitter_density)) if spec.glitter_density > 0 else 0
    if band_rows.size == 0:
        n_dots = 0

    def draw_dot(drng):
        return (
            int(drng.choice(band_rows)),
            int(drng.integers(0, w - GLITTER_SIZE + 1)),
            float(drng.uniform(0.88, 1.0)),
        )

    dots = [draw_dot(rng) for _ in range(n_dots)]

    annotation = _scene_annotation(spec)

    frames: list[Frame] = []
    for t in range(spec.n_frames):
        drng = frame_rngs[t]
        dx = amp * np.cos(omega * t + phase_x)
        dy = amp * np.sin(omega * t + phase_y)
        water_gray = map_coordinates(water_pad, [yy + pad + dy, xx + pad + dx], order=1)

        gray = np.concatenate([sky_gray[:h0], water_gray[h0:]], axis=0)

        dots = [dot if drng.random() >= spec.glitter_flicker else draw_dot(drng) for dot in dots]
        for y, x, bright in dots:
            gray[y : y + GLITTER_SIZE, x : x + GLITTER_SIZE] = bright

        for ys, xs, shade, pw, pa, py, px in reflections:
            a = spec.reflection_strength * (0.5 + 0.5 * np.sin(pw * t + pa))
            oy = int(round(REFLECTION_BOB * np.sin(pw * t + py)))
            ox = int(round(REFLECTION_BOB * np.cos(pw * t + px)))
            ry, rx = ys + oy, xs + ox
            keep = (rx >= 0) & (rx < w)
            ry, rx = ry[keep], rx[keep]
            gray[ry, rx] = (1.0 - a) * gray[ry, rx] + a * shade

        for ys, xs, shade, alpha in statics:
            gray[ys, xs] = (1.0 - alpha) * gray[ys, xs] + alpha * shade

        rgb = palette[:, None, None] * np.clip(gray, 0.0, 1.0)[None]
        frames.append(Frame(rgb.astype(np.float32), spec.sequence_id, t))

    return frames, [annotation] * spec.n_frames


# ---------------------------------------------------------------------------
# randomized scene recipes
# ---------------------------------------------------------------------------
def random_scene_spec(
    rng: np.random.Generator,
    sequence_id: str,
    subset: str,
    height: int = 48,
    width: int = 80,
    n_frames: int = 10,
) -> SceneSpec:
    """Draw one scene: dark hulls and bright markers on open water.

    Extension scenes add pulsing reflection shapes drawn from the same
    size/shade distributions as the hulls, plus relocating glitter blocks
    matching the markers; base scenes are calm.
    """
    horizon = int(rng.integers(round(0.30 * height), round(0.55 * height) + 1))
    water_rows = height - horizon - 1

    objects: list[ObjectSpec] = []
    taken: list[tuple[int, int]] = []

    def place(obj_width: int) -> int | None:
        for _ in range(50):
            x = int(rng.integers(0, width - obj_width + 1))
            if all(x + obj_width + 2 <= lo or hi + 2 <= x for lo, hi in taken):
                taken.append((x, x + obj_width))
                return x
        return None

    def dark_shape():
        ow = int(rng.integers(6, 13))
        oh = int(rng.integers(4, min(9, water_rows + 1)))
        return ow, oh

    for _ in range(int(rng.integers(1, 4))):
        ow, oh = dark_shape()
        if water_rows < oh:
            continue
        x = place(ow)
        if x is None:
            continue
        objects.append(
            ObjectSpec(
                x=x,
                top=int(rng.integers(horizon + 1, height - oh + 1)),
                width=ow,
                height=oh,
                shade=float(rng.uniform(0.05, 0.25)),
                alpha=float(rng.uniform(0.8, 1.0)),
                shape="ellipse",
            )
        )
    for _ in range(int(rng.integers(2, 4))):
        if water_rows < GLITTER_SIZE:
            continue
        x = place(GLITTER_SIZE)
        if x is None:
            continue
        objects.append(
            ObjectSpec(
                x=x,
                top=int(rng.integers(horizon + 1, height - GLITTER_SIZE + 1)),
                width=GLITTER_SIZE,
                height=GLITTER_SIZE,
                shade=float(rng.uniform(0.88, 1.0)),
                alpha=1.0,
                shape="block",
            )
        )

    if subset == "extension":
        margin = REFLECTION_BOB
        for _ in range(int(rng.integers(3, 6))):
            ow, oh = dark_shape()
            lo, hi = horizon + 1 + margin, height - oh - margin
            if hi < lo:
                continue
            x = place(ow)
            if x is None:
                continue
            objects.append(
                ObjectSpec(
                    x=x,
                    top=int(rng.integers(lo, hi + 1)),
                    width=ow,
                    height=oh,
                    shade=float(rng.uniform(0.05, 0.25)),
                    shape="ellipse",
                    reflection=True,
                )
            )
        strength = float(rng.uniform(0.8, 1.0))
        density = float(rng.uniform(2.0, 5.0))
        flicker = float(rng.uniform(0.7, 1.0))
    else:
        strength, density, flicker = 0.0, 0.0, 1.0

    return SceneSpec(
        seed=int(rng.integers(0, 2**31 - 1)),
        sequence_id=sequence_id,
        subset=subset,
        height=height,
        width=width,
        horizon=horizon,
        n_frames=n_frames,
        objects=tuple(objects),
        warp_amplitude=float(rng.uniform(2.0, 3.2)),
        warp_period=float(rng.uniform(6.0, 10.0)),
        reflection_strength=strength,
        glitter_density=density,
        glitter_flicker=flicker,
    )


def build_corpus_specs(
    seed: int,
    base_scenes: int,
    extension_scenes: int,
    height: int = 48,
    width: int = 80,
    frames_per_scene: int = 10,
) -> list[SceneSpec]:
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(base_scenes):
        specs.append(random_scene_spec(rng, f"base{i:03d}", "base", height, width, frames_per_scene))
    for i in range(extension_scenes):
        specs.append(
            random_scene_spec(rng, f"ext{i:03d}", "extension", height, width, frames_per_scene)
        )
    return specs


# ---------------------------------------------------------------------------
# corpus emission
# ---------------------------------------------------------------------------
def emit_corpus(
    specs: list[SceneSpec], out_dir: Path | str, t: int, pad_context_frames: bool = False
) -> CorpusManifest:
    """Render scenes to ``out_dir`` and write a manifest.

    Without front-padding only frames with T true predecessors become
    entries; with it every frame does, its context front-padded by the
    sequence's first frame.
    """
    if not specs:
        raise ConfigError("cannot emit a corpus from an empty spec list")
    ids = [s.sequence_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sequence ids in spec list")
    if t < 0:
        raise ConfigError(f"context length T must be >= 0, got {t}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    for spec in specs:
        if spec.n_frames < t + 1 and not pad_context_frames:
            raise ConfigError(
                f"scene {spec.sequence_id!r} has {spec.n_frames} frames; needs at least "
                f"{t + 1} without front-padding"
            )
        frames, annotations = generate_sequence(spec)
        names = []
        for frame in frames:
            name = f"{spec.sequence_id}_f{frame.frame_index:03d}.png"
            write_frame_image(out_dir / name, frame.image)
            names.append(name)
        ann_name = f"{spec.sequence_id}_ann.json"
        write_annotation(out_dir / ann_name, annotations[0])

        first = 0 if pad_context_frames else t
        for i in range(first, spec.n_frames):
            entries.append(
                ManifestEntry(
                    sequence_id=spec.sequence_id,
                    target_path=names[i],
                    context_paths=tuple(padded_context(names, i, t)),
                    annotation_path=ann_name,
                    subset=spec.subset,
                )
            )

    manifest = CorpusManifest(t=t, entries=entries, root=out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


# ---------------------------------------------------------------------------
# recipe files
# ---------------------------------------------------------------------------
def default_recipe() -> dict:
    return {
        "seed": 7,
        "height": 48,
        "width": 80,
        "frames_per_scene": 10,
        "base_scenes": 20,
        "extension_scenes": 20,
        "t": 5,
        "pad_context": False,
    }


def load_recipe(path: Path | str) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"recipe file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"recipe {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise DataError(f"recipe {path} must be a JSON object")
    recipe = default_recipe()
    for key, value in raw.items():
        if key not in RECIPE_KEYS:
            raise DataError(f"recipe {path}: unknown key {key!r} (valid: {sorted(RECIPE_KEYS)})")
        expected = RECIPE_KEYS[key]
        if expected is bool:
            if not isinstance(value, bool):
                raise DataError(f"recipe {path}: {key} must be a boolean")
        elif not isinstance(value, int) or isinstance(value, bool):
            raise DataError(f"recipe {path}: {key} must be an integer")
        recipe[key] = value
    if recipe["base_scenes"] + recipe["extension_scenes"] < 1:
        raise DataError(f"recipe {path}: needs at least one scene")
    return recipe


def corpus_from_recipe(recipe: dict, out_dir: Path | str) -> CorpusManifest:
    specs = build_corpus_specs(
        seed=recipe["seed"],
        base_scenes=recipe["base_scenes"],
        extension_scenes=recipe["extension_scenes"],
        height=recipe["height"],
        width=recipe["width"],
        frames_per_scene=recipe["frames_per_scene"],
    )
    return emit_corpus(specs, out_dir, t=recipe["t"], pad_context_frames=recipe["pad_context"])
