"""Core domain types and corpus I/O.

Label encoding is fixed package-wide: 0 = obstacle, 1 = water, 2 = sky.

Corpus layout on disk:
  * frames: 8-bit RGB PNG files, loaded as float arrays in [0, 1]
  * masks: single-channel PNG files carrying raw label values (lossless)
  * annotations: JSON records referencing the mask and danger-zone files and
    embedding obstacle boxes plus the water-edge polyline

Manifest format (UTF-8, one record per line, tab-separated):
  header:  ``tideseg-manifest<TAB>version=1<TAB>T=<int>``
  entry:   ``sequence_id<TAB>subset<TAB>target<TAB>annotation|-<TAB>ctx0,ctx1,...``
All paths are relative to the manifest's directory.  Every entry must carry
exactly T comma-separated context paths (oldest first) and a subset tag in
{base, extension}.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

OBSTACLE = 0
WATER = 1
SKY = 2
LABEL_NAMES = {OBSTACLE: "obstacle", WATER: "water", SKY: "sky"}
VALID_SUBSETS = ("base", "extension")
MANIFEST_MAGIC = "tideseg-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Frame:
    """One RGB frame: (3, H, W) float array with values in [0, 1]."""

    image: np.ndarray
    sequence_id: str
    frame_index: int

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"frame image must be (3, H, W), got {img.shape}")
        if img.shape[1] <= 0 or img.shape[2] <= 0:
            raise DataError("frame dimensions must be positive")
        if self.frame_index < 0:
            raise DataError("frame_index must be >= 0")
        if not np.isfinite(img).all():
            raise DataError("frame contains non-finite pixel values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DataError("frame pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class SegmentationMask:
    """Per-pixel labels (H, W) over {obstacle, water, sky}."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {self.labels.shape}")
        bad = ~np.isin(self.labels, (OBSTACLE, WATER, SKY))
        if bad.any():
            values = sorted(np.unique(self.labels[bad]).tolist())
            raise DataError(f"mask contains labels outside {{0,1,2}}: {values}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class FrameAnnotation:
    """Ground truth for one frame.

    ``obstacle_boxes`` use half-open integer pixel coordinates
    (x0, y0, x1, y1) with x0 < x1, y0 < y1; ``water_edge`` is an ordered
    polyline of (x, y) pixel points; ``danger_zone`` is a boolean (H, W) mask
    (true = inside the near-vessel zone).
    """

    mask: SegmentationMask
    obstacle_boxes: tuple[tuple[int, int, int, int], ...] = ()
    water_edge: tuple[tuple[int, int], ...] = ()
    danger_zone: Optional[np.ndarray] = None

    def __post_init__(self):
        h, w = self.mask.shape
        if self.danger_zone is None:
            object.__setattr__(self, "danger_zone", np.zeros((h, w), dtype=bool))
        if self.danger_zone.shape != (h, w):
            raise DataError(
                f"danger zone shape {self.danger_zone.shape} != mask shape {(h, w)}"
            )
        for box in self.obstacle_boxes:
            x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise DataError(f"obstacle box {box} outside {w}x{h} image bounds")


@dataclass(frozen=True)
class TemporalSample:
    """Target frame plus its T preceding context frames (oldest first)."""

    target: Frame
    context: tuple[Frame, ...]
    annotation: Optional[FrameAnnotation] = None


@dataclass(frozen=True)
class ManifestEntry:
    sequence_id: str
    target_path: str
    context_paths: tuple[str, ...]
    annotation_path: Optional[str]
    subset: str


@dataclass
class CorpusManifest:
    t: int
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path = Path(".")

    def subset_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in VALID_SUBSETS}
        for e in self.entries:
            counts[e.subset] += 1
        return counts

    def subset_indices(self, subset: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.subset == subset]


# ---------------------------------------------------------------------------
# image / mask / annotation files
# ---------------------------------------------------------------------------
def write_frame_image(path: Path | str, image: np.ndarray) -> None:
    """Write a (3, H, W) float [0,1] image as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(str(path))


def load_frame(path: Path | str, sequence_id: str = "", frame_index: int = 0) -> Frame:
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"frame file not found: {path}")
    except OSError as exc:
        raise DataError(f"cannot decode frame {path}: {exc}")
    return Frame(arr.transpose(2, 0, 1), sequence_id, frame_index)


def write_mask(path: Path | str, mask: SegmentationMask) -> None:
    """Lossless single-channel PNG with raw label values."""
    try:
        Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(str(path))
    except OSError as exc:
        raise DataError(f"cannot write mask {path}: {exc}")


def read_mask(path: Path | str) -> SegmentationMask:
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"mask file not found: {path}")
    except OSError as exc:
        raise DataError(f"cannot decode mask {path}: {exc}")
    return SegmentationMask(arr)


def write_zone(path: Path | str, zone: np.ndarray) -> None:
    Image.fromarray(zone.astype(np.uint8), mode="L").save(str(path))


def read_zone(path: Path | str) -> np.ndarray:
    try:
        with Image.open(str(path)) as img:
            return np.asarray(img.convert("L")) > 0
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read danger-zone mask {path}: {exc}")


def write_annotation(path: Path | str, ann: FrameAnnotation) -> None:
    """Write the annotation record plus sibling mask/zone PNG files."""
    path = Path(path)
    mask_name = path.stem + "_mask.png"
    zone_name = path.stem + "_zone.png"
    write_mask(path.parent / mask_name, ann.mask)
    write_zone(path.parent / zone_name, ann.danger_zone)
    record = {
        "mask": mask_name,
        "danger_zone": zone_name,
        "obstacle_boxes": [list(b) for b in ann.obstacle_boxes],
        "water_edge": [list(p) for p in ann.water_edge],
    }
    path.write_text(json.dumps(record), encoding="utf-8")


def load_annotation(path: Path | str) -> FrameAnnotation:
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"annotation file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"annotation {path} is not valid JSON: {exc}")
    mask = read_mask(path.parent / record["mask"])
    zone = read_zone(path.parent / record["danger_zone"])
    return FrameAnnotation(
        mask=mask,
        obstacle_boxes=tuple(tuple(int(v) for v in b) for b in record["obstacle_boxes"]),
        water_edge=tuple(tuple(int(v) for v in p) for p in record["water_edge"]),
        danger_zone=zone,
    )


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------
def write_manifest(path: Path | str, manifest: CorpusManifest) -> None:
    path = Path(path)
    lines = [f"{MANIFEST_MAGIC}\tversion={manifest.version}\tT={manifest.t}"]
    for e in manifest.entries:
        ann = e.annotation_path if e.annotation_path else "-"
        ctx = ",".join(e.context_paths)
        lines.append(f"{e.sequence_id}\t{e.subset}\t{e.target_path}\t{ann}\t{ctx}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Path | str, check_files: bool = True) -> CorpusManifest:
    """Parse and validate a manifest; optionally check referenced files exist."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    header = lines[0].split("\t")
    if len(header) != 3 or header[0] != MANIFEST_MAGIC:
        raise DataError(f"manifest {path}: malformed header {lines[0]!r}")
    try:
        version = int(header[1].removeprefix("version="))
        t = int(header[2].removeprefix("T="))
    except ValueError:
        raise DataError(f"manifest {path}: malformed header {lines[0]!r}")
    if version != MANIFEST_VERSION:
        raise DataError(f"manifest {path}: unsupported version {version} (expected 1)")
    if t < 0:
        raise DataError(f"manifest {path}: negative context length T={t}")

    root = path.parent
    entries: list[ManifestEntry] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"manifest {path}:{lineno}: expected 5 fields, got {len(parts)}")
        seq, subset, target, ann, ctx = parts
        if subset not in VALID_SUBSETS:
            raise DataError(f"manifest {path}:{lineno}: unknown subset {subset!r}")
        ctx_paths = tuple(p for p in ctx.split(",") if p) if ctx != "-" else ()
        if len(ctx_paths) != t:
            raise DataError(
                f"manifest {path}:{lineno} (entry {seq!r}): has {len(ctx_paths)} "
                f"context paths, expected T={t}"
            )
        entry = ManifestEntry(seq, target, ctx_paths, None if ann == "-" else ann, subset)
        if check_files:
            for rel in (entry.target_path, *entry.context_paths) + (
                (entry.annotation_path,) if entry.annotation_path else ()
            ):
                if not (root / rel).is_file():
                    raise DataError(f"manifest {path}:{lineno}: missing file {root / rel}")
        entries.append(entry)
    return CorpusManifest(t=t, entries=entries, version=version, root=root)


def padded_context(frame_paths: Sequence[str], index: int, t: int) -> list[str]:
    """Context paths for ``frame_paths[index]``: the t predecessors oldest
    first, repeating the earliest available frame when the sequence start
    leaves fewer than t true predecessors."""
    if not 0 <= index < len(frame_paths):
        raise DataError(f"frame index {index} outside sequence of {len(frame_paths)}")
    picks = [frame_paths[max(index - k, 0)] for k in range(t, 0, -1)]
    return picks


def load_sample(manifest: CorpusManifest, index: int) -> TemporalSample:
    """Decode entry ``index`` into a TemporalSample with T context frames."""
    if not 0 <= index < len(manifest.entries):
        raise DataError(f"sample index {index} out of range [0, {len(manifest.entries)})")
    e = manifest.entries[index]
    target = load_frame(manifest.root / e.target_path, e.sequence_id, index)
    context = tuple(
        load_frame(manifest.root / p, e.sequence_id, index) for p in e.context_paths
    )
    annotation = (
        load_annotation(manifest.root / e.annotation_path) if e.annotation_path else None
    )
    if annotation is not None and annotation.mask.shape != (target.height, target.width):
        raise DataError(
            f"entry {e.sequence_id!r}: mask shape {annotation.mask.shape} does not "
            f"match frame {(target.height, target.width)}"
        )
    return TemporalSample(target=target, context=context, annotation=annotation)
