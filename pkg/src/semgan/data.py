"""Procedural two-domain street scenes with aligned semantic labels.

Scenes are layered: a sky band, a construction band with building
silhouettes rising into the sky, and a road band carrying vehicle
rectangles. Geometry depends only on the scene seed, so two domains
rendered from different appearance specs under the same seed share the
exact label map; appearance (class colors, jitter, block texture,
illumination) carries the domain gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .engine import Tensor
from .gradfilters import LabelMap, gradient_magnitude, sobel_pair

SKY, ROAD, CONSTRUCTION, VEHICLE = 0, 1, 2, 3
VEGETATION, SIDEWALK, WALL, MARKING = 4, 5, 6, 7


class CorpusError(ValueError):
    """Missing, malformed, or misaligned corpus files."""


@dataclass(frozen=True)
class ClassAppearance:
    """Rendering parameters for one semantic class."""

    mean_rgb: tuple
    jitter_std: float
    texture_amp: float
    texture_scale: int

    def __post_init__(self):
        if len(self.mean_rgb) != 3 or any(abs(v) > 1 for v in self.mean_rgb):
            raise ValueError(f"mean_rgb must be 3 values in [-1, 1], got {self.mean_rgb}")
        if self.texture_scale < 1:
            raise ValueError(f"texture_scale must be >= 1, got {self.texture_scale}")


@dataclass(frozen=True)
class DomainSpec:
    """Per-class appearance plus a global illumination offset."""

    classes: tuple
    illumination: float = 0.0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def expected_color(self, class_id: int) -> np.ndarray:
        """Mean rendered color of a class including illumination."""
        mean = np.asarray(self.classes[class_id].mean_rgb, dtype=np.float64)
        return np.clip(mean + self.illumination, -1.0, 1.0)


@dataclass
class ScenePair:
    """An image in [-1, 1] with its pixel-exact label map."""

    image: Tensor
    labels: LabelMap


@dataclass(frozen=True)
class ClassClustering:
    """Total mapping raw class id -> clustered category id."""

    mapping: tuple
    raw_count: int
    clustered_count: int

    def __post_init__(self):
        if len(self.mapping) != self.raw_count:
            raise ValueError(
                f"mapping covers {len(self.mapping)} ids, expected {self.raw_count}"
            )
        targets = set(self.mapping)
        if targets != set(range(self.clustered_count)):
            raise ValueError(
                f"clustered ids must be dense in [0, {self.clustered_count}), got {sorted(targets)}"
            )


# Palettes keep |mean + illumination| <= 0.85 so jitter and texture never
# clip, and the real-domain class means stay well separated for
# nearest-color classification. Adaptation directions oppose on purpose
# (sky darkens while road lightens; vehicles flip hue).
_VIRTUAL_4 = (
    ClassAppearance((0.30, 0.60, 0.80), 0.01, 0.01, 16),  # sky
    ClassAppearance((-0.50, -0.50, -0.47), 0.03, 0.20, 2),  # road
    ClassAppearance((0.45, 0.25, 0.00), 0.04, 0.14, 4),  # construction
    ClassAppearance((0.60, -0.45, -0.45), 0.02, 0.03, 8),  # vehicle
)
_REAL_4 = (
    ClassAppearance((0.00, 0.20, 0.55), 0.015, 0.02, 16),
    ClassAppearance((0.00, -0.03, -0.05), 0.035, 0.16, 2),
    ClassAppearance((0.47, 0.43, 0.35), 0.03, 0.11, 4),
    ClassAppearance((-0.45, 0.10, 0.65), 0.02, 0.04, 8),
)
_VIRTUAL_8 = _VIRTUAL_4 + (
    ClassAppearance((-0.35, 0.15, -0.35), 0.04, 0.08, 3),  # vegetation
    ClassAppearance((-0.15, -0.15, -0.18), 0.03, 0.06, 4),  # sidewalk
    ClassAppearance((0.20, 0.10, -0.05), 0.04, 0.07, 5),  # wall
    ClassAppearance((0.75, 0.75, 0.55), 0.02, 0.02, 2),  # marking
)
_REAL_8 = _REAL_4 + (
    ClassAppearance((-0.50, 0.00, -0.40), 0.05, 0.07, 3),
    ClassAppearance((0.12, 0.08, 0.05), 0.04, 0.05, 4),
    ClassAppearance((0.30, 0.28, 0.20), 0.04, 0.06, 5),
    ClassAppearance((0.55, 0.55, 0.40), 0.03, 0.03, 2),
)


def default_domain_spec(domain: str, num_classes: int = 4) -> DomainSpec:
    """Built-in appearance specs for the 'virtual' and 'real' domains."""
    if domain not in ("virtual", "real"):
        raise ValueError(f"domain must be 'virtual' or 'real', got {domain!r}")
    if num_classes == 4:
        classes = _VIRTUAL_4 if domain == "virtual" else _REAL_4
    elif num_classes == 8:
        classes = _VIRTUAL_8 if domain == "virtual" else _REAL_8
    else:
        raise ValueError(f"built-in specs cover 4 or 8 classes, got {num_classes}")
    illumination = 0.05 if domain == "virtual" else -0.05
    return DomainSpec(classes, illumination)


def default_clustering() -> ClassClustering:
    """A 30 -> 8 grouping table for raw fine-grained label maps."""
    groups = [
        (SKY, (0, 1, 2)),
        (ROAD, (3, 4, 5, 6)),
        (CONSTRUCTION, (7, 8, 9, 10, 11, 12)),
        (VEHICLE, (13, 14, 15, 16, 17)),
        (VEGETATION, (18, 19, 20)),
        (SIDEWALK, (21, 22, 23)),
        (WALL, (24, 25, 26)),
        (MARKING, (27, 28, 29)),
    ]
    mapping = [0] * 30
    for target, raws in groups:
        for raw in raws:
            mapping[raw] = target
    return ClassClustering(tuple(mapping), raw_count=30, clustered_count=8)


def cluster_labels(labels: LabelMap, clustering: ClassClustering) -> LabelMap:
    """Apply the clustering table per pixel."""
    if labels.data.size and labels.data.max() >= clustering.raw_count:
        raise ValueError(
            f"label id {labels.data.max()} has no clustering entry "
            f"(raw_count={clustering.raw_count})"
        )
    table = np.asarray(clustering.mapping, dtype=np.int32)
    return LabelMap(table[labels.data], clustering.clustered_count)


# ---------------------------------------------------------------------------
# scene generation


def _block_noise(rng: np.random.Generator, h: int, w: int, scale: int) -> np.ndarray:
    """Uniform noise on a coarse grid, upsampled and lightly smoothed."""
    gh = math.ceil(h / scale)
    gw = math.ceil(w / scale)
    grid = rng.uniform(-1.0, 1.0, size=(gh, gw))
    up = np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)[:h, :w]
    if scale > 1:
        padded = np.pad(up, 1, mode="edge")
        up = sum(
            padded[dy:dy + h, dx:dx + w]
            for dy in range(3) for dx in range(3)
        ) / 9.0
    return up


def generate_scene(seed: int, spec: DomainSpec, h: int, w: int) -> ScenePair:
    """Render one scene; geometry is a function of the seed alone."""
    if h < 16 or w < 16:
        raise ValueError(f"scene dims must be >= 16, got {h}x{w}")
    geometry = np.random.default_rng([int(seed), 11])
    appearance = np.random.default_rng([int(seed), 13])
    s = spec.num_classes

    horizon = int(h * geometry.uniform(0.30, 0.45))
    road_top = int(h * geometry.uniform(0.60, 0.75))
    labels = np.full((h, w), CONSTRUCTION, dtype=np.int32)
    labels[:horizon] = SKY
    labels[road_top:] = ROAD

    if s >= 8:
        sidewalk_h = max(2, (road_top - horizon) // 6)
        labels[road_top - sidewalk_h:road_top] = SIDEWALK
        wall_h = max(2, (road_top - horizon) // 8)
        labels[road_top - sidewalk_h - wall_h:road_top - sidewalk_h] = WALL

    for _ in range(int(geometry.integers(2, 5))):  # buildings rise into the sky
        bw = int(geometry.integers(w // 10, w // 4 + 1))
        bh = int(geometry.integers(max(2, horizon // 4), max(3, int(horizon * 0.9))))
        x0 = int(geometry.integers(0, max(1, w - bw)))
        labels[max(0, horizon - bh):horizon, x0:x0 + bw] = CONSTRUCTION

    if s >= 8:
        for _ in range(int(geometry.integers(1, 4))):  # trees beside buildings
            tw = int(geometry.integers(w // 16, w // 8 + 1))
            th = int(geometry.integers(max(2, horizon // 5), max(3, int(horizon * 0.6))))
            x0 = int(geometry.integers(0, max(1, w - tw)))
            labels[max(0, horizon - th):horizon, x0:x0 + tw] = VEGETATION

    road_band = h - road_top
    for _ in range(int(geometry.integers(1, 4))):  # vehicles on the road
        vh = int(geometry.integers(max(2, road_band // 4), max(3, road_band // 2 + 1)))
        vw = int(geometry.integers(w // 12, w // 5 + 1))
        x0 = int(geometry.integers(0, max(1, w - vw)))
        y0 = int(geometry.integers(road_top, max(road_top + 1, h - vh)))
        labels[y0:y0 + vh, x0:x0 + vw] = VEHICLE

    if s >= 8:  # dashed lane markings
        mark_row = min(h - 2, road_top + road_band // 2)
        for x0 in range(2, w - 6, 12):
            rows = labels[mark_row:mark_row + 1, x0:x0 + 6]
            rows[rows == ROAD] = MARKING

    image = np.zeros((3, h, w), dtype=np.float64)
    for class_id, app in enumerate(spec.classes):
        jitter = appearance.standard_normal((3, h, w)) * app.jitter_std
        texture = _block_noise(appearance, h, w, app.texture_scale) * app.texture_amp
        region = labels == class_id
        if not region.any():
            continue
        mean = np.asarray(app.mean_rgb)[:, None]
        image[:, region] = mean + jitter[:, region] + texture[region][None, :]
    image += spec.illumination
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return ScenePair(Tensor(image[None]), LabelMap(labels[None], s))


# ---------------------------------------------------------------------------
# image / label files


def save_image(path, image: Tensor) -> None:
    """8-bit RGB PNG under the linear map [-1, 1] <-> [0, 255]."""
    if image.shape[0] != 1 or image.shape[1] != 3:
        raise ValueError(f"save_image expects (1, 3, h, w), got {image.shape}")
    arr = np.clip((image.data[0] + 1.0) * 0.5 * 255.0, 0, 255)
    arr = np.rint(arr).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorpusError(f"{path}: not a readable PNG image: {exc}") from exc
    data = (arr / 255.0) * 2.0 - 1.0
    return Tensor(data.transpose(2, 0, 1)[None])


def save_labels(path, labels: LabelMap) -> None:
    """Single-channel 8-bit PNG of class ids; round-trips exactly."""
    if labels.shape[0] != 1:
        raise ValueError(f"save_labels expects a single map, got batch {labels.shape[0]}")
    if labels.num_classes > 256:
        raise ValueError("8-bit label files support at most 256 classes")
    Image.fromarray(labels.data[0].astype(np.uint8), mode="L").save(path, format="PNG")


def load_labels(path, num_classes: int) -> LabelMap:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.int32)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CorpusError(f"{path}: not a readable PNG label map: {exc}") from exc
    if arr.size and arr.max() >= num_classes:
        raise CorpusError(
            f"{path}: label value {arr.max()} >= num_classes {num_classes}"
        )
    return LabelMap(arr[None], num_classes)


# ---------------------------------------------------------------------------
# corpus layout: <dir>/images/NNNNNN.png, <dir>/labels/NNNNNN.png, manifest


@dataclass(frozen=True)
class CorpusEntry:
    index: int
    image_path: str
    label_path: str
    seed: int


def write_corpus(directory, spec: DomainSpec, count: int, h: int, w: int,
                 seed: int) -> list:
    """Generate `count` scenes; manifest line: index, image, labels, seed."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    lines = []
    for i in range(count):
        scene_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        scene = generate_scene(scene_seed, spec, h, w)
        image_rel = f"images/{i:06d}.png"
        label_rel = f"labels/{i:06d}.png"
        save_image(directory / image_rel, scene.image)
        save_labels(directory / label_rel, scene.labels)
        entries.append(CorpusEntry(i, image_rel, label_rel, scene_seed))
        lines.append(f"{i:06d} {image_rel} {label_rel} {scene_seed}")
    (directory / "manifest.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return entries


def read_manifest(directory) -> list:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise CorpusError(f"{directory}: no manifest.txt")
    entries = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CorpusError(f"{manifest}:{line_no}: expected 4 fields, got {len(parts)}")
        entries.append(CorpusEntry(int(parts[0]), parts[1], parts[2], int(parts[3])))
    return entries


def load_corpus(directory, num_classes: int) -> list:
    """Load every manifest entry into memory as ScenePairs."""
    directory = Path(directory)
    pairs = []
    for entry in read_manifest(directory):
        image = load_image(directory / entry.image_path)
        labels = load_labels(directory / entry.label_path, num_classes)
        if labels.shape[1:] != image.shape[2:]:
            raise CorpusError(
                f"{directory}: entry {entry.index} image/label dims differ"
            )
        pairs.append(ScenePair(image, labels))
    return pairs


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass(frozen=True)
class ClassStats:
    present: bool
    mean_rgb: tuple
    std_rgb: tuple
    grad_energy: float
    pixel_count: int


def domain_stats(corpus: list) -> dict:
    """Per-class color mean/std and mean gradient energy over class pixels.

    Classes absent from the corpus are flagged with present=False.
    """
    if not corpus:
        raise ValueError("domain_stats: empty corpus")
    num_classes = corpus[0].labels.num_classes
    sums = np.zeros((num_classes, 3))
    squares = np.zeros((num_classes, 3))
    energy = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    filters = sobel_pair()
    for scene in corpus:
        img = scene.image.data[0].astype(np.float64)
        lab = scene.labels.data[0]
        gm = gradient_magnitude(scene.image, filters).data[0, 0].astype(np.float64)
        for c in range(num_classes):
            region = lab == c
            n = int(region.sum())
            if n == 0:
                continue
            counts[c] += n
            sums[c] += img[:, region].sum(axis=1)
            squares[c] += (img[:, region] ** 2).sum(axis=1)
            energy[c] += gm[region].sum()
    stats = {}
    for c in range(num_classes):
        if counts[c] == 0:
            stats[c] = ClassStats(False, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0, 0)
            continue
        mean = sums[c] / counts[c]
        var = np.maximum(squares[c] / counts[c] - mean ** 2, 0.0)
        stats[c] = ClassStats(True, tuple(mean), tuple(np.sqrt(var)),
                              float(energy[c] / counts[c]), int(counts[c]))
    return stats
