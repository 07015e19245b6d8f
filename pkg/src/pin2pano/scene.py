"""Synthetic spherical road scenes and the two camera models that view them.

A scene is a stack of class-labeled angular regions on the unit sphere.
Rendering the same scene through a narrow-FoV pinhole camera and through a
full equirectangular camera yields a paired source/target domain with a
controlled geometric and photometric shift: identical semantics, different
projection, plus per-render pixel noise.

Conventions (used everywhere in this package):
  - Right-handed camera frame: +z forward, +x right, +y down.
  - yaw about +y (positive turns toward +x), pitch about +x (positive looks
    down toward +y).
  - Pixel coordinates are continuous; the center of pixel (i, j) is
    (u, v) = (j + 0.5, i + 0.5).  Functions never add the half-pixel offset
    themselves.
  - Equirectangular images span yaw in [-pi, pi) left to right and pitch in
    [-pi/2, pi/2] top to bottom.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .palette import IGNORE_INDEX, NUM_CLASSES, PAIR_AXIS, RENDER_COLORS

PINHOLE = "pinhole"
EQUIRECTANGULAR = "equirectangular"
SOURCE = "source"
TARGET = "target"

_KIND_CODE = {PINHOLE: 1, EQUIRECTANGULAR: 2}

# Appearance half of the synthetic domain gap (the geometric half comes from
# the projection itself): the panoramic rig runs a warmer white balance, a
# fixed color offset of half the palette's pair axis.  The offset is a pure
# translation in color space, so within-domain class separability is
# untouched, but it slides each close pair's first member halfway toward its
# partner's pinhole anchor -- onto the decision boundary a pinhole-trained
# classifier draws between the pair.  A single boundary at 3/4 of the axis
# still separates both domains' pairs, so the gap is closable by boundary
# placement alone; a source-only model simply has no reason to place it
# there.
PANORAMIC_OFFSET = (0.5 * PAIR_AXIS).astype(np.float32).reshape(3, 1, 1)
RENDER_SIGMA = 0.05

# Class ids of the background layers every scene contains.
_SKY = 10
_TERRAIN = 9
_VEGETATION = 8
_ROAD = 0
_SIDEWALK = 1
_BUILDING = 2
_BASE_VISIBLE = (_SKY, _TERRAIN, _VEGETATION, _ROAD, _SIDEWALK)
_BLOCK_POOL = tuple(
    c
    for c in range(NUM_CLASSES)
    if c not in (_SKY, _TERRAIN, _VEGETATION, _ROAD, _SIDEWALK, _BUILDING)
)


@dataclass(frozen=True)
class CameraSpec:
    """A pinhole or equirectangular camera.

    Both kinds use square pixels in their native measure.  Pinhole:
    horizontal_fov (radians) sets the focal length and the vertical extent
    follows from the width/height ratio.  Equirectangular: pixels are square
    in ANGLE (yaw step = pitch step = 2*pi/width), so width always spans the
    full 360 degrees of yaw while height spans (height/width)*360 degrees of
    pitch centered on the horizon -- width = 2*height is the full sphere and
    anything wider is a vertically cropped panorama, which is how street
    panoramas are published.
    """

    kind: str
    width: int
    height: int
    horizontal_fov: float | None = None

    def __post_init__(self):
        if self.kind not in (PINHOLE, EQUIRECTANGULAR):
            raise ValueError(f"unknown camera kind: {self.kind!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera dims must be positive")
        if self.kind == PINHOLE:
            if self.horizontal_fov is None:
                raise ValueError("pinhole camera requires horizontal_fov")
            if not 0.0 < self.horizontal_fov < math.pi:
                raise ValueError("pinhole fov must lie in (0, pi)")
        elif self.width < 2 * self.height:
            raise ValueError(
                "equirectangular cameras need width >= 2*height "
                "(the pitch crop cannot exceed the sphere)"
            )

    @property
    def focal(self) -> float:
        if self.kind != PINHOLE:
            raise ValueError("focal length is defined for pinhole cameras only")
        return (self.width / 2.0) / math.tan(self.horizontal_fov / 2.0)


@dataclass(frozen=True)
class ScenePrimitive:
    """One angular region: a yaw interval x pitch interval patch of the sphere.

    The yaw interval may wrap around the -pi/pi seam (yaw_lo > yaw_hi means
    the patch crosses the seam).  Higher priority paints over lower.
    """

    class_id: int
    yaw_lo: float
    yaw_hi: float
    pitch_lo: float
    pitch_hi: float
    priority: int


@dataclass(frozen=True)
class SphericalScene:
    seed: int
    primitives: tuple[ScenePrimitive, ...]


@dataclass
class Sample:
    """An image with optional per-pixel labels and a domain tag."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray | None  # (H, W) int64 in {0..18, 255}
    domain: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError("image must be (3, H, W)")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain tag: {self.domain!r}")
        if self.labels is not None:
            if self.labels.shape != self.image.shape[1:]:
                raise ValueError("labels and image dims must match")
            bad = (self.labels < 0) | (
                (self.labels >= NUM_CLASSES) & (self.labels != IGNORE_INDEX)
            )
            if bad.any():
                raise ValueError("labels must lie in {0..18, 255}")


def _wrap_yaw(yaw):
    """Wrap angles into [-pi, pi)."""
    return (yaw + math.pi) % (2.0 * math.pi) - math.pi


def _sector_bounds(rng, n: int) -> np.ndarray:
    """n+1 increasing yaw boundaries spanning [-pi, pi] with jittered widths."""
    cuts = np.sort(rng.uniform(-math.pi, math.pi, size=n - 1))
    return np.concatenate(([-math.pi], cuts, [math.pi]))


def _sector_classes(rng, n: int, a: int, b: int, p_a: float) -> list[int]:
    """n class ids drawn from {a, b}; for n >= 2 both are guaranteed to appear."""
    classes = [a if rng.random() < p_a else b for _ in range(n)]
    if n >= 2 and len(set(classes)) == 1:
        missing = b if classes[0] == a else a
        classes[int(rng.integers(0, n))] = missing
    return classes


def generate_scene(seed: int, complexity: int) -> SphericalScene:
    """Procedurally build a deterministic scene with >= min(complexity, 19) classes.

    Layout, from the sky down: a sky band; a mid band split into random yaw
    sectors of terrain or vegetation; a ground band split into random yaw
    sectors of road or sidewalk; decorative clutter blocks; then one
    guaranteed building block plus enough distinct-class blocks (in disjoint
    yaw slots, painted last) to reach the requested class count.

    The two sector bands are the point of the design: which sector holds
    which class of a close pair (road/sidewalk, terrain/vegetation) is
    random, so pair membership is decidable only from color, never from
    position or region shape.
    """
    if complexity < 1:
        raise ValueError("complexity must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xA5CE)))
    prims: list[ScenePrimitive] = []

    def add(class_id, yaw_lo, yaw_hi, pitch_lo, pitch_hi):
        prims.append(
            ScenePrimitive(
                int(class_id),
                float(yaw_lo),
                float(yaw_hi),
                float(pitch_lo),
                float(pitch_hi),
                len(prims),
            )
        )

    horizon = rng.uniform(0.04, 0.16)
    road_top = horizon + rng.uniform(0.10, 0.22)
    add(_SKY, -math.pi, math.pi, -math.pi / 2, math.pi / 2)

    # Mid band: terrain/vegetation sectors between horizon and road_top.
    n_mid = int(rng.integers(3, 7))
    bounds = _sector_bounds(rng, n_mid)
    for cid, lo, hi in zip(
        _sector_classes(rng, n_mid, _TERRAIN, _VEGETATION, 0.55), bounds, bounds[1:]
    ):
        add(cid, lo, hi, horizon, math.pi / 2)

    # Ground band: road/sidewalk sectors from road_top to the nadir.
    n_ground = int(rng.integers(4, 9))
    bounds = _sector_bounds(rng, n_ground)
    for cid, lo, hi in zip(
        _sector_classes(rng, n_ground, _ROAD, _SIDEWALK, 0.6), bounds, bounds[1:]
    ):
        add(cid, lo, hi, road_top, math.pi / 2)

    # Distinct-class blocks: building first, then a seeded draw from the pool.
    distinct_target = min(complexity, NUM_CLASSES)
    n_blocks = max(1, distinct_target - len(_BASE_VISIBLE))
    pool = rng.permutation(np.array(_BLOCK_POOL))
    block_classes = [_BUILDING] + [int(c) for c in pool[: n_blocks - 1]]

    # Decorative blocks (may be painted over later; add clutter only).
    for _ in range(complexity):
        cid = block_classes[int(rng.integers(0, len(block_classes)))]
        center = rng.uniform(-math.pi, math.pi)
        half = rng.uniform(0.08, 0.25)
        top = -rng.uniform(0.15, 0.85)
        bottom = horizon - rng.uniform(0.02, 0.05)
        add(cid, _wrap_yaw(center - half), _wrap_yaw(center + half), top, bottom)

    # Mandatory blocks in disjoint yaw slots, painted last so each stays visible.
    slot = 2.0 * math.pi / len(block_classes)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    for i, cid in enumerate(block_classes):
        lo = -math.pi + i * slot
        width = slot * rng.uniform(0.35, 0.8)
        off = rng.uniform(0.0, slot - width)
        top = -rng.uniform(0.25, 0.8)
        bottom = horizon - rng.uniform(0.02, 0.05)
        add(
            cid,
            _wrap_yaw(lo + off + phase),
            _wrap_yaw(lo + off + width + phase),
            top,
            bottom,
        )

    return SphericalScene(seed=int(seed), primitives=tuple(prims))


def pixel_to_direction(cam: CameraSpec, u, v) -> np.ndarray:
    """Map continuous pixel coordinates to unit view directions.

    Accepts scalars or equally shaped arrays; returns shape (..., 3).
    Pixel centers sit at integer + 0.5; no offset is added here.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= cam.width) or np.any(v < 0) or np.any(v >= cam.height):
        raise ValueError("pixel coordinates out of bounds")
    if cam.kind == EQUIRECTANGULAR:
        step = 2.0 * math.pi / cam.width  # square angular pixels
        yaw = u * step - math.pi
        pitch = (v - cam.height / 2.0) * step
        cp = np.cos(pitch)
        d = np.stack([np.sin(yaw) * cp, np.sin(pitch), np.cos(yaw) * cp], axis=-1)
        return d
    x = (u - cam.width / 2.0) / cam.focal
    y = (v - cam.height / 2.0) / cam.focal
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def direction_to_pixel(cam: CameraSpec, d) -> tuple[float, float] | None:
    """Invert pixel_to_direction for a single unit direction.

    Returns continuous (u, v), or None for directions outside the frame:
    beyond the pinhole frustum, or beyond the vertical crop of a wider-than-
    full-sphere panorama.  A full-sphere panorama (width = 2*height) covers
    everything except that the exact south pole maps to v = height (the open
    edge of the pixel domain).
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3,):
        raise ValueError("direction must be a 3-vector")
    norm = float(np.linalg.norm(d))
    if norm < 1e-12:
        raise ValueError("zero direction vector")
    d = d / norm
    if cam.kind == EQUIRECTANGULAR:
        step = 2.0 * math.pi / cam.width
        yaw = math.atan2(d[0], d[2])
        pitch = math.asin(min(1.0, max(-1.0, float(d[1]))))
        u = (yaw + math.pi) / step
        v = pitch / step + cam.height / 2.0
        if u >= cam.width:  # yaw == pi wraps to the u = 0 seam
            u -= cam.width
        if v < 0.0 or v > cam.height:
            return None
        return (float(u), float(v))
    if d[2] <= 0.0:
        return None
    u = float(d[0] / d[2] * cam.focal + cam.width / 2.0)
    v = float(d[1] / d[2] * cam.focal + cam.height / 2.0)
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return (u, v)


def pixel_center_directions(cam: CameraSpec) -> np.ndarray:
    """Unit directions of all pixel centers, shaped (H, W, 3)."""
    u = (np.arange(cam.width, dtype=np.float64) + 0.5)[None, :].repeat(cam.height, axis=0)
    v = (np.arange(cam.height, dtype=np.float64) + 0.5)[:, None].repeat(cam.width, axis=1)
    return pixel_to_direction(cam, u, v)


def classify_directions(scene: SphericalScene, dirs: np.ndarray) -> np.ndarray:
    """Class id of each direction: the highest-priority primitive containing it."""
    dirs = np.asarray(dirs, dtype=np.float64)
    yaw = np.arctan2(dirs[..., 0], dirs[..., 2])
    pitch = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    labels = np.full(yaw.shape, -1, dtype=np.int64)
    for prim in sorted(scene.primitives, key=lambda p: p.priority):
        in_pitch = (pitch >= prim.pitch_lo) & (pitch <= prim.pitch_hi)
        if prim.yaw_lo <= prim.yaw_hi:
            in_yaw = (yaw >= prim.yaw_lo) & (yaw <= prim.yaw_hi)
        else:  # interval wraps the -pi/pi seam
            in_yaw = (yaw >= prim.yaw_lo) | (yaw <= prim.yaw_hi)
        labels[in_pitch & in_yaw] = prim.class_id
    if (labels < 0).any():
        raise ValueError("scene does not cover the full sphere")
    return labels


def render(scene: SphericalScene, cam: CameraSpec) -> Sample:
    """Render labels by exact per-pixel direction lookup plus noisy flat colors.

    Pure function of (scene, cam): image noise is seeded from the scene seed
    and the camera geometry.  Equirectangular renders pass through a fixed
    photometric response (PANORAMIC_OFFSET) before sensor noise, so the two
    domains differ in appearance as well as in geometry; the offset is a pure
    translation in color space, so within-domain class separability is
    untouched.
    """
    dirs = pixel_center_directions(cam)
    labels = classify_directions(scene, dirs)
    image = RENDER_COLORS[labels].transpose(2, 0, 1).astype(np.float32)
    if cam.kind == EQUIRECTANGULAR:
        image = image + PANORAMIC_OFFSET
    rng = np.random.default_rng(
        np.random.SeedSequence((scene.seed, _KIND_CODE[cam.kind], cam.width, cam.height))
    )
    noise = rng.normal(0.0, RENDER_SIGMA, size=image.shape).astype(np.float32)
    image = np.clip(image + noise, 0.0, 1.0)
    domain = SOURCE if cam.kind == PINHOLE else TARGET
    return Sample(image=image, labels=labels, domain=domain)


def load_labeled_pair(image_path, label_path, domain: str = SOURCE) -> Sample:
    """Load an 8-bit RGB image and its single-channel trainID label raster.

    Label values outside {0..18} become 255 (ignore).  Mismatched dims are a
    format error; unreadable files surface as OSError.
    """
    with Image.open(image_path) as im:
        if im.mode != "RGB":
            im = im.convert("RGB")
        image = np.asarray(im, dtype=np.uint8)
    with Image.open(label_path) as lm:
        if lm.mode != "L":
            raise ValueError(f"label raster must be 8-bit single-channel: {label_path}")
        labels = np.asarray(lm, dtype=np.int64)
    if image.shape[:2] != labels.shape:
        raise ValueError(
            f"image dims {image.shape[:2]} != label dims {labels.shape}: format error"
        )
    labels = labels.copy()
    labels[labels >= NUM_CLASSES] = IGNORE_INDEX
    img = image.astype(np.float32).transpose(2, 0, 1) / 255.0
    return Sample(image=img, labels=labels, domain=domain)


def save_sample(sample: Sample, image_path, label_path=None) -> None:
    """Write a sample as 8-bit PNGs (RGB image, single-channel labels)."""
    arr = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(image_path)
    if label_path is not None:
        if sample.labels is None:
            raise ValueError("sample has no labels to save")
        Image.fromarray(sample.labels.astype(np.uint8), mode="L").save(label_path)


def write_split(root, split: str, samples: list[Sample]) -> dict:
    """Write `<root>/<split>/{images,labels}/NNNN.png`; returns manifest entry."""
    base = Path(root) / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "labels").mkdir(parents=True, exist_ok=True)
    domains = {s.domain for s in samples}
    if len(domains) != 1:
        raise ValueError("a split must hold a single domain")
    for i, s in enumerate(samples):
        save_sample(
            s,
            base / "images" / f"{i:04d}.png",
            base / "labels" / f"{i:04d}.png" if s.labels is not None else None,
        )
    return {"count": len(samples), "domain": samples[0].domain}


def write_manifest(root, manifest: dict) -> None:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def load_split(root, split: str, domain: str | None = None) -> list[Sample]:
    """Load every image/label pair of a split, ordered by filename.

    The domain tag comes from `<root>/manifest.json` unless given explicitly.
    """
    base = Path(root) / split
    if domain is None:
        manifest = read_manifest(root)
        domain = manifest["splits"][split]["domain"]
    images = sorted((base / "images").glob("*.png"))
    if not images:
        raise FileNotFoundError(f"no images under {base / 'images'}")
    out = []
    for img in images:
        lbl = base / "labels" / img.name
        if lbl.exists():
            out.append(load_labeled_pair(img, lbl, domain=domain))
        else:
            with Image.open(img) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            out.append(
                Sample(
                    image=arr.astype(np.float32).transpose(2, 0, 1) / 255.0,
                    labels=None,
                    domain=domain,
                )
            )
    return out
