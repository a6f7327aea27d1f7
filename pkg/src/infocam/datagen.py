"""Double-digit dataset synthesis and MNIST-style IDX ingestion.

Each synthesized image is a 28x56 canvas with two fixed 28x28 slots. Slot
occupancy is Bernoulli(p) per side, resampled until at least one slot is
occupied; an occupied slot receives a uniformly chosen class and then a
uniformly chosen source image of that class. Ground truth per digit is the
tight box around its nonzero pixels, offset by the slot origin.

Source images come either from IDX files (the standard distribution format)
or, when those are unavailable, from a deterministic procedural stroke
renderer with ten distinct glyph classes. All randomness flows through
numpy's PCG64 so datasets are reproducible bit for bit from the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrayio import Manifest, load_manifest, save_manifest, write_array
from .boxes import Box, SPACE_IMAGE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CANVAS_H, CANVAS_W = 28, 56
SLOT_W = 28
NUM_DIGITS = 10


class IdxFormatError(Exception):
    """IDX file is malformed or the image/label files disagree."""


@dataclass
class MnistSource:
    """Grayscale digit images in [0,1] with integer labels 0-9."""

    images: np.ndarray  # (N, 28, 28) float64
    labels: np.ndarray  # (N,) int64

    def __post_init__(self) -> None:
        if self.images.ndim != 3 or self.images.shape[0] == 0:
            raise ValueError("source needs a non-empty (N,28,28) image array")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixels must lie in [0,1]")
        if self.labels.min() < 0 or self.labels.max() > 9:
            raise ValueError("labels must be digits 0-9")

    def by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == d) for d in range(NUM_DIGITS)]


def load_idx(images_path: str | Path, labels_path: str | Path) -> MnistSource:
    """Read the big-endian IDX image/label pair, scaling pixels by 1/255."""
    with open(images_path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{images_path}: header cut short")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic {magic:#010x}")
        payload = fh.read(count * rows * cols)
        if len(payload) < count * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel data")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{labels_path}: header cut short")
        magic, lcount = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic {magic:#010x}")
        if lcount != count:
            raise IdxFormatError(
                f"label count {lcount} != image count {count}"
            )
        labels = np.frombuffer(fh.read(lcount), dtype=np.uint8)
        if labels.size < lcount:
            raise IdxFormatError(f"{labels_path}: truncated labels")
    return MnistSource(
        images=images.astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Procedural glyph source
# ---------------------------------------------------------------------------

def _arc(cx, cy, rx, ry, a0, a1, n=14):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _glyph_strokes() -> list[list[np.ndarray]]:
    """Polyline strokes per digit class, in a unit design box (y down)."""
    pts = lambda *xy: np.asarray(xy, dtype=np.float64)
    return [
        [_arc(0.50, 0.50, 0.30, 0.40, 0, 360, 22)],                       # 0
        [pts((0.34, 0.24), (0.54, 0.08), (0.54, 0.92))],                  # 1
        [np.concatenate([_arc(0.50, 0.32, 0.28, 0.24, 180, 360),
                         pts((0.78, 0.32), (0.22, 0.90), (0.78, 0.90))])],  # 2
        [_arc(0.48, 0.30, 0.28, 0.21, 210, 450),
         _arc(0.48, 0.70, 0.30, 0.22, 270, 510)],                          # 3
        [pts((0.60, 0.08), (0.20, 0.62), (0.84, 0.62)),
         pts((0.60, 0.34), (0.60, 0.92))],                                 # 4
        [pts((0.78, 0.10), (0.26, 0.10), (0.23, 0.46)),
         _arc(0.46, 0.66, 0.32, 0.25, 270, 452),
         pts((0.46, 0.91), (0.20, 0.86))],                                 # 5
        [pts((0.64, 0.08), (0.34, 0.48)),
         _arc(0.50, 0.66, 0.28, 0.25, 0, 360, 20)],                        # 6
        [pts((0.20, 0.12), (0.80, 0.12), (0.42, 0.92))],                   # 7
        [_arc(0.50, 0.30, 0.23, 0.20, 0, 360, 18),
         _arc(0.50, 0.72, 0.27, 0.22, 0, 360, 18)],                        # 8
        [_arc(0.50, 0.34, 0.26, 0.24, 0, 360, 18),
         pts((0.76, 0.36), (0.66, 0.92))],                                 # 9
    ]


_STROKES = _glyph_strokes()
_PIXEL_GRID = np.stack(
    np.meshgrid(np.arange(28) + 0.5, np.arange(28) + 0.5, indexing="xy"),
    axis=-1,
).reshape(-1, 2)  # (784, 2) pixel centers as (x, y)


def _render_strokes(strokes: list[np.ndarray], half_width: float,
                    peak: float) -> np.ndarray:
    """Distance-field rasterization of polylines onto a 28x28 grid."""
    dmin = np.full(28 * 28, np.inf)
    for line in strokes:
        a = line[:-1]
        b = line[1:]
        ab = b - a  # (S,2)
        denom = (ab * ab).sum(axis=1)
        denom[denom == 0] = 1e-12
        ap = _PIXEL_GRID[:, None, :] - a[None, :, :]  # (P,S,2)
        t = np.clip((ap * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(_PIXEL_GRID[:, None, :] - closest, axis=2)
        dmin = np.minimum(dmin, d.min(axis=1))
    soft = 0.9
    intensity = np.clip((half_width + soft - dmin) / soft, 0.0, 1.0) * peak
    return intensity.reshape(28, 28)


def glyph_source(count: int, seed: int) -> MnistSource:
    """Procedural ten-class digit stand-in: jittered affine stroke renders.

    Used when real IDX files are not available. Classes cycle so every class
    appears floor/ceil(count/10) times. Per-sample variation is deliberately
    wide (rotation, shear, anisotropic scale, translation, per-point jitter,
    low-frequency stroke wobble, width, and intensity) so classifiers face
    handwriting-like intra-class spread rather than template matching.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, 28, 28))
    labels = np.zeros(count, dtype=np.int64)
    design_scale = 23.0
    for i in range(count):
        digit = i % NUM_DIGITS
        labels[i] = digit
        theta = rng.uniform(-0.24, 0.24)
        shear = rng.uniform(-0.18, 0.18)
        sx = rng.uniform(0.85, 1.1)
        sy = rng.uniform(0.85, 1.1)
        dx, dy = rng.uniform(-1.2, 1.2, size=2)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        aff = rot @ np.array([[sx, shear * sy], [0.0, sy]]) * design_scale
        strokes = []
        for line in _STROKES[digit]:
            centered = line - 0.5
            moved = centered @ aff.T
            moved += np.array([14.0 + dx, 14.0 + dy])
            # low-frequency wobble along a random direction, handwriting-like
            amp = rng.uniform(0.0, 0.7)
            phase = rng.uniform(0.0, 2 * np.pi)
            freq = rng.uniform(0.4, 1.0)
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            wave = amp * np.sin(freq * np.arange(len(moved)) + phase)
            moved = moved + wave[:, None] * direction[None, :]
            moved += rng.normal(0.0, 0.42, size=moved.shape)
            strokes.append(moved)
        half_width = rng.uniform(0.6, 1.1)
        peak = rng.uniform(0.65, 1.0)
        images[i] = _render_strokes(strokes, half_width, peak)
    return MnistSource(images=images, labels=labels)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    count: int = 1000
    p_slot: float = 0.7

    def __post_init__(self) -> None:
        if not 0 < self.p_slot < 1:
            raise ValueError("slot probability must lie strictly in (0,1)")
        if self.count < 1:
            raise ValueError("count must be positive")


@dataclass
class MultiSample:
    """One canvas: image, per-digit presence, per-digit tight boxes."""

    image: np.ndarray  # (28, 56) float64
    present: np.ndarray  # (10,) int64 0/1
    boxes: list[tuple[int, Box]]  # (digit, tight box in image pixels)
    slots: tuple[int | None, int | None]  # digit occupying (left, right)


def sample_occupancy(rng: np.random.Generator, p_slot: float) -> tuple[bool, bool]:
    """Draw (left, right) occupancy, rejecting the both-empty outcome."""
    while True:
        left = rng.random() < p_slot
        right = rng.random() < p_slot
        if left or right:
            return left, right


def tight_box(digit_image: np.ndarray, x_offset: int) -> Box:
    """Smallest box containing every strictly positive pixel."""
    rows, cols = np.nonzero(digit_image > 0)
    if rows.size == 0:
        raise ValueError("digit image has no nonzero pixels")
    return Box(
        x0=float(cols.min() + x_offset),
        y0=float(rows.min()),
        x1=float(cols.max() + 1 + x_offset),
        y1=float(rows.max() + 1),
        space=SPACE_IMAGE,
    )


def synthesize(src: MnistSource, cfg: SynthConfig) -> list[MultiSample]:
    """Generate `cfg.count` canvases; deterministic for a fixed seed.

    Per occupied slot the RNG draws, in order: occupancy pair (with
    rejection), left class, left image index, right class, right image
    index. Both slots may hold the same class.
    """
    rng = np.random.default_rng(cfg.seed)
    class_indices = src.by_class()
    for d, idx in enumerate(class_indices):
        if idx.size == 0:
            raise ValueError(f"source has no images of digit {d}")
    out: list[MultiSample] = []
    for _ in range(cfg.count):
        left, right = sample_occupancy(rng, cfg.p_slot)
        image = np.zeros((CANVAS_H, CANVAS_W))
        present = np.zeros(NUM_DIGITS, dtype=np.int64)
        boxes: list[tuple[int, Box]] = []
        slots: list[int | None] = [None, None]
        for slot_idx, occupied in enumerate((left, right)):
            if not occupied:
                continue
            digit = int(rng.integers(NUM_DIGITS))
            pool = class_indices[digit]
            src_idx = int(pool[rng.integers(pool.size)])
            glyph = src.images[src_idx]
            x_off = slot_idx * SLOT_W
            image[:, x_off : x_off + SLOT_W] = glyph
            present[digit] = 1
            boxes.append((digit, tight_box(glyph, x_off)))
            slots[slot_idx] = digit
        out.append(MultiSample(image=image, present=present, boxes=boxes,
                               slots=(slots[0], slots[1])))
    return out


def localization_eval_set(
    samples: list[MultiSample], target_digit: int
) -> list[tuple[int, MultiSample, list[Box]]]:
    """Samples containing the target digit, paired with its GT boxes."""
    if not 0 <= target_digit < NUM_DIGITS:
        raise ValueError("target digit must be 0-9")
    out = []
    for i, s in enumerate(samples):
        gt = [b for d, b in s.boxes if d == target_digit]
        if gt:
            out.append((i, s, gt))
    if not out:
        raise ValueError(f"no sample contains digit {target_digit}")
    return out


# ---------------------------------------------------------------------------
# Dataset on disk: packed image file + manifest
# ---------------------------------------------------------------------------

def write_dataset(out_dir: str | Path, samples: list[MultiSample],
                  dtype: str = "f4") -> Path:
    """Write a packed (N,1,28,56) image file plus the sample manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    packed = np.stack([s.image for s in samples])[:, None, :, :]
    write_array(out_dir / "images.npy", packed, dtype=dtype)
    entries = []
    for i, s in enumerate(samples):
        labels = [d for d, _ in s.boxes]
        gt = [b.corners() for _, b in s.boxes]
        entries.append({
            "id": f"sample{i:06d}",
            "features": "images.npy",
            "index": i,
            "image_size": [CANVAS_H, CANVAS_W],
            "labels": labels,
            "gt_boxes": gt,
        })
    doc = {"samples": entries, "num_classes": NUM_DIGITS}
    path = out_dir / "manifest.json"
    save_manifest(path, doc)
    return path


def read_dataset(manifest_path: str | Path) -> tuple[np.ndarray, np.ndarray, Manifest]:
    """Load a packed dataset: images (N,1,H,W), presence matrix (N,10)."""
    from .arrayio import read_array as _read

    man = load_manifest(manifest_path)
    if not man.samples:
        raise ValueError("dataset manifest has no samples")
    presence = np.zeros((len(man.samples), man.num_classes), dtype=np.int64)
    for i, entry in enumerate(man.samples):
        for lab in entry.labels:
            presence[i, lab] = 1
    first = man.samples[0]
    # Common fast path: every sample indexes row i of one packed file.
    if first.index is not None and all(
        e.features == first.features and e.index == i
        for i, e in enumerate(man.samples)
    ):
        packed = _read(man.resolve(first.features))
        if packed.shape[0] != len(man.samples):
            raise ValueError("packed file row count != sample count")
        return packed, presence, man
    images = [man.load_features(e) for e in man.samples]
    return np.stack(images), presence, man
