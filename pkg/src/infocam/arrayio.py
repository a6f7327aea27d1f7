"""Dense-array interchange format and sample manifests.

Arrays travel between the trainer, the localization pipeline, and external
exporters as NPY v1.0 files (little-endian, C-order, float32/float64 only).
In-core everything is float64. A manifest is a JSON document tying sample
feature files, labels, ground-truth boxes, and the classifier head together.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
_DESCR_TO_DTYPE = {"<f4": np.float32, "<f8": np.float64}


class ArrayIOError(Exception):
    """Base class for array-file failures."""


class BadMagicError(ArrayIOError):
    """File does not start with the NPY magic bytes."""


class UnsupportedFormatError(ArrayIOError):
    """NPY version, dtype, or byte order outside the supported subset."""


class TruncatedPayloadError(ArrayIOError):
    """Payload shorter (or longer) than the header-declared shape."""


class NonFiniteDataError(ArrayIOError):
    """Loaded payload contains NaN or Inf."""


class ManifestError(Exception):
    """Manifest document is malformed or inconsistent with its files."""


def write_array(path: str | Path, a: np.ndarray, dtype: str = "f8") -> None:
    """Write `a` as an NPY v1.0 file with dtype 'f4' or 'f8'.

    float64 -> float32 narrowing uses IEEE round-to-nearest-even (numpy's
    astype), so narrow round-trips stay within 1 ULP of float32.
    """
    if dtype not in ("f4", "f8"):
        raise ValueError(f"dtype must be 'f4' or 'f8', got {dtype!r}")
    a = np.ascontiguousarray(a, dtype=np.float64)
    out = a.astype("<f4") if dtype == "f4" else a.astype("<f8")
    header = "{'descr': '<%s', 'fortran_order': False, 'shape': %s, }" % (
        dtype,
        _shape_repr(a.shape),
    )
    # Pad with spaces so magic+version+len+header is a multiple of 64,
    # newline-terminated, as the format prescribes.
    base = len(NPY_MAGIC) + 2 + 2
    pad = 64 - (base + len(header) + 1) % 64
    header_bytes = (header + " " * (pad % 64) + "\n").encode("latin1")
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(out.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    """Read an NPY v1.0 file written by `write_array` (or numpy).

    Returns a C-contiguous float64 array; float32 payloads are widened.
    Raises BadMagicError / UnsupportedFormatError / TruncatedPayloadError /
    NonFiniteDataError, each for its own failure mode.
    """
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != NPY_MAGIC:
            raise BadMagicError(f"{path}: not an NPY file (magic {magic!r})")
        version = fh.read(2)
        if len(version) < 2:
            raise TruncatedPayloadError(f"{path}: header cut short")
        if version != b"\x01\x00":
            raise UnsupportedFormatError(
                f"{path}: NPY version {version[0]}.{version[1]} unsupported"
            )
        raw_len = fh.read(2)
        if len(raw_len) < 2:
            raise TruncatedPayloadError(f"{path}: header cut short")
        (header_len,) = struct.unpack("<H", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise TruncatedPayloadError(f"{path}: header cut short")
        try:
            header = ast.literal_eval(header_bytes.decode("latin1").strip())
        except (ValueError, SyntaxError) as exc:
            raise UnsupportedFormatError(f"{path}: unparsable header") from exc
        descr = header.get("descr")
        if descr not in _DESCR_TO_DTYPE:
            raise UnsupportedFormatError(f"{path}: dtype {descr!r} unsupported")
        if header.get("fortran_order"):
            raise UnsupportedFormatError(f"{path}: fortran_order not supported")
        shape = header.get("shape")
        if not isinstance(shape, tuple) or not all(
            isinstance(n, int) and n >= 0 for n in shape
        ):
            raise UnsupportedFormatError(f"{path}: bad shape {shape!r}")
        dtype = _DESCR_TO_DTYPE[descr]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read()
        expected = count * np.dtype(dtype).itemsize
        if len(payload) != expected:
            raise TruncatedPayloadError(
                f"{path}: payload {len(payload)} bytes, expected {expected}"
            )
        a = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"))
        a = a.reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise NonFiniteDataError(f"{path}: payload contains NaN/Inf")
        return a


def _shape_repr(shape: tuple[int, ...]) -> str:
    if len(shape) == 1:
        return f"({shape[0]},)"
    return "(" + ", ".join(str(n) for n in shape) + ")"


@dataclass
class SampleEntry:
    """One manifest sample: a feature (or image) stack plus its labels/boxes."""

    id: str
    features: str
    image_size: tuple[int, int]
    labels: list[int]
    gt_boxes: list[list[float]]
    index: int | None = None  # row within a rank-4 features file
    logits: str | None = None  # exporter-recorded logits for cross-checks


@dataclass
class Manifest:
    """Validated manifest; paths are resolved relative to the document."""

    root: Path
    samples: list[SampleEntry]
    num_classes: int
    weights: str | None = None
    bias: str | None = None
    extra: dict = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_features(self, entry: SampleEntry) -> np.ndarray:
        """Feature stack (K,H,W) for one sample, slicing packed files."""
        a = read_array(self.resolve(entry.features))
        if a.ndim == 4:
            if entry.index is None:
                raise ManifestError(
                    f"sample {entry.id}: rank-4 features need an 'index'"
                )
            return np.ascontiguousarray(a[entry.index])
        return a

    def load_weights(self) -> np.ndarray | None:
        return None if self.weights is None else read_array(self.resolve(self.weights))

    def load_bias(self) -> np.ndarray | None:
        return None if self.bias is None else read_array(self.resolve(self.bias))


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest JSON document.

    Every referenced array file must exist and agree with the declared
    use: features rank-3 (K,H,W) or rank-4 (N,K,H,W), weights rank-2 (M,K)
    with M == num_classes. Packed rank-4 files are header-checked once.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot read manifest: {exc}") from exc
    if not isinstance(doc, dict) or "samples" not in doc:
        raise ManifestError(f"{path}: manifest must be an object with 'samples'")
    if "num_classes" not in doc:
        raise ManifestError(f"{path}: missing 'num_classes'")
    root = path.parent
    num_classes = int(doc["num_classes"])

    samples: list[SampleEntry] = []
    shape_cache: dict[str, tuple[int, ...]] = {}

    def _shape_of(rel: str) -> tuple[int, ...]:
        if rel not in shape_cache:
            target = root / rel
            if not target.exists():
                raise ManifestError(f"{path}: dangling file path {rel!r}")
            shape_cache[rel] = peek_shape(target)
        return shape_cache[rel]

    for i, raw in enumerate(doc["samples"]):
        try:
            entry = SampleEntry(
                id=str(raw["id"]),
                features=str(raw["features"]),
                image_size=(int(raw["image_size"][0]), int(raw["image_size"][1])),
                labels=[int(v) for v in raw["labels"]],
                gt_boxes=[[float(v) for v in b] for b in raw.get("gt_boxes", [])],
                index=int(raw["index"]) if "index" in raw else None,
                logits=str(raw["logits"]) if "logits" in raw else None,
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ManifestError(f"{path}: sample #{i} malformed: {exc}") from exc
        shape = _shape_of(entry.features)
        if len(shape) == 3:
            if entry.index is not None:
                raise ManifestError(
                    f"{path}: sample {entry.id}: 'index' on a rank-3 file"
                )
        elif len(shape) == 4:
            if entry.index is None or not 0 <= entry.index < shape[0]:
                raise ManifestError(
                    f"{path}: sample {entry.id}: index outside packed file"
                )
        else:
            raise ManifestError(
                f"{path}: sample {entry.id}: features must be rank 3 or 4, "
                f"got shape {shape}"
            )
        for b in entry.gt_boxes:
            if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
                raise ManifestError(
                    f"{path}: sample {entry.id}: degenerate gt box {b}"
                )
        if any(not 0 <= lab < num_classes for lab in entry.labels):
            raise ManifestError(f"{path}: sample {entry.id}: label out of range")
        if entry.logits is not None:
            _shape_of(entry.logits)
        samples.append(entry)

    weights = doc.get("weights")
    if weights is not None:
        wshape = _shape_of(weights)
        if len(wshape) != 2 or wshape[0] != num_classes:
            raise ManifestError(
                f"{path}: weights must be (num_classes, K), got {wshape}"
            )
    bias = doc.get("bias")
    if bias is not None:
        bshape = _shape_of(bias)
        if bshape != (num_classes,):
            raise ManifestError(f"{path}: bias must be ({num_classes},), got {bshape}")

    known = {"samples", "weights", "bias", "num_classes"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return Manifest(
        root=root,
        samples=samples,
        num_classes=num_classes,
        weights=weights,
        bias=bias,
        extra=extra,
    )


def save_manifest(path: str | Path, manifest_doc: dict) -> None:
    """Write a manifest document with stable key order (byte-reproducible)."""
    path = Path(path)
    path.write_text(json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n")


def peek_shape(path: str | Path) -> tuple[int, ...]:
    """Decode only the header of an NPY file and return its shape."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != NPY_MAGIC:
            raise BadMagicError(f"{path}: not an NPY file (magic {magic!r})")
        version = fh.read(2)
        if version != b"\x01\x00":
            raise UnsupportedFormatError(f"{path}: unsupported NPY version")
        (header_len,) = struct.unpack("<H", fh.read(2))
        header = ast.literal_eval(fh.read(header_len).decode("latin1").strip())
        shape = header["shape"]
        if not isinstance(shape, tuple):
            raise UnsupportedFormatError(f"{path}: bad shape in header")
        return shape
