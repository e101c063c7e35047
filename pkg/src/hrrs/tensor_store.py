"""Binary tensor files, dataset manifests, and synthetic dataset generation.

All bulk data (feature maps, Fc vectors, model parameters, encoded features)
moves through a small binary format: magic ``FTNS``, a fixed little-endian
header, and a raw row-major float32 payload. Dataset metadata lives in JSON
manifests mapping image ids to class labels and tensor files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1

VALID_SPLITS = ("train", "test", "all")

_HEADER = struct.Struct("<III")  # version, dtype code, rank


class TensorFormatError(ValueError):
    """A tensor (in memory or on disk) violates the FTNS contract."""


class ManifestError(ValueError):
    """A dataset manifest violates its schema or invariants."""


def validate_tensor(values: np.ndarray) -> np.ndarray:
    """Check tensor invariants and return a contiguous little-endian float32 copy."""
    arr = np.asarray(values)
    if arr.ndim < 1:
        raise TensorFormatError("tensor rank must be >= 1")
    if any(dim < 1 for dim in arr.shape):
        raise TensorFormatError(f"empty dimension in shape {tuple(arr.shape)}")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("tensor contains non-finite values")
    return np.ascontiguousarray(arr, dtype="<f4")


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    """Write an array as an FTNS file (validates invariants first)."""
    arr = validate_tensor(values)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(FORMAT_VERSION, DTYPE_FLOAT32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an FTNS file back into a read-only float32 array.

    Rejects wrong magic, unknown version or dtype, truncated payloads and
    non-finite values; error messages name the failing field.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic (expected FTNS)")
    if len(blob) < 4 + _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    version, dtype, rank = _HEADER.unpack_from(blob, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unknown version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"{path}: unknown dtype code {dtype}")
    if rank < 1:
        raise TensorFormatError(f"{path}: rank must be >= 1, got {rank}")
    dims_end = 4 + _HEADER.size + 8 * rank
    if len(blob) < dims_end:
        raise TensorFormatError(f"{path}: truncated dims (rank {rank})")
    shape = struct.unpack_from(f"<{rank}Q", blob, 4 + _HEADER.size)
    if any(dim < 1 for dim in shape):
        raise TensorFormatError(f"{path}: empty dimension in shape {shape}")
    expected = 4 * math.prod(shape)
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload length mismatch (expected {expected} bytes, got {len(payload)})"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: payload contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    class_label: str
    tensor_path: Path
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_index: dict[str, int]
    label_of: dict[str, str]

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    def ids(self) -> tuple[str, ...]:
        return tuple(e.image_id for e in self.entries)

    def select(self, split: str) -> tuple[ManifestEntry, ...]:
        """Entries belonging to a split; entries marked 'all' match every split."""
        if split not in VALID_SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        if split == "all":
            return self.entries
        return tuple(e for e in self.entries if e.split in (split, "all"))


def make_manifest(entries: list[ManifestEntry]) -> DatasetManifest:
    """Validate entries and assign the class index (lexicographic by label)."""
    seen: set[str] = set()
    for e in entries:
        if e.image_id in seen:
            raise ManifestError(f"duplicate id {e.image_id!r}")
        seen.add(e.image_id)
        if e.split not in VALID_SPLITS:
            raise ManifestError(f"entry {e.image_id!r}: unknown split {e.split!r}")
        if not e.class_label:
            raise ManifestError(f"entry {e.image_id!r}: empty class label")
    if not entries:
        raise ManifestError("manifest has no entries")
    labels = sorted({e.class_label for e in entries})
    class_index = {label: i for i, label in enumerate(labels)}
    label_of = {e.image_id: e.class_label for e in entries}
    return DatasetManifest(tuple(entries), class_index, label_of)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a JSON manifest; tensor paths resolve relative to the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ManifestError(f"{path}: top-level object must contain 'entries'")
    unknown = set(doc) - {"entries"}
    if unknown:
        raise ManifestError(f"{path}: unknown top-level keys {sorted(unknown)}")
    root = path.parent
    entries = []
    for i, raw in enumerate(doc["entries"]):
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: entry {i} is not an object")
        missing = {"id", "class", "path", "split"} - set(raw)
        if missing:
            raise ManifestError(f"{path}: entry {i} missing keys {sorted(missing)}")
        unknown = set(raw) - {"id", "class", "path", "split"}
        if unknown:
            raise ManifestError(f"{path}: entry {i} has unknown keys {sorted(unknown)}")
        entries.append(
            ManifestEntry(
                image_id=str(raw["id"]),
                class_label=str(raw["class"]),
                tensor_path=root / str(raw["path"]),
                split=str(raw["split"]),
            )
        )
    return make_manifest(entries)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    """Write a manifest as JSON with tensor paths relative to the target directory."""
    path = Path(path)
    root = path.parent
    payload = {
        "entries": [
            {
                "id": e.image_id,
                "class": e.class_label,
                "path": _relative_to(e.tensor_path, root),
                "split": e.split,
            }
            for e in manifest.entries
        ]
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _relative_to(target: Path, root: Path) -> str:
    try:
        return target.relative_to(root).as_posix()
    except ValueError:
        return target.as_posix()


def gen_synthetic(
    classes: int,
    per_class: int,
    map_shape: tuple[int, int, int],
    separation: float,
    seed: int,
    train_frac: float = 0.8,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Generate a labelled set of synthetic feature maps.

    Class j gets a mean template map whose channel-mean vectors are exactly
    `separation` apart between any two classes; on top of the channel offsets
    the template carries zero-channel-mean spatial texture at scale
    separation/4, so class structure survives aggregation even when a small
    codebook absorbs the channel offsets. Each map is the class template plus
    unit Gaussian noise per element. Pure function of its arguments;
    separation 0 makes all classes statistically identical.
    """
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be >= 1")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    if len(map_shape) != 3 or any(d < 1 for d in map_shape):
        raise ValueError(f"map_shape must be [h, w, c] with positive dims, got {map_shape}")
    if not 0.0 <= train_frac <= 1.0:
        raise ValueError("train_frac must lie in [0, 1]")
    h, w, c = map_shape
    if classes > c:
        raise ValueError(
            f"need at least as many channels as classes for mutually separated means "
            f"(classes={classes}, channels={c})"
        )
    rng = np.random.default_rng(seed)
    # Scaled standard-basis channel offsets: ||mean_i - mean_j|| = separation
    # for all i != j in channel-mean space.
    offset = separation / math.sqrt(2.0)
    site_scale = separation / 4.0
    maps: dict[str, np.ndarray] = {}
    entries: list[ManifestEntry] = []
    for j in range(classes):
        label = f"class{j:02d}"
        mu = np.zeros(c)
        mu[j] = offset
        texture = rng.standard_normal((h, w, c))
        texture -= texture.mean(axis=(0, 1), keepdims=True)  # keeps channel means exact
        template = mu + site_scale * texture
        ids = []
        for i in range(per_class):
            image_id = f"{label}-{i:03d}"
            arr = (template + rng.standard_normal((h, w, c))).astype("<f4")
            arr.flags.writeable = False
            maps[image_id] = arr
            ids.append(image_id)
        order = rng.permutation(per_class)
        n_train = max(1, int(round(train_frac * per_class))) if train_frac > 0 else 0
        train_set = {ids[k] for k in order[:n_train]}
        for image_id in ids:
            split = "train" if image_id in train_set else "test"
            entries.append(ManifestEntry(image_id, label, Path(f"{image_id}.ftns"), split))
    return make_manifest(entries), maps


def write_synthetic(
    out_dir: str | Path, manifest: DatasetManifest, maps: dict[str, np.ndarray]
) -> Path:
    """Write synthetic maps and the manifest to a directory; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = []
    for e in manifest.entries:
        target = out_dir / f"{e.image_id}.ftns"
        write_tensor(target, maps[e.image_id])
        resolved.append(ManifestEntry(e.image_id, e.class_label, target, e.split))
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, make_manifest(resolved))
    return manifest_path
