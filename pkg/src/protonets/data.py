"""Dataset generation and on-disk formats.

Tensor files ("PFT1"): ``b"PFT1" | u32 version | u32 rank | u32 dims... |
float64 data``, little-endian, row-major.

Manifest (JSON)::

    {
      "format_version": 1,
      "input_shape": [1, 28, 28],
      "classes": [{"id": "a", "files": ["a.pft"]}, ...],
      "attributes": [{"id": "a", "file": "a_attr.pft"}, ...]   # optional
    }

A class file holds either one example (shape == input_shape) or a stack of
examples (shape == [n, *input_shape]). Relative paths resolve against the
manifest's directory. Images are expected pre-sized (e.g. grayscale 28x28);
no resampling or normalization happens on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .episodes import ClassRecord, Episode, LabeledDataset
from .errors import ContractError, LoadError
from .rng import SplitMix64

TENSOR_MAGIC = b"PFT1"
TENSOR_VERSION = 1
MANIFEST_VERSION = 1


# tensor files ------------------------------------------------------------------


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack(f"<II{arr.ndim}I", TENSOR_VERSION, arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf: bytes, origin: str = "<bytes>") -> np.ndarray:
    if buf[:4] != TENSOR_MAGIC:
        raise LoadError(f"{origin}: bad magic, not a PFT1 tensor file")
    try:
        version, rank = struct.unpack_from("<II", buf, 4)
        if version != TENSOR_VERSION:
            raise LoadError(f"{origin}: unsupported tensor version {version}")
        dims = struct.unpack_from(f"<{rank}I", buf, 12)
    except struct.error:
        raise LoadError(f"{origin}: truncated header") from None
    offset = 12 + 4 * rank
    size = int(np.prod(dims)) if rank else 1
    if len(buf) != offset + 8 * size:
        raise LoadError(f"{origin}: payload length does not match dims {list(dims)}")
    return np.frombuffer(buf, dtype="<f8", offset=offset).astype(np.float64).reshape(dims)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    return decode_tensor(buf, str(path))


# manifests ---------------------------------------------------------------------------


def _read_manifest(manifest_path: str | Path) -> tuple[dict, Path]:
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise LoadError(f"{path}: unsupported manifest version {doc.get('format_version')}")
    if not doc.get("classes"):
        raise LoadError(f"{path}: manifest lists no classes")
    return doc, path.parent


def _load_examples(base: Path, entry: dict, shape: tuple[int, ...]) -> np.ndarray:
    cid = entry.get("id")
    files = entry.get("files") or []
    if not files:
        raise LoadError(f"class {cid!r}: no tensor files")
    chunks = []
    for f in files:
        arr = read_tensor(base / f)
        if arr.shape == shape:
            arr = arr[None]
        elif arr.shape[1:] != shape:
            raise LoadError(f"class {cid!r}, file {f}: shape {list(arr.shape)} inconsistent with input_shape {list(shape)}")
        chunks.append(arr)
    return np.concatenate(chunks, axis=0)


def load_dataset(manifest_path: str | Path) -> LabeledDataset:
    doc, base = _read_manifest(manifest_path)
    try:
        shape = tuple(int(n) for n in doc["input_shape"])
    except (KeyError, TypeError, ValueError):
        raise LoadError(f"{manifest_path}: missing or invalid input_shape") from None
    classes = []
    seen = set()
    for entry in doc["classes"]:
        cid = str(entry.get("id"))
        if cid in seen:
            raise LoadError(f"duplicate class id {cid!r}")
        seen.add(cid)
        classes.append(ClassRecord(cid, _load_examples(base, entry, shape)))
    return LabeledDataset(classes, shape)


def save_dataset(data: LabeledDataset, directory: str | Path, manifest_name: str = "manifest.json") -> Path:
    """Write one stacked PFT1 file per class plus a manifest; returns the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(data.classes):
        fname = f"class_{i:05d}.pft"
        write_tensor(out / fname, rec.examples)
        entries.append({"id": rec.class_id, "files": [fname]})
    doc = {"format_version": MANIFEST_VERSION, "input_shape": list(data.input_shape), "classes": entries}
    path = out / manifest_name
    path.write_text(json.dumps(doc, indent=1))
    return path


# synthetic Gaussian tasks -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int
    dim: int
    examples_per_class: int
    mean_scale: float = 1.0
    noise_sigma: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ContractError("noise_sigma must be positive")
        if self.examples_per_class < 2 or self.n_classes < 1 or self.dim < 1:
            raise ContractError(f"invalid synthetic spec {self}")


def gen_gaussian_dataset(spec: SyntheticSpec, noise_sigma: float | None = None) -> LabeledDataset:
    """Isotropic Gaussian classes; each record keeps its true mean for the Bayes oracle.

    ``noise_sigma`` overrides the value in ``spec`` (0 allowed, for limit checks).
    """
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    rng = SplitMix64(spec.seed)
    classes = []
    for k in range(spec.n_classes):
        mean = (2.0 * rng.uniforms(spec.dim) - 1.0) * spec.mean_scale
        noise = rng.normals(spec.examples_per_class * spec.dim).reshape(spec.examples_per_class, spec.dim)
        classes.append(ClassRecord(f"class{k:04d}", mean + sigma * noise, true_mean=mean))
    return LabeledDataset(classes, (spec.dim,))


def bayes_predictions(means: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - means[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def bayes_episode_accuracy(data: LabeledDataset, episode: Episode) -> float:
    means = np.stack([data.by_id(c).true_mean for c in episode.class_ids])
    pred = bayes_predictions(means, episode.flat_query())
    return float(np.mean(pred == episode.query_labels))


def bayes_accuracy_oracle(data: LabeledDataset, episodes: Iterable[Episode], noise_sigma: float | None = None) -> float:
    """Mean per-episode accuracy of the nearest-true-mean classifier.

    For equal isotropic Gaussians this is the Bayes rule whatever the noise
    level, so ``noise_sigma`` is accepted only for interface symmetry.
    """
    accs = [bayes_episode_accuracy(data, ep) for ep in episodes]
    if not accs:
        raise ContractError("no episodes given")
    return float(np.mean(accs))


# rotations ---------------------------------------------------------------------------------


def rotate90(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Counter-clockwise rotation of the last two axes by ``90 * quarter_turns`` degrees."""
    return np.ascontiguousarray(np.rot90(image, quarter_turns % 4, axes=(-2, -1)))


def rotation_augment(data: LabeledDataset, rotations: Sequence[int] = (90, 180, 270)) -> LabeledDataset:
    """Every rotation of every class becomes a new class (ids get a ``@rot<deg>`` suffix)."""
    shape = data.input_shape
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise ContractError(f"rotation needs square images, got input shape {shape}")
    for deg in rotations:
        if deg % 90 or deg % 360 == 0:
            raise ContractError(f"rotation must be 90, 180 or 270 degrees, got {deg}")
    out = list(data.classes)
    for deg in rotations:
        for rec in data.classes:
            out.append(ClassRecord(f"{rec.class_id}@rot{deg}", rotate90(rec.examples, deg // 90)))
    return LabeledDataset(out, shape)


# attribute (zero-shot) data ---------------------------------------------------------------


@dataclass
class AttributeClass:
    class_id: str
    attributes: np.ndarray  # [A]
    features: np.ndarray  # [n, F]


@dataclass
class AttributeDataset:
    classes: list[AttributeClass]

    def __post_init__(self):
        a = {c.attributes.shape for c in self.classes}
        f = {c.features.shape[1:] for c in self.classes}
        if len(a) > 1 or len(f) > 1:
            raise ContractError("attribute and feature dimensions must agree across classes")

    @property
    def attribute_dim(self) -> int:
        return self.classes[0].attributes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.classes[0].features.shape[1]

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset([ClassRecord(c.class_id, c.features) for c in self.classes], (self.feature_dim,))

    def attributes_for(self, class_ids: Sequence[str]) -> np.ndarray:
        lookup = {c.class_id: c.attributes for c in self.classes}
        return np.stack([lookup[c] for c in class_ids])

    def split(self, *counts: int) -> list["AttributeDataset"]:
        out, start = [], 0
        for n in counts:
            stop = len(self.classes) if n == -1 else start + n
            out.append(AttributeDataset(self.classes[start:stop]))
            start = stop
        return out


def gen_attribute_dataset(n_classes: int, attr_dim: int, feature_dim: int, examples_per_class: int,
                          noise_sigma: float = 0.5, seed: int = 0) -> AttributeDataset:
    """Class means are a fixed random linear function of random attribute vectors."""
    rng = SplitMix64(seed)
    proj = rng.normals(attr_dim * feature_dim).reshape(attr_dim, feature_dim) / np.sqrt(attr_dim)
    classes = []
    for k in range(n_classes):
        v = rng.normals(attr_dim)
        mean = v @ proj
        noise = rng.normals(examples_per_class * feature_dim).reshape(examples_per_class, feature_dim)
        classes.append(AttributeClass(f"class{k:04d}", v, mean + noise_sigma * noise))
    return AttributeDataset(classes)


def load_attribute_dataset(manifest_path: str | Path) -> AttributeDataset:
    doc, base = _read_manifest(manifest_path)
    attr_entries = {str(a.get("id")): a.get("file") for a in doc.get("attributes") or []}
    classes = []
    attr_dim = feat_shape = None
    for entry in doc["classes"]:
        cid = str(entry.get("id"))
        if cid not in attr_entries or not attr_entries[cid]:
            raise LoadError(f"class {cid!r} has no attribute vector")
        attrs = read_tensor(base / attr_entries[cid]).reshape(-1)
        chunks = []
        for f in entry.get("files") or []:
            arr = read_tensor(base / f)
            chunks.append(arr[None] if arr.ndim == 1 else arr)
        if not chunks:
            raise LoadError(f"class {cid!r}: no feature files")
        feats = np.concatenate(chunks, axis=0)
        if attr_dim is None:
            attr_dim, feat_shape = attrs.shape, feats.shape[1:]
        if attrs.shape != attr_dim:
            raise LoadError(f"class {cid!r}: attribute dim {attrs.shape[0]} differs from {attr_dim[0]}")
        if feats.shape[1:] != feat_shape:
            raise LoadError(f"class {cid!r}: feature shape {feats.shape[1:]} differs from {feat_shape}")
        classes.append(AttributeClass(cid, attrs, feats))
    return AttributeDataset(classes)


def save_attribute_dataset(data: AttributeDataset, directory: str | Path,
                           manifest_name: str = "manifest.json") -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    classes, attrs = [], []
    for i, c in enumerate(data.classes):
        ff, fa = f"class_{i:05d}.pft", f"class_{i:05d}_attr.pft"
        write_tensor(out / ff, c.features)
        write_tensor(out / fa, c.attributes)
        classes.append({"id": c.class_id, "files": [ff]})
        attrs.append({"id": c.class_id, "file": fa})
    doc = {"format_version": MANIFEST_VERSION, "input_shape": [data.feature_dim],
           "classes": classes, "attributes": attrs}
    path = out / manifest_name
    path.write_text(json.dumps(doc, indent=1))
    return path
