"""Tensor files, dataset manifests, batching and the planted-concept generator."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import mxpool_batch

MAGIC = b"SIDT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}
MAX_ELEMENTS = 2**32 - 1
_HEADER = 7  # magic + version + dtype + ndim


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedTensorError(TensorFormatError):
    pass


class DimsOverflowError(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SIDT tensor files
# ---------------------------------------------------------------------------

def encode_tensor(t, dtype: str = "f32") -> bytes:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > 255:
        raise DimsOverflowError(f"unsupported rank {arr.ndim}")
    if any(n < 1 or n > 0xFFFFFFFF for n in arr.shape):
        raise DimsOverflowError(f"extent out of range in {arr.shape}")
    if arr.size > MAX_ELEMENTS:
        raise DimsOverflowError("too many elements")
    code = DTYPE_CODES[dtype]
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return head + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedTensorError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER:
        raise TruncatedTensorError("truncated header")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise VersionMismatchError(f"version {version}, expected {VERSION}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if ndim == 0:
        raise DimsOverflowError("rank 0 tensors are not allowed")
    dims_end = _HEADER + 4 * ndim
    if len(buf) < dims_end:
        raise TruncatedTensorError("truncated dims")
    dims = struct.unpack(f"<{ndim}I", buf[_HEADER:dims_end])
    if any(n == 0 for n in dims):
        raise DimsOverflowError(f"zero extent in {dims}")
    count = 1
    for n in dims:
        count *= n
    if count > MAX_ELEMENTS:
        raise DimsOverflowError(f"{dims} holds more than {MAX_ELEMENTS} elements")
    dt = DTYPES[code]
    need = dims_end + count * dt.itemsize
    if len(buf) < need:
        raise TruncatedTensorError(f"payload has {len(buf) - dims_end} bytes, need {need - dims_end}")
    if len(buf) > need:
        raise TensorFormatError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dt, count=count, offset=dims_end)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, t, dtype: str = "f32") -> None:
    Path(path).write_bytes(encode_tensor(t, dtype))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    num_classes: int
    feature_dims: list
    samples: list  # [{"path": str, "label": int, ...}]
    root: Path = field(default=Path("."), repr=False, compare=False)

    def to_json(self) -> str:
        doc = {
            "num_classes": self.num_classes,
            "feature_dims": list(self.feature_dims),
            "samples": self.samples,
        }
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            m = cls(int(doc["num_classes"]), list(doc["feature_dims"]), list(doc["samples"]),
                    root=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
        if len(m.feature_dims) != 3:
            raise ManifestError(f"{path}: feature_dims must be [d, H, W]")
        for i, s in enumerate(m.samples):
            if not 0 <= int(s["label"]) < m.num_classes:
                raise ManifestError(f"{path}: sample {i} label {s['label']} out of range")
        return m

    def resolve(self, i: int) -> Path:
        return self.root / self.samples[i]["path"]

    def validate(self) -> None:
        """Read every tensor and check its dims; raises :class:`ManifestError`."""
        for i in range(len(self.samples)):
            t = read_tensor(self.resolve(i))
            if list(t.shape) != list(self.feature_dims):
                raise ManifestError(f"sample {i}: dims {t.shape} != {self.feature_dims}")
            if not 0 <= int(self.samples[i]["label"]) < self.num_classes:
                raise ManifestError(f"sample {i}: label out of range")


@dataclass
class Dataset:
    """Feature maps held in memory: ``features`` is ``(N, d, H, W)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def load_dataset(manifest: DatasetManifest) -> Dataset:
    if not manifest.samples:
        raise ManifestError("empty manifest")
    feats = np.empty((len(manifest.samples), *manifest.feature_dims))
    for i in range(len(manifest.samples)):
        t = read_tensor(manifest.resolve(i))
        if list(t.shape) != list(manifest.feature_dims):
            raise ManifestError(f"sample {i}: dims {t.shape} != {manifest.feature_dims}")
        feats[i] = t
    labels = np.array([int(s["label"]) for s in manifest.samples], dtype=np.int64)
    return Dataset(feats, labels, manifest.num_classes)


def batch_iter(data, batch_size: int, epoch_seed: int, epoch: int = 0) -> Iterator:
    """Yield ``(features, labels)`` minibatches in a seeded permutation.

    ``data`` is a :class:`Dataset` or a :class:`DatasetManifest` (loaded on
    the fly). The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(data, DatasetManifest):
        data = load_dataset(data)
    n = len(data)
    if n == 0:
        raise ManifestError("empty dataset")
    order = np.random.default_rng([epoch_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield data.features[idx], data.labels[idx]


def batch_indices(n: int, batch_size: int, epoch_seed: int, epoch: int = 0):
    order = np.random.default_rng([epoch_seed, epoch]).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# planted-concept generator
# ---------------------------------------------------------------------------

@dataclass
class PlantedSpec:
    num_classes: int = 20
    num_concepts: int = 30
    concepts_per_class: int = 3
    channel_dim: int = 32
    height: int = 7
    width: int = 7
    signal_strength: float = 5.0
    noise_std: float = 0.3
    mixing_seed: int = 0
    distractor_rate: float = 0.0
    # identity mixing is handy for debugging and for the noiseless examples
    mix: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list:
        out = []
        for name in ("num_classes", "num_concepts", "concepts_per_class",
                     "channel_dim", "height", "width"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1")
        if self.num_concepts > self.channel_dim:
            out.append("num_concepts must not exceed channel_dim")
        if self.concepts_per_class > self.num_concepts:
            out.append("concepts_per_class must not exceed num_concepts")
        if not self.signal_strength > 0:
            out.append("signal_strength must be > 0")
        if not self.noise_std >= 0:
            out.append("noise_std must be >= 0")
        if not 0 <= self.distractor_rate <= 1:
            out.append("distractor_rate must lie in [0, 1]")
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PlantedSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown PlantedSpec fields: {', '.join(unknown)}")
        return cls(**doc)


@dataclass
class PlantedTruth:
    class_concepts: list  # class -> sorted concept ids
    mixing_seed: int
    mixing: np.ndarray  # (d, d) orthogonal; features = mixing @ latent

    def to_json(self) -> str:
        mixed = not np.array_equal(self.mixing, np.eye(len(self.mixing)))
        return json.dumps({"class_concepts": self.class_concepts,
                           "mixing_seed": self.mixing_seed,
                           "channel_dim": len(self.mixing),
                           "mixed": mixed})


def mixing_matrix(d: int, seed: int) -> np.ndarray:
    """Orthogonal ``d x d`` matrix from the QR factorisation of a Gaussian."""
    g = np.random.default_rng(seed).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def assign_concepts(spec: PlantedSpec, rng) -> list:
    seen = set()
    out = []
    for _ in range(spec.num_classes):
        for _attempt in range(1000):
            s = tuple(sorted(int(g) for g in rng.choice(spec.num_concepts,
                                                        spec.concepts_per_class, replace=False)))
            if s not in seen:
                break
        seen.add(s)
        out.append(list(s))
    return out


def sample_planted(spec: PlantedSpec, truth: PlantedTruth, n: int, rng):
    """Draw ``n`` samples; returns ``(features, labels, spikes)``.

    ``spikes[i]`` lists ``(concept, h, w, magnitude)`` for every planted spike,
    distractors included, in the latent basis.
    """
    d, H, W = spec.channel_dim, spec.height, spec.width
    mu = spec.signal_strength
    labels = rng.integers(0, spec.num_classes, size=n)
    feats = np.empty((n, d, H, W))
    spikes = []
    for i in range(n):
        latent = np.zeros((d, H * W))
        own = truth.class_concepts[labels[i]]
        rec = []
        for g in own:
            cell = int(rng.integers(H * W))
            mag = float(mu + rng.normal(0.0, 0.1 * mu))
            latent[g, cell] += mag
            rec.append((int(g), cell // W, cell % W, mag))
        if spec.distractor_rate > 0:
            others = [g for g in range(spec.num_concepts) if g not in own]
            hits = rng.random(len(others)) < spec.distractor_rate
            for g, hit in zip(others, hits):
                if hit:
                    cell = int(rng.integers(H * W))
                    mag = float(mu + rng.normal(0.0, 0.1 * mu))
                    latent[g, cell] += mag
                    rec.append((int(g), cell // W, cell % W, mag))
        if spec.noise_std > 0:
            latent += rng.normal(0.0, spec.noise_std, size=latent.shape)
        feats[i] = (truth.mixing @ latent).reshape(d, H, W)
        spikes.append(rec)
    return feats, labels.astype(np.int64), spikes


def generate_planted(spec: PlantedSpec, n_train: int, n_test: int, seed: int, out_dir=None):
    """Build train/test splits with known class-to-concept structure.

    With ``out_dir`` the tensors (f32), ``train.json``, ``test.json`` and
    ``truth.json`` are written there and the manifests point at them; without
    it the manifests carry no files and in-memory datasets are returned.
    Returns ``(train_manifest, test_manifest, truth, train_data, test_data)``
    where the datasets hold exactly what a reader of the files would see.
    """
    rng = np.random.default_rng(seed)
    mixing = (mixing_matrix(spec.channel_dim, spec.mixing_seed) if spec.mix
              else np.eye(spec.channel_dim))
    truth = PlantedTruth(assign_concepts(spec, rng), spec.mixing_seed, mixing)
    dims = [spec.channel_dim, spec.height, spec.width]
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        feats, labels, spikes = sample_planted(spec, truth, n, rng)
        # round through f32 so in-memory data equals what is stored on disk
        feats = feats.astype(np.float32).astype(np.float64)
        samples = []
        for i in range(n):
            rel = f"{split}/{i:06d}.sidt"
            samples.append({"path": rel, "label": int(labels[i]),
                            "spikes": [list(s) for s in spikes[i]]})
        root = Path(out_dir) if out_dir is not None else Path(".")
        man = DatasetManifest(spec.num_classes, dims, samples, root=root)
        if out_dir is not None:
            (root / split).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_tensor(root / samples[i]["path"], feats[i], "f32")
            man.save(root / f"{split}.json")
        out.append((man, Dataset(feats, labels, spec.num_classes)))
    if out_dir is not None:
        Path(out_dir, "truth.json").write_text(truth.to_json())
    (train_m, train_d), (test_m, test_d) = out
    return train_m, test_m, truth, train_d, test_d


def load_truth(path) -> PlantedTruth:
    doc = json.loads(Path(path).read_text())
    seed = int(doc["mixing_seed"])
    d = int(doc["channel_dim"])
    mixing = mixing_matrix(d, seed) if doc.get("mixed", True) else np.eye(d)
    return PlantedTruth(doc["class_concepts"], seed, mixing)


def template_classify(features: np.ndarray, truth: PlantedTruth, spec: PlantedSpec) -> np.ndarray:
    """Nearest-template oracle: unmix with the known mixing, pool each latent
    axis and pick the class whose planted concept pattern is closest."""
    n = features.shape[0]
    latent = np.matmul(truth.mixing.T, features.reshape(n, spec.channel_dim, -1))
    v = mxpool_batch(latent)[0][:, :spec.num_concepts]
    templates = np.zeros((spec.num_classes, spec.num_concepts))
    for c, s in enumerate(truth.class_concepts):
        templates[c, s] = spec.signal_strength
    dist = ((v[:, None, :] - templates[None]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1)
