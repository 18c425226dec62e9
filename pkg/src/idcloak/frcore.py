"""Embedding models, pool training, gallery search and accuracy."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from . import numerics as nx

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"P3FM"
CHECKPOINT_VERSION = 1
HEAD_SCALE = 30.0
ADMISSION_ACCURACY = 90.0

ARCHITECTURES = {
    "conv3": [
        {"kind": "conv", "k": 3, "stride": 1, "out": 8},
        {"kind": "relu"},
        {"kind": "conv", "k": 3, "stride": 2, "out": 16},
        {"kind": "relu"},
        {"kind": "conv", "k": 3, "stride": 2, "out": 16},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "out": 32},
    ],
    "conv5": [
        {"kind": "conv", "k": 5, "stride": 4, "out": 8},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "out": 32},
    ],
}

# (architecture, seed, subset fraction) for the default six-model pool
DEFAULT_POOL = [
    ("conv3", 1, 1.0), ("conv3", 2, 0.8), ("conv3", 3, 0.7),
    ("conv5", 1, 1.0), ("conv5", 2, 0.8), ("conv5", 3, 0.7),
]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _padding(k: int) -> int:
    return k // 2


@dataclass
class EmbeddingModel:
    model_id: str
    arch: list
    params: list
    input_size: int = 32
    in_channels: int = 3
    train_accuracy: float = float("nan")
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def embedding_dim(self) -> int:
        return self.params[-1].shape[0]

    def forward(self, x, params=None) -> nx.Tensor:
        """Unnormalized penultimate features for an (N, C, H, W) batch."""
        params = self.params if params is None else params
        h = nx.as_tensor(x)
        i = 0
        for layer in self.arch:
            kind = layer["kind"]
            if kind == "conv":
                h = nx.conv2d(h, params[i], params[i + 1], stride=layer["stride"],
                              padding=_padding(layer["k"]))
                i += 2
            elif kind == "relu":
                h = nx.relu(h)
            elif kind == "gap":
                h = nx.mean(h, axis=(2, 3))
            elif kind == "flatten":
                h = nx.reshape(h, (h.shape[0], -1))
            elif kind == "dense":
                h = nx.add(nx.matmul(h, params[i]), params[i + 1])
                i += 2
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return h

    def embed_tensor(self, x) -> nx.Tensor:
        """Unit embeddings for a batch of model-sized inputs, as a graph node."""
        return nx.l2_normalize(self.forward(x))

    def prepare(self, face: np.ndarray) -> np.ndarray:
        face = imaging.as_image(face)
        return imaging.resize_bilinear(face, self.input_size, self.input_size)

    def embed(self, face: np.ndarray) -> np.ndarray:
        """Unit embedding of one face crop (resized to the model input)."""
        x = self.prepare(face)
        key = hashlib.blake2b(x.tobytes(), digest_size=16).digest()
        hit = self._cache.get(key)
        if hit is None:
            hit = self.embed_tensor(imaging.to_batch([x])).data[0]
            hit.setflags(write=False)
            self._cache[key] = hit
        return hit

    def embed_many(self, faces) -> np.ndarray:
        return np.stack([self.embed(f) for f in faces]) if len(faces) else \
            np.zeros((0, self.embedding_dim))


def init_params(arch: list, in_channels: int, input_size: int, n_out_head: int | None,
                rng: np.random.Generator) -> list:
    params = []
    c, s = in_channels, input_size
    flat = None
    for layer in arch:
        kind = layer["kind"]
        if kind == "conv":
            k, out = layer["k"], layer["out"]
            fan_in = c * k * k
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out, c, k, k)))
            params.append(np.zeros(out))
            c = out
            s = (s + 2 * _padding(k) - k) // layer["stride"] + 1
        elif kind == "gap":
            flat = c
        elif kind == "flatten":
            flat = c * s * s
        elif kind == "dense":
            out = layer["out"]
            params.append(rng.normal(0.0, np.sqrt(1.0 / flat), size=(flat, out)))
            params.append(np.zeros(out))
            flat = out
    if n_out_head is not None:
        params.append(rng.normal(0.0, np.sqrt(1.0 / flat), size=(flat, n_out_head)))
    return params


def train_pool_model(manifest, arch, seed: int, subset_fraction: float = 1.0,
                     epochs: int = 30, lr: float = 0.01, momentum: float = 0.9,
                     batch_size: int = 16, model_id: str | None = None,
                     input_size: int | None = None) -> EmbeddingModel:
    """Train a softmax classifier on seen gallery images and keep its trunk.

    The head scores ``HEAD_SCALE * normalize(embedding) @ W`` so that the
    trunk learns a geometry suited to angular nearest-neighbour search.
    """
    if len(manifest.identities) < 4:
        raise ValueError("need at least 4 identities to train a pool model")
    if not 0.5 < subset_fraction <= 1.0:
        raise ValueError(f"subset fraction must be in (0.5, 1], got {subset_fraction}")
    arch_name = arch if isinstance(arch, str) else None
    layers = ARCHITECTURES[arch] if isinstance(arch, str) else list(arch)
    input_size = input_size or manifest.size
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(json.dumps(layers).encode())]))

    records = manifest.select(roles="seen")
    keep = max(len(manifest.identities), int(round(subset_fraction * len(records))))
    idx = np.sort(rng.permutation(len(records))[:keep])
    records = [records[i] for i in idx]
    faces = [imaging.resize_bilinear(imaging.face_crop(manifest.image(r), r.crop),
                                     input_size, input_size) for r in records]
    x_all = imaging.to_batch(faces)
    y_all = np.array([manifest.label_index(r.identity) for r in records])
    in_channels = x_all.shape[1]

    params = init_params(layers, in_channels, input_size, len(manifest.identities), rng)
    velocity = [np.zeros_like(p) for p in params]
    model = EmbeddingModel(model_id or f"{arch_name or 'custom'}-s{seed}", layers,
                           params[:-1], input_size, in_channels)
    steps_per_epoch = -(-len(y_all) // batch_size)
    total = max(1, epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(y_all))
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            leaves = [nx.Tensor(p, requires_grad=True) for p in params]
            emb = nx.l2_normalize(model.forward(x_all[sel], leaves[:-1]))
            logits = nx.matmul(emb, leaves[-1]) * HEAD_SCALE
            loss = nx.softmax_cross_entropy(logits, y_all[sel])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss became non-finite (seed={seed}, step={step})")
            grads = nx.backward(loss, leaves)
            rate = 0.5 * lr * (1.0 + np.cos(np.pi * step / total))
            for p, v, g in zip(params, velocity, grads):
                v *= momentum
                v -= rate * g
                p += v
            step += 1
    emb = nx.l2_normalize(model.forward(x_all)).data
    pred = np.argmax(emb @ params[-1], axis=1)
    model.train_accuracy = float(100.0 * np.mean(pred == y_all))
    model.params = [p.copy() for p in params[:-1]]
    log.info("trained %s: train acc %.2f%% over %d images", model.model_id,
             model.train_accuracy, len(y_all))
    return model


def probe_accuracy(model: EmbeddingModel, manifest) -> float:
    """Closed-set accuracy of clean probes against the full clean gallery."""
    gallery = gallery_from_manifest(manifest)
    probes = manifest.select(roles="probe")
    faces = [imaging.face_crop(manifest.image(r), r.crop) for r in probes]
    return fr_accuracy(faces, [r.identity for r in probes], model, gallery)


def build_pool(manifest, specs=DEFAULT_POOL, epochs: int = 30, seed: int = 0,
               min_accuracy: float = ADMISSION_ACCURACY, attempts: int = 8) -> list:
    """Train one admitted model per (architecture, seed, subset) spec.

    A candidate is admitted when its clean probe accuracy reaches
    ``min_accuracy``; otherwise the seed is bumped and training repeated.
    """
    pool = []
    for i, (arch, base_seed, frac) in enumerate(specs):
        for attempt in range(attempts):
            s = seed * 1000 + base_seed + 100 * attempt
            model = train_pool_model(manifest, arch, s, frac, epochs=epochs,
                                     model_id=f"{arch}-{i}")
            acc = probe_accuracy(model, manifest)
            if acc >= min_accuracy:
                break
            log.info("rejected %s (seed %d): probe accuracy %.2f%%", model.model_id, s, acc)
        else:
            raise TrainingDiverged(
                f"{arch}-{i}: no candidate reached {min_accuracy}% probe accuracy "
                f"in {attempts} attempts")
        pool.append(model)
    return pool


# ---------------------------------------------------------------- identification

def arccos_dist(e1, e2) -> float:
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    for e in (e1, e2):
        if abs(np.linalg.norm(e) - 1.0) > 1e-6:
            raise ValueError(f"arccos_dist expects unit vectors, got norm {np.linalg.norm(e)}")
    c = np.clip(float(e1 @ e2), -nx.ARCCOS_LIMIT, nx.ARCCOS_LIMIT)
    return float(np.arccos(c))


@dataclass
class Gallery:
    """Labelled face crops; embeddings are computed per model on demand."""

    faces: list
    labels: list
    roles: list

    def __len__(self) -> int:
        return len(self.labels)

    def embeddings(self, model: EmbeddingModel) -> np.ndarray:
        return model.embed_many(self.faces)


def nearest_label(probe_emb: np.ndarray, gallery_embs: np.ndarray, labels) -> str:
    if len(labels) == 0:
        raise ValueError("gallery is empty")
    cos = np.clip(gallery_embs @ probe_emb, -nx.ARCCOS_LIMIT, nx.ARCCOS_LIMIT)
    # argmin returns the first index on ties
    return labels[int(np.argmin(np.arccos(cos)))]


def fr_identify(probe: np.ndarray, model: EmbeddingModel, gallery: Gallery) -> str:
    """Label of the gallery face whose embedding is angularly nearest to the probe."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    return nearest_label(model.embed(probe), gallery.embeddings(model), gallery.labels)


def fr_accuracy(probes, true_labels, model: EmbeddingModel, gallery: Gallery) -> float:
    """Percentage of probes whose nearest gallery label is the true one."""
    if len(probes) == 0:
        return 100.0
    g = gallery.embeddings(model)
    hits = sum(nearest_label(model.embed(p), g, gallery.labels) == t
               for p, t in zip(probes, true_labels))
    return 100.0 * hits / len(probes)


def gallery_from_manifest(manifest, roles=("seen", "unseen"), transform=None) -> Gallery:
    """Gallery of face crops; ``transform(record, face)`` may replace a face."""
    faces, labels, rs = [], [], []
    for r in manifest.select(roles=roles):
        face = imaging.face_crop(manifest.image(r), r.crop)
        if transform is not None:
            face = transform(r, face)
        faces.append(face)
        labels.append(r.identity)
        rs.append(r.role)
    return Gallery(faces, labels, rs)


# ---------------------------------------------------------------- checkpoints

def save_model(model: EmbeddingModel, path) -> None:
    desc = json.dumps({
        "model_id": model.model_id, "arch": model.arch, "input_size": model.input_size,
        "in_channels": model.in_channels, "train_accuracy": model.train_accuracy,
        "shapes": [list(p.shape) for p in model.params],
    }, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(desc)) + desc
    body += b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path) -> EmbeddingModel:
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    version, dlen = struct.unpack("<HI", buf[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    desc = json.loads(buf[10:10 + dlen])
    pos = 10 + dlen
    params = []
    for shape in desc["shapes"]:
        n = int(np.prod(shape))
        params.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy())
        pos += 8 * n
    if pos != len(buf) - 4:
        raise CheckpointError(f"{path}: payload size does not match descriptor")
    return EmbeddingModel(desc["model_id"], desc["arch"], params, desc["input_size"],
                          desc["in_channels"], desc["train_accuracy"])
