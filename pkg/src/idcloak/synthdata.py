"""Procedural identities and a probe / seen / unseen split on disk.

Each identity is a smooth composition of coloured Gaussian blobs over a
gradient background. Identities come in look-alike pairs that share most of
their parameters. Individual images jitter brightness, position and scale
and add pixel noise, so images of one identity stay closer to each other than
to other identities, but small models still confuse some look-alikes.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging

MANIFEST_FORMAT = "idcloak-manifest"
MANIFEST_VERSION = 1
ROLES = ("probe", "seen", "unseen")

N_BLOBS = 3
N_PARAMS = 6 * N_BLOBS + 6  # blob (cx, cy, radius, r, g, b) + background
FAMILY_WEIGHT = 0.5
OWN_WEIGHT = 0.15


def identity_rng(seed: int, identity: str, stream: int = 0) -> np.random.Generator:
    """Independent RNG stream for one identity, unaffected by generation order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(identity.encode()), stream])
    return np.random.default_rng(ss)


def _raw_params(rng: np.random.Generator) -> np.ndarray:
    blobs = []
    for _ in range(N_BLOBS):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        radius = rng.uniform(0.08, 0.2)
        color = rng.uniform(0.0, 1.0, size=3)
        blobs.extend([cx, cy, radius, *color])
    base = rng.uniform(0.2, 0.8, size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    strength = rng.uniform(0.1, 0.4)
    freq = rng.uniform(1.0, 3.0)
    return np.array(blobs + [*base, angle, strength, freq])


def identity_params(seed: int, index: int, family_weight: float = FAMILY_WEIGHT,
                    own_weight: float = OWN_WEIGHT) -> np.ndarray:
    """Parameters of identity ``index``.

    A corpus-wide template is blended with a draw shared by look-alike pairs
    (indices 2j and 2j+1) and a draw unique to the identity. Look-alike pairs
    are what makes the recognition task imperfect for small models.
    """
    template = _raw_params(np.random.default_rng(np.random.SeedSequence([seed, 0x7E3])))
    family = _raw_params(identity_rng(seed, f"family{index // 2}", 0))
    own = _raw_params(identity_rng(seed, identity_label(index), 0))
    return ((1.0 - family_weight - own_weight) * template
            + family_weight * family + own_weight * own)


def identity_label(index: int) -> str:
    return f"id{index}"


def render(params: np.ndarray, size: int, shift=(0.0, 0.0), scale: float = 1.0,
           brightness: float = 0.0) -> np.ndarray:
    """Noise-free rendering of an identity under a geometric/photometric jitter."""
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    # inverse map: sample the base pattern at the un-shifted, un-scaled position
    u = (xx - 0.5 - shift[0]) / scale + 0.5
    v = (yy - 0.5 - shift[1]) / scale + 0.5
    base, angle, strength, freq = params[-6:-3], params[-3], params[-2], params[-1]
    ramp = np.cos(angle) * (u - 0.5) + np.sin(angle) * (v - 0.5)
    img = base[None, None, :] + strength * np.sin(np.pi * freq * ramp)[:, :, None]
    for b in range(N_BLOBS):
        cx, cy, radius, *color = params[6 * b:6 * b + 6]
        w = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2.0 * radius ** 2))[:, :, None]
        img = img * (1.0 - w) + np.asarray(color)[None, None, :] * w
    return np.clip(img + brightness, 0.0, 1.0)


def split_counts(n: int) -> dict:
    probe = max(1, round(0.1 * n))
    unseen = max(1, round(0.2 * n))
    return {"probe": probe, "seen": n - probe - unseen, "unseen": unseen}


@dataclass
class ImageRecord:
    identity: str
    role: str
    path: str
    crop: imaging.CropSpec


@dataclass
class Manifest:
    root: Path
    seed: int
    size: int
    identities: list
    records: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def select(self, identity: str | None = None, roles=ROLES) -> list:
        if isinstance(roles, str):
            roles = (roles,)
        return [r for r in self.records
                if (identity is None or r.identity == identity) and r.role in roles]

    def image(self, record: ImageRecord) -> np.ndarray:
        if record.path not in self._cache:
            self._cache[record.path] = imaging.load_image(self.root / record.path)
        return self._cache[record.path]

    def label_index(self, identity: str) -> int:
        return self.identities.index(identity)

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "size": self.size,
            "identities": self.identities,
            "images": [
                {"identity": r.identity, "role": r.role, "path": r.path,
                 "crop": [r.crop.top, r.crop.left, r.crop.side]}
                for r in self.records
            ],
        }
        return json.dumps(doc, indent=1) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a dataset manifest")
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
        records = [ImageRecord(d["identity"], d["role"], d["path"], imaging.CropSpec(*d["crop"]))
                   for d in doc["images"]]
        return cls(path.parent, doc["seed"], doc["size"], list(doc["identities"]), records)


def gen_dataset(out_dir, n_identities: int = 8, images_per_identity: int = 20,
                size: int = 32, seed: int = 0) -> Manifest:
    """Render all identities to PPM files and write ``manifest.json``."""
    if n_identities < 4:
        raise ValueError("need at least 4 identities")
    if images_per_identity < 10:
        raise ValueError("need at least 10 images per identity")
    if size < 16:
        raise ValueError("image size must be at least 16")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe_file = out_dir / ".write-test"
        probe_file.write_bytes(b"")
        probe_file.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc

    identities = [identity_label(i) for i in range(n_identities)]
    manifest = Manifest(out_dir, seed, size, identities)
    counts = split_counts(images_per_identity)
    roles = (["probe"] * counts["probe"] + ["seen"] * counts["seen"]
             + ["unseen"] * counts["unseen"])
    crop = imaging.default_crop(size, size)
    for index, ident in enumerate(identities):
        params = identity_params(seed, index)
        rng = identity_rng(seed, ident, 1)
        (out_dir / "images" / ident).mkdir(parents=True, exist_ok=True)
        for k, role in enumerate(roles):
            shift = rng.uniform(-0.1, 0.1, size=2)
            scale = rng.uniform(0.9, 1.1)
            brightness = rng.uniform(-0.15, 0.15)
            img = render(params, size, shift, scale, brightness)
            img = np.clip(img + rng.normal(0.0, 0.02, size=img.shape), 0.0, 1.0)
            rel = f"images/{ident}/{k:03d}.ppm"
            imaging.save_image(img, out_dir / rel)
            manifest.records.append(ImageRecord(ident, role, rel, crop))
    manifest.save()
    return manifest
