"""Universal per-identity mask training.

The mask is learned over a user's images with a sign-gradient step clipped to
an L-inf budget. The loss pushes each protected face's embedding away from
its clean embedding on every team model, and a hinge on SSIM keeps the
protected face visually close to the original.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import imaging
from . import numerics as nx

log = logging.getLogger(__name__)

MASK_VERSION = 1


class MaskTrainingError(ValueError):
    pass


@dataclass
class PrivacyMask:
    values: np.ndarray  # (H, W, C), every entry within [-epsilon, epsilon]
    epsilon: float
    owner: str
    seed: int = 0
    version: int = MASK_VERSION

    def __post_init__(self):
        self.values = imaging.as_image(self.values)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def zeros(cls, size: int, channels: int, epsilon: float, owner: str, seed: int = 0):
        return cls(np.zeros((size, size, channels)), epsilon, owner, seed)


@dataclass
class TrainConfig:
    eta: float = 0.001
    batch: int = 4
    epsilon: float = 0.063
    omega: float = 0.03
    epochs: int = 50
    seed: int = 0
    lambda_init: float = 1.0
    lambda_min: float = 0.25
    lambda_max: float = 64.0
    team: list = field(default_factory=list)
    mask_size: int = 32

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.batch < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 <= self.omega < 0.5:
            raise ValueError("omega must lie in [0, 0.5)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- protection operator

def protect_crops(crops, mask, quantize: bool = True) -> nx.Tensor:
    """Clip(crop - QR(mask)) for an (N, C, S, S) batch of face crops.

    ``mask`` is a (C, h, w) tensor. Quantization is the identity in backward,
    so gradients reach the mask through it; ``quantize=False`` drops it, which
    is what finite-difference checks need. Saturated pixels pass no gradient.
    """
    crops, mask = nx.as_tensor(crops), nx.as_tensor(mask)
    side = crops.shape[-1]
    m = nx.resize_bilinear(mask, side, side)
    if quantize:
        m = nx.quantize_ste(m)
    return nx.clamp(nx.sub(crops, nx.reshape(m, (1,) + m.shape)), 0.0, 1.0)


def theta_protect(x: np.ndarray, mask: PrivacyMask, input_size: int,
                  crop: imaging.CropSpec | None = None, quantize: bool = True) -> np.ndarray:
    """Protected, model-ready face: Psi(Clip(FD(x) - QR(mask)))."""
    face = imaging.face_crop(x, crop)
    out = protect_crops(imaging.to_batch([face]), mask.values.transpose(2, 0, 1), quantize)
    out = nx.resize_bilinear(out, input_size, input_size)
    return out.data[0].transpose(1, 2, 0)


# ---------------------------------------------------------------- losses

def protect_distances(clean_emb: dict, protected_in, team) -> nx.Tensor:
    """Per-image team-mean arccos distance, shape (N,).

    ``clean_emb[model_id]`` holds the (N, D) clean embeddings; ``protected_in``
    is the protected crop batch before resizing to each model's input.
    """
    total = None
    for model in team:
        x = nx.resize_bilinear(protected_in, model.input_size, model.input_size)
        emb = model.embed_tensor(x)
        d = nx.arccos(nx.dot(emb, clean_emb[model.model_id]))
        total = d if total is None else total + d
    return total * (1.0 / len(team))


def percept_terms(clean_in, protected_in, omega: float, lam: float) -> tuple:
    """Per-image hinge lam * max((1 - SSIM)/2 - omega, 0) and the SSIM values."""
    s = imaging.ssim_tensor(clean_in, protected_in)
    hinge = nx.maximum((1.0 - s) * 0.5 - omega, 0.0)
    return hinge * lam, s


def loss_protect(x: np.ndarray, mask: PrivacyMask, team, quantize: bool = True) -> float:
    if not team:
        raise ValueError("team must not be empty")
    face = imaging.to_batch([imaging.face_crop(x)])
    clean = {m.model_id: m.embed(imaging.face_crop(x))[None, :] for m in team}
    prot = protect_crops(face, mask.values.transpose(2, 0, 1), quantize)
    return -float(protect_distances(clean, prot, team).data[0])


def loss_percept(x: np.ndarray, mask: PrivacyMask, omega: float, lam: float,
                 input_size: int | None = None, quantize: bool = True) -> float:
    face = imaging.face_crop(x)
    size = input_size or face.shape[0]
    clean = imaging.to_batch([imaging.resize_bilinear(face, size, size)])
    prot = protect_crops(imaging.to_batch([face]), mask.values.transpose(2, 0, 1), quantize)
    prot = nx.resize_bilinear(prot, size, size)
    hinge, _ = percept_terms(clean, prot, omega, lam)
    return float(hinge.data[0])


def loss_total(x: np.ndarray, mask: PrivacyMask, team, omega: float, lam: float,
               quantize: bool = True) -> float:
    return (loss_protect(x, mask, team, quantize)
            + loss_percept(x, mask, omega, lam, team[0].input_size, quantize))


class BatchLoss:
    """Graph builder for the mean total loss over a fixed batch of face crops.

    Clean embeddings and the clean SSIM reference are computed once; calling
    the instance with a (C, h, w) mask tensor builds a fresh graph.
    """

    def __init__(self, faces, team, omega: float, lam: float, quantize: bool = True):
        if not team:
            raise ValueError("team must not be empty")
        self.team = list(team)
        self.omega, self.lam, self.quantize = omega, lam, quantize
        self.crops = imaging.to_batch(faces)
        self.ref_size = self.team[0].input_size
        self.clean_emb = {m.model_id: np.stack([m.embed(f) for f in faces]) for m in self.team}
        self.clean_ref = nx.resize_bilinear(nx.Tensor(self.crops), self.ref_size,
                                            self.ref_size).data
        self.distances = None
        self.hinge_active = None
        self.ssim = None

    def __call__(self, mask) -> nx.Tensor:
        prot = protect_crops(self.crops, mask, self.quantize)
        dist = protect_distances(self.clean_emb, prot, self.team)
        ref_prot = nx.resize_bilinear(prot, self.ref_size, self.ref_size)
        hinge, s = percept_terms(self.clean_ref, ref_prot, self.omega, self.lam)
        self.distances = dist.data.copy()
        self.hinge_active = hinge.data > 0
        self.ssim = s.data.copy()
        return nx.mean(hinge - dist)


# ---------------------------------------------------------------- training

def schedule_lambda(lam: float, active_fraction: float, lam_min: float = 0.25,
                    lam_max: float = 64.0) -> float:
    """Double lambda when the hinge fired in most evaluations, decay when never."""
    if active_fraction > 0.5:
        return min(2.0 * lam, lam_max)
    if active_fraction == 0.0:
        return max(0.9 * lam, lam_min)
    return lam


def descent_point(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Where the mask's gradient is read.

    While QR(mask) is all zero the protected faces equal the clean ones and
    the distance term sits at its minimum, where its gradient vanishes (up to
    rounding noise). The gradient is then read at a seeded one-level dither
    of random sign instead; the step itself is still applied to ``mask``.
    """
    if np.any(imaging.quantize(mask)):
        return mask
    return mask + rng.choice((-1.0, 1.0), size=mask.shape) / 255.0


def masked_gradient(objective, mask: np.ndarray, rng: np.random.Generator):
    """Loss value and gradient of ``objective`` for a mask update."""
    leaf = nx.Tensor(descent_point(mask, rng), requires_grad=True)
    loss = objective(leaf)
    if not np.isfinite(loss.data):
        return loss, None
    (grad,) = nx.backward(loss, [leaf])
    return loss, grad


def sign_step(mask: np.ndarray, grad: np.ndarray, eta: float, epsilon: float) -> np.ndarray:
    """One clipped sign-gradient descent step; sign(0) is 0."""
    return np.clip(mask - eta * np.sign(grad), -epsilon, epsilon)


def _team_lookup(models, team_ids) -> list:
    by_id = {m.model_id: m for m in models}
    missing = [t for t in team_ids if t not in by_id]
    if missing:
        raise MaskTrainingError(f"unknown model id(s): {', '.join(missing)}")
    return [by_id[t] for t in team_ids]


def train_mask(manifest, identity: str, config: TrainConfig, models,
               history: list | None = None) -> PrivacyMask:
    """Learn one mask from the identity's seen gallery images.

    ``models`` is the pool (or any iterable of models); the team is taken
    from ``config.team``, or all given models when the team is empty.
    Appends one dict per epoch to ``history`` when provided.
    """
    team = _team_lookup(models, config.team) if config.team else list(models)
    if not team:
        raise MaskTrainingError("no team models given")
    records = manifest.select(identity, roles="seen")
    if len(records) < config.batch:
        raise MaskTrainingError(
            f"identity {identity!r} has {len(records)} seen images, need at least {config.batch}")
    faces = [imaging.face_crop(manifest.image(r), r.crop) for r in records]
    channels = faces[0].shape[2]
    mask = np.zeros((channels, config.mask_size, config.mask_size))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x3A5C]))
    dither = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD17]))
    lam = config.lambda_init

    for epoch in range(config.epochs):
        order = rng.permutation(len(faces))
        active = dists = 0
        evaluated = 0
        for start in range(0, len(order), config.batch):
            batch = [faces[i] for i in order[start:start + config.batch]]
            objective = BatchLoss(batch, team, config.omega, lam)
            loss, grad = masked_gradient(objective, mask, dither)
            if grad is None:
                raise MaskTrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch}")
            mask = sign_step(mask, grad, config.eta, config.epsilon)
            active += int(objective.hinge_active.sum())
            dists += float(objective.distances.sum())
            evaluated += len(batch)
        fraction = active / evaluated
        if history is not None:
            history.append({"epoch": epoch, "lambda": lam, "hinge_active": fraction,
                            "mean_distance": dists / evaluated,
                            "max_abs": float(np.abs(mask).max())})
        lam = schedule_lambda(lam, fraction, config.lambda_min, config.lambda_max)
    return PrivacyMask(mask.transpose(1, 2, 0).copy(), config.epsilon, identity, config.seed)


def team_distances(faces, mask: PrivacyMask, team) -> np.ndarray:
    """Team-mean arccos distance between clean and protected embeddings per face."""
    if not faces:
        return np.zeros(0)
    objective = BatchLoss(faces, team, 0.0, 0.0)
    objective(nx.Tensor(mask.values.transpose(2, 0, 1)))
    return objective.distances
