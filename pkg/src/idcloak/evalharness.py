"""End-to-end protection experiments and their report files.

Every scenario identifies clean probes against a gallery in which only the
protected identities' entries are modified (masked, unmasked or filtered).
Accuracy cells are kept as hit / total counts so that PSR = 100 - accuracy
holds exactly in every emitted cell.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import frcore, imaging, maskgen
from . import protect

FILTERS = ("identity", "jpeg", "gaussian", "median")
# seen images per identity in the default 20-image split
DEFAULT_SEEN = 14
COLUMNS = ("scenario", "model", "team", "identity", "probes", "accuracy", "psr")


class GateFailure(RuntimeError):
    """A hard evaluation gate (baseline accuracy, invariant) did not hold."""


@dataclass(frozen=True)
class Cell:
    scenario: str
    model_id: str
    known: bool | None  # in the team used for mask training; None when not applicable
    identity: str  # "*" for the aggregate over all evaluated identities
    hits: int
    total: int

    @property
    def accuracy(self) -> Fraction:
        return Fraction(100 * self.hits, self.total) if self.total else Fraction(100)

    @property
    def psr(self) -> Fraction:
        return 100 - self.accuracy


@dataclass
class EvalReport:
    scenario: str
    cells: list = field(default_factory=list)
    ssim: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    def cell(self, model_id: str, scenario: str | None = None, identity: str = "*") -> Cell:
        scenario = scenario or self.scenario
        for c in self.cells:
            if (c.model_id, c.scenario, c.identity) == (model_id, scenario, identity):
                return c
        raise KeyError((model_id, scenario, identity))

    def accuracy(self, model_id: str, scenario: str | None = None) -> float:
        return float(self.cell(model_id, scenario).accuracy)

    def psr(self, model_id: str, scenario: str | None = None) -> float:
        return float(self.cell(model_id, scenario).psr)

    def mean_psr(self, model_ids, scenario: str | None = None) -> float:
        return float(np.mean([self.psr(m, scenario) for m in model_ids]))

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- galleries

def _check_masks(manifest, masks: dict) -> list:
    unknown = sorted(set(masks) - set(manifest.identities))
    if unknown:
        raise ValueError(f"masks given for unknown identities: {', '.join(unknown)}")
    return [i for i in manifest.identities if i in masks]


def _require_masks(masks: dict, protected) -> None:
    missing = [i for i in protected if i not in masks]
    if missing:
        raise ValueError(f"no mask for protected identity: {', '.join(missing)}")


def _probes(manifest, identities):
    recs = [r for r in manifest.select(roles="probe") if r.identity in set(identities)]
    return [imaging.face_crop(manifest.image(r), r.crop) for r in recs], [r.identity for r in recs]


def _gallery(manifest, protected: set, edit):
    """Gallery where ``edit(record, image)`` replaces protected identities' images."""
    def transform(r, face):
        if r.identity not in protected:
            return face
        return imaging.face_crop(edit(r, manifest.image(r)), r.crop)
    return frcore.gallery_from_manifest(manifest, transform=transform)


def _rounds(manifest, protected, edit, joint: bool = False) -> list:
    """(gallery, probes, labels) triples to score.

    By default each protected identity is scored on its own, against a
    gallery where only its entries are edited and everyone else is clean
    noise. ``joint`` edits all protected identities in one gallery. With
    nobody protected, all probes meet the clean gallery.
    """
    if not protected or joint:
        evaluated = list(protected) or list(manifest.identities)
        return [(_gallery(manifest, set(protected), edit), *_probes(manifest, evaluated))]
    return [(_gallery(manifest, {i}, edit), *_probes(manifest, [i])) for i in protected]


def _score(report, scenario, pool, team, rounds, identities):
    """Add one aggregate and one per-identity cell per pool model."""
    team = set(team or ())
    for model in pool:
        hits = {i: 0 for i in identities}
        totals = {i: 0 for i in identities}
        for gallery, probes, labels in rounds:
            g = gallery.embeddings(model)
            for face, label in zip(probes, labels):
                totals[label] += 1
                hits[label] += frcore.nearest_label(model.embed(face), g, gallery.labels) == label
        known = (model.model_id in team) if team else None
        report.cells.append(Cell(scenario, model.model_id, known, "*",
                                 sum(hits.values()), sum(totals.values())))
        for i in identities:
            report.cells.append(Cell(scenario, model.model_id, known, i, hits[i], totals[i]))


def _ssim_stats(pairs) -> dict:
    if not pairs:
        return {}
    vals = np.array([imaging.ssim(a, b) for a, b in pairs])
    return {"mean": float(vals.mean()), "std": float(vals.std()),
            "min": float(vals.min()), "n": int(vals.size)}


# ---------------------------------------------------------------- scenarios

def run_protection_eval(manifest, masks: dict, pool, team=(), protected=None,
                        joint: bool = False) -> EvalReport:
    """PSR of every pool model when the protected identities' gallery is masked.

    ``protected`` defaults to the identities that have a mask. Probes stay
    clean. Each protected identity is scored with all other identities clean
    unless ``joint`` is set (see ``_rounds``); with nobody protected all
    probes are scored against the clean gallery (the baseline).
    """
    t0 = time.perf_counter()
    protected = list(protected) if protected is not None else _check_masks(manifest, masks)
    _require_masks(masks, protected)
    evaluated = protected or list(manifest.identities)
    rounds = _rounds(manifest, protected,
                     lambda r, x: protect.mask_apply(x, masks[r.identity], r.crop), joint)
    report = EvalReport("protection", config={"team": sorted(team), "protected": protected,
                                              "joint": joint})
    _score(report, "protection", pool, team, rounds, evaluated)
    pairs = []
    for r in manifest.select(roles=("seen", "unseen")):
        if r.identity in set(protected):
            x = manifest.image(r)
            pairs.append((imaging.face_crop(x, r.crop),
                          imaging.face_crop(protect.mask_apply(x, masks[r.identity], r.crop),
                                            r.crop)))
    report.ssim = _ssim_stats(pairs)
    report.runtime = time.perf_counter() - t0
    return report


def run_unmask_eval(manifest, masks: dict, pool, team=()) -> EvalReport:
    """Accuracy under no protection, protection, correct and incorrect unmasking.

    The incorrect key of an identity is the mask of the next protected
    identity (cyclically in manifest order).
    """
    t0 = time.perf_counter()
    protected = _check_masks(manifest, masks)
    if len(protected) < 2:
        raise ValueError(f"need ≥ 2 masks for the unmask scenarios, got {len(protected)}")
    wrong = {p: masks[protected[(k + 1) % len(protected)]] for k, p in enumerate(protected)}
    prot = set(protected)
    report = EvalReport("unmask", config={"team": sorted(team), "protected": protected})

    def masked(r, x):
        return protect.mask_apply(x, masks[r.identity], r.crop)

    scenarios = {
        "a-clean": lambda r, x: x,
        "b-protected": masked,
        "c-unmasked": lambda r, x: protect.unmask(masked(r, x), masks[r.identity], r.crop),
        "d-wrong-key": lambda r, x: protect.unmask(masked(r, x), wrong[r.identity], r.crop),
    }
    for name, edit in scenarios.items():
        _score(report, name, pool, team, _rounds(manifest, protected, edit), protected)

    sat = total = 0
    for r in manifest.select(roles=("seen", "unseen")):
        if r.identity in prot:
            s = protect.saturated(manifest.image(r), masks[r.identity], r.crop)
            sat += int(s.sum())
            total += s.size
    report.notes["saturated_pixels"] = sat
    report.notes["saturation_rate"] = sat / total if total else 0.0
    report.runtime = time.perf_counter() - t0
    return report


def parse_filter(spec) -> tuple:
    """``"jpeg:75"`` / ``("gaussian", 1.0)`` / ``"identity"`` -> (name, strength)."""
    if isinstance(spec, str):
        name, _, arg = spec.partition(":")
        spec = (name, arg) if arg else (name, None)
    name, arg = spec
    if name not in FILTERS:
        raise ValueError(f"unknown filter {name!r}; expected one of {', '.join(FILTERS)}")
    if name == "identity":
        return ("identity", None)
    if arg is None:
        raise ValueError(f"filter {name} needs a strength")
    if name == "jpeg":
        q = int(arg)
        if not 1 <= q <= 100:
            raise ValueError(f"jpeg quality must be in [1, 100], got {q}")
        return (name, q)
    if name == "gaussian":
        s = float(arg)
        if not s > 0:
            raise ValueError(f"gaussian sigma must be positive, got {s}")
        return (name, s)
    k = int(arg)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median size must be a positive odd integer, got {k}")
    return (name, k)


def filter_label(f) -> str:
    name, arg = f
    return name if arg is None else f"{name}:{arg}"


def apply_filter(x: np.ndarray, f) -> np.ndarray:
    name, arg = f
    if name == "identity":
        return x
    if name == "jpeg":
        return imaging.jpeg_filter(x, arg)
    if name == "gaussian":
        return imaging.gaussian_filter(x, arg)
    return imaging.median_filter(x, arg)


def run_adaptive_eval(manifest, masks: dict, pool, filters, team=(),
                      min_clean_accuracy: float = 80.0) -> EvalReport:
    """PSR when the intruder washes the protected gallery entries with a filter.

    For each filter two scenarios are scored: ``clean+<f>`` (the filter on the
    unprotected entries, the calibration gate) and ``<f>`` (the filter on the
    masked entries). ``notes["gate"][label]`` is True when every pool model
    keeps at least ``min_clean_accuracy`` on the clean, filtered gallery.
    """
    t0 = time.perf_counter()
    protected = _check_masks(manifest, masks)
    if not protected:
        raise ValueError("no masks given")
    filters = [parse_filter(f) for f in filters]
    report = EvalReport("adaptive", config={"team": sorted(team), "protected": protected,
                                            "filters": [filter_label(f) for f in filters]})
    gate = {}
    for f in filters:
        label = filter_label(f)
        _score(report, f"clean+{label}", pool, team,
               _rounds(manifest, protected, lambda r, x, f=f: apply_filter(x, f)), protected)
        _score(report, label, pool, team,
               _rounds(manifest, protected, lambda r, x, f=f: apply_filter(
                   protect.mask_apply(x, masks[r.identity], r.crop), f)), protected)
        gate[label] = all(report.accuracy(m.model_id, f"clean+{label}") >= min_clean_accuracy
                          for m in pool)
    report.notes["gate"] = gate
    report.runtime = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- per-image reference

def baseline_steps(config: maskgen.TrainConfig, n_images: int, cap: int = 200) -> int:
    """Steps a universal mask gets (epochs x batches per epoch), capped."""
    return min(cap, config.epochs * -(-n_images // config.batch))


def per_image_mask(x: np.ndarray, identity: str, team, config: maskgen.TrainConfig,
                   steps: int, crop: imaging.CropSpec | None = None) -> maskgen.PrivacyMask:
    """The mask update rule run on one image's own perturbation."""
    face = imaging.face_crop(x, crop)
    delta = np.zeros((face.shape[2], config.mask_size, config.mask_size))
    lam = config.lambda_init
    active = evaluated = 0
    per_epoch = max(1, steps // max(1, config.epochs))
    dither = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD17]))
    for step in range(steps):
        objective = maskgen.BatchLoss([face], team, config.omega, lam)
        loss, grad = maskgen.masked_gradient(objective, delta, dither)
        if grad is None:
            raise maskgen.MaskTrainingError(f"non-finite loss at step {step}")
        delta = maskgen.sign_step(delta, grad, config.eta, config.epsilon)
        active += int(objective.hinge_active.sum())
        evaluated += 1
        if (step + 1) % per_epoch == 0:
            lam = maskgen.schedule_lambda(lam, active / evaluated, config.lambda_min,
                                          config.lambda_max)
            active = evaluated = 0
    return maskgen.PrivacyMask(delta.transpose(1, 2, 0).copy(), config.epsilon, identity,
                               config.seed)


def per_image_baseline(x: np.ndarray, identity: str, team, config: maskgen.TrainConfig,
                       steps: int | None = None,
                       crop: imaging.CropSpec | None = None) -> np.ndarray:
    """Image protected by a perturbation optimized for this image alone.

    ``steps`` defaults to the budget a universal mask gets on the default split.
    """
    if steps is None:
        steps = baseline_steps(config, DEFAULT_SEEN)
    return protect.mask_apply(x, per_image_mask(x, identity, team, config, steps, crop), crop)


# ---------------------------------------------------------------- report files

def _fmt(v: Fraction) -> str:
    """Two decimals, halves rounded up, computed on the exact fraction."""
    cents = (v * 100 * 2 + 1) // 2
    return f"{cents // 100}.{cents % 100:02d}"


def _rows(reports):
    for rep in reports:
        for c in rep.cells:
            known = "-" if c.known is None else ("known" if c.known else "unknown")
            acc_cents = (c.accuracy * 200 + 1) // 2
            psr = Fraction(10000 - acc_cents, 100)
            yield (c.scenario, c.model_id, known, c.identity, str(c.total),
                   _fmt(Fraction(acc_cents, 100)), _fmt(psr))


def _meta(reports) -> list:
    lines = []
    for rep in reports:
        lines.append(f"# report {rep.scenario} config {rep.config_hash}")
        for k, v in sorted(rep.ssim.items()):
            lines.append(f"# {rep.scenario} ssim_{k} {v:.6f}" if isinstance(v, float)
                         else f"# {rep.scenario} ssim_{k} {v}")
        for k, v in sorted(rep.notes.items()):
            if isinstance(v, dict):
                v = ",".join(f"{a}={b}" for a, b in sorted(v.items()))
            elif isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"# {rep.scenario} {k} {v}")
    return lines


def render_report(reports, fmt: str = "table-text") -> str:
    """Report text. Runtime is left out so identical runs give identical bytes."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if fmt not in ("table-text", "delimited-values"):
        raise ValueError(f"unknown report format {fmt!r}")
    rows = list(_rows(reports))
    lines = _meta(reports)
    if fmt == "delimited-values":
        lines.append("\t".join(COLUMNS))
        lines.extend("\t".join(r) for r in rows)
    else:
        widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(COLUMNS)]
        lines.append("  ".join(h.ljust(w) for h, w in zip(COLUMNS, widths)).rstrip())
        lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)
    return "\n".join(lines) + "\n"


def emit_report(reports, path, fmt: str = "table-text") -> Path:
    path = Path(path)
    text = render_report(reports, fmt)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
