"""Focal-diversity team selection.

Every model's failures on a held-out validation split are collected once.
For a candidate team, each member in turn is the focal model, and the
fraction of its failures that the other members share estimates how
correlated the team's mistakes are. The team with the least correlated
mistakes (highest focal diversity) is chosen.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from fractions import Fraction

from . import frcore, imaging

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailureProfile:
    model_id: str
    negatives: frozenset  # validation image paths the model misidentifies
    n_validation: int = 0


@dataclass
class DiversityReport:
    team: tuple
    lambdas: dict
    d_focal: float
    never_fail: list = field(default_factory=list)


def validation_records(manifest) -> list:
    return manifest.select(roles=("probe", "unseen"))


def negative_samples(model, manifest, gallery: frcore.Gallery | None = None) -> FailureProfile:
    """Validation images (probe + unseen) the model assigns a wrong identity.

    The default gallery holds only seen images so the validation split stays
    disjoint from it.
    """
    val = validation_records(manifest)
    if not val:
        raise ValueError("validation set is empty")
    gallery = gallery or frcore.gallery_from_manifest(manifest, roles=("seen",))
    g = gallery.embeddings(model)
    misses = set()
    for r in val:
        emb = model.embed(imaging.face_crop(manifest.image(r), r.crop))
        if frcore.nearest_label(emb, g, gallery.labels) != r.identity:
            misses.add(r.path)
    return FailureProfile(model.model_id, frozenset(misses), len(val))


def cofailure_distribution(focal: FailureProfile, others) -> list:
    """p[i] = share of the focal negatives on which exactly i others also fail."""
    counts = [0] * (len(others) + 1)
    for sample in focal.negatives:
        counts[sum(sample in o.negatives for o in others)] += 1
    n = len(focal.negatives)
    return [Fraction(c, n) for c in counts]


def _lambda_exact(team, focal_id: str, profiles: dict) -> Fraction:
    if focal_id not in team:
        raise ValueError(f"focal model {focal_id!r} is not in the team")
    focal = profiles[focal_id]
    if not focal.negatives:
        return Fraction(0)
    others = [profiles[m] for m in team if m != focal_id]
    p = cofailure_distribution(focal, others)
    s = len(team)
    if s == 2:
        return p[1]
    p1 = sum(Fraction(i, s - 1) * pi for i, pi in enumerate(p))
    p2 = sum(Fraction(i * (i - 1), (s - 1) * (s - 2)) * pi for i, pi in enumerate(p))
    return Fraction(0) if p1 == 0 else p2 / p1


def lambda_focal(team, focal_id: str, profiles: dict) -> float:
    """Correlation of the other members' failures with the focal model's.

    0 when no other member ever fails together with the focal model, 1 when
    all of them fail on every focal negative. A focal model without
    negatives scores 0.
    """
    return float(_lambda_exact(team, focal_id, profiles))


def focal_diversity(team, profiles: dict, warn: bool = True) -> DiversityReport:
    """Mean of (1 - lambda) over focal members, computed in exact arithmetic.

    Equal diversities therefore compare equal, and the tie rule of
    ``rank_teams`` is not disturbed by rounding.
    """
    team = tuple(sorted(team))
    if len(team) < 2:
        raise ValueError("focal diversity needs a team of at least two models")
    exact = {m: _lambda_exact(team, m, profiles) for m in team}
    never = [m for m in team if not profiles[m].negatives]
    for m in never if warn else ():
        log.warning("model %s has no validation failures; its lambda is taken as 0", m)
    d = sum(1 - lam for lam in exact.values()) / len(team)
    return DiversityReport(team, {m: float(v) for m, v in exact.items()}, float(d), never)


def rank_teams(model_ids, size: int, profiles: dict) -> list:
    """All size-S teams, most diverse first; ties by sorted model-id list."""
    ids = sorted(model_ids)
    if not 2 <= size <= len(ids):
        raise ValueError(f"team size must be in [2, {len(ids)}], got {size}")
    for m in ids:
        if not profiles[m].negatives:
            log.warning("model %s has no validation failures; its lambda is taken as 0", m)
    reports = [focal_diversity(t, profiles, warn=False)
               for t in itertools.combinations(ids, size)]
    return sorted(reports, key=lambda r: (-r.d_focal, r.team))


def select_team(model_ids, size: int, profiles: dict) -> DiversityReport:
    return rank_teams(model_ids, size, profiles)[0]


def least_diverse(model_ids, size: int, profiles: dict) -> DiversityReport:
    ranked = rank_teams(model_ids, size, profiles)
    low = min(r.d_focal for r in ranked)
    return next(r for r in ranked if r.d_focal == low)


def format_ranking(reports) -> str:
    lines = ["# rank\td_focal\tteam\tlambdas"]
    for i, r in enumerate(reports, 1):
        lams = ",".join(f"{m}={r.lambdas[m]:.6f}" for m in r.team)
        lines.append(f"{i}\t{r.d_focal:.6f}\t{','.join(r.team)}\t{lams}")
    return "\n".join(lines) + "\n"
