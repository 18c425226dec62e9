"""Command-line entry point.

Every subcommand works inside one run directory (``--out``, default ``run``)::

    run/data/            generated corpus and manifest.json
    run/models/          pool checkpoints (*.p3fm) and pool.json
    run/team.json        selected team, ranking.tsv beside it
    run/masks/           one key file per protected identity (*.p3mk)
    run/reports/         evaluation reports
    run/config.json      effective configuration, merged across commands
    run/log/<cmd>.json   inputs, config hash and seed of the last <cmd> run

Exit status: 0 on success, 1 on invalid input, 2 when a hard gate fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalharness as ev
from . import frcore, imaging, maskgen, protect, synthdata, teaming
from . import numerics as nx

log = logging.getLogger("idcloak")

EXIT_OK, EXIT_INVALID, EXIT_GATE = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "n_identities": 8,
    "images_per_identity": 20,
    "size": 32,
    "pool_epochs": 30,
    "team_size": 2,
    "eta": 0.001,
    "batch": 4,
    "epsilon": 0.063,
    "omega": 0.03,
    "epochs": 50,
    "team": [],
    "filters": ["jpeg:75", "gaussian:0.5", "median:3"],
}

# flags that mirror TrainConfig fields
TRAIN_FLAGS = {"eta": float, "batch": int, "epsilon": float, "omega": float, "epochs": int}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _team_list(text: str) -> list:
    return [t for t in text.split(",") if t]


def _crop(text: str) -> imaging.CropSpec:
    try:
        top, left, side = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"crop must be top,left,side, got {text!r}") from None
    return imaging.CropSpec(top, left, side)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of configuration values")
    common.add_argument("--seed", type=int, help="global seed (non-negative)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    train = _Parser(add_help=False)
    for name, kind in TRAIN_FLAGS.items():
        train.add_argument(f"--{name}", type=kind)
    train.add_argument("--team", type=_team_list, help="comma-separated model ids")

    p = _Parser(prog="idcloak", description="Per-identity privacy masks for face images.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    g.add_argument("--n-identities", type=int, dest="n_identities")
    g.add_argument("--images-per-identity", type=int, dest="images_per_identity")
    g.add_argument("--size", type=int)
    t = sub.add_parser("train-models", parents=[common], help="train the model pool")
    t.add_argument("--pool-epochs", type=int, dest="pool_epochs")
    s = sub.add_parser("select-team", parents=[common], help="pick the most diverse team")
    s.add_argument("--team-size", type=int, dest="team_size")
    m = sub.add_parser("train-mask", parents=[common, train], help="learn identity masks")
    m.add_argument("--identity", action="append", dest="identities",
                   help="identity to protect (repeatable; default all)")
    for name, helptext in (("protect", "apply a mask to an image"),
                           ("unmask", "remove a mask from an image")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--key", type=Path, required=True, help="mask key file")
        c.add_argument("--input", type=Path, required=True)
        c.add_argument("--output", type=Path, required=True)
        c.add_argument("--crop", type=_crop, help="face crop as top,left,side (default: centred)")
    e = sub.add_parser("evaluate", parents=[common, train], help="run an evaluation scenario")
    e.add_argument("--scenario", choices=("protection", "unmask", "adaptive", "baseline"),
                   default="protection")
    e.add_argument("--filters", type=lambda s: s.split(","), help="e.g. jpeg:75,median:3")
    e.add_argument("--format", choices=("table-text", "delimited-values"), default="table-text")
    gc = sub.add_parser("grad-check", parents=[common], help="check mask-loss gradients")
    gc.add_argument("--points", type=int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return p


# ---------------------------------------------------------------- configuration

def _load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    saved = args.out / "config.json"
    if saved.exists():
        cfg.update(json.loads(saved.read_text()))
    if args.config is not None:
        try:
            user = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from exc
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(user)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ValueError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def _train_config(cfg: dict, team) -> maskgen.TrainConfig:
    return maskgen.TrainConfig(eta=cfg["eta"], batch=cfg["batch"], epsilon=cfg["epsilon"],
                               omega=cfg["omega"], epochs=cfg["epochs"], seed=cfg["seed"],
                               team=list(team), mask_size=cfg["size"])


def _record(args, cfg: dict, inputs: list, outputs: list) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    logdir = args.out / "log"
    logdir.mkdir(exist_ok=True)
    entry = {"command": args.command, "seed": cfg["seed"], "config_hash": ev.config_hash(cfg),
             "config": cfg, "inputs": sorted(map(str, inputs)), "outputs": sorted(map(str, outputs))}
    (logdir / f"{args.command}.json").write_text(json.dumps(entry, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- run-directory access

def _manifest(out: Path) -> synthdata.Manifest:
    path = out / "data" / "manifest.json"
    if not path.exists():
        raise ValueError(f"{path} not found; run gen-data first")
    return synthdata.Manifest.load(path)


def _pool(out: Path) -> list:
    index = out / "models" / "pool.json"
    if not index.exists():
        raise ValueError(f"{index} not found; run train-models first")
    ids = json.loads(index.read_text())["models"]
    return [frcore.load_model(out / "models" / f"{m}.p3fm") for m in ids]


def _team(out: Path, cfg: dict, pool) -> list:
    team = list(cfg["team"])
    if not team:
        path = out / "team.json"
        if not path.exists():
            raise ValueError("no team given (--team) and no team.json; run select-team first")
        team = json.loads(path.read_text())["team"]
    known = {m.model_id for m in pool}
    missing = [t for t in team if t not in known]
    if missing:
        raise ValueError(f"unknown model id(s): {', '.join(missing)}")
    return team


def _masks(out: Path) -> dict:
    d = out / "masks"
    return {p.stem: protect.mask_load(p) for p in sorted(d.glob("*.p3mk"))} if d.exists() else {}


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg) -> int:
    m = synthdata.gen_dataset(args.out / "data", cfg["n_identities"],
                              cfg["images_per_identity"], cfg["size"], cfg["seed"])
    _record(args, cfg, [], [m.root / "manifest.json"])
    print(f"wrote {len(m.records)} images for {len(m.identities)} identities to {m.root}")
    return EXIT_OK


def cmd_train_models(args, cfg) -> int:
    manifest = _manifest(args.out)
    pool = frcore.build_pool(manifest, epochs=cfg["pool_epochs"], seed=cfg["seed"])
    d = args.out / "models"
    d.mkdir(parents=True, exist_ok=True)
    info = []
    for model in pool:
        frcore.save_model(model, d / f"{model.model_id}.p3fm")
        info.append({"model_id": model.model_id,
                     "probe_accuracy": frcore.probe_accuracy(model, manifest)})
        print(f"{model.model_id}\tprobe accuracy {info[-1]['probe_accuracy']:.2f}")
    (d / "pool.json").write_text(json.dumps(
        {"models": [m.model_id for m in pool], "admission": info}, indent=1) + "\n")
    _record(args, cfg, [args.out / "data" / "manifest.json"], [d / "pool.json"])
    return EXIT_OK


def cmd_select_team(args, cfg) -> int:
    manifest = _manifest(args.out)
    pool = _pool(args.out)
    profiles = {m.model_id: teaming.negative_samples(m, manifest) for m in pool}
    ranked = teaming.rank_teams(list(profiles), cfg["team_size"], profiles)
    best = ranked[0]
    (args.out / "ranking.tsv").write_text(teaming.format_ranking(ranked))
    (args.out / "team.json").write_text(json.dumps(
        {"team": list(best.team), "d_focal": best.d_focal,
         "negatives": {k: sorted(v.negatives) for k, v in sorted(profiles.items())}},
        indent=1) + "\n")
    _record(args, cfg, [args.out / "models" / "pool.json"], [args.out / "team.json"])
    print(f"team {','.join(best.team)}\td_focal {best.d_focal:.6f}")
    return EXIT_OK


def cmd_train_mask(args, cfg) -> int:
    manifest = _manifest(args.out)
    pool = _pool(args.out)
    team = _team(args.out, cfg, pool)
    config = _train_config(cfg, team)
    identities = args.identities or manifest.identities
    unknown = [i for i in identities if i not in manifest.identities]
    if unknown:
        raise ValueError(f"unknown identity: {', '.join(unknown)}")
    d = args.out / "masks"
    d.mkdir(parents=True, exist_ok=True)
    outputs = []
    for ident in identities:
        mask = maskgen.train_mask(manifest, ident, config, pool)
        path = d / f"{ident}.p3mk"
        protect.mask_save(mask, path)
        outputs.append(path)
        print(f"{ident}\tmax |M| {np.abs(mask.values).max():.4f}\t{path}")
    cfg = dict(cfg, team=team)
    _record(args, cfg, [args.out / "models" / "pool.json"], outputs)
    return EXIT_OK


def _cmd_image(args, cfg, fn) -> int:
    mask = protect.mask_load(args.key)
    x = imaging.load_image(args.input)
    imaging.save_image(fn(x, mask, args.crop), args.output)
    _record(args, cfg, [args.key, args.input], [args.output])
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    manifest = _manifest(args.out)
    pool = _pool(args.out)
    masks = _masks(args.out)
    team = _team(args.out, cfg, pool)
    gate_ok = True
    if args.scenario == "protection":
        report = ev.run_protection_eval(manifest, masks, pool, team)
        baseline = ev.run_protection_eval(manifest, {}, pool, team)
        gate_ok = all(baseline.accuracy(m.model_id) >= frcore.ADMISSION_ACCURACY for m in pool)
        report.notes["baseline_gate"] = gate_ok
    elif args.scenario == "unmask":
        report = ev.run_unmask_eval(manifest, masks, pool, team)
        gate_ok = all(report.accuracy(m.model_id, "c-unmasked")
                      == report.accuracy(m.model_id, "a-clean") for m in pool)
        report.notes["restore_exact"] = gate_ok
    elif args.scenario == "adaptive":
        report = ev.run_adaptive_eval(manifest, masks, pool, cfg["filters"], team)
        gate_ok = all(report.notes["gate"].values())
    else:
        report = _baseline_report(manifest, masks, pool, team, cfg)
    report.config = dict(cfg, scenario=args.scenario, team=team,
                         masks=sorted(masks), models=[m.model_id for m in pool])
    d = args.out / "reports"
    d.mkdir(parents=True, exist_ok=True)
    ext = "txt" if args.format == "table-text" else "tsv"
    path = ev.emit_report(report, d / f"{args.scenario}.{ext}", args.format)
    sys.stdout.write(path.read_text())
    _record(args, cfg, [args.out / "models" / "pool.json"] + [args.out / "masks" / f"{k}.p3mk"
                                                               for k in sorted(masks)], [path])
    return EXIT_OK if gate_ok else EXIT_GATE


def _baseline_report(manifest, masks, pool, team, cfg) -> ev.EvalReport:
    """Per-image optimization against the universal mask, on seen images."""
    if not masks:
        raise ValueError("need at least one mask for the baseline scenario")
    by_id = {m.model_id: m for m in pool}
    models = [by_id[t] for t in team]
    report = ev.EvalReport("baseline")
    wins = total = 0
    for ident, mask in sorted(masks.items()):
        recs = manifest.select(ident, roles="seen")
        config = _train_config(cfg, team)
        steps = ev.baseline_steps(config, len(recs))
        for r in recs:
            x = manifest.image(r)
            own = ev.per_image_mask(x, ident, models, config, steps, r.crop)
            face = [imaging.face_crop(x, r.crop)]
            d_own = maskgen.team_distances(face, own, models)[0]
            d_uni = maskgen.team_distances(face, mask, models)[0]
            wins += d_own >= d_uni
            total += 1
    report.notes["per_image_wins"] = f"{wins}/{total}"
    return report


def cmd_grad_check(args, cfg) -> int:
    worst = grad_check_loss(args.points, cfg["seed"])
    print(f"max relative error {worst:.3e} over {args.points} points (tolerance {args.tolerance:g})")
    _record(args, cfg, [], [])
    return EXIT_OK if worst <= args.tolerance else EXIT_GATE


def grad_check_loss(points: int = 20, seed: int = 0, team_sizes=(1, 2), size: int = 8) -> float:
    """Largest finite-difference error of the mask loss on small random models."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C4]))
    arch = frcore.ARCHITECTURES["conv5"]
    worst = 0.0
    for n in team_sizes:
        team = [frcore.EmbeddingModel(f"toy{i}", arch,
                                      frcore.init_params(arch, 3, size, None, rng), size)
                for i in range(n)]
        faces = [rng.uniform(0.1, 0.9, size=(size, size, 3)) for _ in range(2)]
        objective = maskgen.BatchLoss(faces, team, omega=0.0, lam=1.0, quantize=False)
        for _ in range(points):
            point = rng.uniform(-0.063, 0.063, size=(3, size, size))
            worst = max(worst, nx.grad_check(objective, point, h=1e-4))
    return worst


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-models": cmd_train_models,
    "select-team": cmd_select_team,
    "train-mask": cmd_train_mask,
    "protect": lambda a, c: _cmd_image(a, c, protect.mask_apply),
    "unmask": lambda a, c: _cmd_image(a, c, protect.unmask),
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, KeyError, maskgen.MaskTrainingError) as exc:
        print(f"idcloak {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (frcore.TrainingDiverged, ev.GateFailure) as exc:
        print(f"idcloak {args.command}: {exc}", file=sys.stderr)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
