"""Command-line front end: ``mfformer <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import jsonschema

from . import mft
from .data import DataError, DatasetManifest, SubjectRecord, load_arrays, parcellate, synth_generate, validate_manifest
from .estimator import MFFormerClassifier, pack_modalities
from .experiment import (
    PCC_ROW,
    ROW_LABELS,
    format_table,
    manifest_split,
    run_ablation,
    run_pcc_baseline,
    cross_validate,
    manifest_design,
)
from .model import VARIANTS, ConfigError
from .train import ConfusionMatrix, metrics

logger = logging.getLogger("mfformer")

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 1}
RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "manifest": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "folds": {"type": "integer", "minimum": 2},
        "jobs": _INT,
        "variant": {"enum": sorted(VARIANTS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"base_channels": _INT, "attention_dim": _INT, "n_heads": _INT, "mlp_hidden": _INT,
                           "dtype": {"enum": ["float32", "float64"]}},
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"base_lr": _NUM, "warmup_epochs": {"type": "integer", "minimum": 0},
                           "total_epochs": _INT},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"batch_size": {"type": "integer", "minimum": 2}, "weight_decay": _NUM,
                           "beta1": _NUM, "beta2": _NUM},
        },
    },
}

DEFAULT_RUN = {
    "seed": 0,
    "folds": 5,
    "jobs": 1,
    "variant": "4d-3way",
    "model": {},
    "schedule": {},
    "train": {},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_run_config(path: str | None) -> dict:
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid run config: {exc.message}") from exc
    merged = json.loads(json.dumps(DEFAULT_RUN))
    for key, value in doc.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def variant_from_flags(fusion: str | None, placement: str | None, modality: str | None, current: str) -> str:
    """Map --fusion/--placement/--modality onto an ablation row name."""
    if modality == "fmri-only":
        return "baseline2"
    if modality == "t1w-only":
        return "baseline1"
    base = current if current[0] in "34" else "4d-3way"
    cur_fusion, cur_place = base.split("-")
    place = {"last1": "1way", "last3": "3way"}.get(placement, cur_place)
    return f"{fusion or cur_fusion}-{place}"


def apply_overrides(cfg: dict, args) -> dict:
    for key in ("manifest", "out", "seed", "folds", "jobs"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if any(getattr(args, k, None) for k in ("fusion", "placement", "modality")):
        cfg["variant"] = variant_from_flags(args.fusion, args.placement, args.modality, cfg["variant"])
    for flag, section, key in (
        ("epochs", "schedule", "total_epochs"),
        ("warmup", "schedule", "warmup_epochs"),
        ("lr", "schedule", "base_lr"),
        ("batch_size", "train", "batch_size"),
        ("base_channels", "model", "base_channels"),
        ("attention_dim", "model", "attention_dim"),
        ("dtype", "model", "dtype"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[section][key] = val
    try:
        jsonschema.validate({k: v for k, v in cfg.items() if v is not None}, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid run config: {exc.message}") from exc
    return cfg


def estimator_params(cfg: dict) -> dict:
    params = dict(cfg["model"])
    sched = cfg["schedule"]
    if "total_epochs" in sched:
        params["epochs"] = sched["total_epochs"]
    if "warmup_epochs" in sched:
        params["warmup_epochs"] = sched["warmup_epochs"]
    if "base_lr" in sched:
        params["learning_rate"] = sched["base_lr"]
    params.update(cfg["train"])
    epochs = params.get("epochs", 500)
    warmup = params.get("warmup_epochs", 200)
    if not 0 <= warmup < epochs:
        raise UsageError(f"warmup_epochs ({warmup}) must be smaller than total_epochs ({epochs})")
    return params


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_run_manifest(out: str, cfg: dict, artifacts: list[str]) -> None:
    doc = {"config": cfg, "config_hash": config_hash(cfg), "seed": cfg.get("seed"), "artifacts": sorted(artifacts)}
    with open(os.path.join(out, "run_manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    man = synth_generate(args.seed, args.n, args.out, fmri_shape=tuple(args.fmri_shape),
                         t1w_shape=tuple(args.t1w_shape), snr=args.snr, mode=args.mode)
    print(os.path.join(args.out, "manifest.json"))
    logger.info("wrote %d subjects", len(man.subjects))
    return 0


def cmd_parcellate(args) -> int:
    atlas = mft.load(args.labels)
    os.makedirs(args.out, exist_ok=True)
    if args.fmri:
        ts = parcellate(mft.load(args.fmri), atlas, args.n_roi)
        path = os.path.join(args.out, os.path.splitext(os.path.basename(args.fmri))[0] + "_roi.mft")
        mft.save(path, ts)
        print(path)
        return 0
    man = DatasetManifest.load(_require(args.manifest, "--manifest or --fmri"))
    subjects = []
    for s in man.subjects:
        arr = mft.load(man.path(s.fmri))
        if arr.ndim == 4:
            try:
                arr = parcellate(arr, atlas, args.n_roi)
            except DataError as exc:
                raise DataError(f"subject {s.id}: {exc}") from exc
        fname = f"{s.id}_roi.mft"
        mft.save(os.path.join(args.out, fname), arr)
        subjects.append(SubjectRecord(s.id, fname, os.path.abspath(man.path(s.t1w)), s.label))
    out_man = DatasetManifest(subjects, args.n_roi, man.description + " (parcellated)", os.path.abspath(args.out))
    path = os.path.join(args.out, "manifest.json")
    out_man.save(path)
    print(path)
    return 0


def cmd_validate(args) -> int:
    try:
        man = DatasetManifest.load(args.manifest)
    except (OSError, KeyError, ValueError) as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return 1
    problems = validate_manifest(man)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return 1
    print(f"ok: {len(man.subjects)} subjects, n_roi={man.n_roi}")
    return 0


def cmd_train(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    manifest_path = _require(cfg.get("manifest"), "manifest (config or --manifest)")
    out = _require(cfg.get("out"), "out (config or --out)")
    params = estimator_params(cfg)
    man = DatasetManifest.load(manifest_path)
    X, y, fshape, sshape = manifest_design(man)
    split = manifest_split(man, k=cfg["folds"], seed=cfg["seed"])
    est = MFFormerClassifier(fmri_shape=fshape, t1w_shape=sshape, variant=cfg["variant"],
                             random_state=cfg["seed"], **params)
    os.makedirs(out, exist_ok=True)
    report = cross_validate(est, X, y, split, name=cfg["variant"], out_dir=out, jobs=cfg["jobs"])
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    table = format_table([report], ROW_LABELS)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(table)
    artifacts = ["report.json", "report.txt"]
    for f in range(cfg["folds"]):
        artifacts += [f"fold{f}/loss.csv", f"fold{f}/checkpoint", f"fold{f}/confusion.json"]
    write_run_manifest(out, cfg, artifacts)
    print(table, end="")
    return 0


def cmd_eval(args) -> int:
    est = MFFormerClassifier.load(args.checkpoint)
    man = DatasetManifest.load(args.manifest)
    ids = man.ids
    if args.fold is not None:
        _, test = manifest_split(man, k=args.folds, seed=args.seed)[args.fold]
        ids = [man.ids[i] for i in test]
    elif args.ids:
        ids = args.ids
    fmri, t1w, y = load_arrays(man, ids)
    pred = est.predict(pack_modalities(fmri, t1w))
    cm = ConfusionMatrix.from_predictions(y, pred)
    doc = {"confusion": cm.to_dict(), "n": cm.total}
    try:
        doc["metrics"] = metrics(cm)
    except ValueError:
        doc["metrics"] = None
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _table_outputs(reports, out, cfg, stem):
    table = format_table(reports, ROW_LABELS)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"{stem}.txt"), "w") as fh:
            fh.write(table)
        with open(os.path.join(out, f"{stem}.json"), "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        write_run_manifest(out, cfg, [f"{stem}.txt", f"{stem}.json"])
    print(table, end="")


def cmd_ablate(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    man = DatasetManifest.load(_require(cfg.get("manifest"), "--manifest"))
    rows = args.rows or (list(VARIANTS) + ([] if args.no_pcc else [PCC_ROW]))
    reports = run_ablation(man, rows=rows, seed=cfg["seed"], k=cfg["folds"], estimator_params=estimator_params(cfg),
                           out_dir=None, jobs=cfg["jobs"])
    _table_outputs(reports, cfg.get("out"), cfg, "ablation")
    return 0


def cmd_baseline(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    man = DatasetManifest.load(_require(cfg.get("manifest"), "--manifest"))
    params = estimator_params(cfg)
    report = run_pcc_baseline(man, seed=cfg["seed"], k=cfg["folds"], estimator_params=params, jobs=cfg["jobs"])
    _table_outputs([report], cfg.get("out"), cfg, "baseline")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p, with_variant=True):
    p.add_argument("--config", help="JSON run config (flags override its values)")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--folds", type=int, help="number of CV folds (default 5)")
    p.add_argument("--jobs", type=int, help="parallel folds (1 = reference deterministic mode)")
    p.add_argument("--epochs", type=int, help="total epochs (default 500)")
    p.add_argument("--warmup", type=int, help="warm-up epochs (default 200)")
    p.add_argument("--lr", type=float, help="peak learning rate (default 5e-4)")
    p.add_argument("--batch-size", type=int, help="training batch size (default 5)")
    p.add_argument("--base-channels", type=int, help="channels of the first encoder stage (default 8)")
    p.add_argument("--attention-dim", type=int, help="attention width d (default 128)")
    p.add_argument("--dtype", choices=["float32", "float64"], help="compute precision (default float64)")
    if with_variant:
        p.add_argument("--fusion", choices=["3d", "4d"], help="3d: depth-averaged T1w tokens; 4d: depth-repeated fMRI tokens")
        p.add_argument("--placement", choices=["last1", "last3"], help="FTM after the last stage or the last three")
        p.add_argument("--modality", choices=["both", "fmri-only", "t1w-only"], help="single-modality baselines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfformer", description="Multi-modality fusion transformer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--n", type=int, default=40, help="subjects per class")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--snr", type=float, default=1.0, help="signature power / noise power")
    p.add_argument("--mode", choices=["both", "cross"], default="both",
                   help="both: patients carry both signatures; cross: exactly one")
    p.add_argument("--fmri-shape", type=int, nargs=2, default=[64, 100], metavar=("T", "N"))
    p.add_argument("--t1w-shape", type=int, nargs=3, default=[32, 32, 32], metavar=("W", "H", "D"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("parcellate", help="average 4D fMRI volumes into ROI time series")
    p.add_argument("--labels", required=True, help="MFT1 integer label volume (0 = background)")
    p.add_argument("--n-roi", type=int, required=True, help="number of ROIs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", help="parcellate every 4D fMRI file listed in this manifest")
    p.add_argument("--fmri", help="parcellate a single 4D MFT1 file instead")
    p.set_defaults(func=cmd_parcellate)

    p = sub.add_parser("validate", help="check a manifest and the files it references")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="k-fold cross-validation of one configuration")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--fold", type=int, help="evaluate only this fold's test subjects")
    p.add_argument("--folds", type=int, default=5, help="number of folds used for --fold")
    p.add_argument("--seed", type=int, default=0, help="split seed used for --fold")
    p.add_argument("--ids", nargs="+", help="explicit subject ids to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six ablation variants plus the PCC+MLP baseline")
    _add_run_flags(p, with_variant=False)
    p.add_argument("--rows", nargs="+", choices=list(VARIANTS) + [PCC_ROW], help="restrict to these rows")
    p.add_argument("--no-pcc", action="store_true", help="skip the PCC+MLP row")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="PCC upper-triangle features + MLP")
    _add_run_flags(p, with_variant=False)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MFF_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))  # exits 2
    except (DataError, OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
