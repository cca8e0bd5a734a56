"""Cross-validation driver, ablation grid and the connectivity baseline."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .data import DatasetManifest, fold_members, kfold_split, load_arrays
from .estimator import MFFormerClassifier, make_pcc_mlp, pack_modalities, with_stream
from .model import VARIANT_LABELS, VARIANTS
from .train import ConfusionMatrix, metrics, write_trace_csv

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("BACC", "F1", "SEN", "SPEC")
PCC_ROW = "pcc-mlp"


@dataclass
class EvalReport:
    name: str
    folds: list[ConfusionMatrix]
    config: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)

    @property
    def per_fold(self) -> list[dict[str, float]]:
        return [metrics(cm) for cm in self.folds]

    @property
    def mean(self) -> dict[str, float]:
        per = self.per_fold
        return {k: float(np.mean([m[k] for m in per])) for k in METRIC_COLUMNS}

    @property
    def pooled(self) -> dict[str, float]:
        total = ConfusionMatrix()
        for cm in self.folds:
            total = total + cm
        return metrics(total)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config,
            "folds": [cm.to_dict() for cm in self.folds],
            "per_fold": self.per_fold,
            "mean": self.mean,
            "pooled": self.pooled,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_table(reports: list[EvalReport], labels: dict[str, str] | None = None) -> str:
    """Aligned text table, one row per report, columns BACC F1 SEN SPEC (fold means)."""
    labels = labels or {}
    names = [labels.get(r.name, r.name) for r in reports]
    width = max([len("Model")] + [len(n) for n in names]) + 2
    lines = ["Model".ljust(width) + "".join(c.rjust(8) for c in METRIC_COLUMNS)]
    for name, rep in zip(names, reports):
        m = rep.mean
        lines.append(name.ljust(width) + "".join(f"{m[c]:8.3f}" for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _run_fold(estimator, X, y, train_idx, test_idx, fold, out_dir):
    est = with_stream(clone(estimator), fold)
    est.fit(X[train_idx], y[train_idx])
    pred = est.predict(X[test_idx])
    cm = ConfusionMatrix.from_predictions(y[test_idx], pred)
    trace = getattr(est, "loss_trace_", None)
    if trace is None and hasattr(est, "steps"):
        trace = getattr(est.steps[-1][1], "loss_trace_", [])
    if out_dir:
        fold_dir = os.path.join(out_dir, f"fold{fold}")
        os.makedirs(fold_dir, exist_ok=True)
        write_trace_csv(os.path.join(fold_dir, "loss.csv"), trace)
        if hasattr(est, "save"):
            est.save(os.path.join(fold_dir, "checkpoint"))
        with open(os.path.join(fold_dir, "confusion.json"), "w") as fh:
            json.dump(cm.to_dict(), fh, sort_keys=True)
    return fold, cm, trace


def _json_params(estimator) -> dict:
    """Scalar hyper-parameters of an estimator (nested ones as ``step__name``)."""
    out = {}
    for key, value in estimator.get_params(deep=True).items():
        if isinstance(value, tuple):
            value = list(value)
        if value is None or isinstance(value, (bool, int, float, str)) or (
                isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)):
            out[key] = value
    return out


def cross_validate(estimator, X, y, split: list[tuple[np.ndarray, np.ndarray]], name: str = "model",
                   out_dir: str | None = None, jobs: int = 1) -> EvalReport:
    """Fit a fresh clone of ``estimator`` per fold (stream id = fold index)."""
    X = np.asarray(X)
    y = np.asarray(y)
    args = [(estimator, X, y, tr, te, f, out_dir) for f, (tr, te) in enumerate(split)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*args)))
    else:
        results = [_run_fold(*a) for a in args]
    results.sort(key=lambda r: r[0])
    for fold, cm, _ in results:
        logger.info("%s fold %d: %s", name, fold, cm)
    config = _json_params(estimator)
    return EvalReport(name, [r[1] for r in results], config=config, traces=[r[2] for r in results])


def manifest_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    assign = kfold_split(manifest.ids, manifest.labels, k=k, seed=seed)
    pos = {sid: i for i, sid in enumerate(manifest.ids)}
    split = []
    for f in range(k):
        tr, te = fold_members(assign, f)
        split.append((np.array([pos[i] for i in tr]), np.array([pos[i] for i in te])))
    return split


def manifest_design(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, tuple, tuple]:
    fmri, t1w, y = load_arrays(manifest)
    return pack_modalities(fmri, t1w), y, fmri.shape[1:], t1w.shape[1:]


def run_ablation(manifest: DatasetManifest, rows=None, seed: int = 0, k: int = 5, include_pcc: bool = True,
                 estimator_params: dict | None = None, out_dir: str | None = None, jobs: int = 1) -> list[EvalReport]:
    """k-fold CV of each fusion variant (and the PCC+MLP baseline) on one split."""
    rows = list(VARIANTS) + ([PCC_ROW] if include_pcc else []) if rows is None else list(rows)
    unknown = [r for r in rows if r not in VARIANTS and r != PCC_ROW]
    if unknown:
        raise ValueError(f"unknown ablation rows {unknown}; choose from {list(VARIANTS) + [PCC_ROW]}")
    X, y, fshape, sshape = manifest_design(manifest)
    split = manifest_split(manifest, k=k, seed=seed)
    params = dict(estimator_params or {})
    reports = []
    for row in rows:
        sub = os.path.join(out_dir, row) if out_dir else None
        if row == PCC_ROW:
            mlp_keys = ("epochs", "warmup_epochs", "learning_rate", "weight_decay", "beta1", "beta2", "batch_size")
            est = make_pcc_mlp(fshape, random_state=seed, hidden=params.get("mlp_hidden", 20),
                               **{key: params[key] for key in mlp_keys if key in params})
        else:
            est = MFFormerClassifier(fmri_shape=fshape, t1w_shape=sshape, variant=row, random_state=seed, **params)
        reports.append(cross_validate(est, X, y, split, name=row, out_dir=sub, jobs=jobs))
    return reports


def run_pcc_baseline(manifest: DatasetManifest, seed: int = 0, k: int = 5, estimator_params: dict | None = None,
                     out_dir: str | None = None, jobs: int = 1) -> EvalReport:
    return run_ablation(manifest, rows=[PCC_ROW], seed=seed, k=k, estimator_params=estimator_params,
                        out_dir=out_dir, jobs=jobs)[0]


ROW_LABELS = dict(VARIANT_LABELS, **{PCC_ROW: "PCC+MLP"})
