"""Subjects, manifests, parcellation, connectivity features, synthetic data,
class-balanced sampling and stratified folds."""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import mft

MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, sampler, fold...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


# ---------------------------------------------------------------------------
# manifest


@dataclass
class SubjectRecord:
    id: str
    fmri: str
    t1w: str
    label: int

    def to_dict(self) -> dict:
        return {"id": self.id, "fmri": self.fmri, "t1w": self.t1w, "label": int(self.label)}


@dataclass
class DatasetManifest:
    subjects: list[SubjectRecord]
    n_roi: int
    description: str = ""
    root: str = "."

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject ids: {dupes}")
        for s in self.subjects:
            if s.label not in (0, 1):
                raise DataError(f"subject {s.id}: label must be 0 or 1, got {s.label}")

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    def path(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "n_roi": int(self.n_roi),
            "description": self.description,
            "subjects": [s.to_dict() for s in self.subjects],
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict, root: str = ".") -> "DatasetManifest":
        if doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {doc.get('version')!r}")
        subjects = [SubjectRecord(str(s["id"]), s["fmri"], s["t1w"], int(s["label"])) for s in doc["subjects"]]
        return cls(subjects, int(doc["n_roi"]), doc.get("description", ""), root)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, root=os.path.dirname(os.path.abspath(path)))

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([s for s in self.subjects if s.id in keep], self.n_roi, self.description, self.root)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a list of problems (empty when the manifest is usable)."""
    problems = []
    labels = manifest.labels
    for c in (0, 1):
        if not np.any(labels == c):
            problems.append(f"no subjects with label {c}")
    fshape = tshape = None
    for s in manifest.subjects:
        for kind, rel in (("fmri", s.fmri), ("t1w", s.t1w)):
            p = manifest.path(rel)
            if not os.path.exists(p):
                problems.append(f"{s.id}: missing {kind} file {rel}")
                continue
            try:
                arr = mft.load(p)
            except (ValueError, OSError) as exc:
                problems.append(f"{s.id}: unreadable {kind} file {rel}: {exc}")
                continue
            if kind == "fmri":
                if arr.ndim == 2 and arr.shape[1] != manifest.n_roi:
                    problems.append(f"{s.id}: fMRI has {arr.shape[1]} ROIs, manifest says {manifest.n_roi}")
                if arr.ndim not in (2, 4):
                    problems.append(f"{s.id}: fMRI must be T x N or T x X x Y x Z, got rank {arr.ndim}")
                fshape = fshape or arr.shape
                if arr.shape != fshape:
                    problems.append(f"{s.id}: fMRI shape {arr.shape} differs from {fshape}")
            else:
                if arr.ndim != 3:
                    problems.append(f"{s.id}: T1w must be a 3D volume, got rank {arr.ndim}")
                tshape = tshape or arr.shape
                if arr.shape != tshape:
                    problems.append(f"{s.id}: T1w shape {arr.shape} differs from {tshape}")
    return problems


def load_arrays(manifest: DatasetManifest, ids: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (fMRI T x N, T1w W x H x D, labels) for the given subjects."""
    subjects = manifest.subjects if ids is None else [s for s in manifest.subjects if s.id in set(ids)]
    fmri = np.stack([mft.load(manifest.path(s.fmri)) for s in subjects])
    if fmri.ndim != 3:
        raise DataError("fMRI files must be parcellated (T x N) before training; run parcellate")
    t1w = np.stack([mft.load(manifest.path(s.t1w)) for s in subjects])
    y = np.array([s.label for s in subjects], dtype=np.int64)
    return fmri, t1w, y


# ---------------------------------------------------------------------------
# features


def parcellate(fmri_4d: np.ndarray, labels: np.ndarray, n_roi: int) -> np.ndarray:
    """Mean time series of each ROI; label 0 is background."""
    fmri_4d = np.asarray(fmri_4d, dtype=np.float64)
    lab = np.asarray(labels)
    if fmri_4d.ndim != 4 or fmri_4d.shape[1:] != lab.shape:
        raise DataError(f"volume {fmri_4d.shape} and label map {lab.shape} do not align")
    if np.any(lab != np.round(lab)):
        raise DataError("label volume must be integer-valued")
    lab = lab.astype(np.int64).reshape(-1)
    if lab.min() < 0 or lab.max() > n_roi:
        raise DataError(f"label values must lie in [0, {n_roi}]")
    counts = np.bincount(lab, minlength=n_roi + 1)[1:]
    empty = np.flatnonzero(counts == 0) + 1
    if empty.size:
        raise DataError(f"empty ROI(s): {empty.tolist()}")
    frames = fmri_4d.reshape(fmri_4d.shape[0], -1)
    mask = lab > 0
    sums = np.zeros((frames.shape[0], n_roi))
    np.add.at(sums.T, lab[mask] - 1, frames[:, mask].T)
    return sums / counts


def pcc_matrix(ts: np.ndarray) -> np.ndarray:
    """Pearson correlation between the columns of a T x N time-series matrix."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2 or ts.shape[0] < 3:
        raise DataError(f"need a T x N matrix with T >= 3, got {ts.shape}")
    xc = ts - ts.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    zero = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(ts).max())))
    if zero.size:
        raise DataError(f"zero-variance column(s): {zero.tolist()}")
    z = xc / norms
    r = z.T @ z
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


def pcc_features(ts: np.ndarray) -> np.ndarray:
    r = pcc_matrix(ts)
    iu = np.triu_indices(r.shape[0], k=1)
    return r[iu]


# ---------------------------------------------------------------------------
# synthetic data


def _templates(seed: int, fmri_shape, t1w_shape, n_signal_rois: int, blob_radius: float) -> dict:
    rng = substream(seed, "templates")
    t, n = fmri_shape
    tt = np.arange(t)
    # shared non-class background so no image is constant
    f_bg = 0.5 * np.sin(2 * np.pi * np.outer(tt, rng.uniform(0.02, 0.2, n)) + rng.uniform(0, 2 * np.pi, n))
    rois = np.sort(rng.choice(n, size=min(n_signal_rois, n), replace=False))
    temporal = 1.0 + np.sin(2 * np.pi * tt / max(t / 4.0, 2.0))
    spatial = rng.uniform(0.5, 1.0, rois.size)
    f_sig = np.zeros((t, n))
    f_sig[:, rois] = np.outer(temporal, spatial)

    grids = np.meshgrid(*[np.linspace(-1, 1, s) for s in t1w_shape], indexing="ij")
    r2 = sum(g * g for g in grids)
    s_bg = np.exp(-r2 / 0.5)
    centre = [int(s * 0.3) for s in t1w_shape]
    idx = np.meshgrid(*[np.arange(s) for s in t1w_shape], indexing="ij")
    d2 = sum((i - c) ** 2 for i, c in zip(idx, centre))
    s_sig = np.exp(-d2 / (2.0 * blob_radius**2))
    s_sig[s_sig < 1e-3] = 0.0
    return {"fmri_bg": f_bg, "fmri_sig": f_sig, "t1w_bg": s_bg, "t1w_sig": s_sig, "rois": rois}


def _noise_std(signature: np.ndarray, snr: float) -> float:
    support = signature[signature != 0]
    power = float(np.mean(support**2)) if support.size else 1.0
    return 0.0 if np.isinf(snr) else float(np.sqrt(power / snr))


def synth_generate(
    seed: int,
    n_per_class: int,
    out_dir: str,
    fmri_shape=(64, 100),
    t1w_shape=(32, 32, 32),
    snr: float = 1.0,
    mode: str = "both",
    n_signal_rois: int = 10,
    blob_radius: float = 4.0,
) -> DatasetManifest:
    """Write a two-class synthetic dataset (MFT1 files + manifest.json).

    Patients (label 1) carry a rank-one temporal pattern over a fixed ROI
    subset of the T x N matrix and a smooth intensity blob in the volume.
    With ``mode="cross"`` each patient carries exactly one of the two, so
    only a model that sees both modalities can detect every patient.
    Noise variance is set so that signature power on its support over noise
    power equals ``snr``.
    """
    if not snr > 0:
        raise DataError("snr must be positive")
    if mode not in ("both", "cross"):
        raise DataError(f"mode must be 'both' or 'cross', got {mode!r}")
    fmri_shape, t1w_shape = tuple(fmri_shape), tuple(t1w_shape)
    if len(fmri_shape) != 2 or len(t1w_shape) != 3 or min(fmri_shape + t1w_shape) < 2:
        raise DataError(f"impossible shapes fmri={fmri_shape} t1w={t1w_shape}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    tpl = _templates(seed, fmri_shape, t1w_shape, n_signal_rois, blob_radius)
    f_std = _noise_std(tpl["fmri_sig"], snr)
    s_std = _noise_std(tpl["t1w_sig"], snr)
    rng = substream(seed, "data")
    os.makedirs(out_dir, exist_ok=True)
    subjects = []
    width = len(str(2 * n_per_class))
    for i in range(2 * n_per_class):
        label = i % 2
        sid = f"sub{i:0{width}d}"
        carry_f = carry_s = bool(label)
        if label and mode == "cross":
            carry_f = bool(rng.integers(2))
            carry_s = not carry_f
        f = tpl["fmri_bg"] + (tpl["fmri_sig"] if carry_f else 0.0) + f_std * rng.standard_normal(fmri_shape)
        s = tpl["t1w_bg"] + (tpl["t1w_sig"] if carry_s else 0.0) + s_std * rng.standard_normal(t1w_shape)
        mft.save(os.path.join(out_dir, f"{sid}_fmri.mft"), f)
        mft.save(os.path.join(out_dir, f"{sid}_t1w.mft"), s)
        subjects.append(SubjectRecord(sid, f"{sid}_fmri.mft", f"{sid}_t1w.mft", label))
    desc = (f"synthetic seed={seed} n_per_class={n_per_class} snr={snr} mode={mode} "
            f"fmri={list(fmri_shape)} t1w={list(t1w_shape)}")
    manifest = DatasetManifest(subjects, fmri_shape[1], desc, os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def synth_templates(seed: int, fmri_shape=(64, 100), t1w_shape=(32, 32, 32),
                    n_signal_rois: int = 10, blob_radius: float = 4.0) -> dict:
    """The deterministic background and class-signature arrays for ``seed``."""
    return _templates(seed, tuple(fmri_shape), tuple(t1w_shape), n_signal_rois, blob_radius)


# ---------------------------------------------------------------------------
# sampling and folds


def sampling_weights(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DataError("weighted sampling needs both classes present")
    per_class = dict(zip(classes.tolist(), (1.0 / counts).tolist()))
    w = np.array([per_class[c] for c in labels.tolist()])
    return w / w.sum()


def weighted_sampler(labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of index batches drawn with replacement, each index with
    probability inversely proportional to its class count."""
    p = sampling_weights(labels)
    n = len(p)
    draws = rng.choice(n, size=n, replace=True, p=p)
    for start in range(0, n, batch_size):
        yield draws[start:start + batch_size]


def kfold_split(ids: Sequence[str], labels: Sequence[int], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Stratified assignment subject-id -> fold index in [0, k)."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = list(ids)
    if len(ids) != labels.size:
        raise DataError("ids and labels differ in length")
    rng = substream(seed, "fold")
    folds: dict[str, int] = {}
    offset = 0
    for c in np.unique(labels):
        members = [ids[i] for i in np.flatnonzero(labels == c)]
        if len(members) < k:
            raise DataError(f"class {int(c)} has {len(members)} subjects, fewer than k={k}")
        order = rng.permutation(len(members))
        for j, m in enumerate(order):
            folds[members[m]] = (offset + j) % k
        offset = (offset + len(members)) % k
    return {i: folds[i] for i in ids}


def fold_members(split: dict[str, int], fold: int) -> tuple[list[str], list[str]]:
    train = [i for i, f in split.items() if f != fold]
    test = [i for i, f in split.items() if f == fold]
    return train, test
