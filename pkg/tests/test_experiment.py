import numpy as np
import pytest

from mfformer.data import synth_generate
from mfformer.experiment import (
    METRIC_COLUMNS,
    EvalReport,
    cross_validate,
    format_table,
    manifest_design,
    manifest_split,
    run_ablation,
)
from mfformer.estimator import MFFormerClassifier
from mfformer.train import ConfusionMatrix, metrics

TINY = dict(base_channels=2, attention_dim=8, epochs=3, warmup_epochs=1)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return synth_generate(5, 6, str(tmp_path_factory.mktemp("ds")), fmri_shape=(32, 32), t1w_shape=(16, 16, 16))


def test_report_mean_and_pooled():
    folds = [ConfusionMatrix(tp=2, fn=0, tn=1, fp=1), ConfusionMatrix(tp=1, fn=1, tn=2, fp=0)]
    rep = EvalReport("x", folds)
    per = [metrics(cm) for cm in folds]
    for k in METRIC_COLUMNS:
        assert rep.mean[k] == pytest.approx(np.mean([m[k] for m in per]), abs=1e-15)
    assert rep.pooled == metrics(ConfusionMatrix(tp=3, fn=1, tn=3, fp=1))
    doc = rep.to_dict()
    assert doc["per_fold"] == per and doc["folds"][0] == folds[0].to_dict()


def test_format_table_columns():
    rep = EvalReport("4d-3way", [ConfusionMatrix(tp=5, fn=5, tn=8, fp=2)])
    text = format_table([rep], {"4d-3way": "4D 3-way"})
    header, row = text.splitlines()
    assert header.split() == ["Model", *METRIC_COLUMNS]
    assert row.split() == ["4D", "3-way", "0.650", "0.588", "0.500", "0.800"]


def test_split_covers_every_subject_once(manifest):
    split = manifest_split(manifest, k=3, seed=1)
    tests = np.concatenate([te for _, te in split])
    assert sorted(tests.tolist()) == list(range(12))
    for tr, te in split:
        assert not set(tr) & set(te)


def test_cross_validate_deterministic(manifest):
    X, y, fs, ss = manifest_design(manifest)
    split = manifest_split(manifest, k=2)
    est = MFFormerClassifier(fmri_shape=fs, t1w_shape=ss, **TINY)
    a = cross_validate(est, X, y, split)
    b = cross_validate(est, X, y, split)
    assert a.to_json() == b.to_json() and a.traces == b.traces
    assert sum(cm.total for cm in a.folds) == 12


def test_parallel_folds_match_serial(manifest):
    X, y, fs, ss = manifest_design(manifest)
    split = manifest_split(manifest, k=2)
    est = MFFormerClassifier(fmri_shape=fs, t1w_shape=ss, **TINY)
    assert cross_validate(est, X, y, split, jobs=2).to_json() == cross_validate(est, X, y, split).to_json()


def test_ablation_rows_satisfy_bacc_identity(manifest):
    reports = run_ablation(manifest, k=2, estimator_params=TINY)
    assert [r.name for r in reports] == ["baseline1", "baseline2", "3d-1way", "3d-3way", "4d-1way", "4d-3way",
                                         "pcc-mlp"]
    for rep in reports:
        for m in rep.per_fold + [rep.pooled]:
            assert m["BACC"] == (m["SEN"] + m["SPEC"]) / 2


def test_unknown_row_rejected(manifest):
    with pytest.raises(ValueError, match="unknown"):
        run_ablation(manifest, rows=["5d"])
