import csv
import math

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcosine.datagen import GeneratorConfig, generate_classification
from mmcosine.diagnostics import (
    AngleRecord,
    DiagnosticsLog,
    ProbeConfig,
    approx_unimodal_predictions,
    ground_truth_angles,
    linear_probe,
    probe_accuracy,
    record_step,
)
from mmcosine.losses import LossConfig
from mmcosine.model import param_checksum
from mmcosine.trainer import TrainConfig, default_model_config, encoder_features, train


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), d=st.integers(1, 5), c=st.integers(2, 6),
       with_bias=st.booleans())
def test_approx_predictions_match_brute_force(seed, n, d, c, with_bias):
    rng = np.random.default_rng(seed)
    pa, pv = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    wa, wv = rng.standard_normal((d, c)), rng.standard_normal((d, c))
    b = rng.standard_normal(c) if with_bias else None
    got_a, got_v = approx_unimodal_predictions(pa, pv, wa, wv, b)
    np.testing.assert_array_equal(got_a, oracles.approx_predictions(pa.tolist(), wa.tolist(), b))
    np.testing.assert_array_equal(got_v, oracles.approx_predictions(pv.tolist(), wv.tolist(), b))


def test_exact_tie_goes_to_lowest_class():
    w = np.array([[1.0, 1.0, 0.0]])
    pred_a, _ = approx_unimodal_predictions(np.array([[2.0]]), np.array([[2.0]]), w, w)
    assert pred_a[0] == 0


def test_half_bias_can_flip_prediction():
    w = np.array([[1.0, 0.0]])
    b = np.array([0.0, 3.0])
    pred, _ = approx_unimodal_predictions(np.array([[2.0]]), np.array([[2.0]]), w, w, b)
    # 2 vs 1.5: the half bias is not enough
    assert pred[0] == 0
    pred, _ = approx_unimodal_predictions(np.array([[1.0]]), np.array([[1.0]]), w, w, b)
    assert pred[0] == 1


def test_approx_predictions_agree_with_joint_when_one_block_is_zero():
    rng = np.random.default_rng(0)
    pa = rng.standard_normal((50, 4))
    wa, wv = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    pred_a, _ = approx_unimodal_predictions(pa, np.zeros_like(pa), wa, wv)
    joint = pa @ wa + np.zeros_like(pa) @ wv
    np.testing.assert_array_equal(pred_a, np.argmax(joint, axis=1))


def test_cosine_mode_ignores_feature_norm():
    rng = np.random.default_rng(1)
    pa, pv = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
    wa, wv = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    base = approx_unimodal_predictions(pa, pv, wa, wv, cosine=True)
    scaled = approx_unimodal_predictions(pa * np.arange(1, 21)[:, None], pv, wa * 7, wv, cosine=True)
    np.testing.assert_array_equal(base[0], scaled[0])


def test_ground_truth_angles():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    phi = np.array([[1.0, 0.0], [1.0, 1.0], [-1.0, 0.0]])
    got = ground_truth_angles(phi, w, [0, 1, 0])
    np.testing.assert_allclose(got, [0.0, math.pi / 4, math.pi], atol=1e-12)


def test_angle_csv_and_histogram(tmp_path):
    rec = AngleRecord(np.array([0.1, 0.2]), np.array([3.0]))
    h_a, h_v, edges = rec.histogram(60)
    assert h_a.sum() == 2 and h_v.sum() == 1 and len(edges) == 61
    path = tmp_path / "angles.csv"
    rec.write_csv(path, step=5)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "modality", "angle"]
    assert [r[1] for r in rows[1:]] == ["audio", "audio", "visual"]
    assert float(rows[1][2]) == 0.1


def test_record_step_fields():
    phi = np.array([[1.0, 0.0], [0.0, 2.0]])
    w_a = np.array([[3.0, 0.0], [0.0, 4.0]])
    w_v = np.eye(2)
    rec = record_step(7, phi, phi, w_a, w_v, None, [0, 1], [0, 0], loss=0.3)
    assert rec.weight_norms_a == [3.0, 4.0]
    assert rec.mean_gt_logit_a == pytest.approx((3.0 + 8.0) / 2)
    assert rec.approx_acc_a == 1.0 and rec.joint_acc == 0.5
    assert rec.mean_norm_ratio == pytest.approx(3.5)


def test_disabled_log_stays_empty(tmp_path):
    log = DiagnosticsLog(enabled=False)
    log.append(record_step(0, np.eye(2), np.eye(2), np.eye(2), np.eye(2), None, [0, 1], [0, 1], 0.0))
    assert log.records == []
    log.write_jsonl(tmp_path / "d.jsonl")
    assert (tmp_path / "d.jsonl").read_text() == ""


def test_jsonl_roundtrip(tmp_path):
    rec = record_step(3, np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.zeros(2), [0, 1], [0, 1], 1.5, epoch=0)
    log = DiagnosticsLog(records=[rec, rec])
    log.write_jsonl(tmp_path / "d.jsonl")
    assert DiagnosticsLog.read_jsonl(tmp_path / "d.jsonl") == [rec, rec]


# probes ------------------------------------------------------------------------

def test_one_hot_features_probe_perfectly():
    y = np.tile(np.arange(4), 5)
    x = np.eye(4)[y]
    assert probe_accuracy(x, y, x, y, 4) == 1.0


def test_zero_features_predict_majority():
    y_train = np.array([0] * 6 + [1] * 3 + [2] * 1)
    y_test = np.array([0, 1, 1, 2, 0])
    acc = probe_accuracy(np.zeros((10, 3)), y_train, np.zeros((5, 3)), y_test, 3)
    assert acc == pytest.approx(2 / 5)


def test_probe_rejects_empty():
    with pytest.raises(ValueError, match="non-empty"):
        probe_accuracy(np.zeros((0, 2)), [], np.zeros((1, 2)), [0], 2)


def test_probe_does_not_touch_model_parameters():
    ds = generate_classification(GeneratorConfig(n_classes=3, dim_a=4, dim_v=4, n_train=30,
                                                 n_test=15, seed=0))
    model_cfg = default_model_config(ds, hidden=6, width=3)
    res = train(ds, model_cfg, TrainConfig(epochs=1, batch_size=10, loss=LossConfig(), seed=0))
    before = param_checksum(res.params)
    tr = encoder_features(res.params, model_cfg, ds.train)
    te = encoder_features(res.params, model_cfg, ds.test)
    linear_probe(tr, ds.train.labels, te, ds.test.labels, 3, ProbeConfig(max_iter=50))
    assert param_checksum(res.params) == before
