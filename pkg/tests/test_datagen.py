import struct
from dataclasses import replace

import numpy as np
import pytest

from mmcosine.datagen import (
    MAGIC,
    ConfigError,
    GeneratorConfig,
    class_centers,
    generate_classification,
    generate_trials,
    load_dataset,
    planted_centers,
    save_dataset,
)
from mmcosine.diagnostics import probe_accuracy


def small(**kw):
    base = dict(n_classes=5, dim_a=8, dim_v=8, n_train=100, n_test=50, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def raw_probe_gap(cfg):
    ds = generate_classification(cfg)
    acc_a = probe_accuracy(ds.train.x_a, ds.train.labels, ds.test.x_a, ds.test.labels, cfg.n_classes)
    acc_v = probe_accuracy(ds.train.x_v, ds.train.labels, ds.test.x_v, ds.test.labels, cfg.n_classes)
    return acc_a, acc_v


@pytest.mark.parametrize("field,value", [
    ("n_classes", 1), ("dim_a", 1), ("dim_v", 0), ("dominance", 0.5),
    ("intra_class_spread", 0.0), ("inter_class_angle", 2.0),
])
def test_validation_names_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate_classification(replace(small(), **{field: value}))


def test_same_seed_is_bit_identical(tmp_path):
    a = generate_classification(small(seed=7))
    b = generate_classification(small(seed=7))
    save_dataset(a, tmp_path / "a.mmcdat")
    save_dataset(b, tmp_path / "b.mmcdat")
    assert (tmp_path / "a.mmcdat").read_bytes() == (tmp_path / "b.mmcdat").read_bytes()


def test_different_seed_differs():
    a = generate_classification(small(seed=7))
    b = generate_classification(small(seed=8))
    assert not np.array_equal(a.train.x_a, b.train.x_a)


def test_shapes_and_balanced_labels():
    ds = generate_classification(small())
    assert ds.train.x_a.shape == (100, 8) and ds.test.x_v.shape == (50, 8)
    assert np.bincount(ds.train.labels).tolist() == [20] * 5
    assert np.all(np.isfinite(ds.train.x_v))


def test_centers_subtend_requested_angle():
    rng = np.random.default_rng(0)
    c = class_centers(rng, 6, 16, 0.4)
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12)
    cos = c @ c.T
    off = cos[~np.eye(6, dtype=bool)]
    np.testing.assert_allclose(np.arccos(off), 0.4, atol=1e-10)


def test_centers_with_more_classes_than_dims_stay_near_angle():
    c = class_centers(np.random.default_rng(1), 20, 8, 0.5)
    off = (c @ c.T)[~np.eye(20, dtype=bool)]
    assert abs(np.median(np.arccos(np.clip(off, -1, 1))) - 0.5) < 0.15


def test_recovered_centers_align_with_planted():
    cfg = small(intra_class_spread=0.05, n_train=50 * 5, dominance=1.0)
    ds = generate_classification(cfg)
    planted_a, planted_v = planted_centers(cfg)
    for x, planted in ((ds.train.x_a, planted_a), (ds.train.x_v, planted_v)):
        for c in range(cfg.n_classes):
            est = x[ds.train.labels == c].mean(axis=0)
            cos = est @ planted[c] / np.linalg.norm(est)
            assert cos > 0.99


def test_noiseless_limit_is_separable_by_either_modality():
    acc_a, acc_v = raw_probe_gap(small(dominance=1.0, intra_class_spread=1e-4))
    assert acc_a == 1.0 and acc_v == 1.0


def test_dominance_four_makes_audio_stronger():
    # C=20 at the library defaults; raw linear probes are the oracle here
    acc_a, acc_v = raw_probe_gap(GeneratorConfig(seed=0))
    assert acc_a - acc_v > 0.10


def test_larger_dominance_widens_raw_gap():
    gaps = {}
    for rho in (1.0, 2.0, 4.0):
        per_seed = []
        for seed in range(5):
            cfg = small(n_classes=10, dim_a=16, dim_v=16, n_train=200, n_test=200,
                        intra_class_spread=0.06, dominance=rho, seed=seed)
            a, v = raw_probe_gap(cfg)
            per_seed.append(a - v)
        gaps[rho] = np.median(per_seed)
    assert gaps[1.0] < gaps[2.0] < gaps[4.0]


# trials ---------------------------------------------------------------------

def test_trials_exact_split():
    ds = generate_classification(small())
    trials = generate_trials(ds.test, 10, 0.5, seed=1)
    assert len(trials) == 10
    assert sum(t.is_target for t in trials) == 5


def test_trials_flags_match_labels_and_no_self_pairs():
    ds = generate_classification(small())
    labels = ds.test.labels
    trials = generate_trials(ds.test, 200, 0.3, seed=2)
    for t in trials:
        assert t.index_1 != t.index_2
        assert t.is_target == (labels[t.index_1] == labels[t.index_2])
    keys = {(min(t.index_1, t.index_2), max(t.index_1, t.index_2)) for t in trials}
    assert len(keys) == 200


@pytest.mark.parametrize("n_pairs,frac", [(7, 0.33), (13, 0.9), (1, 0.5)])
def test_trial_fraction_within_one_pair(n_pairs, frac):
    ds = generate_classification(small())
    trials = generate_trials(ds.test, n_pairs, frac, seed=0)
    got = sum(t.is_target for t in trials) / n_pairs
    assert abs(got - frac) <= 1 / n_pairs


def test_zero_target_fraction():
    ds = generate_classification(small())
    assert not any(t.is_target for t in generate_trials(ds.test, 20, 0.0, seed=0))


def test_trials_deterministic():
    ds = generate_classification(small())
    assert generate_trials(ds.test, 50, 0.5, 9) == generate_trials(ds.test, 50, 0.5, 9)


def test_impossible_target_request():
    ds = generate_classification(small(n_classes=5, n_test=5))
    with pytest.raises(ValueError, match="single sample"):
        generate_trials(ds.test, 4, 0.5, 0)


# binary format ---------------------------------------------------------------

def test_binary_layout_and_roundtrip(tmp_path):
    ds = generate_classification(small(n_train=11, n_test=4))
    path = tmp_path / "d.mmcdat"
    save_dataset(ds, path)
    buf = path.read_bytes()
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<5iQ", buf, 8) == (5, 8, 8, 11, 4, 3)
    expected = 8 + 28 + (11 + 4) * (8 + 8) * 8 + (11 + 4) * 4
    assert len(buf) == expected
    back = load_dataset(path)
    for s0, s1 in ((ds.train, back.train), (ds.test, back.test)):
        assert s0.x_a.tobytes() == s1.x_a.tobytes()
        assert s0.x_v.tobytes() == s1.x_v.tobytes()
        np.testing.assert_array_equal(s0.labels, s1.labels)
    assert back.seed == 3


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.mmcdat"
    p.write_bytes(b"not a dataset")
    with pytest.raises(ValueError):
        load_dataset(p)
