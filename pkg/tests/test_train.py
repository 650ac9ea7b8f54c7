import hashlib

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from marginlab.errors import ConfigError
from marginlab.train import (
    DatasetConfig,
    HyperParams,
    build_zoo,
    make_synthetic_dataset,
    train_model,
)


def _blobs_config(**overrides):
    base = dict(
        generator="blobs",
        ambient_dim=2,
        signal_dim=2,
        noise_std=0.2,
        train_samples=200,
        test_samples=200,
        num_classes=2,
    )
    base.update(overrides)
    return DatasetConfig(**base)


def _hp(**overrides):
    base = dict(
        depth=1,
        width=8,
        learning_rate=0.2,
        batch_size=32,
        weight_decay=0.0,
        label_noise_fraction=0.0,
        train_subset_size=200,
        seed=0,
    )
    base.update(overrides)
    return HyperParams(**base)


def test_blobs_linear_probe_reaches_full_accuracy():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=3)
    probe = LogisticRegression(max_iter=2000)
    probe.fit(train_split.inputs, train_split.labels)
    assert probe.score(test_split.inputs, test_split.labels) == 1.0


def test_annuli_exact_rings_without_noise():
    cfg = DatasetConfig(
        generator="annuli",
        ambient_dim=5,
        signal_dim=3,
        noise_std=0.0,
        train_samples=100,
        test_samples=50,
        num_classes=3,
    )
    train_split, _ = make_synthetic_dataset(cfg, seed=0)
    # Undo normalization and check the shell radii in the signal coordinates.
    raw = train_split.inputs * train_split.std + train_split.mean
    radii = np.linalg.norm(raw[:, :3], axis=1)
    assert np.allclose(radii, train_split.labels + 1.0, atol=1e-9)
    assert np.allclose(raw[:, 3:], 0.0, atol=1e-12)


def test_dataset_deterministic():
    cfg = _blobs_config()
    a_train, a_test = make_synthetic_dataset(cfg, seed=9)
    b_train, b_test = make_synthetic_dataset(cfg, seed=9)
    assert np.array_equal(a_train.inputs, b_train.inputs)
    assert np.array_equal(a_test.inputs, b_test.inputs)
    assert np.array_equal(a_train.labels, b_train.labels)
    c_train, _ = make_synthetic_dataset(cfg, seed=10)
    assert not np.array_equal(a_train.inputs, c_train.inputs)


def test_dataset_bounds_and_normalization():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=1)
    train_split.validate()
    test_split.validate()
    assert np.allclose(train_split.inputs.mean(axis=0), 0.0, atol=1e-9)
    assert np.array_equal(train_split.mean, test_split.mean)
    assert np.all(train_split.inputs >= train_split.lower)
    assert np.all(train_split.inputs <= train_split.upper)


def test_dataset_config_validation():
    with pytest.raises(ConfigError):
        make_synthetic_dataset(_blobs_config(generator="spirals"), seed=0)
    with pytest.raises(ConfigError):
        make_synthetic_dataset(_blobs_config(signal_dim=5, ambient_dim=2), seed=0)
    with pytest.raises(ConfigError):
        make_synthetic_dataset(_blobs_config(noise_std=-1.0), seed=0)


def test_training_reaches_full_accuracy_on_separable_blobs():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=3)
    entry = train_model(train_split, test_split, _hp())
    assert not entry.failed
    assert entry.train_accuracy == 1.0
    assert entry.train_loss <= 0.01 or entry.train_loss == pytest.approx(0.01, abs=1e-6)


def test_label_noise_hurts_test_accuracy():
    # Small subset + wide net: the model memorizes the flipped labels, so
    # label noise must show up as a loss of test accuracy.
    cfg = _blobs_config(ambient_dim=10, signal_dim=2, noise_std=0.3)
    train_split, test_split = make_synthetic_dataset(cfg, seed=4)
    memorizer = _hp(
        depth=2, width=64, batch_size=16, train_subset_size=64, seed=2
    )
    clean = train_model(train_split, test_split, memorizer)
    noisy = train_model(
        train_split,
        test_split,
        _hp(
            depth=2,
            width=64,
            batch_size=16,
            train_subset_size=64,
            seed=2,
            label_noise_fraction=0.3,
        ),
    )
    assert clean.train_accuracy == noisy.train_accuracy == 1.0
    assert noisy.test_accuracy < clean.test_accuracy


def test_training_deterministic():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=5)
    a = train_model(train_split, test_split, _hp(seed=7))
    b = train_model(train_split, test_split, _hp(seed=7))
    assert a.train_loss == b.train_loss
    assert a.train_accuracy == b.train_accuracy
    assert a.test_accuracy == b.test_accuracy
    for la, lb in zip(a.network.layers, b.network.layers):
        if hasattr(la, "weight"):
            assert np.array_equal(la.weight, lb.weight)


def test_training_does_not_touch_test_split():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=6)
    digest = hashlib.sha256(test_split.inputs.tobytes()).hexdigest()
    labels_digest = hashlib.sha256(test_split.labels.tobytes()).hexdigest()
    train_model(train_split, test_split, _hp())
    assert hashlib.sha256(test_split.inputs.tobytes()).hexdigest() == digest
    assert hashlib.sha256(test_split.labels.tobytes()).hexdigest() == labels_digest


def test_gap_consistent_with_accuracies():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=2)
    entry = train_model(train_split, test_split, _hp(label_noise_fraction=0.2))
    assert entry.gap == pytest.approx(entry.train_accuracy - entry.test_accuracy)
    assert 0.0 <= entry.train_accuracy <= 1.0
    assert 0.0 <= entry.test_accuracy <= 1.0


def test_build_zoo_single_and_duplicates(tmp_path):
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=8)
    single = build_zoo([_hp()], train_split, test_split)
    assert len(single) == 1

    duplicated = build_zoo([_hp(seed=3), _hp(seed=3)], train_split, test_split)
    assert duplicated[0].train_loss == duplicated[1].train_loss
    assert duplicated[0].test_accuracy == duplicated[1].test_accuracy


def test_build_zoo_empty_grid():
    train_split, test_split = make_synthetic_dataset(_blobs_config(), seed=8)
    with pytest.raises(ConfigError):
        build_zoo([], train_split, test_split)


def test_hyperparams_validation():
    with pytest.raises(ConfigError):
        _hp(label_noise_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        _hp(learning_rate=0.0).validate()
    with pytest.raises(ConfigError):
        _hp(depth=0).validate()
