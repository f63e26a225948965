import hashlib

import numpy as np
import pytest
import torch

from maskdistill import dataio, evalharness, trainer
from maskdistill.errors import ParameterError
from maskdistill.evalharness import (FeatureTable, extract_features,
                                     feature_std, knn_eval, linear_probe,
                                     read_feature_csv, write_feature_csv)


def table(features, labels, prefix="r"):
    return FeatureTable(ids=[f"{prefix}{i}" for i in range(len(labels))],
                        labels=list(labels), features=np.asarray(features, float))


def separable(n_per_class=40, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for cls, center in enumerate(([5.0, 0.0], [0.0, 5.0])):
        xs.append(rng.normal(center, 0.3, size=(n_per_class, 2)))
        ys.extend([cls] * n_per_class)
    return table(np.concatenate(xs), ys)


def test_linear_probe_separable_is_perfect():
    train = separable(seed=1)
    test = separable(seed=2)
    result = linear_probe(train, test, epochs=200, lr=0.1)
    assert result.accuracy == 1.0
    assert result.protocol == "linear"


def test_linear_probe_chance_on_shuffled_labels():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(1200, 16))
    labels = rng.integers(0, 4, size=1200)
    train = table(feats[:600], labels[:600])
    test = table(feats[600:], labels[600:])
    result = linear_probe(train, test, epochs=100, lr=0.05)
    assert abs(result.accuracy - 0.25) < 0.05


def test_linear_probe_train_as_test():
    data = separable(seed=4)
    result = linear_probe(data, data, epochs=200, lr=0.1)
    assert result.accuracy == 1.0


def test_linear_probe_needs_two_classes():
    data = table(np.random.default_rng(0).normal(size=(10, 3)), [1] * 10)
    with pytest.raises(ParameterError):
        linear_probe(data, data)


def test_linear_probe_warns_on_unseen_test_class():
    train = separable(seed=5)
    test_feats = np.vstack([separable(seed=6).features, [[9.0, 9.0]]])
    test = table(test_feats, list(separable(seed=6).labels) + [7])
    with pytest.warns(UserWarning):
        result = linear_probe(train, test, epochs=50, lr=0.1)
    assert result.accuracy < 1.0


def test_knn_identical_point_k1():
    train = separable(seed=7)
    test = FeatureTable(ids=["x"], labels=[train.labels[0]],
                        features=train.features[:1].copy())
    result = knn_eval(train, test, k=1)
    assert result.accuracy == 1.0


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(8)
    train = table(rng.normal(size=(60, 5)), rng.integers(0, 3, size=60))
    test = table(rng.normal(size=(100, 5)), rng.integers(0, 3, size=100), "t")
    k = 7
    got = knn_eval(train, test, k=k)

    def unit(a):
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    correct = 0
    sims = unit(test.features) @ unit(train.features).T
    for i in range(100):
        order = np.argsort(-sims[i])[:k]
        votes = {}
        for j in order:
            c = int(train.labels[j])
            cnt, tot = votes.get(c, (0, 0.0))
            votes[c] = (cnt + 1, tot + sims[i, j])
        pred = max(votes.items(), key=lambda kv: (kv[1][0], kv[1][1]))[0]
        correct += pred == test.labels[i]
    assert got.accuracy == pytest.approx(correct / 100)


def test_knn_k_exceeds_train():
    data = separable()
    with pytest.raises(ParameterError):
        knn_eval(data, data, k=len(data.ids) + 1)


def test_feature_csv_round_trip(tmp_path):
    t = table(np.random.default_rng(1).normal(size=(5, 3)), [0, 1, None, 2, 1])
    path = tmp_path / "feat.csv"
    write_feature_csv(t, path)
    back = read_feature_csv(path)
    assert back.ids == t.ids
    assert back.labels == t.labels
    assert np.allclose(back.features, t.features, atol=1e-6)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from maskdistill.config import load_config
    root = tmp_path_factory.mktemp("eval_corpus")
    spec = dataio.SyntheticSpec(num_images=48, image_size=64, num_classes=4, seed=2)
    manifest = dataio.make_synthetic(spec, root)
    cfg = load_config(overrides=dict(
        image_size=64, patch_size=8, queue_size=64, batch_size=16, epochs=1,
        warmup_epochs=0, backbone_channels="16 32 64", num_prototypes=32,
        proto_dim=16, global_dim=16, global_hidden=32, local_hidden=32,
        num_matched_pairs=8, seed=4))
    out = tmp_path_factory.mktemp("eval_run")
    ckpt = trainer.fit(cfg, manifest, out, quiet=True)
    return cfg, manifest, ckpt


def test_extract_features_deterministic(trained):
    _, manifest, ckpt = trained
    a = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    b = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    assert a.ids == b.ids
    assert np.array_equal(a.features, b.features)


def test_extract_feature_width(trained):
    cfg, manifest, ckpt = trained
    t = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    assert t.features.shape == (len(manifest), cfg.backbone_channels[-1])


def test_random_init_features_differ(trained):
    cfg, manifest, ckpt = trained
    t = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    rnd_state = trainer.init_state(
        cfg.__class__(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
                         "seed": 99}).validate(), total_steps=1)
    r = extract_features(rnd_state, manifest)
    assert not np.allclose(t.features, r.features)


def test_probe_does_not_mutate_checkpoint(trained, tmp_path):
    _, manifest, ckpt = trained
    digest_before = hashlib.sha256(open(ckpt, "rb").read()).hexdigest()
    t = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    half = len(t.ids) // 2
    linear_probe(FeatureTable(t.ids[:half], t.labels[:half], t.features[:half]),
                 FeatureTable(t.ids[half:], t.labels[half:], t.features[half:]),
                 epochs=20, lr=0.1)
    assert hashlib.sha256(open(ckpt, "rb").read()).hexdigest() == digest_before


def test_feature_export_order_follows_manifest(trained):
    _, manifest, ckpt = trained
    t = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    assert t.ids == [r[0] for r in manifest.records]


def test_feature_std_positive(trained):
    _, manifest, ckpt = trained
    t = evalharness.extract_features_from_checkpoint(ckpt, manifest)
    assert feature_std(t) > 0
