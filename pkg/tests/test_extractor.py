"""Extractor tests: init, training, embedding, UAXM serialization."""

import numpy as np
import pytest

from uaxlab import numerics as nm
from uaxlab.dataset import SynthParams, generate_synthetic
from uaxlab.extractor import (
    ExtractorModel,
    ExtractorSpec,
    ModelFormatError,
    TrainConfig,
    init_model,
    load_model,
    save_model,
    train_classifier,
)

SIZE = 16


def tiny_spec(**overrides):
    base = dict(
        arch_id="tiny_cnn",
        input_shape=(SIZE, SIZE, 1),
        class_count=2,
        embedding_dim=8,
    )
    base.update(overrides)
    return ExtractorSpec(**base)


def tiny_data(ids=2, imgs=4, seed=5):
    return generate_synthetic(
        SynthParams(
            identity_count=ids,
            images_per_identity=imgs,
            rng_seed=seed,
            image_size=SIZE,
            shift_px=1,
            brightness_delta=0.02,
            noise_sigma=0.01,
        )
    )


def quick_cfg(**overrides):
    base = dict(
        epochs=20,
        batch_size=4,
        learning_rate=0.05,
        weight_decay=0.0,
        momentum=0.9,
        warmup_epochs=2,
        rng_seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestInit:
    def test_same_seed_identical_weights(self):
        a = init_model(tiny_spec(), seed=9)
        b = init_model(tiny_spec(), seed=9)
        assert sorted(a.weights) == sorted(b.weights)
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name].data, b.weights[name].data)

    def test_different_seeds_differ(self):
        a = init_model(tiny_spec(), seed=1)
        b = init_model(tiny_spec(), seed=2)
        assert max(np.abs(a.weights[n].data - b.weights[n].data).max() for n in a.weights) > 0

    def test_embedding_dim_shape(self):
        model = init_model(tiny_spec(embedding_dim=64), seed=0)
        rng = np.random.Generator(np.random.PCG64(0))
        emb = model.embed(rng.uniform(0, 1, (SIZE, SIZE, 1)))
        assert emb.shape == (64,)

    def test_mlp_arch(self):
        model = init_model(tiny_spec(arch_id="mlp", mlp_hidden=32), seed=0)
        emb = model.embed(np.full((SIZE, SIZE, 1), 0.5))
        assert emb.shape == (8,)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            init_model(tiny_spec(arch_id="resnet50"), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(input_shape=(4, 16, 1)), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(input_shape=(16, 16, 2)), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(input_shape=(16, 16)), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(embedding_dim=1), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(class_count=1), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(conv_channels=(8, 16)), seed=0)
        with pytest.raises(ValueError):
            init_model(tiny_spec(arch_id="mlp", mlp_hidden=0), seed=0)

    def test_nan_weights_rejected(self):
        model = init_model(tiny_spec(), seed=0)
        bad = {n: nm.Tensor(t.data.copy(), requires_grad=True) for n, t in model.weights.items()}
        bad["emb_b"].data[0] = np.nan
        with pytest.raises(nm.NonFiniteError):
            ExtractorModel(tiny_spec(), bad)


class TestEmbed:
    def test_deterministic(self):
        model = init_model(tiny_spec(), seed=4)
        rng = np.random.Generator(np.random.PCG64(1))
        img = rng.uniform(0, 1, (SIZE, SIZE, 1))
        np.testing.assert_array_equal(model.embed(img), model.embed(img))

    def test_zero_image_finite(self):
        model = init_model(tiny_spec(), seed=4)
        emb = model.embed(np.zeros((SIZE, SIZE, 1)))
        assert np.all(np.isfinite(emb))

    def test_shape_mismatch(self):
        model = init_model(tiny_spec(), seed=4)
        with pytest.raises(nm.ShapeError):
            model.embed(np.zeros((SIZE + 1, SIZE, 1)))

    def test_embed_does_not_touch_weights(self):
        model = init_model(tiny_spec(), seed=4)
        before = {n: t.data.copy() for n, t in model.weights.items()}
        model.embed(np.full((SIZE, SIZE, 1), 0.3))
        for n, t in model.weights.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_logits_shape(self):
        model = init_model(tiny_spec(class_count=5), seed=4)
        out = model.logits(np.full((SIZE, SIZE, 1), 0.5))
        assert out.shape == (5,)


class TestTraining:
    def test_two_identity_separable_reaches_full_accuracy(self):
        data = tiny_data(ids=2)
        model = train_classifier(init_model(tiny_spec(), seed=7), data, quick_cfg())
        assert model.train_meta.final_train_accuracy == 1.0

    def test_zero_epochs_leaves_weights(self):
        data = tiny_data(ids=2)
        model = init_model(tiny_spec(), seed=7)
        before = {n: t.data.copy() for n, t in model.weights.items()}
        train_classifier(model, data, quick_cfg(epochs=0))
        for n, t in model.weights.items():
            np.testing.assert_array_equal(t.data, before[n])
        assert model.train_meta.epochs == 0
        assert model.train_meta.dataset_fingerprint != ""

    def test_class_count_mismatch_fails_before_training(self):
        data = tiny_data(ids=3)
        model = init_model(tiny_spec(class_count=2), seed=7)
        before = {n: t.data.copy() for n, t in model.weights.items()}
        with pytest.raises(ValueError):
            train_classifier(model, data, quick_cfg())
        for n, t in model.weights.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_input_shape_mismatch(self):
        data = generate_synthetic(
            SynthParams(identity_count=2, images_per_identity=2, rng_seed=1, image_size=24)
        )
        with pytest.raises(nm.ShapeError):
            train_classifier(init_model(tiny_spec(), seed=0), data, quick_cfg())

    def test_deterministic_training(self):
        data = tiny_data(ids=2)
        a = train_classifier(init_model(tiny_spec(), seed=7), data, quick_cfg(epochs=3))
        b = train_classifier(init_model(tiny_spec(), seed=7), data, quick_cfg(epochs=3))
        for n in a.weights:
            np.testing.assert_array_equal(a.weights[n].data, b.weights[n].data)
        assert a.train_meta.epoch_losses == b.train_meta.epoch_losses

    def test_loss_non_increasing_early(self):
        data = tiny_data(ids=8, imgs=4, seed=2)
        model = train_classifier(
            init_model(tiny_spec(class_count=8), seed=1), data, quick_cfg(epochs=3)
        )
        losses = model.train_meta.epoch_losses
        assert len(losses) == 3
        assert losses[1] <= losses[0] * 1.01
        assert losses[2] <= losses[1] * 1.01

    def test_intra_identity_distance_below_random_pair_median(self):
        data = tiny_data(ids=8, imgs=4, seed=6)
        model = train_classifier(
            init_model(tiny_spec(class_count=8), seed=2), data, quick_cfg(epochs=30)
        )
        X, y, _ = data.as_arrays()
        embs = np.stack([model.embed(x) for x in X])
        dists, labels = [], []
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                dists.append(float(np.linalg.norm(embs[i] - embs[j])))
                labels.append(y[i] == y[j])
        dists = np.array(dists)
        genuine = dists[np.array(labels)]
        assert np.mean(genuine) < np.median(dists)

    def test_config_validation(self):
        for bad in (
            dict(epochs=-1),
            dict(batch_size=0),
            dict(learning_rate=0.0),
            dict(weight_decay=-1e-4),
            dict(momentum=1.0),
            dict(momentum=-0.1),
            dict(warmup_epochs=-1),
        ):
            with pytest.raises(ValueError):
                train_classifier(init_model(tiny_spec(), seed=0), tiny_data(), quick_cfg(**bad))

    def test_distinct_archs_embed_differently(self):
        # transfer-matrix prerequisite: the two architectures must not be
        # linear re-parameterizations of each other
        data = tiny_data(ids=6, imgs=3, seed=8)
        cnn = train_classifier(
            init_model(tiny_spec(class_count=6), seed=3), data, quick_cfg(epochs=10)
        )
        mlp = train_classifier(
            init_model(tiny_spec(arch_id="mlp", class_count=6, mlp_hidden=32), seed=3),
            data,
            quick_cfg(epochs=10, learning_rate=0.01),
        )
        X, _, _ = data.as_arrays()
        def pairwise(model):
            embs = np.stack([model.embed(x) for x in X])
            out = []
            for i in range(len(embs)):
                for j in range(i + 1, len(embs)):
                    out.append(float(np.linalg.norm(embs[i] - embs[j])))
            return np.array(out)
        da, db = pairwise(cnn), pairwise(mlp)
        cos = float(da @ db / (np.linalg.norm(da) * np.linalg.norm(db)))
        assert cos < 0.99


class TestSerialization:
    def test_round_trip_weights_and_embeddings(self, tmp_path):
        data = tiny_data(ids=2)
        model = train_classifier(init_model(tiny_spec(), seed=11), data, quick_cfg(epochs=2))
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.spec == model.spec
        assert sorted(loaded.weights) == sorted(model.weights)
        for n in model.weights:
            np.testing.assert_array_equal(loaded.weights[n].data, model.weights[n].data)
        assert loaded.train_meta.dataset_fingerprint == model.train_meta.dataset_fingerprint
        assert loaded.train_meta.final_train_accuracy == model.train_meta.final_train_accuracy
        rng = np.random.Generator(np.random.PCG64(2))
        for _ in range(10):
            img = rng.uniform(0, 1, (SIZE, SIZE, 1))
            np.testing.assert_array_equal(model.embed(img), loaded.embed(img))

    def test_truncated_file(self, tmp_path):
        model = init_model(tiny_spec(), seed=0)
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        raw = path.read_bytes()
        for cut in (4, 10, len(raw) // 2, len(raw) - 8):
            short = tmp_path / f"cut{cut}.uaxm"
            short.write_bytes(raw[:cut])
            with pytest.raises(ModelFormatError, match="truncated"):
                load_model(short)

    def test_wrong_magic(self, tmp_path):
        model = init_model(tiny_spec(), seed=0)
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_wrong_version(self, tmp_path):
        model = init_model(tiny_spec(), seed=0)
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_trailing_bytes(self, tmp_path):
        model = init_model(tiny_spec(), seed=0)
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"\x00" * 16)
        with pytest.raises(ModelFormatError, match="trailing"):
            load_model(path)

    def test_corrupt_header(self, tmp_path):
        model = init_model(tiny_spec(), seed=0)
        path = tmp_path / "m.uaxm"
        save_model(model, path)
        raw = bytearray(path.read_bytes())
        raw[12] = ord("X")  # first header byte: breaks the JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError):
            load_model(path)
