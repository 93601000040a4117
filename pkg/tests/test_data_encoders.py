import dataclasses

import numpy as np
import pytest

from emblaunder import data as D
from emblaunder.encoders import (
    TrainConfig,
    TrainLog,
    WeightsFormatError,
    augment_batch,
    init_encoder,
    load_weights,
    retrieval_accuracy,
    save_weights,
    train_contrastive,
)
from emblaunder.image_io import quantize_roundtrip


def test_class_ids_cover_shapes_by_hues():
    assert D.NUM_CLASSES == 32
    ids = {D.class_id(s, h) for s in D.SHAPES for h in D.HUE_NAMES}
    assert ids == set(range(32))
    assert D.class_name(D.class_id("cross", "blue")) == "blue_cross"
    with pytest.raises(ValueError):
        D.class_name(32)


def test_dataset_is_seeded_balanced_and_quantized():
    a = D.generate_shape_dataset(7, 2)
    b = D.generate_shape_dataset(7, 2)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != D.generate_shape_dataset(8, 2).to_bytes()
    assert np.bincount(a.labels).tolist() == [2] * 32
    assert a.images.shape == (64, 32, 32, 3) and a.images.dtype == np.float32
    np.testing.assert_array_equal(quantize_roundtrip(a.images[0]), a.images[0])


def test_chroma_directions_are_unit_and_luminance_free():
    for hue in D.HUE_NAMES:
        d = D.chroma_direction(hue)
        assert np.linalg.norm(d) == pytest.approx(1.0)
        assert d.sum() == pytest.approx(0.0, abs=1e-12)


def test_hue_tint_survives_in_class_mean():
    ds = D.generate_shape_dataset(3, 4)
    red = ds.of_class(D.class_id("square", "red")).mean(axis=(0, 1, 2))
    cyan = ds.of_class(D.class_id("square", "cyan")).mean(axis=(0, 1, 2))
    d = red - cyan
    assert d @ D.chroma_direction("red") > 0


def test_dataset_directory_roundtrip(tmp_path):
    ds = D.generate_shape_dataset(5, 1)
    D.save_dataset(ds, tmp_path / "ds")
    back = D.load_dataset(tmp_path / "ds")
    assert back.to_bytes() == ds.to_bytes() and back.seed == 5
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "missing")


@pytest.mark.parametrize("arch", ["tiny_vit", "tiny_cnn"])
def test_embeddings_are_unit_norm(arch, rng):
    enc = init_encoder(arch, 16, seed=0)
    e = enc.embed(rng.random((3, 32, 32, 3)).astype(np.float32))
    assert e.shape == (3, 16)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(enc.label_embeddings(), axis=1), 1.0, atol=1e-5)


def test_unknown_arch_rejected():
    with pytest.raises(ValueError):
        init_encoder("resnet", 16)


def test_weights_roundtrip_and_corruption(tiny_cnn):
    blob = save_weights(tiny_cnn)
    back = load_weights(blob)
    assert back.arch == tiny_cnn.arch and back.dim == tiny_cnn.dim and back.seed == tiny_cnn.seed
    for k, v in tiny_cnn.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    assert save_weights(back) == blob
    bad = bytearray(blob)
    bad[40] ^= 1
    with pytest.raises(WeightsFormatError):
        load_weights(bytes(bad))
    with pytest.raises(WeightsFormatError):
        load_weights(b"XXXX" + blob[4:])


def test_augment_keeps_shape_and_flip_only_when_no_shift(rng):
    imgs = rng.random((6, 8, 8, 3)).astype(np.float32)
    out = augment_batch(imgs, np.random.default_rng(0), 0)
    for a, b in zip(imgs, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, ::-1], b)
    assert augment_batch(imgs, np.random.default_rng(0), 2).shape == imgs.shape


def test_short_training_lowers_loss_and_is_deterministic():
    ds = D.generate_shape_dataset(9, 2)
    enc = init_encoder("tiny_cnn", 16, seed=1)
    cfg = TrainConfig(epochs=4, lr=0.05, seed=2)
    log = TrainLog()
    a = train_contrastive(enc, ds, cfg, log)
    b = train_contrastive(enc, ds, cfg)
    assert log.epoch_loss[-1] < log.epoch_loss[0]
    assert save_weights(a) == save_weights(b)
    assert 0.0 <= retrieval_accuracy(a, ds) <= 1.0


def test_training_rejects_missing_classes():
    ds = D.generate_shape_dataset(9, 1)
    ds = dataclasses.replace(ds, images=ds.images[:5], labels=ds.labels[:5])
    with pytest.raises(ValueError):
        train_contrastive(init_encoder("tiny_cnn", 8), ds, TrainConfig(epochs=1))


def test_zero_epochs_returns_a_copy(tiny_vit):
    ds = D.generate_shape_dataset(0, 1)
    out = train_contrastive(tiny_vit, ds, TrainConfig(epochs=0))
    assert out is not tiny_vit and save_weights(out) == save_weights(tiny_vit)


@pytest.mark.parametrize("eid", ["S1", "S3"])
def test_default_schedule_loss_decreases_over_first_five_epochs(eid):
    from emblaunder.config import ExperimentConfig
    from emblaunder.zoo import STANDARD_ZOO, SURROGATE_DATA, train_config_for

    cfg = ExperimentConfig()
    tc = dataclasses.replace(train_config_for(cfg, eid), stop_after=5)
    data = D.generate_shape_dataset(cfg.seed + SURROGATE_DATA, cfg.data.train_per_class)
    log = TrainLog()
    train_contrastive(init_encoder(STANDARD_ZOO[eid].arch, cfg.train.dim, tc.seed), data, tc, log)
    assert len(log.epoch_loss) == 5
    assert all(b < a for a, b in zip(log.epoch_loss, log.epoch_loss[1:])), log.epoch_loss


def test_generator_counts():
    ds = D.generate_shape_dataset(0, 10)
    assert len(ds) == 320 and np.bincount(ds.labels).tolist() == [10] * 32
