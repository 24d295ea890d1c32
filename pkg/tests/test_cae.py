import struct

import numpy as np
import pytest

from conftest import lane_dataset
from trajsim import cae, losses
from trajsim.errors import DataError, DivergedError
from trajsim.nn_engine import Flatten, conv_same, maxpool2
from trajsim.raster import GridSpec, TrajectoryImage
from trajsim.trajectory_io import BoundingBox

SMALL = GridSpec(BoundingBox(0.0, 1.0, 0.0, 1.0), 16, 16)
ODD = GridSpec(BoundingBox(0.0, 1.0, 0.0, 2.0), 20, 37)


def zero_biases(model):
    for layer in model.network.layers:
        if layer.params:
            layer.params[1][...] = 0


def blob_image(grid, seed=0, density=0.1):
    rng = np.random.default_rng(seed)
    px = np.zeros(grid.padded_shape)
    px[: grid.W, : grid.H] = rng.random((grid.W, grid.H)) < density
    return TrajectoryImage(grid, px, f"img{seed}")


def test_config_validation():
    assert cae.CaeConfig().L == 3
    for bad in ({"L": 0}, {"lambda1": -1}, {"lambda1": 0, "lambda2": 0}, {"batch_size": 0}, {"loss": "x"}):
        with pytest.raises(ValueError):
            cae.CaeConfig(**bad)


@pytest.mark.parametrize("grid", [SMALL, ODD])
def test_shapes(grid):
    m = cae.CaeModel(grid, L=4)
    pw, ph = grid.padded_shape
    assert m.bottleneck_shape == (8, pw // 16, ph // 16)
    flat_layer = next(layer for layer in m.encoder.layers if isinstance(layer, Flatten))
    emb, records = cae.encode(m, blob_image(grid))
    assert flat_layer._shape[1:] == m.bottleneck_shape
    assert int(np.prod(m.bottleneck_shape)) == pw * ph // 32
    assert emb.values.shape == (4,)
    assert cae.decode(m, emb, records).shape == (pw, ph)
    assert m.forward(blob_image(grid).pixels).shape == (1, 1, pw, ph)


def test_zero_in_zero_out():
    m = cae.CaeModel(SMALL, seed=3)
    zero_biases(m)
    emb, records = cae.encode(m, np.zeros(SMALL.padded_shape))
    np.testing.assert_array_equal(emb.values, 0)
    np.testing.assert_array_equal(cae.decode(m, np.zeros(3), records), 0)


def test_encode_equals_primitive_composition():
    m = cae.CaeModel(ODD, L=3, seed=7)
    rng = np.random.default_rng(1)
    for layer in m.network.layers:
        if layer.params:
            layer.params[1][...] = rng.normal(0, 0.1, layer.params[1].shape)
    img = blob_image(ODD, 2, 0.3)
    x = img.pixels[None, None]
    convs = [layer for layer in m.encoder.layers if hasattr(layer, "weight") and layer.weight.ndim == 4]
    for conv in convs:
        x, _ = maxpool2(np.maximum(conv_same(x, conv.weight, conv.bias), 0.0))
    dense = m.encoder.layers[-1]
    expected = x.reshape(1, -1) @ dense.weight.T + dense.bias
    emb, _ = cae.encode(m, img)
    np.testing.assert_allclose(emb.values, expected[0], rtol=1e-12, atol=1e-14)


def test_grid_mismatch_and_missing_records():
    m = cae.CaeModel(SMALL)
    with pytest.raises(ValueError):
        cae.encode(m, blob_image(ODD))
    with pytest.raises(ValueError):
        cae.decode(m, np.zeros(3), None)
    with pytest.raises(ValueError):
        cae.decode(m, np.zeros(3), [None] * 4)


def test_decode_reproduces_forward():
    m = cae.CaeModel(SMALL, seed=2)
    img = blob_image(SMALL, 4, 0.4)
    emb, records = cae.encode(m, img)
    np.testing.assert_allclose(cae.decode(m, emb, records), m.forward(img.pixels)[0, 0], atol=1e-12)


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_save_load_round_trip(tmp_path, dtype):
    m = cae.CaeModel(ODD, L=2, seed=5, dtype=dtype)
    img = blob_image(ODD, 1, 0.3)
    path = tmp_path / "m.bin"
    cae.save_model(m, path)
    back = cae.load_model(path)
    assert back.grid == m.grid and back.L == 2 and back.dtype == m.dtype
    for p, q in zip(m.params, back.params):
        assert np.array_equal(p, q)
    assert np.array_equal(cae.encode(m, img)[0].values, cae.encode(back, img)[0].values)
    raw = path.read_bytes()
    assert raw.startswith(cae.MAGIC)


def test_load_rejects_bad_files(tmp_path):
    m = cae.CaeModel(SMALL)
    good = tmp_path / "m.bin"
    cae.save_model(m, good)
    raw = good.read_bytes()
    cases = {
        "magic": b"X" + raw[1:],
        "version": raw[: len(cae.MAGIC)] + struct.pack("<I", 99) + raw[len(cae.MAGIC) + 4 :],
        "header": raw[: len(cae.MAGIC) + 4] + b"{not json\n" + raw[raw.index(b"\n", len(cae.MAGIC) + 4) + 1 :],
        "truncated": raw[:-8],
        "short": raw[:5],
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(DataError):
            cae.load_model(tmp_path / name)


def test_embeddings_csv(tmp_path):
    vals = np.random.default_rng(0).normal(size=(3, 2))
    cae.write_embeddings_csv(tmp_path / "e.csv", ["a", "b", "c"], vals)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "id,y1,y2"
    ids, back = cae.read_embeddings_csv(tmp_path / "e.csv")
    assert ids == ["a", "b", "c"]
    np.testing.assert_allclose(back, vals, rtol=1e-11)


def test_single_image_overfit_reduces_loss():
    img = blob_image(SMALL, 3, 0.2)
    res = cae.train([img], cae.CaeConfig(epochs=200, batch_size=1, seed=1))
    assert len(res.losses) == 200
    assert res.losses[-1] < res.losses[0]


def test_training_is_deterministic():
    imgs = [blob_image(SMALL, s, 0.2) for s in range(4)]
    cfg = cae.CaeConfig(epochs=5, batch_size=3, seed=4, dtype="float64")
    a, b = cae.train(imgs, cfg), cae.train(imgs, cfg)
    assert a.losses == b.losses
    for p, q in zip(a.model.params, b.model.params):
        assert np.array_equal(p, q)


def test_divergence_is_reported():
    imgs = [blob_image(SMALL, s, 0.2) for s in range(2)]
    with pytest.raises(DivergedError, match="lower lr"):
        cae.train(imgs, cae.CaeConfig(epochs=50, batch_size=2, lr=1e200, optimizer="sgd", dtype="float64"))


def test_train_input_checks():
    with pytest.raises(DataError):
        cae.train([], cae.CaeConfig(epochs=1))
    with pytest.raises(TypeError):
        cae.train(np.zeros((1, 16, 16)), cae.CaeConfig(epochs=1))


@pytest.fixture(scope="module")
def twenty_image_model():
    _, _, images = lane_dataset(2, 10, seed=7)
    res = cae.train(images, cae.CaeConfig(L=3, epochs=500, lr=0.001, seed=7))
    return res, images


@pytest.mark.slow
def test_twenty_image_training_reconstructs(twenty_image_model):
    res, images = twenty_image_model
    assert len(images) == 20
    scores = cae.evaluate_ssim(res.model, images)
    assert scores.min() >= 0.8
    assert res.losses[-1] < res.losses[0]


@pytest.mark.slow
def test_hybrid_loss_non_negative_after_training(twenty_image_model):
    res, images = twenty_image_model
    batch = np.stack([im.pixels for im in images])[:, None]
    recon = res.model.forward(batch)
    assert recon.min() >= 0
    assert losses.loss_hybrid(batch, recon) >= 0
