"""Convolutional auto-encoder over binary trajectory images.

Encoder: four (conv -> ReLU -> 2x2 max-pool) stages with 9/7/5/3 kernels and
16/16/8/8 filters, then a dense map to the L-dimensional embedding.
Decoder: dense map back to the (8, pad_W/16, pad_H/16) feature map, then four
(switch unpool -> transposed conv -> ReLU) stages ending in one channel.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import DataError, DivergedError
from .nn_engine import (
    SGD,
    Adam,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    MaxPool2,
    MaxUnpool2,
    PoolRecord,
    ReLU,
    Reshape,
    Sequential,
    cast_layer,
)
from .raster import GridSpec, TrajectoryImage, stack_images
from .trajectory_io import BoundingBox

log = logging.getLogger(__name__)

# (in_channels, out_channels, kernel) per stage
ENCODER_STAGES = ((1, 16, 9), (16, 16, 7), (16, 8, 5), (8, 8, 3))
# each unpool must see as many channels as its paired pool produced: 8, 8, 16, 16
DECODER_STAGES = ((8, 8, 3), (8, 16, 5), (16, 16, 7), (16, 1, 9))
BOTTLENECK_CHANNELS = 8


@dataclass
class CaeConfig:
    L: int = 3
    lambda1: float = 0.15
    lambda2: float = 0.85
    batch_size: int = 200
    epochs: int = 3000
    lr: float = 0.001
    seed: int = 0
    loss: str = "hybrid"
    optimizer: str = "adam"
    dtype: str = "float32"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError("loss weights must be non-negative with a positive sum")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if self.loss not in ("hybrid", "l1", "ssim", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


@dataclass
class Embedding:
    values: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding is not finite")


class CaeModel:
    def __init__(self, grid: GridSpec, L: int = 3, seed: int = 0, dtype="float64"):
        self.grid = grid
        self.L = int(L)
        self.dtype = np.dtype(dtype)
        pw, ph = grid.padded_shape
        self.bottleneck_shape = (BOTTLENECK_CHANNELS, pw // 16, ph // 16)
        flat = int(np.prod(self.bottleneck_shape))
        rng = np.random.default_rng(seed)

        enc, self.pools = [], []
        for cin, cout, k in ENCODER_STAGES:
            pool = MaxPool2()
            self.pools.append(pool)
            enc += [Conv2d(cin, cout, k, rng), ReLU(), pool]
        enc[0].input_grad = False  # nothing upstream of the image
        enc += [Flatten(), Dense(flat, self.L, rng)]

        dec = [Dense(self.L, flat, rng), Reshape(self.bottleneck_shape)]
        self.unpools = []
        for (cin, cout, k), pool in zip(DECODER_STAGES, reversed(self.pools)):
            unpool = MaxUnpool2(pool)
            self.unpools.append(unpool)
            dec += [unpool, ConvTranspose2d(cin, cout, k, rng), ReLU()]

        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)
        self.network = Sequential(enc + dec)
        if self.dtype != np.float64:
            for layer in self.network.layers:
                if layer.params:
                    cast_layer(layer, self.dtype)

    @property
    def params(self) -> tuple:
        return self.network.params

    @property
    def grads(self) -> tuple:
        return self.network.grads

    def layer_shapes(self) -> list[tuple]:
        return [p.shape for p in self.params]

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=self.dtype)
        if batch.ndim == 2:
            batch = batch[None, None]
        elif batch.ndim == 3:
            batch = batch[:, None]
        if batch.shape[1:] != (1,) + self.grid.padded_shape:
            raise ValueError(f"image shape {batch.shape[1:]} does not match model grid {self.grid.padded_shape}")
        return batch

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Reconstruct a (M, 1, pad_W, pad_H) batch, caching state for ``backward``."""
        return self.network.forward(self._check_batch(batch))

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        self.network.zero_grad()
        self.network.backward(np.asarray(grad, dtype=self.dtype))
        return list(self.grads)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        """(M, L) embeddings of an image batch."""
        return self.encoder.forward(self._check_batch(batch))

    def records(self) -> list[PoolRecord]:
        return [p.record for p in self.pools]


def _image_array(image, grid: GridSpec) -> np.ndarray:
    if isinstance(image, TrajectoryImage):
        if image.grid != grid:
            raise ValueError("image grid does not match model grid")
        return image.pixels
    return np.asarray(image, dtype=np.float64)


def encode(model: CaeModel, image) -> tuple[Embedding, list[PoolRecord]]:
    """Embed one image; the returned pool records let ``decode`` place values back."""
    y = model.embed(_image_array(image, model.grid))
    ident = image.id if isinstance(image, TrajectoryImage) else ""
    return Embedding(y[0], ident), model.records()


def encode_batch(model: CaeModel, images, chunk: int = 64) -> np.ndarray:
    """(M, L) embeddings for a list of TrajectoryImage or an image array."""
    if isinstance(images, np.ndarray):
        batch = images
    else:
        images = list(images)
        if any(im.grid != model.grid for im in images):
            raise ValueError("image grid does not match model grid")
        batch = stack_images(images)
    batch = model._check_batch(batch)
    out = [model.embed(batch[a : a + chunk]) for a in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.L))


def decode(model: CaeModel, emb: Embedding | np.ndarray, records: list[PoolRecord]) -> np.ndarray:
    """Reconstruct a (pad_W, pad_H) image from an embedding and its encoder pool records."""
    if records is None or len(records) != len(model.pools) or any(r is None for r in records):
        raise ValueError("decode needs the pool records from the matching encode pass")
    y = emb.values if isinstance(emb, Embedding) else np.asarray(emb, dtype=np.float64)
    x = y.reshape(1, -1)
    unpool_records = dict(zip(map(id, model.unpools), reversed(records)))
    for layer in model.decoder.layers:
        if isinstance(layer, MaxUnpool2):
            x = layer.forward(x, unpool_records[id(layer)])
        else:
            x = layer.forward(x)
    return x[0, 0]


def reconstruct(model: CaeModel, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


@dataclass
class TrainResult:
    model: CaeModel
    losses: list[float] = field(default_factory=list)

    @property
    def tail_trend(self) -> float:
        """Mean loss of the second half minus the first half of the last 10% of epochs."""
        n = max(2, len(self.losses) // 10)
        tail = np.asarray(self.losses[-n:])
        if len(tail) < 2:
            return 0.0
        half = len(tail) // 2
        return float(tail[half:].mean() - tail[:half].mean())


def train(images, config: CaeConfig, model: CaeModel | None = None, progress=None) -> TrainResult:
    """Mini-batch training of the auto-encoder on binary trajectory images.

    Batches are reshuffled every epoch from a generator seeded with
    ``config.seed``.  The loss curve holds one value per epoch: the mean of
    the batch losses evaluated before each update.

    Raises:
        DivergedError: if the loss or a gradient becomes non-finite.
    """
    if isinstance(images, np.ndarray):
        raise TypeError("train expects TrajectoryImage objects (the grid is taken from them)")
    images = list(images)
    if not images:
        raise DataError("no training images")
    batch_all = stack_images(images)
    grid = images[0].grid
    if model is None:
        model = CaeModel(grid, config.L, config.seed, config.dtype)
    elif model.grid != grid:
        raise ValueError("model grid does not match images")
    opt = Adam(model.params, lr=config.lr) if config.optimizer == "adam" else SGD(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    m = len(batch_all)
    for epoch in range(config.epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            # non-finite values are caught explicitly in _run_epoch
            _run_epoch(model, opt, batch_all, rng.permutation(m), config, result)
        if progress is not None:
            progress(epoch, result.losses[-1])
    if config.epochs >= 20 and result.tail_trend > 0:
        log.warning("training loss rose over the last 10%% of epochs (%+.3g); consider a lower lr", result.tail_trend)
    return result


def _run_epoch(model, opt, batch_all, order, config: CaeConfig, result: TrainResult) -> None:
    total, seen = 0.0, 0
    for a in range(0, len(order), config.batch_size):
        idx = order[a : a + config.batch_size]
        x = batch_all[idx]
        xhat = model.forward(x)
        loss, g = losses.loss_and_grad(x, xhat, config.loss, config.lambda1, config.lambda2)
        if not np.isfinite(loss):
            raise DivergedError("diverged; lower lr")
        try:
            opt.step(model.backward(g))
        except DivergedError as exc:
            raise DivergedError("diverged; lower lr") from exc
        total += loss * len(idx)
        seen += len(idx)
    result.losses.append(total / seen)


def evaluate_ssim(model: CaeModel, images) -> np.ndarray:
    """Per-image SSIM between inputs and reconstructions."""
    batch = stack_images(images) if not isinstance(images, np.ndarray) else images
    recon = np.concatenate([model.forward(batch[a : a + 64]) for a in range(0, len(batch), 64)])
    return losses.ssim_batch(batch, recon)


# ---------------------------------------------------------------------------
# persistence

MAGIC = b"TRAJSIM-CAE\n"
FORMAT_VERSION = 1


def save_model(model: CaeModel, path) -> None:
    """Magic line, version line, JSON header line, then little-endian float64 weights."""
    b = model.grid.bbox
    header = {
        "grid": {"bbox": asdict(b), "W": model.grid.W, "H": model.grid.H, "delta": model.grid.delta},
        "L": model.L,
        "dtype": model.dtype.name,
        "shapes": [list(s) for s in model.layer_shapes()],
    }
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> CaeModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a model file (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise DataError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    pos += 4
    end = raw.find(b"\n", pos)
    if end < 0:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:end])
        g = header["grid"]
        grid = GridSpec(BoundingBox(**g["bbox"]), int(g["W"]), int(g["H"]), g["delta"])
        model = CaeModel(grid, int(header["L"]), dtype=header.get("dtype", "float64"))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from exc
    if [list(s) for s in model.layer_shapes()] != header["shapes"]:
        raise DataError(f"{path}: layer shapes do not match the architecture")
    pos = end + 1
    need = sum(p.size for p in model.params) * 8
    if len(raw) - pos != need:
        raise DataError(f"{path}: expected {need} weight bytes, found {len(raw) - pos}")
    for p in model.params:
        n = p.size * 8
        p[...] = np.frombuffer(raw[pos : pos + n], dtype="<f8").reshape(p.shape).astype(p.dtype)
        pos += n
    return model


def write_embeddings_csv(path, ids, values: np.ndarray) -> None:
    values = np.asarray(values)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(["id"] + [f"y{i + 1}" for i in range(values.shape[1])]) + "\n")
        for ident, row in zip(ids, values):
            fh.write(",".join([str(ident)] + [f"{v:.12g}" for v in row]) + "\n")


def read_embeddings_csv(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    if not rows:
        raise DataError(f"{path}: no embeddings")
    return ids, np.array(rows)
