"""Convolutional autoencoder: 7 conv + linear encoder, linear + 5 (conv, transposed conv) decoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import ImageSample, stack_pixels
from .errors import ConfigError, DataError, NumericError, UsageError
from .tensor import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    conv2d,
    conv_transpose2d,
    linear,
    mse_loss,
    relu,
    reshape,
    sigmoid,
    zero_grad,
)

CHECKPOINT_FORMAT = "nof1embed-ae/1"
N_DECODER_PAIRS = 5


@dataclass
class AEConfig:
    input_hw: tuple[int, int] = (64, 64)
    latent_dim: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 32, 64, 64, 128, 128)
    encoder_strides: tuple[int, ...] = (2, 1, 2, 1, 2, 1, 2)
    decoder_channels: tuple[int, ...] = (128, 64, 64, 32, 16)
    kernel_size: int = 3
    latent_relu: bool = True
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if len(self.encoder_channels) != 7 or len(self.encoder_strides) != 7:
            raise ConfigError("encoder needs exactly 7 conv layers (channels and strides)")
        if len(self.decoder_channels) != N_DECODER_PAIRS:
            raise ConfigError(f"decoder needs exactly {N_DECODER_PAIRS} channel widths")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> AEConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown autoencoder keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def geometry(self) -> dict:
        """Map extents through the network; raises ConfigError naming the failing layer."""
        h, w = self.input_hw
        k = self.kernel_size
        pad = k // 2
        shapes = []
        for i, s in enumerate(self.encoder_strides):
            if h < k or w < k:
                raise ConfigError(
                    f"encoder conv{i + 1}: feature map {h}x{w} is smaller than the {k}x{k} kernel"
                )
            h, w = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
            shapes.append((h, w))
        scale = 2**N_DECODER_PAIRS
        hin, win = self.input_hw
        if hin % scale or win % scale:
            raise ConfigError(
                f"decoder: input {hin}x{win} must be divisible by {scale} for the "
                f"{N_DECODER_PAIRS} stride-2 transposed convolutions to close"
            )
        return {
            "encoder_maps": shapes,
            "flat_features": self.encoder_channels[-1] * h * w,
            "decoder_start": (hin // scale, win // scale),
        }


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AEModel:
    config: AEConfig
    params: dict[str, Tensor]
    history: list[dict] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward passes ---------------------------------------------------

    def encode(self, x: Tensor) -> Tensor:
        cfg = self.config
        pad = cfg.kernel_size // 2
        h = x
        for i, s in enumerate(cfg.encoder_strides):
            h = relu(conv2d(h, self.params[f"enc{i}.w"], self.params[f"enc{i}.b"], stride=s, padding=pad))
        h = reshape(h, (h.shape[0], -1))
        z = linear(h, self.params["enc_lin.w"], self.params["enc_lin.b"])
        return relu(z) if cfg.latent_relu else z

    def decode(self, z: Tensor) -> Tensor:
        cfg = self.config
        pad = cfg.kernel_size // 2
        h0, w0 = cfg.geometry()["decoder_start"]
        h = relu(linear(z, self.params["dec_lin.w"], self.params["dec_lin.b"]))
        h = reshape(h, (z.shape[0], cfg.encoder_channels[-1], h0, w0))
        for i in range(N_DECODER_PAIRS):
            h = relu(conv2d(h, self.params[f"dec{i}.conv.w"], self.params[f"dec{i}.conv.b"], padding=pad))
            h = conv_transpose2d(h, self.params[f"dec{i}.up.w"], self.params[f"dec{i}.up.b"], stride=2)
            h = relu(h) if i < N_DECODER_PAIRS - 1 else sigmoid(h)
        return h

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = self.encode(x)
        return z, self.decode(z)


def build(config: AEConfig) -> AEModel:
    """Create a freshly initialised model (Kaiming-uniform weights, zero biases)."""
    geo = config.geometry()
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in):
        params[name + ".w"] = Tensor(_kaiming_uniform(rng, shape, fan_in), tracked=True)
        params[name + ".b"] = Tensor(np.zeros(shape[1] if name.endswith(".up") else shape[0]), tracked=True)

    c_in = 3
    for i, c in enumerate(config.encoder_channels):
        add(f"enc{i}", (c, c_in, k, k), c_in * k * k)
        c_in = c
    add("enc_lin", (config.latent_dim, geo["flat_features"]), geo["flat_features"])

    h0, w0 = geo["decoder_start"]
    c_top = config.encoder_channels[-1]
    add("dec_lin", (c_top * h0 * w0, config.latent_dim), config.latent_dim)
    c_in = c_top
    widths = config.decoder_channels
    for i, c in enumerate(widths):
        add(f"dec{i}.conv", (c, c_in, k, k), c_in * k * k)
        c_out = widths[i + 1] if i + 1 < len(widths) else 3
        # a 2x2 stride-2 transposed conv feeds each output pixel from one input pixel
        add(f"dec{i}.up", (c, c_out, 2, 2), c)
        c_in = c_out
    return AEModel(config, params)


def _as_array(data, config: AEConfig, what: str) -> np.ndarray:
    arr = stack_pixels(data) if isinstance(data, (list, tuple)) else np.asarray(data, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 3 or tuple(arr.shape[2:]) != config.input_hw:
        raise DataError(f"{what}: expected (n, 3, {config.input_hw[0]}, {config.input_hw[1]}), got {arr.shape}")
    return arr


def _batched_loss(model: AEModel, data: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        xb = Tensor(data[start : start + batch_size])
        total += mse_loss(model.forward(xb)[1], xb).item() * len(xb.data)
    return total / len(data)


def train(model: AEModel, train_set, val_set, config: AEConfig | None = None, log=None) -> AEModel:
    """Minibatch Adam on per-element MSE, recording per-epoch train/validation loss.

    ``val_set`` must be a separately augmented copy; passing the training
    object itself is rejected.
    """
    cfg = config or model.config
    if val_set is train_set:
        raise UsageError("validation set must be an independently augmented copy, not the training set")
    x_train = _as_array(train_set, model.config, "train_set")
    x_val = _as_array(val_set, model.config, "val_set") if val_set is not None and len(val_set) else None
    if len(x_train) == 0:
        raise DataError("train_set is empty")
    params = model.parameters()
    state = AdamState(lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            xb = Tensor(x_train[order[start : start + cfg.batch_size]])
            zero_grad(params)
            # non-finite values are caught and reported by the ops themselves
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    loss = mse_loss(model.forward(xb)[1], xb)
                    backward(loss)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
                adam_step(params, state)
            total += loss.item() * len(xb.data)
        entry = {"epoch": epoch, "train_loss": total / len(x_train)}
        if x_val is not None:
            entry["val_loss"] = _batched_loss(model, x_val, cfg.batch_size)
        if not all(np.isfinite(v) for v in entry.values()):
            raise NumericError(f"epoch {epoch}: non-finite loss {entry}")
        model.history.append(entry)
        if log is not None:
            log(entry)
    zero_grad(params)
    return model


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    participant_ids: list[str]
    keys: list[tuple[str, int, int]]

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.values) != len(self.participant_ids):
            raise DataError("embedding rows and participant ids disagree")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("embedding contains non-finite values")


def _forward_chunks(model: AEModel, arr: np.ndarray, decode: bool) -> np.ndarray:
    out = []
    bs = model.config.batch_size
    for start in range(0, len(arr), bs):
        x = Tensor(arr[start : start + bs])
        z = model.encode(x)
        out.append((model.decode(z) if decode else z).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.latent_dim))


def embed(model: AEModel, samples: Sequence[ImageSample] | np.ndarray) -> EmbeddingMatrix:
    arr = _as_array(samples, model.config, "embed")
    values = _forward_chunks(model, arr, decode=False)
    if isinstance(samples, (list, tuple)):
        pids = [s.record.participant_id for s in samples]
        keys = [(s.record.participant_id, s.record.day, s.record.slot) for s in samples]
    else:
        pids = [""] * len(values)
        keys = [("", i, 0) for i in range(len(values))]
    return EmbeddingMatrix(values, pids, keys)


def reconstruct(model: AEModel, samples: Sequence[ImageSample] | np.ndarray) -> np.ndarray:
    return _forward_chunks(model, _as_array(samples, model.config, "reconstruct"), decode=True)


def save(model: AEModel, path: Path | str) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "history": model.history}
    arrays = {name: t.data for name, t in model.params.items()}
    with Path(path).open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load(path: Path | str) -> AEModel:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model = build(AEConfig.from_dict(meta["config"]))
        for name, t in model.params.items():
            if name not in npz.files or npz[name].shape != t.shape:
                raise DataError(f"{path}: parameter {name} missing or mis-shaped")
            t.data = np.ascontiguousarray(npz[name])
    model.history = meta["history"]
    return model
