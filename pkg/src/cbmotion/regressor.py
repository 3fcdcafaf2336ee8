"""Learned reprojection-error predictor for reconstructed slices.

A small convolutional network trained from scratch maps a single slice to a
non-negative RPE estimate (softplus head).  Training minimizes the squared
difference between the prediction and the true reprojection error of the
trajectory that corrupted the training reconstruction, and keeps the
checkpoint with the lowest validation error.
"""

from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (ConfigurationError, ContractError, FileFormatError,
                     TrainingError)
from .geometry import ScanGeometry, make_circular_trajectory
from .motion import (RpeConfig, identity_trajectory, random_motion,
                     reprojection_error, sample_sphere_points,
                     spline_to_trajectory)
from .recon import FilterKernel, SliceImage, fbp_central_slice

MODEL_MAGIC = b"CBRM"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(-2, -1))


def default_architecture() -> tuple[str, ...]:
    """Four stride-2 conv blocks (8-16-32-32), global pool, dense, softplus."""
    return (
        "conv in=1 out=8 kernel=3 stride=2",
        "relu",
        "conv in=8 out=16 kernel=3 stride=2",
        "relu",
        "conv in=16 out=32 kernel=3 stride=2",
        "relu",
        "conv in=32 out=32 kernel=3 stride=2",
        "relu",
        "gap",
        "dense in=32 out=1",
        "softplus",
    )


def build_network(layers: Sequence[str]) -> nn.Sequential:
    """Instantiate the network described by a layer list."""
    modules: list[nn.Module] = []
    for spec in layers:
        parts = spec.split()
        kind = parts[0]
        kv = dict(p.split("=") for p in parts[1:])
        if kind == "conv":
            k = int(kv["kernel"])
            modules.append(nn.Conv2d(int(kv["in"]), int(kv["out"]), k,
                                     stride=int(kv.get("stride", 1)),
                                     padding=k // 2))
        elif kind == "dense":
            modules.append(nn.Linear(int(kv["in"]), int(kv["out"])))
        elif kind == "relu":
            modules.append(nn.ReLU())
        elif kind == "gap":
            modules.append(GlobalAvgPool())
        elif kind == "softplus":
            modules.append(nn.Softplus())
        else:
            raise ConfigurationError(f"unknown layer spec {spec!r}")
    return nn.Sequential(*modules)


@dataclass
class RegressorModel:
    """Architecture descriptor, weights and input conventions of a predictor."""

    layers: tuple
    input_size: int
    normalization: str
    net: nn.Module = field(repr=False)

    @property
    def weights(self) -> np.ndarray:
        """Flat little-endian float32 parameter vector."""
        with torch.no_grad():
            vec = torch.nn.utils.parameters_to_vector(self.net.parameters())
        return vec.detach().cpu().numpy().astype("<f4")

    @property
    def weight_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def set_weights(self, flat: np.ndarray) -> None:
        if flat.size != self.weight_count:
            raise ContractError(
                f"weight vector has {flat.size} values, model needs "
                f"{self.weight_count}")
        vec = torch.from_numpy(np.ascontiguousarray(flat, dtype=np.float32))
        torch.nn.utils.vector_to_parameters(vec, self.net.parameters())


def new_model(seed: int = 0, input_size: int = 128,
              layers: Sequence[str] | None = None) -> RegressorModel:
    """Seeded fresh model with standard layer initialization."""
    layers = tuple(layers) if layers is not None else default_architecture()
    torch.manual_seed(seed)
    net = build_network(layers)
    return RegressorModel(layers, int(input_size), "per_image", net)


def zero_head(model: RegressorModel) -> RegressorModel:
    """Zero the final dense layer; the prediction becomes softplus(0) = ln 2."""
    last_linear = [m for m in model.net if isinstance(m, nn.Linear)]
    if not last_linear:
        raise ContractError("model has no dense layer")
    with torch.no_grad():
        last_linear[-1].weight.zero_()
        last_linear[-1].bias.zero_()
    return model


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _prepare_input(model: RegressorModel, img) -> torch.Tensor:
    pixels = img.pixels if isinstance(img, SliceImage) else np.asarray(img, float)
    if pixels.ndim != 2:
        raise ContractError("regressor input must be a 2-D slice")
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    x = x[None, None]
    if pixels.shape != (model.input_size, model.input_size):
        x = F.interpolate(x, size=(model.input_size, model.input_size),
                          mode="bilinear", align_corners=False)
    std, mean = torch.std_mean(x)
    return (x - mean) / torch.clamp(std, min=1e-12)


def forward(model: RegressorModel, img) -> float:
    """Predicted RPE (mm) for one slice; deterministic and non-negative."""
    model.net.eval()
    with torch.no_grad():
        out = model.net(_prepare_input(model, img))
    return float(out.reshape(-1)[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSample:
    image: SliceImage
    rpe_label: float

    def __post_init__(self) -> None:
        if self.rpe_label < 0:
            raise ContractError("rpe_label must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float


def train(samples: Sequence[TrainingSample],
          config: TrainConfig) -> tuple[RegressorModel, list]:
    """Fit a fresh model on (slice, RPE) pairs with Adam.

    Returns the checkpoint with the lowest validation MSE (the seeded
    initial weights count as a candidate) plus the per-epoch history.
    Bit-reproducible for a fixed seed and thread count.
    """
    if len(samples) < 2 * config.batch_size:
        raise ContractError("need at least 2 * batch_size samples")
    input_size = samples[0].image.grid_size
    model = new_model(seed=config.seed, input_size=input_size)
    xs = torch.cat([_prepare_input(model, s.image) for s in samples])
    ys = torch.tensor([s.rpe_label for s in samples], dtype=torch.float32)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(samples))
    n_val = max(1, int(round(config.validation_fraction * len(samples))))
    val_idx = torch.from_numpy(perm[:n_val].copy())
    train_idx = perm[n_val:]
    if train_idx.size == 0:
        raise ContractError("validation fraction leaves no training samples")

    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2),
                                 eps=config.adam_eps)

    def val_mse() -> float:
        model.net.eval()
        with torch.no_grad():
            pred = model.net(xs[val_idx]).reshape(-1)
            return float(F.mse_loss(pred, ys[val_idx]))

    best_val = val_mse()
    best_state = copy.deepcopy(model.net.state_dict())
    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        model.net.train()
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            batch = torch.from_numpy(order[start:start + config.batch_size].copy())
            pred = model.net(xs[batch]).reshape(-1)
            loss = F.mse_loss(pred, ys[batch])
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * batch.numel()
            count += batch.numel()
        v = val_mse()
        history.append(EpochStats(epoch, total / count, v))
        if v < best_val:
            best_val = v
            best_state = copy.deepcopy(model.net.state_dict())
    model.net.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------

def generate_dataset(phantoms: Sequence,
                     n_trajectories_per_phantom: int,
                     rpe_range: tuple[float, float],
                     seed: int,
                     geometry: ScanGeometry,
                     spline_nodes: int = 15,
                     active_fraction: float = 1.0 / 3.0,
                     grid_size: int = 128,
                     fov_mm: float = 200.0,
                     kernel: FilterKernel | None = None,
                     rpe_config: RpeConfig | None = None,
                     progress=None) -> list:
    """Simulate motion-corrupted reconstructions labeled with their true RPE.

    Each draw samples a target RPE uniformly from ``rpe_range``, builds a
    seeded random spline motion, forward-projects the corrupted acquisition
    and reconstructs it with identity compensation so the artifacts remain.
    Every tenth draw per phantom is a zero-motion sample (label exactly 0).
    """
    from .phantom import forward_project
    lo, hi = rpe_range
    if lo < 0 or hi < lo:
        raise ConfigurationError("rpe_range must satisfy 0 <= lo <= hi")
    rpe_config = rpe_config or RpeConfig()
    matrices = make_circular_trajectory(geometry)
    points = sample_sphere_points(rpe_config)
    rng = np.random.default_rng(seed)
    ident = identity_trajectory(geometry.n_views)
    samples: list[TrainingSample] = []
    for phantom in phantoms:
        for j in range(n_trajectories_per_phantom):
            target = float(rng.uniform(lo, hi))
            motion_seed = int(rng.integers(0, 2 ** 31))
            if j % 10 == 0:
                target = 0.0
            model = random_motion(geometry.n_views, spline_nodes, target,
                                  active_fraction, motion_seed, geometry,
                                  rpe_config, matrices)
            traj = spline_to_trajectory(model, geometry.n_views)
            label = reprojection_error(traj, matrices, points,
                                       geometry.pixel_pitch_u,
                                       geometry.pixel_pitch_v)
            stack = forward_project(phantom, matrices, geometry, motion=traj)
            img = fbp_central_slice(stack, matrices, ident, grid_size,
                                    fov_mm, kernel)
            samples.append(TrainingSample(img, label))
            if progress is not None:
                progress(len(samples))
    return samples


def dataset_manifest_csv(samples: Sequence[TrainingSample], image_paths,
                         seeds, trajectory_paths, path) -> None:
    """CSV manifest: image file path, rpe_label, seed, trajectory file path."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("image,rpe_label,seed,trajectory\n")
        for s, ip, sd, tp in zip(samples, image_paths, seeds, trajectory_paths):
            fh.write(f"{ip},{format(s.rpe_label, '.17g')},{sd},{tp}\n")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model: RegressorModel, path) -> None:
    """CBRM binary: header, plain-text descriptor, float32 weights, crc32."""
    arch_lines = [f"input_size: {model.input_size}",
                  f"normalization: {model.normalization}"]
    arch_lines += [f"layer: {layer}" for layer in model.layers]
    arch = ("\n".join(arch_lines) + "\n").encode("utf-8")
    weights = model.weights
    body = (struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(arch))
            + arch
            + struct.pack("<Q", weights.size)
            + weights.tobytes())
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_model(path) -> RegressorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FileFormatError("model file truncated (no header)")
    magic, version, arch_len = struct.unpack("<4sII", raw[:12])
    if magic != MODEL_MAGIC:
        raise FileFormatError("not a regressor model file (bad magic)")
    if version != MODEL_VERSION:
        raise FileFormatError(f"unsupported model file version {version}")
    if len(raw) < 12 + arch_len + 8 + 4:
        raise FileFormatError("model file truncated (descriptor)")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise FileFormatError("model file checksum mismatch")
    arch = raw[12:12 + arch_len].decode("utf-8")
    (n_weights,) = struct.unpack_from("<Q", raw, 12 + arch_len)
    start = 12 + arch_len + 8
    if len(raw) != start + 4 * n_weights + 4:
        raise FileFormatError("model file truncated (weights)")
    flat = np.frombuffer(raw, dtype="<f4", count=n_weights, offset=start)

    input_size, normalization, layers = None, None, []
    for line in arch.splitlines():
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "input_size":
            input_size = int(value)
        elif key == "normalization":
            normalization = value
        elif key == "layer":
            layers.append(value)
    if input_size is None or normalization is None or not layers:
        raise FileFormatError("model descriptor is incomplete")
    model = RegressorModel(tuple(layers), input_size, normalization,
                           build_network(layers))
    model.set_weights(flat)
    return model
