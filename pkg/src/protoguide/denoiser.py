"""Conditional UNet noise predictor and its training loop.

The class condition enters as a per-class embedding row concatenated with a
sinusoidal time embedding; the concatenation is projected by a small MLP and
added into every ResNet block. Two conditioning modes share one architecture:
randomly initialized trainable embeddings (the classifier-free baseline) and
prototype-initialized frozen embeddings.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import NoiseSchedule
from .fileio import atomic_write_bytes, atomic_write_json, read_json
from .prototypes import Codebook

CHECKPOINT_SCHEMA_VERSION = 1

SOURCE_RANDOM = "random_trainable"
SOURCE_PROTOTYPE = "prototype_frozen"

__all__ = [
    "DenoiserConfig",
    "desk_config",
    "ConditioningTable",
    "sinusoidal_time_embedding",
    "build_condition",
    "init_from_prototypes",
    "init_random",
    "NoisePredictor",
    "predict_noise",
    "denoising_loss",
    "DiffusionTrainer",
    "load_checkpoint",
]


@dataclass(frozen=True)
class DenoiserConfig:
    """UNet shape and training hyperparameters."""

    input_size: int = 64
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    resnet_blocks_per_level: int = 2
    dropout: float = 0.1
    time_dim: int = 256
    cond_dim: int = 768
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 1500
    batch_size: int = 16
    timesteps: int = 1000
    uncond_prob: float = 0.1

    def __post_init__(self) -> None:
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be non-empty")
        levels = len(self.channel_multipliers)
        if self.input_size % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{levels - 1}")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError("uncond_prob must be in [0, 1]")


def desk_config(**overrides) -> DenoiserConfig:
    """Small CPU-friendly preset for tests and CI."""
    base = DenoiserConfig(
        input_size=8,
        base_channels=16,
        channel_multipliers=(1, 2),
        resnet_blocks_per_level=2,
        dropout=0.1,
        time_dim=64,
        cond_dim=3,
        learning_rate=1e-3,
        epochs=200,
        batch_size=8,
        timesteps=200,
    )
    return replace(base, **overrides) if overrides else base


@dataclass
class ConditioningTable:
    """Per-class embedding rows plus a trailing null/unconditional row."""

    embeddings: np.ndarray  # (C + 1, D), row C is the null condition
    frozen: bool
    source: str

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 2:
            raise ValueError("table needs at least one class row plus the null row")
        if self.source not in (SOURCE_RANDOM, SOURCE_PROTOTYPE):
            raise ValueError(f"unknown conditioning source {self.source!r}")

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def null_index(self) -> int:
        return self.num_classes


def init_from_prototypes(codebook: Codebook) -> ConditioningTable:
    """Frozen table: row c is prototype (c, 0); the null row is zero."""
    table = np.zeros((codebook.num_classes + 1, codebook.dim))
    table[:-1] = codebook.prototypes[:, 0, :]
    return ConditioningTable(embeddings=table, frozen=True, source=SOURCE_PROTOTYPE)


def init_random(num_classes: int, dim: int, seed: int) -> ConditioningTable:
    """Trainable table with all rows (null included) drawn from N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 0.02, size=(num_classes + 1, dim))
    return ConditioningTable(embeddings=table, frozen=False, source=SOURCE_RANDOM)


def sinusoidal_time_embedding(t: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding: pair i oscillates at 10000^(-2i/dim)."""
    if dim % 2 != 0 or dim <= 0:
        raise ValueError("dim must be a positive even integer")
    if t < 0:
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))
    args = float(t) * freqs
    out = np.empty(dim)
    out[0::2] = np.sin(args)
    out[1::2] = np.cos(args)
    return out


def build_condition(t: int, class_id: int | None, table: ConditioningTable,
                    time_dim: int) -> np.ndarray:
    """Concatenate the time embedding with the selected class (or null) row."""
    if class_id is None:
        row = table.null_index
    else:
        if not 0 <= int(class_id) < table.num_classes:
            raise KeyError(f"unknown class id {class_id}")
        row = int(class_id)
    return np.concatenate([sinusoidal_time_embedding(t, time_dim),
                           table.embeddings[row]])


def _sinusoid_torch(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0)
                      * (2.0 * torch.arange(half, dtype=torch.float32) / dim))
    args = t.float()[:, None] * freqs[None, :]
    out = torch.empty(t.shape[0], dim)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)
    return out


def _norm_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g != 0:
        g -= 1
    return g


class ResBlock(nn.Module):
    """Two 3x3 convs with the projected condition added between them."""

    def __init__(self, in_ch: int, out_ch: int, ctx_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.ctx_proj = nn.Linear(ctx_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.ctx_proj(ctx)[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, ctx=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, ctx=None):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class NoisePredictor(nn.Module):
    """UNet predicting the per-step noise from (x_t, t, class id)."""

    def __init__(self, config: DenoiserConfig, table: ConditioningTable):
        super().__init__()
        if table.dim != config.cond_dim:
            raise ValueError(
                f"conditioning table dim {table.dim} != config cond_dim {config.cond_dim}")
        self.config = config
        self.cond_source = table.source
        self.cond_frozen = table.frozen
        self.class_embeddings = nn.Parameter(
            torch.from_numpy(table.embeddings.astype(np.float32)),
            requires_grad=not table.frozen)

        ctx_dim = config.time_dim
        self.cond_mlp = nn.Sequential(
            nn.Linear(config.time_dim + config.cond_dim, ctx_dim),
            nn.SiLU(),
            nn.Linear(ctx_dim, ctx_dim),
        )

        widths = [config.base_channels * m for m in config.channel_multipliers]
        blocks = config.resnet_blocks_per_level
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [widths[0]]
        ch = widths[0]
        for i, w in enumerate(widths):
            for _ in range(blocks):
                self.down.append(ResBlock(ch, w, ctx_dim, config.dropout))
                ch = w
                skip_chs.append(ch)
            if i < len(widths) - 1:
                self.down.append(Downsample(ch))
                skip_chs.append(ch)

        self.mid1 = ResBlock(ch, ch, ctx_dim, config.dropout)
        self.mid2 = ResBlock(ch, ch, ctx_dim, config.dropout)

        self.up = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            for _ in range(blocks + 1):
                self.up.append(ResBlock(ch + skip_chs.pop(), w, ctx_dim, config.dropout))
                ch = w
            if i > 0:
                self.up.append(Upsample(ch))

        self.out_norm = nn.GroupNorm(_norm_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    @property
    def null_index(self) -> int:
        return self.class_embeddings.shape[0] - 1

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond_ids: torch.Tensor) -> torch.Tensor:
        temb = _sinusoid_torch(t, self.config.time_dim)
        cemb = self.class_embeddings[cond_ids]
        ctx = self.cond_mlp(torch.cat([temb, cemb], dim=-1))

        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(h, ctx)
            skips.append(h)
        h = self.mid1(h, ctx)
        h = self.mid2(h, ctx)
        for block in self.up:
            if isinstance(block, ResBlock):
                h = block(torch.cat([h, skips.pop()], dim=1), ctx)
            else:
                h = block(h, ctx)
        return self.out_conv(F.silu(self.out_norm(h)))


def predict_noise(model: NoisePredictor, x_t: np.ndarray, t: int,
                  class_id: int | None) -> np.ndarray:
    """Deterministic inference-mode noise prediction; accepts (3,H,W) or (B,3,H,W)."""
    x = np.asarray(x_t, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise ValueError(f"unexpected input shape {x_t.shape}")
    if not 0 <= int(t) < model.config.timesteps:
        raise IndexError(f"timestep {t} outside [0, {model.config.timesteps})")
    if class_id is None:
        row = model.null_index
    else:
        if not 0 <= int(class_id) < model.null_index:
            raise KeyError(f"unknown class id {class_id}")
        row = int(class_id)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        xb = torch.from_numpy(x)
        tb = torch.full((x.shape[0],), int(t), dtype=torch.long)
        cb = torch.full((x.shape[0],), row, dtype=torch.long)
        out = model(xb, tb, cb).numpy()
    if was_training:
        model.train()
    return out[0] if single else out


def _canonical(obj):
    """Rebuild containers and intern strings so equal blobs pickle to equal
    bytes. Pickle memoizes by object identity, which otherwise leaks the
    object graph's history (fresh vs checkpoint-loaded state) into the file.
    """
    import sys

    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        rebuilt = [_canonical(v) for v in obj]
        return rebuilt if isinstance(obj, list) else tuple(rebuilt)
    return obj


def denoising_loss(predict_fn, x0: torch.Tensor, cond_ids: torch.Tensor,
                   t: torch.Tensor, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """MSE between true and predicted noise on x_t built from explicit draws.

    Factored out of the training step so tests can stub predict_fn.
    """
    sqrt_ab = torch.from_numpy(
        np.sqrt(schedule.alpha_bars).astype(np.float32))[t].view(-1, 1, 1, 1)
    sqrt_1m = torch.from_numpy(
        np.sqrt(1.0 - schedule.alpha_bars).astype(np.float32))[t].view(-1, 1, 1, 1)
    x_t = sqrt_ab * x0 + sqrt_1m * eps
    pred = predict_fn(x_t, t, cond_ids)
    return F.mse_loss(pred, eps)


class DiffusionTrainer:
    """Single-writer training loop with resumable RNG and checkpoint series.

    All stochastic draws (batch indices, timesteps, noise, conditioning
    dropout) come from one numpy generator; dropout layers consume the torch
    global RNG. Both states are saved in checkpoints so a resumed run
    reproduces an uninterrupted one bit for bit.
    """

    def __init__(self, model: NoisePredictor, schedule: NoiseSchedule,
                 images: np.ndarray, labels: np.ndarray, seed: int = 0):
        config = model.config
        if schedule.T != config.timesteps:
            raise ValueError(f"schedule T={schedule.T} != config timesteps={config.timesteps}")
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError("images must be a non-empty (N, C, H, W) array")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must align with images")
        if labels.min() < 0 or labels.max() >= model.null_index:
            raise ValueError("labels outside the conditioning table's class range")
        self.model = model
        self.schedule = schedule
        self.images = torch.from_numpy(images)
        self.labels = labels
        self.seed = seed
        self.optimizer = torch.optim.AdamW(
            [p for p in model.parameters() if p.requires_grad],
            lr=config.learning_rate, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        self.step = 0
        self._t0 = time.monotonic()

    def train_step(self) -> dict:
        """One optimizer update; returns a metrics record for the step log."""
        config = self.model.config
        n = self.images.shape[0]
        batch = min(config.batch_size, n)
        idx = self.rng.choice(n, size=batch, replace=False)
        x0 = self.images[torch.from_numpy(idx)]
        t = self.rng.integers(0, self.schedule.T, size=batch)
        eps = self.rng.standard_normal(x0.shape).astype(np.float32)
        cond = self.labels[idx].copy()
        cond[self.rng.random(batch) < config.uncond_prob] = self.model.null_index

        self.model.train()
        loss = denoising_loss(self.model, x0,
                              torch.from_numpy(cond),
                              torch.from_numpy(t),
                              torch.from_numpy(eps), self.schedule)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return {
            "step": self.step,
            "loss": float(loss.item()),
            "lr": float(self.optimizer.param_groups[0]["lr"]),
            "wall_time": time.monotonic() - self._t0,
        }

    def save_checkpoint(self, path, sidecar_extra: dict | None = None) -> None:
        """Atomically write the weights blob and its JSON sidecar."""
        blob = _canonical({
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "np_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        })
        buf = io.BytesIO()
        torch.save(blob, buf)
        atomic_write_bytes(path, buf.getvalue())
        sidecar = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "step": self.step,
            "seed": self.seed,
            "config": asdict(self.model.config),
            "conditioning_source": self.model.cond_source,
            "conditioning_frozen": self.model.cond_frozen,
            "num_classes": self.model.null_index,
            "schedule": {"T": self.schedule.T,
                         "beta_start": float(self.schedule.betas[0]),
                         "beta_end": float(self.schedule.betas[-1])},
        }
        if sidecar_extra:
            sidecar.update(sidecar_extra)
        atomic_write_json(str(path) + ".json", sidecar)

    def restore(self, path) -> None:
        """Resume from a checkpoint written by save_checkpoint."""
        blob = torch.load(path, weights_only=False)
        self.model.load_state_dict(blob["model"])
        self.optimizer.load_state_dict(blob["optimizer"])
        self.step = int(blob["step"])
        self.rng.bit_generator.state = blob["np_rng"]
        torch.set_rng_state(blob["torch_rng"])


def load_checkpoint(path) -> tuple[NoisePredictor, dict]:
    """Rebuild an inference-ready model from a checkpoint blob and sidecar."""
    sidecar = read_json(str(path) + ".json")
    if sidecar.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema: {sidecar.get('schema_version')}")
    cfg_dict = dict(sidecar["config"])
    cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
    config = DenoiserConfig(**cfg_dict)
    table = ConditioningTable(
        embeddings=np.zeros((sidecar["num_classes"] + 1, config.cond_dim)),
        frozen=sidecar["conditioning_frozen"],
        source=sidecar["conditioning_source"])
    model = NoisePredictor(config, table)
    blob = torch.load(path, weights_only=False)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, sidecar
