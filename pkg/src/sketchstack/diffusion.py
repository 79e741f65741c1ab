"""Per-relation denoising diffusion models.

One model is trained per geometric relation (and per stability pattern) on
the poses of operand blocks that satisfy it, conditioned on the operands'
dimensions. Fixed-arity relations use a feed-forward backbone over the
concatenated operands; variadic relations and patterns use a masked
attention stack over operand slots.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from packaging.version import InvalidVersion, Version

from sketchstack import utils
from sketchstack.config import ConfigError
from sketchstack.core import NORM_SCALE, ValidationError, denormalize_xyz
from sketchstack.layers import (
    Adam,
    AttentionBlock,
    Layer,
    Mish,
    mlp,
    sinusoidal_embedding,
)
from sketchstack.relations import ArityError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SKCK"
CHECKPOINT_FORMAT = "1.0"
POSE_DIM = 3

ARCH_PRESETS: dict[str, dict[str, int]] = {
    "desk": {"hidden": 128, "steps_T": 200, "time_hidden": 512},
    "full": {"hidden": 256, "steps_T": 1500, "time_hidden": 512},
}


class ShapeError(ValidationError):
    """Raised when arrays passed to a model have inconsistent shapes."""

    pass


class CheckpointError(ValidationError):
    """Raised when a checkpoint file is malformed or from an incompatible format."""

    pass


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss {loss})")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..T] and per-step betas (beta[0] = 0)."""

    T: int
    offset: float
    alpha_bar: np.ndarray = field(repr=False, compare=False)
    beta: np.ndarray = field(repr=False, compare=False)


def cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    """Build the squared-cosine schedule over T steps.

    Raises:
        ConfigError: If T < 1
    """
    if T < 1:
        raise ConfigError(f"Diffusion needs at least one step, got T={T}")
    s = offset
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    alpha_bar = f / (math.cos((s / (1 + s)) * math.pi / 2) ** 2)
    beta = np.zeros(T + 1)
    beta[1:] = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-6, 0.999)
    return NoiseSchedule(T, offset, alpha_bar, beta)


def forward_noise(p0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise clean poses to level t: sqrt(ab) * p0 + sqrt(1 - ab) * eps.

    `t` may be a scalar or one level per leading batch entry.

    Raises:
        ShapeError: If eps and p0 differ in shape
    """
    p0 = np.asarray(p0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if p0.shape != eps.shape:
        raise ShapeError(f"Noise shape {eps.shape} does not match pose shape {p0.shape}")
    ab = sched.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (p0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * p0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class ArchConfig:
    """Denoiser architecture.

    `slots` is the operand count for fixed arity and the slot capacity for
    variadic models; `geom_dim` is per operand (3 dims, plus a role flag for
    pattern models).
    """

    mode: str = "fixed"
    slots: int = 2
    geom_dim: int = 3
    hidden: int = 128
    time_hidden: int = 512
    heads: int = 4
    blocks: int = 2
    position_encoding: bool = True
    steps_T: int = 200
    offset: float = 0.008

    def __post_init__(self):
        if self.mode not in ("fixed", "variadic"):
            raise ConfigError(f"Unknown arity mode '{self.mode}'")
        if self.slots < 1 or self.hidden < 2 or self.hidden % 2:
            raise ConfigError("Architecture needs slots >= 1 and an even hidden width")
        if self.mode == "variadic" and self.hidden % self.heads:
            raise ConfigError(f"Hidden width {self.hidden} is not divisible by {self.heads} heads")

    @classmethod
    def from_config(cls, diffusion: dict[str, Any], **kwargs) -> "ArchConfig":
        """Arch settings from the `diffusion` config section, preset first."""
        preset = diffusion.get("preset", "desk")
        if preset not in ARCH_PRESETS:
            raise ConfigError(f"Unknown diffusion preset '{preset}'")
        values: dict[str, Any] = dict(ARCH_PRESETS[preset])
        for key in ("hidden", "time_hidden", "heads", "blocks", "position_encoding", "offset"):
            if key in diffusion:
                values[key] = diffusion[key]
        if "T" in diffusion:
            values["steps_T"] = diffusion["T"]
        values.update(kwargs)
        return cls(**values)


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 20000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 500

    @classmethod
    def from_config(cls, diffusion: dict[str, Any]) -> "OptimConfig":
        known = {k: v for k, v in diffusion.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class DenoiserData:
    """Training set of one relation in model units.

    g is (N, S, geom_dim), p is (N, S, 3) and mask is (N, S).
    """

    g: np.ndarray
    p: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.p.ndim != 3 or self.p.shape[-1] != POSE_DIM:
            raise ShapeError(f"Pose array must be (N, S, 3), got {self.p.shape}")
        if self.g.shape[:2] != self.p.shape[:2] or self.mask.shape != self.p.shape[:2]:
            raise ShapeError(
                f"Inconsistent dataset shapes g={self.g.shape} p={self.p.shape} "
                f"mask={self.mask.shape}"
            )

    def __len__(self) -> int:
        return self.p.shape[0]


class DenoiserModel:
    """Noise predictor eps(p_t, g, t) for one relation."""

    def __init__(self, name: str, arch: ArchConfig, rng: np.random.Generator):
        self.name = name
        self.arch = arch
        self.seed: int | None = None
        self.config_hash: str = ""
        self.losses: list[float] = []
        H = arch.hidden
        if arch.mode == "fixed":
            self.shape_enc = mlp([arch.slots * arch.geom_dim, H, H], rng)
            self.pose_enc = mlp([arch.slots * POSE_DIM, H, H], rng)
        else:
            self.shape_enc = mlp([arch.geom_dim, H, H], rng)
            self.pose_enc = mlp([POSE_DIM, H, H], rng)
        self.time_enc = mlp([H, arch.time_hidden, H], rng, activation=Mish)
        if arch.mode == "fixed":
            self.backbone: list[Layer] = [mlp([H, H, H, H], rng)]
            self.decoder = mlp([H, arch.slots * POSE_DIM], rng)
        else:
            self.backbone = [AttentionBlock(H, arch.heads, rng) for _ in range(arch.blocks)]
            self.decoder = mlp([H, POSE_DIM], rng)

    @property
    def variadic(self) -> bool:
        return self.arch.mode == "variadic"

    def _modules(self) -> list[tuple[str, Layer]]:
        mods = [("shape", self.shape_enc), ("pose", self.pose_enc), ("time", self.time_enc)]
        mods += [(f"backbone{i}", m) for i, m in enumerate(self.backbone)]
        mods.append(("decoder", self.decoder))
        return mods

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, grad) in the declared checkpoint order."""
        out = []
        for prefix, module in self._modules():
            out.extend(module.named_parameters(f"{prefix}."))
        return out

    def gradients(self) -> list[np.ndarray]:
        return [g for _, _, g in self.named_parameters()]

    def zero_grad(self) -> None:
        for _, module in self._modules():
            module.zero_grad()

    def _check(self, p_t: np.ndarray, g: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        if p_t.ndim != 3 or p_t.shape[-1] != POSE_DIM:
            raise ShapeError(f"Pose input must be (B, S, 3), got {p_t.shape}")
        B, S, _ = p_t.shape
        if S > self.arch.slots or (not self.variadic and S != self.arch.slots):
            raise ArityError(f"{self.name} model takes {self.arch.slots} slots, got {S}")
        if g.shape != (B, S, self.arch.geom_dim):
            raise ShapeError(f"Geometry must be {(B, S, self.arch.geom_dim)}, got {g.shape}")
        if mask is None:
            return np.ones((B, S), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, S):
            raise ShapeError(f"Mask must be {(B, S)}, got {mask.shape}")
        return mask

    def forward(
        self, p_t: np.ndarray, g: np.ndarray, t: np.ndarray, mask: np.ndarray | None = None
    ) -> np.ndarray:
        """Predict the noise in `p_t`.

        Args:
            p_t: Noised poses (B, S, 3) in model units
            g: Operand geometry (B, S, geom_dim)
            t: Noise levels (B,)
            mask: Valid slots (B, S); padded slots get zero output

        Returns:
            Predicted noise (B, S, 3)

        Raises:
            ArityError: If there are more slots than the model supports
            ShapeError: If the input shapes disagree
        """
        p_t = np.asarray(p_t, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        mask = self._check(p_t, g, mask)
        B, S, _ = p_t.shape
        m3 = mask[:, :, None]
        H = self.arch.hidden

        temb = self.time_enc.forward(sinusoidal_embedding(np.asarray(t, dtype=np.float64), H))
        if not self.variadic:
            h = (
                self.shape_enc.forward((g * m3).reshape(B, -1))
                + self.pose_enc.forward((p_t * m3).reshape(B, -1))
                + temb
            )
            h = self.backbone[0].forward(h)
            out = self.decoder.forward(h).reshape(B, S, POSE_DIM)
            return out * m3

        h = self.shape_enc.forward(g * m3) + self.pose_enc.forward(p_t * m3) + temb[:, None, :]
        if self.arch.position_encoding:
            h = h + sinusoidal_embedding(np.arange(S), H)[None, :, :]
        h = h * m3
        for block in self.backbone:
            h = block.forward(h, mask)
        return self.decoder.forward(h) * m3

    def backward(self, d_out: np.ndarray, mask: np.ndarray) -> None:
        """Accumulate parameter gradients for d(loss)/d(output) = `d_out`."""
        m3 = np.asarray(mask, dtype=bool)[:, :, None]
        d_out = d_out * m3
        B, S, _ = d_out.shape
        if not self.variadic:
            dh = self.decoder.backward(d_out.reshape(B, -1))
            dh = self.backbone[0].backward(dh)
            self.shape_enc.backward(dh)
            self.pose_enc.backward(dh)
            self.time_enc.backward(dh)
            return

        dh = self.decoder.backward(d_out)
        for block in reversed(self.backbone):
            dh = block.backward(dh)
        dh = dh * m3
        self.shape_enc.backward(dh)
        self.pose_enc.backward(dh)
        self.time_enc.backward(dh.sum(axis=1))

    __call__ = forward


def _batch_loss(
    model: DenoiserModel,
    p0: np.ndarray,
    g: np.ndarray,
    mask: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> tuple[float, np.ndarray]:
    """Masked noise-prediction MSE and its gradient with respect to the model output."""
    m3 = mask[:, :, None]
    p_t = forward_noise(p0 * m3, t, eps * m3, sched)
    out = model.forward(p_t, g, t, mask)
    count = max(int(mask.sum()) * POSE_DIM, 1)
    diff = (out - eps) * m3
    return float((diff**2).sum() / count), 2.0 * diff / count


def train_denoiser(
    data: DenoiserData,
    arch: ArchConfig,
    opt: OptimConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    name: str = "relation",
) -> DenoiserModel:
    """Fit a denoiser to one relation's dataset.

    Each step draws a minibatch, a uniform level t in 1..T and fresh
    Gaussian noise per sample, then takes one Adam step on the masked MSE.

    Args:
        data: Training set in model units
        arch: Architecture
        opt: Optimizer settings
        sched: Noise schedule
        rng: Random stream for init, batches, levels and noise
        name: Relation or pattern the model is for

    Returns:
        Trained model; `model.losses` holds the loss of every step

    Raises:
        ShapeError: If the dataset is smaller than one batch
        TrainingDiverged: If the loss becomes non-finite
    """
    n = len(data)
    if n == 0 or n < opt.batch_size:
        raise ShapeError(
            f"Dataset for {name} has {n} samples, fewer than batch size {opt.batch_size}"
        )
    model = DenoiserModel(name, arch, rng)
    adam = Adam(model.named_parameters(), opt.lr, opt.beta1, opt.beta2)

    for step in range(1, opt.steps + 1):
        idx = rng.integers(0, n, size=opt.batch_size)
        t = rng.integers(1, sched.T + 1, size=opt.batch_size)
        eps = rng.standard_normal(data.p[idx].shape)
        model.zero_grad()
        loss, d_out = _batch_loss(model, data.p[idx], data.g[idx], data.mask[idx], t, eps, sched)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        model.backward(d_out, data.mask[idx])
        adam.step(model.gradients())
        model.losses.append(loss)
        if opt.log_every and step % opt.log_every == 0:
            logger.info("%s: step %d/%d loss %.5f", name, step, opt.steps, loss)
    return model


def denoise_step(
    model: DenoiserModel,
    p_t: np.ndarray,
    g: np.ndarray,
    t,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """One deterministic noise prediction; unbatched (S, ...) inputs are accepted."""
    p_t = np.asarray(p_t, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    single = p_t.ndim == 2
    if single:
        p_t, g = p_t[None], g[None]
        mask = None if mask is None else np.asarray(mask)[None]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (p_t.shape[0],))
    out = model.forward(p_t, g, t_arr, mask)
    return out[0] if single else out


def ancestral_step(
    model: DenoiserModel,
    p_t: np.ndarray,
    g: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Sample p_{t-1} from the learned reverse kernel (no noise at t = 1)."""
    eps_hat = denoise_step(model, p_t, g, t, mask)
    beta = sched.beta[t]
    ab = sched.alpha_bar[t]
    mean = (p_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = beta * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - ab)
    return mean + math.sqrt(var) * rng.standard_normal(p_t.shape)


def sample_single(
    model: DenoiserModel,
    g: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Draw operand poses from one model.

    Args:
        model: Trained denoiser
        g: Operand geometry (S, geom_dim) in model units
        sched: Schedule the model was trained with
        rng: Random stream
        mask: Valid slots (S,), for variadic models

    Returns:
        Poses (S, 3) in scene units
    """
    g = np.asarray(g, dtype=np.float64)
    p = rng.standard_normal((g.shape[0], POSE_DIM))
    for t in range(sched.T, 0, -1):
        p = ancestral_step(model, p, g, t, sched, rng, mask)
    if mask is not None:
        p = p * np.asarray(mask, dtype=bool)[:, None]
    return denormalize_xyz(p)


def grad_check(
    model: DenoiserModel,
    sample: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    t: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    n_params: int = 200,
    h: float = 1e-4,
) -> float:
    """Compare analytic loss gradients with central finite differences.

    Args:
        model: Model to check (weights are restored afterwards)
        sample: (p0, g, mask, eps) batch in model units
        t: Noise level per batch entry
        sched: Noise schedule
        rng: Picks which parameter entries to probe
        n_params: Number of entries probed
        h: Finite-difference step

    Returns:
        Largest relative error |a - n| / max(|a|, |n|, 1e-6)
    """
    rng = rng or np.random.default_rng(0)
    p0, g, mask, eps = sample
    mask = np.asarray(mask, dtype=bool)
    t = np.asarray(t)

    model.zero_grad()
    _, d_out = _batch_loss(model, p0, g, mask, t, eps, sched)
    model.backward(d_out, mask)
    params = model.named_parameters()

    sizes = np.array([p.size for _, p, _ in params])
    probes = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes

    worst = 0.0
    for flat in probes:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        _, value, grad = params[i]
        j = np.unravel_index(int(flat - offsets[i]), value.shape)
        analytic = float(grad[j])
        original = value[j]
        value[j] = original + h
        up, _ = _batch_loss(model, p0, g, mask, t, eps, sched)
        value[j] = original - h
        down, _ = _batch_loss(model, p0, g, mask, t, eps, sched)
        value[j] = original
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst


# Checkpoints


def save_checkpoint(model: DenoiserModel, path: Path) -> None:
    """Write a model: magic, header length, JSON header, float32 LE weights."""
    params = model.named_parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "relation": model.name,
        "arch": asdict(model.arch),
        "config_hash": model.config_hash,
        "seed": model.seed,
        "final_loss": model.losses[-1] if model.losses else None,
        "norm_scale": list(NORM_SCALE),
        "tensors": [[name, list(value.shape)] for name, value, _ in params],
    }
    head = json.dumps(header).encode("utf-8")
    blob = b"".join(value.astype("<f4").tobytes() for _, value, _ in params)
    utils.atomic_write_bytes(
        Path(path), CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob
    )


def load_checkpoint(path: Path) -> DenoiserModel:
    """Read a model written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: If the file is malformed or from another major format
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
        raise CheckpointError(f"Not a checkpoint file: {path}")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
        found = Version(str(header["format"]))
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, InvalidVersion) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e
    if found.major != Version(CHECKPOINT_FORMAT).major:
        raise CheckpointError(
            f"Checkpoint format {found} is not supported (expected {CHECKPOINT_FORMAT})"
        )

    arch = ArchConfig(**header["arch"])
    model = DenoiserModel(header["relation"], arch, np.random.default_rng(0))
    model.seed = header.get("seed")
    model.config_hash = header.get("config_hash", "")

    weights = np.frombuffer(raw[8 + n :], dtype="<f4")
    params = model.named_parameters()
    expected = [[name, list(value.shape)] for name, value, _ in params]
    if header["tensors"] != expected or weights.size != sum(v.size for _, v, _ in params):
        raise CheckpointError(f"Checkpoint tensors do not match the declared architecture: {path}")
    pos = 0
    for _, value, _ in params:
        value[...] = weights[pos : pos + value.size].reshape(value.shape)
        pos += value.size
    return model


def schedule_for(model: DenoiserModel) -> NoiseSchedule:
    return cosine_schedule(model.arch.steps_T, model.arch.offset)


def load_models(model_dir: Path, names: list[str] | None = None) -> dict[str, DenoiserModel]:
    """Load every `*.ckpt` in a directory, or just the named ones.

    Raises:
        FileNotFoundError: If the directory or a named checkpoint is missing
        CheckpointError: If a checkpoint is malformed
    """
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        raise FileNotFoundError(f"Model directory not found: {model_dir}")
    if names is None:
        paths = sorted(model_dir.glob("*.ckpt"))
    else:
        paths = [utils.artifact_path(model_dir, name, ".ckpt") for name in names]
    models = {}
    for path in paths:
        model = load_checkpoint(path)
        models[model.name] = model
    logger.debug("loaded %d model(s) from %s", len(models), model_dir)
    return models
