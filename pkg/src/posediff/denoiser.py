"""Conditional pose denoiser: a set transformer over per-frame tokens.

Each frame contributes one token ``cat(x_t^i, time_embed(t), psi^i, pivot^i)``.
No positional encoding is applied across frames, so the network is
permutation-equivariant over the frames of a scene. The network regresses the
clean pose block ``x_0`` directly and is trained with a plain L2 loss.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionSchedule, make_schedule, noise_sample
from .geometry import PARAM_DIM, PoseTuple, quat_canonical, quat_conj, quat_mul, quat_to_rotmat

log = logging.getLogger(__name__)

TOKEN_LAYOUT = ("noisy_pose", "time_embed", "scene_embed", "pivot_flag")
TOKEN_LAYOUT_VERSION = 1
CHECKPOINT_VERSION = 1
DIVERGENCE_LOSS = 1e6


class TrainingError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------- canonicalization

def pivot_normalize(poses: PoseTuple, pivot: int, return_scale: bool = False):
    """Express all extrinsics relative to ``pivot`` and fix the scale.

    Every camera becomes ``g_i o g_pivot^-1`` and translations are divided by
    the median norm of the (nonzero) pivot-relative translations. Quaternions
    come out with ``w >= 0``. Intrinsics are untouched.
    """
    n = len(poses)
    if not 0 <= pivot < n:
        raise IndexError(f"pivot {pivot} outside [0, {n})")
    q = quat_canonical(poses.quats)
    q_rel = quat_canonical(quat_mul(q, quat_conj(q[pivot])))
    R_rel = quat_to_rotmat(q_rel)
    t_rel = poses.trans - R_rel @ poses.trans[pivot]
    t_rel[pivot] = 0.0
    norms = np.linalg.norm(t_rel, axis=1)
    nonzero = norms[norms > 1e-12]
    scale = float(np.median(nonzero)) if len(nonzero) else 1.0
    if not len(nonzero):
        log.warning("pivot_normalize: all translations vanish; scale left at 1")
    out = np.concatenate([poses.log_focals[:, None], q_rel, t_rel / scale], axis=1)
    out[pivot, 1:] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    return (PoseTuple(out), scale) if return_scale else PoseTuple(out)


# ------------------------------------------------------------------- tokens

def time_embedding(t_frac, dim: int = 32):
    """Sinusoidal features of the diffusion time ``t / T`` in ``(0, 1]``."""
    t_frac = torch.as_tensor(t_frac)
    if not t_frac.is_floating_point():
        t_frac = t_frac.to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t_frac.dtype))
    ang = t_frac[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class FrameToken:
    """Unbatched view of one frame's input token (layout ``TOKEN_LAYOUT``)."""

    noisy_pose: np.ndarray
    time_embed: np.ndarray
    scene_embed: np.ndarray
    pivot_flag: int

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.noisy_pose, float), np.asarray(self.time_embed, float),
            np.asarray(self.scene_embed, float), [float(self.pivot_flag)],
        ])


def make_tokens(x_t, t_frac, scene_embed, pivot_flag, time_dim: int = 32) -> torch.Tensor:
    """Batched token assembly. ``x_t``: (B, N, 8); ``t_frac``: (B,); embeds (B, N, D); flags (B, N)."""
    x_t = torch.as_tensor(x_t)
    B, N, _ = x_t.shape
    te = time_embedding(torch.as_tensor(t_frac, dtype=x_t.dtype), time_dim).to(x_t.dtype)
    te = te[:, None, :].expand(B, N, time_dim)
    scene_embed = torch.as_tensor(scene_embed, dtype=x_t.dtype)
    flag = torch.as_tensor(pivot_flag, dtype=x_t.dtype)[..., None]
    return torch.cat([x_t, te, scene_embed, flag], dim=-1)


# -------------------------------------------------------------------- model

@dataclass
class DenoiserConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    time_dim: int = 32
    embed_dim: int = 64

    @property
    def token_dim(self) -> int:
        return PARAM_DIM + self.time_dim + self.embed_dim + 1


class PoseDenoiser(nn.Module):
    """Pre-norm transformer encoder mapping frame tokens to clean 8-vectors."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        self.embed = nn.Linear(config.token_dim, config.d_model)
        layer = nn.TransformerEncoderLayer(
            config.d_model, config.n_heads, config.d_ff, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, PARAM_DIM)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_dim:
            raise ValueError(
                f"token width {tokens.shape[-1]} does not match model ({self.config.token_dim})")
        h = self.blocks(self.embed(tokens))
        return self.head(self.norm(h))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_denoiser(config: DenoiserConfig | None = None, seed: int = 0,
                   dtype=torch.float32) -> PoseDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PoseDenoiser(config)
    return model.to(dtype)


def denoiser_forward(model: PoseDenoiser, tokens) -> np.ndarray:
    """Run the denoiser on one scene's tokens; returns ``(N, 8)``.

    ``tokens`` is a list of :class:`FrameToken` or an ``(N, token_dim)`` array.
    """
    if len(tokens) == 0:
        raise ValueError("need at least one frame token")
    if isinstance(tokens[0], FrameToken):
        tokens = np.stack([tok.to_vector() for tok in tokens])
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(tokens), dtype=dtype)[None])
    return out[0].double().numpy()


def pivot_flags(n_frames: int, pivot: int = 0) -> np.ndarray:
    flags = np.zeros(n_frames)
    flags[pivot] = 1.0
    return flags


def make_denoise_fn(model: PoseDenoiser, schedule: DiffusionSchedule, pivot: int = 0):
    """Adapt the model to the sampler's ``denoise_fn(x_t, t, conditioning)``.

    ``conditioning`` is the ``(N, D)`` per-frame scene embedding.
    """
    dtype = next(model.parameters()).dtype
    time_dim = model.config.time_dim

    def denoise_fn(x_t, t, conditioning):
        n = len(x_t)
        tokens = make_tokens(
            torch.as_tensor(x_t, dtype=dtype)[None], [t / schedule.T],
            np.asarray(conditioning)[None], pivot_flags(n, pivot)[None], time_dim,
        )
        with torch.no_grad():
            return model(tokens)[0].double().numpy()

    return denoise_fn


def regress_poses(model: PoseDenoiser, schedule: DiffusionSchedule, conditioning,
                  pivot: int = 0) -> PoseTuple:
    """Single forward pass of a regression-trained model (zero pose tokens, t = T)."""
    n = len(conditioning)
    mu = make_denoise_fn(model, schedule, pivot)(np.zeros((n, PARAM_DIM)), schedule.T, conditioning)
    return PoseTuple(mu).normalized()


# --------------------------------------------------------------------- loss

def canonical_target(poses: PoseTuple, pivot: int) -> np.ndarray:
    return pivot_normalize(poses, pivot).params


def batch_loss(model: PoseDenoiser, x0, x_t, t_frac, scene_embed, flags) -> torch.Tensor:
    """Mean squared error between ``D(x_t, t, psi)`` and ``x0`` over frames and parameters."""
    dtype = next(model.parameters()).dtype
    x0 = torch.as_tensor(x0, dtype=dtype)
    tokens = make_tokens(torch.as_tensor(x_t, dtype=dtype), t_frac, scene_embed, flags,
                         model.config.time_dim)
    return ((model(tokens) - x0) ** 2).mean()


def diffusion_loss(model: PoseDenoiser, scene, t: int, schedule: DiffusionSchedule,
                   rng: np.random.Generator, pivot: int | None = None, regression: bool = False):
    """Denoising loss of one scene at step ``t`` and its parameter gradient.

    Returns ``(loss, grads)`` with ``grads`` a dict keyed by parameter name.
    """
    poses = scene.ground_truth
    n = len(poses)
    if n < 2:
        raise ValueError("diffusion_loss needs a scene with at least 2 frames")
    if pivot is None:
        pivot = int(rng.integers(n))
    x0 = canonical_target(poses, pivot)
    x_t = np.zeros_like(x0) if regression else noise_sample(x0, t, schedule, rng)
    t_frac = 1.0 if regression else t / schedule.T
    model.zero_grad()
    loss = batch_loss(model, x0[None], x_t[None], [t_frac], np.asarray(scene.conditioning)[None],
                      pivot_flags(n, pivot)[None])
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at t={t}")
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss.item(), grads


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-4
    decay_after_epochs: float = 30.0
    min_frames: int = 3
    max_frames: int = 20
    seed: int = 0
    regression: bool = False
    log_every: int = 0


@dataclass
class TrainResult:
    model: PoseDenoiser
    losses: list = field(default_factory=list)


def _sample_batch(dataset, config: TrainConfig, schedule: DiffusionSchedule,
                  rng: np.random.Generator):
    scenes = [dataset[k] for k in rng.integers(len(dataset), size=config.batch_size)]
    max_n = min(config.max_frames, min(len(s.ground_truth) for s in scenes))
    lo = min(config.min_frames, max_n)
    n = int(rng.integers(lo, max_n + 1))
    x0s, embeds, flags = [], [], []
    for s in scenes:
        idx = np.sort(rng.choice(len(s.ground_truth), size=n, replace=False))
        pivot = int(rng.integers(n))
        x0s.append(canonical_target(s.ground_truth.subset(idx), pivot))
        embeds.append(np.asarray(s.conditioning)[idx])
        flags.append(pivot_flags(n, pivot))
    x0 = np.stack(x0s)
    if config.regression:
        t = np.full(len(scenes), schedule.T)
        x_t = np.zeros_like(x0)
    else:
        t = rng.integers(1, schedule.T + 1, size=len(scenes))
        ab = schedule.alpha_bar[t - 1][:, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * rng.standard_normal(x0.shape)
    return x0, x_t, t / schedule.T, np.stack(embeds), np.stack(flags)


def train(dataset, config: TrainConfig | None = None, schedule: DiffusionSchedule | None = None,
          model_config: DenoiserConfig | None = None, model: PoseDenoiser | None = None,
          dtype=torch.float32) -> TrainResult:
    """Fit the denoiser (or, with ``config.regression``, the direct pose regressor).

    Adam with a ten-fold learning-rate drop after ``decay_after_epochs``
    epochs; an epoch is ``ceil(len(dataset) / batch_size)`` steps. Each batch
    draws a common frame count in ``[min_frames, max_frames]`` (clipped to the
    smallest scene), a fresh pivot per scene and a uniform step ``t``.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    config = config or TrainConfig()
    schedule = schedule or make_schedule()
    if model is None:
        mc = model_config or DenoiserConfig(embed_dim=np.asarray(dataset[0].conditioning).shape[1])
        model = build_denoiser(mc, seed=config.seed, dtype=dtype)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    decay_step = int(round(config.decay_after_epochs * steps_per_epoch))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[max(decay_step, 1)], gamma=0.1)
    losses = []
    model.train()
    for step in range(config.steps):
        batch = _sample_batch(dataset, config, schedule, rng)
        opt.zero_grad()
        loss = batch_loss(model, *batch)
        value = loss.item()
        if not math.isfinite(value) or value > DIVERGENCE_LOSS:
            raise TrainingError(f"training diverged at step {step}: loss={value}")
        loss.backward()
        opt.step()
        sched.step()
        losses.append(value)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, value, sched.get_last_lr()[0])
    model.eval()
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise TrainingError("non-finite parameters after training")
    return TrainResult(model, losses)


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: PoseDenoiser, schedule: DiffusionSchedule, **extra) -> Path:
    """Write ``weights.bin`` (raw little-endian tensors) and ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "weights.bin", "wb") as fh:
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                            "offset": offset, "nbytes": len(data)})
            fh.write(data)
            offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "token_layout": list(TOKEN_LAYOUT),
        "token_layout_version": TOKEN_LAYOUT_VERSION,
        "architecture": asdict(model.config),
        "n_params": model.n_params(),
        "schedule": {"T": schedule.T, "beta_start": float(schedule.beta[0]),
                     "beta_end": float(schedule.beta[-1])},
        "tensors": entries,
        **extra,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, schedule, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if manifest.get("token_layout_version") != TOKEN_LAYOUT_VERSION:
        raise CheckpointError("token layout version mismatch")
    blob = (path / "weights.bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    model = PoseDenoiser(DenoiserConfig(**manifest["architecture"]))
    model.load_state_dict(state)
    model = model.to(next(iter(state.values())).dtype).eval()
    s = manifest["schedule"]
    schedule = make_schedule(s["T"], s["beta_start"], s["beta_end"])
    return model, schedule, manifest
