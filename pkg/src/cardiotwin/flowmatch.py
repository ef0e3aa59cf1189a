"""ECG-conditioned continuous velocity field and flow-matching training.

The velocity model is a coordinate network: it maps (normalized position,
pseudo-time, condition) to a 3-vector velocity in voxel units per unit time.
The ECG embedding is added to the sinusoidal time embedding; anatomy features
of the reference volume are projected and concatenated into the first hidden
activation. Supervision comes from temporal central differences of material
trajectories traced through a registered deformation set, matched with a
mean-squared-error flow objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .errors import (
    DivergenceError,
    DomainError,
    InsufficientFramesError,
    ShapeError,
)
from .registration import DeformationSet
from .volgrid import LabelVolume, Volume3D

_DTYPE = torch.float64

REA_POOL_CELLS = 8  # anatomy features pool onto an 8x8x8 grid


def anatomy_features(reference: Volume3D) -> np.ndarray:
    """Pooled patch statistics of the reference volume: per-cell mean and std.

    The volume is partitioned into an 8x8x8 cell grid (cells may be empty for
    tiny volumes; empty cells contribute zeros), giving a fixed-length
    2 * 512 feature vector.
    """
    data = reference.data.astype(np.float64)
    bounds = [
        np.linspace(0, d, REA_POOL_CELLS + 1).astype(int) for d in reference.dims
    ]
    means = np.zeros((REA_POOL_CELLS,) * 3)
    stds = np.zeros((REA_POOL_CELLS,) * 3)
    for i in range(REA_POOL_CELLS):
        for j in range(REA_POOL_CELLS):
            for k in range(REA_POOL_CELLS):
                cell = data[
                    bounds[0][i] : bounds[0][i + 1],
                    bounds[1][j] : bounds[1][j + 1],
                    bounds[2][k] : bounds[2][k + 1],
                ]
                if cell.size:
                    means[i, j, k] = cell.mean()
                    stds[i, j, k] = cell.std()
    return np.concatenate([means.reshape(-1), stds.reshape(-1)])


@dataclass
class ConditionEmbedding:
    """Per-subject conditioning: ECG waveform features + anatomy features."""

    c_ecg: np.ndarray
    c_rea: np.ndarray

    def __post_init__(self):
        self.c_ecg = np.asarray(self.c_ecg, dtype=np.float64)
        self.c_rea = np.asarray(self.c_rea, dtype=np.float64)
        if self.c_ecg.ndim != 1 or self.c_rea.ndim != 1:
            raise ShapeError("condition features must be 1-D vectors")
        if not (np.isfinite(self.c_ecg).all() and np.isfinite(self.c_rea).all()):
            raise DomainError("condition features must be finite")

    def without_ecg(self) -> "ConditionEmbedding":
        return ConditionEmbedding(np.zeros_like(self.c_ecg), self.c_rea)

    def without_rea(self) -> "ConditionEmbedding":
        return ConditionEmbedding(self.c_ecg, np.zeros_like(self.c_rea))


@dataclass
class FlowModelConfig:
    ecg_dim: int
    rea_dim: int
    time_dim: int = 32  # sinusoidal embedding size, frequencies 2^j * pi
    rea_proj_dim: int = 32
    width: int = 128
    hidden_layers: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.time_dim % 2 != 0 or self.time_dim < 2:
            raise DomainError("time_dim must be even and >= 2")
        if self.hidden_layers < 2:
            raise DomainError("need >= 2 hidden layers (anatomy fuses into layer 2)")
        if min(self.ecg_dim, self.rea_dim, self.width, self.rea_proj_dim) < 1:
            raise DomainError("all dimensions must be >= 1")


class VelocityNet(torch.nn.Module):
    """Conditional velocity field v(x, t, c) -> R^3, double precision."""

    def __init__(self, config: FlowModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        lin = lambda i, o: torch.nn.Linear(i, o, dtype=_DTYPE)
        self.ecg_proj = lin(config.ecg_dim, config.time_dim)
        self.rea_proj = lin(config.rea_dim, config.rea_proj_dim)
        self.input_layer = lin(3 + config.time_dim, config.width)
        self.fuse_layer = lin(config.width + config.rea_proj_dim, config.width)
        self.extra_layers = torch.nn.ModuleList(
            lin(config.width, config.width) for _ in range(config.hidden_layers - 2)
        )
        self.head = lin(config.width, 3)
        # Zero head: the field starts at rest (identity motion).
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        freqs = torch.pow(2.0, torch.arange(config.time_dim // 2, dtype=_DTYPE))
        self.register_buffer("time_freqs", freqs * math.pi)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None] * self.time_freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    def forward(
        self, x_norm: torch.Tensor, t: torch.Tensor, c_ecg: torch.Tensor, c_rea: torch.Tensor
    ) -> torch.Tensor:
        temb = self.time_embedding(t) + self.ecg_proj(c_ecg)[None, :]
        h = torch.tanh(self.input_layer(torch.cat([x_norm, temb], dim=1)))
        rea = self.rea_proj(c_rea)[None, :].expand(h.shape[0], -1)
        h = torch.tanh(self.fuse_layer(torch.cat([h, rea], dim=1)))
        for layer in self.extra_layers:
            h = torch.tanh(layer(h))
        return self.head(h)


def normalize_positions(points: np.ndarray, dims) -> np.ndarray:
    """Map voxel coordinates onto [-1, 1]^3 by the volume half-extent."""
    pts = np.asarray(points, dtype=np.float64)
    half = np.maximum((np.asarray(dims, dtype=np.float64) - 1.0) / 2.0, 1e-12)
    return (pts - half) / half


def velocity_forward(net: VelocityNet, x_norm, t: float, cond: ConditionEmbedding) -> np.ndarray:
    """Evaluate the velocity field at normalized positions (3,) or (N, 3)."""
    x = np.asarray(x_norm, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    with torch.no_grad():
        out = net(
            torch.from_numpy(x2.copy()),
            torch.full((x2.shape[0],), float(t), dtype=_DTYPE),
            torch.from_numpy(cond.c_ecg),
            torch.from_numpy(cond.c_rea),
        ).numpy()
    return out[0] if single else out


@dataclass
class ReferenceFlow:
    """Material trajectories and reference velocities traced from registration."""

    subject_id: str
    dims: tuple
    times: np.ndarray  # (T,)
    positions: np.ndarray  # (N, T, 3), voxel coordinates
    velocities: np.ndarray  # (N, T, 3), voxels per unit time

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.positions.shape != self.velocities.shape:
            raise ShapeError("positions/velocities shape mismatch")
        if self.positions.shape[1] != self.times.size:
            raise ShapeError("trajectory length must match times")
        if not np.isfinite(self.velocities).all():
            raise DomainError("non-finite reference velocities")
        if np.any(self.times < 0) or np.any(self.times >= 1):
            raise DomainError("times must lie in [0, 1)")

    @property
    def n_trajectories(self) -> int:
        return self.positions.shape[0]


def derive_reference_velocities(
    defs: DeformationSet,
    sample_mask: LabelVolume = None,
    subject_id: str = "subject",
    dilate: int = 3,
) -> ReferenceFlow:
    """Central-difference velocities along material trajectories, periodic in t.

    Trajectories seed at every voxel, or at foreground mask voxels dilated by
    ``dilate`` when a mask is given. The cycle closes by u_T = u_0 = 0.
    """
    t_count = defs.n_frames
    if t_count < 3:
        raise InsufficientFramesError(f"need >= 3 frames, got {t_count}")
    dims = defs.dims
    if sample_mask is None:
        seeds = np.ones(dims, dtype=bool)
    else:
        if sample_mask.dims != dims:
            raise ShapeError("mask dims must match deformation dims")
        seeds = sample_mask.labels > 0
        if dilate > 0:
            seeds = ndimage.binary_dilation(seeds, iterations=dilate)
        if not seeds.any():
            raise DomainError("sample mask has no foreground voxels")

    xs = np.argwhere(seeds).astype(np.float64)
    n = xs.shape[0]
    times = defs.frame_times
    positions = np.empty((n, t_count, 3), dtype=np.float64)
    for k in range(t_count):
        positions[:, k, :] = xs + defs.fields[k].vectors[seeds]

    velocities = np.empty_like(positions)
    for k in range(t_count):
        k_prev = (k - 1) % t_count
        k_next = (k + 1) % t_count
        t_prev = times[k_prev] - (1.0 if k == 0 else 0.0)
        t_next = times[k_next] + (1.0 if k == t_count - 1 else 0.0)
        velocities[:, k, :] = (positions[:, k_next, :] - positions[:, k_prev, :]) / (
            t_next - t_prev
        )
    return ReferenceFlow(
        subject_id=subject_id,
        dims=dims,
        times=times,
        positions=positions,
        velocities=velocities,
    )


@dataclass
class FlowBatch:
    """Samples drawn from a ReferenceFlow for one loss evaluation."""

    dims: tuple
    positions: np.ndarray  # (B, 3) voxel coordinates
    times: np.ndarray  # (B,)
    velocities: np.ndarray  # (B, 3)

    @property
    def size(self) -> int:
        return self.positions.shape[0]


def _interp_periodic(values: np.ndarray, times: np.ndarray, idx: np.ndarray, t: np.ndarray):
    """Linear interpolation along trajectories, wrapping frame T back to frame 0."""
    times_ext = np.concatenate([times, [1.0]])
    vals_ext = np.concatenate([values, values[:, :1]], axis=1)
    seg = np.clip(np.searchsorted(times_ext, t, side="right") - 1, 0, times.size - 1)
    t0 = times_ext[seg]
    t1 = times_ext[seg + 1]
    w = ((t - t0) / (t1 - t0))[:, None]
    v0 = vals_ext[idx, seg]
    v1 = vals_ext[idx, seg + 1]
    return (1.0 - w) * v0 + w * v1


def sample_batch(ref: ReferenceFlow, batch_size: int, rng: np.random.Generator) -> FlowBatch:
    """Draw (trajectory, continuous time) pairs uniformly from a reference flow."""
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    idx = rng.integers(ref.n_trajectories, size=batch_size)
    t = rng.random(batch_size)
    pos = _interp_periodic(ref.positions, ref.times, idx, t)
    vel = _interp_periodic(ref.velocities, ref.times, idx, t)
    return FlowBatch(dims=ref.dims, positions=pos, times=t, velocities=vel)


def _loss_tensor(net: VelocityNet, batch: FlowBatch, cond: ConditionEmbedding) -> torch.Tensor:
    if batch.size == 0:
        raise DomainError("empty batch")
    x_norm = torch.from_numpy(normalize_positions(batch.positions, batch.dims))
    t = torch.from_numpy(np.asarray(batch.times, dtype=np.float64))
    target = torch.from_numpy(np.asarray(batch.velocities, dtype=np.float64))
    pred = net(x_norm, t, torch.from_numpy(cond.c_ecg), torch.from_numpy(cond.c_rea))
    return ((pred - target) ** 2).sum(dim=1).mean()


def flow_matching_loss(net: VelocityNet, batch: FlowBatch, cond: ConditionEmbedding) -> float:
    """Mean squared velocity error over the batch (Monte-Carlo flow matching)."""
    with torch.no_grad():
        return float(_loss_tensor(net, batch, cond))


def flow_loss_param_grads(net: VelocityNet, batch: FlowBatch, cond: ConditionEmbedding):
    """Loss plus analytic gradients for every parameter, in parameter order."""
    net.zero_grad(set_to_none=True)
    loss = _loss_tensor(net, batch, cond)
    loss.backward()
    grads = [
        (name, p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in net.named_parameters()
    ]
    return float(loss), grads


@dataclass
class FlowTrainConfig:
    iters: int = 2000  # paper-scale runs use 8000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.batch_size < 1:
            raise DomainError("iters and batch_size must be >= 1")


def train_flow(
    net: VelocityNet,
    refs: list,
    conds: list,
    cfg: FlowTrainConfig = None,
) -> tuple:
    """Adam optimization of the flow-matching objective over one or more subjects.

    Each iteration draws one subject, then a batch of (position, time) samples
    from that subject's reference flow, all with a seeded generator. Returns
    the trained net and the per-iteration loss trace.
    """
    cfg = cfg or FlowTrainConfig()
    if not refs or len(refs) != len(conds):
        raise DomainError("need matching, non-empty refs and conds")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(
        net.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
    )
    trace = []
    for it in range(cfg.iters):
        subject = int(rng.integers(len(refs))) if len(refs) > 1 else 0
        batch = sample_batch(refs[subject], cfg.batch_size, rng)
        opt.zero_grad(set_to_none=True)
        loss = _loss_tensor(net, batch, conds[subject])
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(it)
        loss.backward()
        opt.step()
        trace.append(value)
    return net, trace
