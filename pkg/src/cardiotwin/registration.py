"""Topology-preserving pairwise registration via stationary velocity fields.

Each pair is registered by direct optimization of a control-grid stationary
velocity field: the field is upsampled to dense resolution, exponentiated by
scaling and squaring, and the resulting displacement warps the source volume
and its soft one-hot labels. The composite objective is

    lambda_rec * (1 - NCC) + lambda_seg * soft-Dice-vs-hardened-teacher
    + lambda_smooth * mean squared control-grid gradient

optimized with Adam. All tensors are double precision; gradients come from
reverse-mode accumulation through the full warp chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage

from .errors import DegenerateInputError, DivergenceError, DomainError, ShapeError
from .volgrid import (
    FOREGROUND_CLASSES,
    DisplacementField,
    LabelVolume,
    Volume3D,
    Volume4D,
    one_hot,
)

_DTYPE = torch.float64


@dataclass
class VelocityGrid:
    """Stationary velocity field on a coarse control lattice.

    Control point (i, j, k) sits at voxel coordinate (i, j, k) * stride;
    vectors are voxel units per unit pseudo-time.
    """

    control_dims: tuple
    stride: int
    vectors: np.ndarray  # (Cx, Cy, Cz, 3)

    def __post_init__(self):
        self.control_dims = tuple(int(c) for c in self.control_dims)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != self.control_dims + (3,):
            raise ShapeError(
                f"vectors shape {self.vectors.shape} != {self.control_dims + (3,)}"
            )
        if self.stride < 1:
            raise DomainError("stride must be >= 1")
        if not np.isfinite(self.vectors).all():
            raise DomainError("velocity grid contains non-finite values")

    @classmethod
    def zeros_for(cls, dims, stride: int = 4) -> "VelocityGrid":
        control = tuple(int(math.ceil((d - 1) / stride)) + 1 for d in dims)
        return cls(control, stride, np.zeros(control + (3,), dtype=np.float64))

    def covers(self, dims) -> bool:
        return all(
            (c - 1) * self.stride >= d - 1 for c, d in zip(self.control_dims, dims)
        )


@dataclass
class RegConfig:
    lambda_rec: float = 1.0
    lambda_seg: float = 1.0
    lambda_smooth: float = 0.01
    ncc_window: int = 0  # 0 selects global NCC
    squaring_steps: int = 6
    iters: int = 2000  # paper-scale runs use 8000
    lr: float = 1e-4
    weight_decay: float = 1e-5
    eps_dice: float = 1e-5
    stride: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_seg, self.lambda_smooth) < 0:
            raise DomainError("loss weights must be >= 0")
        if self.squaring_steps < 1:
            raise DomainError("squaring_steps must be >= 1")
        if self.iters < 1:
            raise DomainError("iters must be >= 1")
        if self.ncc_window != 0 and self.ncc_window % 2 == 0:
            raise DomainError("ncc_window must be odd or 0")


@dataclass
class DeformationSet:
    """Reference-frame-to-frame-k displacement fields over one cardiac cycle."""

    fields: list  # T DisplacementField, element 0 identically zero
    frame_times: np.ndarray

    def __post_init__(self):
        if not self.fields:
            raise ShapeError("empty deformation set")
        dims = self.fields[0].dims
        for f in self.fields:
            if f.dims != dims:
                raise ShapeError("all fields must share dims")
        if self.fields[0].max_norm() != 0.0:
            raise DomainError("field 0 must be exactly zero")
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if self.frame_times.shape != (len(self.fields),):
            raise ShapeError("frame_times length must equal field count")

    @property
    def dims(self):
        return self.fields[0].dims

    @property
    def spacing_mm(self):
        return self.fields[0].spacing_mm

    @property
    def n_frames(self) -> int:
        return len(self.fields)


# ---------------------------------------------------------------------------
# Differentiable grid machinery (torch, double precision, flattened layout).
# Dense fields are (C, N) with N = X*Y*Z in C order of an (X, Y, Z) array.


def _base_grid(dims) -> torch.Tensor:
    axes = [torch.arange(d, dtype=_DTYPE) for d in dims]
    grid = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)
    return grid.reshape(-1, 3)


def _sample_channels(values: torch.Tensor, dims, pts: torch.Tensor) -> torch.Tensor:
    """Border-clamped trilinear sampling of (C, N) channels at (M, 3) points."""
    x, y, z = dims
    weights = []
    corners = []
    for ax, size in enumerate(dims):
        p = pts[:, ax].clamp(0.0, size - 1.0)
        i0f = torch.floor(p)
        frac = p - i0f
        i0 = i0f.long()
        i1 = torch.clamp(i0 + 1, max=size - 1)
        weights.append((1.0 - frac, frac))
        corners.append((i0, i1))
    out = None
    for cx in range(2):
        for cy in range(2):
            for cz in range(2):
                lin = (corners[0][cx] * y + corners[1][cy]) * z + corners[2][cz]
                w = weights[0][cx] * weights[1][cy] * weights[2][cz]
                term = values[:, lin] * w
                out = term if out is None else out + term
    return out


def _upsample_control(control: torch.Tensor, control_dims, stride: int, dims) -> torch.Tensor:
    """Interpolate a (3, Cx*Cy*Cz) control lattice to dense (3, N)."""
    pts = _base_grid(dims) / stride
    return _sample_channels(control, control_dims, pts)


def _integrate_dense(dense_v: torch.Tensor, dims, steps: int, base: torch.Tensor) -> torch.Tensor:
    """Scaling and squaring: exp of a dense stationary field, (3, N) in/out."""
    d = dense_v / float(2**steps)
    for _ in range(steps):
        pts = base + d.transpose(0, 1)
        d = d + _sample_channels(d, dims, pts)
    return d


def _warp_channels(channels: torch.Tensor, dims, disp: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    pts = base + disp.transpose(0, 1)
    return _sample_channels(channels, dims, pts)


def _ncc_global(fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
    f = fixed - fixed.mean()
    m = moving - moving.mean()
    denom = torch.sqrt((f**2).mean() * (m**2).mean()).clamp_min(1e-12)
    return 1.0 - (f * m).mean() / denom


def _ncc_local(fixed: torch.Tensor, moving: torch.Tensor, dims, window: int) -> torch.Tensor:
    f = fixed.reshape(1, 1, *dims)
    m = moving.reshape(1, 1, *dims)
    kernel = torch.ones((1, 1, window, window, window), dtype=_DTYPE)
    cnt = float(window**3)

    def box(x):
        return torch.nn.functional.conv3d(x, kernel)

    sf, sm = box(f), box(m)
    sff, smm, sfm = box(f * f), box(m * m), box(f * m)
    cov = sfm - sf * sm / cnt
    var_f = (sff - sf * sf / cnt).clamp_min(1e-6)
    var_m = (smm - sm * sm / cnt).clamp_min(1e-6)
    ncc2 = cov * cov / (var_f * var_m)
    return 1.0 - ncc2.mean()


def _dice_soft(student: torch.Tensor, teacher: torch.Tensor, eps: float) -> torch.Tensor:
    """1 - mean foreground Dice between soft (C, N) student and one-hot teacher."""
    dice_sum = student.new_zeros(())
    n_fg = student.shape[0] - 1
    for c in range(1, student.shape[0]):
        p, y = student[c], teacher[c]
        dice = 2.0 * (p * y).sum() / ((p * p).sum() + (y * y).sum() + eps)
        dice_sum = dice_sum + dice
    return 1.0 - dice_sum / n_fg


def _smoothness(control: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of control vectors over all axes."""
    total = control.new_zeros(())
    count = 0
    for ax in range(1, 4):
        if control.shape[ax] < 2:
            continue
        d = torch.diff(control, dim=ax)
        total = total + (d**2).sum()
        count += d.numel()
    if count == 0:
        return total
    return total / count


# ---------------------------------------------------------------------------
# Public operations.


def harden_teacher_labels(labels: LabelVolume) -> LabelVolume:
    """Keep only the largest 26-connected component of each foreground class.

    Size ties break on the smallest x-fastest linear index contained in the
    component. Dropped voxels become background.
    """
    structure = np.ones((3, 3, 3), dtype=bool)
    x, _, _ = labels.dims
    out = np.zeros(labels.dims, dtype=np.uint8)
    for cls in FOREGROUND_CLASSES:
        mask = labels.labels == cls
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=structure)
        sizes = np.bincount(comp.ravel())[1:]
        best = np.flatnonzero(sizes == sizes.max()) + 1
        if best.size > 1:
            keys = []
            for comp_id in best:
                xs, ys, zs = np.nonzero(comp == comp_id)
                lin = xs + labels.dims[0] * (ys + labels.dims[1] * zs)
                keys.append(lin.min())
            best = [best[int(np.argmin(keys))]]
        out[comp == best[0]] = cls
    return LabelVolume(labels.dims, labels.spacing_mm, out, dict(labels.class_map))


def integrate_svf(v: VelocityGrid, dims, squaring_steps: int = 6) -> DisplacementField:
    """Time-1 flow of the stationary velocity field by scaling and squaring."""
    dims = tuple(int(d) for d in dims)
    if not v.covers(dims):
        raise ShapeError(
            f"control grid {v.control_dims} x stride {v.stride} does not cover {dims}"
        )
    with torch.no_grad():
        control = torch.from_numpy(v.vectors.reshape(-1, 3).T.copy())
        base = _base_grid(dims)
        dense = _upsample_control(control, v.control_dims, v.stride, dims)
        disp = _integrate_dense(dense, dims, squaring_steps, base)
    vectors = disp.transpose(0, 1).reshape(dims + (3,)).numpy()
    return DisplacementField(dims, (1.0, 1.0, 1.0), vectors)


def ncc_loss(fixed: Volume3D, moving_warped: Volume3D, window: int = 0) -> float:
    """1 - global Pearson correlation (window=0) or 1 - mean local NCC^2."""
    if fixed.dims != moving_warped.dims:
        raise ShapeError(f"dims mismatch {fixed.dims} vs {moving_warped.dims}")
    if window < 0 or (window != 0 and window % 2 == 0):
        raise DomainError("window must be odd or 0")
    f = torch.from_numpy(fixed.data.astype(np.float64).ravel())
    m = torch.from_numpy(moving_warped.data.astype(np.float64).ravel())
    if window == 0:
        if float(f.max() - f.min()) == 0.0:
            raise DegenerateInputError("constant fixed volume with global NCC")
        return float(_ncc_global(f, m))
    if any(d < window for d in fixed.dims):
        raise ShapeError(f"dims {fixed.dims} smaller than window {window}")
    return float(_ncc_local(f, m, fixed.dims, window))


def dice_teacher_loss(student_soft: np.ndarray, teacher_labels: LabelVolume, eps: float = 1e-5) -> float:
    """Anatomy-aware multi-class soft Dice loss against LCC-hardened teacher labels."""
    student_soft = np.asarray(student_soft, dtype=np.float64)
    if student_soft.shape != (teacher_labels.n_classes,) + teacher_labels.dims:
        raise ShapeError(
            f"student shape {student_soft.shape} != "
            f"{(teacher_labels.n_classes,) + teacher_labels.dims}"
        )
    hardened = harden_teacher_labels(teacher_labels)
    teacher = one_hot(hardened)
    n = int(np.prod(teacher_labels.dims))
    s = torch.from_numpy(student_soft.reshape(teacher_labels.n_classes, n))
    y = torch.from_numpy(teacher.reshape(teacher_labels.n_classes, n))
    return float(_dice_soft(s, y, eps))


class _PairProblem:
    """Preassembled tensors for one registration pair."""

    def __init__(self, source, target, source_labels, target_labels, cfg):
        for other in (target, source_labels, target_labels):
            if other.dims != source.dims:
                raise ShapeError("source/target volume and label dims must all match")
        self.dims = source.dims
        self.spacing_mm = source.spacing_mm
        self.cfg = cfg
        n = int(np.prod(self.dims))
        src = source.data.astype(np.float64).reshape(1, n)
        src_onehot = one_hot(source_labels).reshape(source_labels.n_classes, n)
        self.channels = torch.from_numpy(np.concatenate([src, src_onehot]))
        self.fixed = torch.from_numpy(target.data.astype(np.float64).ravel())
        teacher = one_hot(harden_teacher_labels(target_labels))
        self.teacher = torch.from_numpy(teacher.reshape(target_labels.n_classes, n))
        self.base = _base_grid(self.dims)
        if cfg.ncc_window == 0 and float(self.fixed.max() - self.fixed.min()) == 0.0:
            raise DegenerateInputError("constant target volume with global NCC")

    def loss(self, control_xyz3: torch.Tensor, control_dims, stride: int) -> torch.Tensor:
        cfg = self.cfg
        control_flat = control_xyz3.reshape(-1, 3).transpose(0, 1)
        dense = _upsample_control(control_flat, control_dims, stride, self.dims)
        disp = _integrate_dense(dense, self.dims, cfg.squaring_steps, self.base)
        warped = _warp_channels(self.channels, self.dims, disp, self.base)
        moving = warped[0]
        student = warped[1:]
        if cfg.ncc_window == 0:
            rec = _ncc_global(self.fixed, moving)
        else:
            rec = _ncc_local(self.fixed, moving, self.dims, cfg.ncc_window)
        seg = _dice_soft(student, self.teacher, cfg.eps_dice)
        smooth = _smoothness(control_xyz3.permute(3, 0, 1, 2))
        return cfg.lambda_rec * rec + cfg.lambda_seg * seg + cfg.lambda_smooth * smooth

    def displacement(self, grid: VelocityGrid) -> DisplacementField:
        with torch.no_grad():
            control = torch.from_numpy(grid.vectors.reshape(-1, 3).T.copy())
            dense = _upsample_control(control, grid.control_dims, grid.stride, self.dims)
            disp = _integrate_dense(dense, self.dims, self.cfg.squaring_steps, self.base)
        vectors = disp.transpose(0, 1).reshape(self.dims + (3,)).numpy()
        return DisplacementField(self.dims, self.spacing_mm, vectors)

    def loss_for_grid(self, grid: VelocityGrid, requires_grad: bool):
        control = torch.from_numpy(grid.vectors.copy())
        if requires_grad:
            control.requires_grad_(True)
        return control, self.loss(control, grid.control_dims, grid.stride)


def composite_loss(
    grid: VelocityGrid,
    source: Volume3D,
    target: Volume3D,
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    cfg: RegConfig,
) -> float:
    """Evaluate the registration objective at a fixed velocity grid."""
    problem = _PairProblem(source, target, source_labels, target_labels, cfg)
    with torch.no_grad():
        _, loss = problem.loss_for_grid(grid, requires_grad=False)
        return float(loss)


def composite_loss_grad(
    grid: VelocityGrid,
    source: Volume3D,
    target: Volume3D,
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    cfg: RegConfig,
) -> tuple:
    """Loss and its analytic gradient w.r.t. every control vector component."""
    problem = _PairProblem(source, target, source_labels, target_labels, cfg)
    control, loss = problem.loss_for_grid(grid, requires_grad=True)
    (grad,) = torch.autograd.grad(loss, control)
    return float(loss.detach()), grad.numpy()


def register_pair(
    source: Volume3D,
    target: Volume3D,
    source_labels: LabelVolume,
    target_labels: LabelVolume,
    cfg: RegConfig,
    init: VelocityGrid = None,
) -> tuple:
    """Optimize a velocity grid mapping source onto target.

    Returns (VelocityGrid, integrated DisplacementField, per-iteration loss trace).
    """
    problem = _PairProblem(source, target, source_labels, target_labels, cfg)
    torch.manual_seed(cfg.seed)
    if init is None:
        init = VelocityGrid.zeros_for(source.dims, cfg.stride)
    if not init.covers(source.dims):
        raise ShapeError("init grid does not cover the volume")
    if init.stride != cfg.stride:
        raise DomainError("init grid stride must match cfg.stride")

    control = torch.from_numpy(init.vectors.copy()).requires_grad_(True)
    opt = torch.optim.Adam(
        [control], lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
    )
    trace = []
    for it in range(cfg.iters):
        opt.zero_grad(set_to_none=True)
        loss = problem.loss(control, init.control_dims, cfg.stride)
        value = float(loss)
        if not math.isfinite(value):
            raise DivergenceError(it)
        loss.backward()
        opt.step()
        trace.append(value)

    grid = VelocityGrid(init.control_dims, cfg.stride, control.detach().numpy().copy())
    return grid, problem.displacement(grid), trace


def register_sequence(volumes: Volume4D, labels: list, cfg: RegConfig) -> DeformationSet:
    """Register the reference frame onto every later frame, warm-starting in k."""
    if len(labels) != volumes.n_frames:
        raise ShapeError("label sequence length must match frame count")
    fields = [DisplacementField.zero(volumes.dims, volumes.spacing_mm)]
    grid = None
    for k in range(1, volumes.n_frames):
        try:
            grid, disp, _ = register_pair(
                volumes.frames[0],
                volumes.frames[k],
                labels[0],
                labels[k],
                cfg,
                init=grid,
            )
        except DivergenceError as exc:
            raise DivergenceError(
                exc.iteration, f"frame {k}: {exc}"
            ) from exc
        fields.append(disp)
    return DeformationSet(fields=fields, frame_times=volumes.frame_times)


def sequence_config(cfg: RegConfig, iters: int) -> RegConfig:
    """Convenience: same configuration with a different iteration budget."""
    return replace(cfg, iters=iters)
