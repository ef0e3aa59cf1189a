"""Inference: integrate the learned velocity field and warp the reference anatomy.

Voxel trajectories follow dp/dt = v(p, t, c) from every voxel center with a
fixed-step solver (RK4 by default, Euler for ablation), recording the
displacement at each requested frame time. The resulting deformation set
warps the reference volume and its labels into a 4D sequence.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError, IntegrationBlowupError, ShapeError
from .flowmatch import ConditionEmbedding, VelocityNet, normalize_positions
from .registration import DeformationSet
from .volgrid import (
    DisplacementField,
    LabelVolume,
    Volume3D,
    Volume4D,
    voxel_grid,
    warp,
    warp_labels_soft,
)

SOLVERS = ("euler", "rk4")


def _check_frame_times(frame_times) -> np.ndarray:
    t = np.asarray(frame_times, dtype=np.float64)
    if t.size < 2:
        raise DomainError("need at least 2 frame times")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0) or t[-1] >= 1.0:
        raise DomainError("frame times must start at 0, increase strictly, stay < 1")
    return t


def integrate_points(velocity_fn, x0: np.ndarray, frame_times, solver: str = "rk4", substeps: int = 2):
    """Integrate dp/dt = velocity_fn(p, t) from p(0) = x0 over the frame grid.

    ``velocity_fn`` maps ((N, 3) positions, scalar t) to (N, 3) velocities.
    Returns positions at every frame time, shape (T, N, 3); entry 0 is x0.
    """
    if solver not in SOLVERS:
        raise DomainError(f"unknown solver {solver!r}, expected one of {SOLVERS}")
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    times = _check_frame_times(frame_times)
    p = np.array(x0, dtype=np.float64)
    out = np.empty((times.size,) + p.shape, dtype=np.float64)
    out[0] = p
    for k in range(1, times.size):
        t0, t1 = times[k - 1], times[k]
        h = (t1 - t0) / substeps
        for s in range(substeps):
            t = t0 + s * h
            if solver == "euler":
                p = p + h * velocity_fn(p, t)
            else:
                k1 = velocity_fn(p, t)
                k2 = velocity_fn(p + 0.5 * h * k1, t + 0.5 * h)
                k3 = velocity_fn(p + 0.5 * h * k2, t + 0.5 * h)
                k4 = velocity_fn(p + h * k3, t + h)
                p = p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(p).all():
            bad = int(np.flatnonzero(~np.isfinite(p).all(axis=1))[0])
            raise IntegrationBlowupError(voxel=bad, time=float(t1))
        out[k] = p
    return out


def make_velocity_fn(net: VelocityNet, cond: ConditionEmbedding, dims):
    """Wrap a trained net as a plain (positions, t) -> velocities callable."""
    c_ecg = torch.from_numpy(cond.c_ecg)
    c_rea = torch.from_numpy(cond.c_rea)

    def fn(points: np.ndarray, t: float) -> np.ndarray:
        x_norm = torch.from_numpy(normalize_positions(points, dims))
        tt = torch.full((x_norm.shape[0],), float(t), dtype=torch.float64)
        with torch.no_grad():
            return net(x_norm, tt, c_ecg, c_rea).numpy()

    return fn


def ode_integrate(
    net: VelocityNet,
    cond: ConditionEmbedding,
    dims,
    frame_times,
    solver: str = "rk4",
    substeps: int = 2,
    spacing_mm=(1.0, 1.0, 1.0),
) -> DeformationSet:
    """Integrate every voxel trajectory and collect per-frame displacements."""
    dims = tuple(int(d) for d in dims)
    times = _check_frame_times(frame_times)
    x0 = voxel_grid(dims).reshape(-1, 3)
    traj = integrate_points(make_velocity_fn(net, cond, dims), x0, times, solver, substeps)
    fields = [DisplacementField.zero(dims, spacing_mm)]
    for k in range(1, times.size):
        u = (traj[k] - x0).reshape(dims + (3,))
        fields.append(DisplacementField(dims, spacing_mm, u))
    return DeformationSet(fields=fields, frame_times=times)


def synthesize_4d(
    reference: Volume3D,
    reference_labels: LabelVolume,
    defs: DeformationSet,
):
    """Warp the reference anatomy through a deformation set.

    Returns (Volume4D, list of LabelVolume); frame 0 is the reference itself
    and labels are transported as argmax of warped soft one-hot channels
    (ties resolve to the lower class index).
    """
    if reference.dims != defs.dims or reference_labels.dims != defs.dims:
        raise ShapeError("reference and deformation dims must match")
    frames = [reference.copy()]
    labels = [
        LabelVolume(
            reference_labels.dims,
            reference_labels.spacing_mm,
            reference_labels.labels.copy(),
            dict(reference_labels.class_map),
        )
    ]
    for k in range(1, defs.n_frames):
        disp = defs.fields[k]
        frames.append(warp(reference, disp))
        soft = warp_labels_soft(reference_labels, disp)
        hard = np.argmax(soft, axis=0).astype(np.uint8)
        labels.append(
            LabelVolume(
                reference_labels.dims,
                reference_labels.spacing_mm,
                hard,
                dict(reference_labels.class_map),
            )
        )
    return Volume4D(frames, defs.frame_times), labels
