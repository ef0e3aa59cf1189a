"""Volumetric field types, trilinear sampling, warping, and Jacobians.

Conventions used throughout the package:

* Volumes are indexed ``[x, y, z]`` with dims ``(X, Y, Z)`` and physical
  voxel spacing in millimetres.
* Displacement fields are stored in voxel units: component ``i`` displaces
  along axis ``i`` measured in voxels. Millimetres appear only in metric
  reporting.
* Out-of-domain samples clamp to the boundary voxel (border replication).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

# Segmentation class indices, fixed across the package.
BACKGROUND, LV, RV, MYO = 0, 1, 2, 3
CLASS_MAP = {BACKGROUND: "background", LV: "LV", RV: "RV", MYO: "Myo"}
FOREGROUND_CLASSES = (LV, RV, MYO)


def _check_dims_spacing(dims, spacing_mm):
    dims = tuple(int(d) for d in dims)
    spacing_mm = tuple(float(s) for s in spacing_mm)
    if len(dims) != 3 or len(spacing_mm) != 3:
        raise ShapeError(f"dims/spacing must be 3-vectors, got {dims}, {spacing_mm}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    if any(s <= 0 for s in spacing_mm):
        raise DomainError(f"all spacing components must be > 0, got {spacing_mm}")
    return dims, spacing_mm


@dataclass
class Volume3D:
    """Scalar intensity field on an anisotropic voxel grid.

    ``data`` has shape ``(X, Y, Z)``; float32 is the canonical storage dtype
    (matching the on-disk format), float64 is accepted for numerical work.
    """

    dims: tuple
    spacing_mm: tuple
    data: np.ndarray

    def __post_init__(self):
        self.dims, self.spacing_mm = _check_dims_spacing(self.dims, self.spacing_mm)
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if self.data.shape != self.dims:
            raise ShapeError(f"data shape {self.data.shape} != dims {self.dims}")
        if not np.isfinite(self.data).all():
            raise DomainError("volume contains non-finite values")

    @classmethod
    def from_array(cls, data: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume3D":
        data = np.asarray(data)
        return cls(dims=data.shape, spacing_mm=spacing_mm, data=data)

    def copy(self) -> "Volume3D":
        return Volume3D(self.dims, self.spacing_mm, self.data.copy())


@dataclass
class Volume4D:
    """Sequence of T frames sharing dims/spacing, with normalized frame times."""

    frames: list
    frame_times: np.ndarray

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ShapeError("Volume4D needs T >= 2 frames")
        ref = self.frames[0]
        for f in self.frames[1:]:
            if f.dims != ref.dims or f.spacing_mm != ref.spacing_mm:
                raise ShapeError("all frames must share dims and spacing")
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if self.frame_times.shape != (len(self.frames),):
            raise ShapeError("frame_times length must equal frame count")
        if self.frame_times[0] != 0.0:
            raise DomainError("frame 0 must be at time 0")
        if np.any(np.diff(self.frame_times) <= 0):
            raise DomainError("frame_times must be strictly increasing")
        if self.frame_times[-1] >= 1.0:
            raise DomainError("frame_times must lie in [0, 1)")

    @property
    def dims(self):
        return self.frames[0].dims

    @property
    def spacing_mm(self):
        return self.frames[0].spacing_mm

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class LabelVolume:
    """Hard segmentation labels on the same grid as a paired Volume3D."""

    dims: tuple
    spacing_mm: tuple
    labels: np.ndarray
    class_map: dict = field(default_factory=lambda: dict(CLASS_MAP))

    def __post_init__(self):
        self.dims, self.spacing_mm = _check_dims_spacing(self.dims, self.spacing_mm)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.dims:
            raise ShapeError(f"labels shape {self.labels.shape} != dims {self.dims}")
        known = set(self.class_map)
        present = set(np.unique(self.labels).tolist())
        if not present <= known:
            raise DomainError(f"unknown label values {sorted(present - known)}")

    @classmethod
    def from_array(cls, labels: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> "LabelVolume":
        labels = np.asarray(labels)
        return cls(dims=labels.shape, spacing_mm=spacing_mm, labels=labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_map)

    def mask(self, cls: int) -> np.ndarray:
        if cls not in self.class_map:
            raise DomainError(f"unknown class {cls}")
        return self.labels == cls


@dataclass
class DisplacementField:
    """Dense 3-vector field in voxel units; ``vectors`` has shape (X, Y, Z, 3)."""

    dims: tuple
    spacing_mm: tuple
    vectors: np.ndarray

    def __post_init__(self):
        self.dims, self.spacing_mm = _check_dims_spacing(self.dims, self.spacing_mm)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != self.dims + (3,):
            raise ShapeError(
                f"vectors shape {self.vectors.shape} != {self.dims + (3,)}"
            )
        if not np.isfinite(self.vectors).all():
            raise DomainError("displacement field contains non-finite values")

    @classmethod
    def zero(cls, dims, spacing_mm=(1.0, 1.0, 1.0)) -> "DisplacementField":
        dims = tuple(int(d) for d in dims)
        return cls(dims, spacing_mm, np.zeros(dims + (3,), dtype=np.float64))

    def max_norm(self) -> float:
        return float(np.abs(self.vectors).max())


def voxel_grid(dims) -> np.ndarray:
    """Voxel-center coordinates, shape (X, Y, Z, 3), float64."""
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _sample_trilinear_array(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear sampling of ``data`` (X,Y,Z) at ``points`` (..., 3), border-clamped."""
    dims = data.shape
    pts = np.asarray(points, dtype=np.float64)
    out_shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    # Clamping the coordinate first realizes border replication.
    acc = np.zeros(pts.shape[0], dtype=np.float64)
    idx0 = np.empty((pts.shape[0], 3), dtype=np.intp)
    idx1 = np.empty_like(idx0)
    frac = np.empty_like(pts)
    for ax in range(3):
        p = np.clip(pts[:, ax], 0.0, dims[ax] - 1.0)
        i0 = np.floor(p).astype(np.intp)
        i0 = np.minimum(i0, dims[ax] - 1)
        i1 = np.minimum(i0 + 1, dims[ax] - 1)
        idx0[:, ax], idx1[:, ax] = i0, i1
        frac[:, ax] = p - i0
    w = data.astype(np.float64, copy=False)
    for cx, ix in ((1.0, idx0[:, 0]), (0.0, idx1[:, 0])):
        wx = (1.0 - frac[:, 0]) if cx else frac[:, 0]
        for cy, iy in ((1.0, idx0[:, 1]), (0.0, idx1[:, 1])):
            wy = (1.0 - frac[:, 1]) if cy else frac[:, 1]
            for cz, iz in ((1.0, idx0[:, 2]), (0.0, idx1[:, 2])):
                wz = (1.0 - frac[:, 2]) if cz else frac[:, 2]
                acc += wx * wy * wz * w[ix, iy, iz]
    return acc.reshape(out_shape)


def sample_trilinear(vol: Volume3D, point) -> float:
    """Sample a volume at one continuous voxel coordinate.

    Out-of-domain points clamp to the boundary voxel.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,):
        raise ShapeError(f"point must be a 3-vector, got shape {point.shape}")
    if not np.isfinite(point).all():
        raise DomainError(f"non-finite sample point {point}")
    return float(_sample_trilinear_array(vol.data, point[None, :])[0])


def warp(vol: Volume3D, disp: DisplacementField) -> Volume3D:
    """Resample ``vol`` at displaced coordinates: out[x] = vol(x + u(x))."""
    if vol.dims != disp.dims:
        raise ShapeError(f"volume dims {vol.dims} != field dims {disp.dims}")
    if disp.max_norm() == 0.0:
        return Volume3D(vol.dims, vol.spacing_mm, vol.data.copy())
    pts = voxel_grid(vol.dims) + disp.vectors
    out = _sample_trilinear_array(vol.data, pts)
    return Volume3D(vol.dims, vol.spacing_mm, out.astype(vol.data.dtype))


def one_hot(labels: LabelVolume) -> np.ndarray:
    """One-hot encode labels into (C, X, Y, Z) float64 channels."""
    c = labels.n_classes
    out = np.zeros((c,) + labels.dims, dtype=np.float64)
    for k in range(c):
        out[k] = labels.labels == k
    return out


def warp_labels_soft(labels: LabelVolume, disp: DisplacementField) -> np.ndarray:
    """Warp one-hot label channels with trilinear sampling.

    Returns (C, X, Y, Z) soft probabilities; interior channel sums stay 1.
    """
    if labels.dims != disp.dims:
        raise ShapeError(f"label dims {labels.dims} != field dims {disp.dims}")
    channels = one_hot(labels)
    pts = voxel_grid(labels.dims) + disp.vectors
    return np.stack([_sample_trilinear_array(ch, pts) for ch in channels])


def jacobian_determinant(disp: DisplacementField) -> Volume3D:
    """det(I + grad u) per voxel; central differences interior, one-sided at edges."""
    if any(d < 2 for d in disp.dims):
        raise ShapeError(f"jacobian needs dims >= 2 per axis, got {disp.dims}")
    u = disp.vectors
    # g[i][j] = d u_i / d x_j in voxel units (np.gradient is central interior,
    # one-sided at boundaries).
    g = [np.gradient(u[..., i], axis=(0, 1, 2)) for i in range(3)]
    a00 = 1.0 + g[0][0]
    a01 = g[0][1]
    a02 = g[0][2]
    a10 = g[1][0]
    a11 = 1.0 + g[1][1]
    a12 = g[1][2]
    a20 = g[2][0]
    a21 = g[2][1]
    a22 = 1.0 + g[2][2]
    det = (
        a00 * (a11 * a22 - a12 * a21)
        - a01 * (a10 * a22 - a12 * a20)
        + a02 * (a10 * a21 - a11 * a20)
    )
    return Volume3D(disp.dims, disp.spacing_mm, det)


def compose(disp_a: DisplacementField, disp_b: DisplacementField) -> DisplacementField:
    """Composition (a after b): result(x) = b(x) + a(x + b(x))."""
    if disp_a.dims != disp_b.dims:
        raise ShapeError(f"dims mismatch {disp_a.dims} vs {disp_b.dims}")
    pts = voxel_grid(disp_a.dims) + disp_b.vectors
    sampled = np.stack(
        [_sample_trilinear_array(disp_a.vectors[..., i], pts) for i in range(3)],
        axis=-1,
    )
    return DisplacementField(disp_a.dims, disp_a.spacing_mm, disp_b.vectors + sampled)
