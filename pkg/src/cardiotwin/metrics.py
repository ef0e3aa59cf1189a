"""Image-quality and segmentation-overlap metrics with physical spacing.

SSIM uses the standard stabilized formula (K1=0.01, K2=0.03) on a uniform
sliding window, aggregated over fully valid window positions only. HD95 is
the 95th percentile (linear-interpolated order statistic) of the pooled
directed boundary distances in millimetres.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from .errors import (
    DomainError,
    InsufficientFramesError,
    ShapeError,
    UndefinedDistanceError,
)
from .registration import DeformationSet
from .volgrid import LabelVolume, Volume3D, Volume4D, jacobian_determinant

PSNR_CAP_DB = 99.0

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _valid_crop(arr: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    sl = tuple(slice(half, d - half) for d in arr.shape)
    return arr[sl]


def ssim(a: Volume3D, b: Volume3D, window: int = 7) -> float:
    """Mean structural similarity between two volumes over a 3D sliding window.

    The dynamic range comes from the reference ``a``; a zero range (both
    volumes constant and equal) evaluates to 1.
    """
    if a.dims != b.dims:
        raise ShapeError(f"dims mismatch {a.dims} vs {b.dims}")
    if window % 2 == 0 or window < 1:
        raise DomainError("window must be odd and positive")
    if any(d < window for d in a.dims):
        raise ShapeError(f"dims {a.dims} smaller than window {window}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    drange = float(x.max() - x.min())
    if drange == 0.0:
        drange = 1.0
    c1 = (_SSIM_K1 * drange) ** 2
    c2 = (_SSIM_K2 * drange) ** 2

    mu_x = uniform_filter(x, window)
    mu_y = uniform_filter(y, window)
    mu_xx = uniform_filter(x * x, window)
    mu_yy = uniform_filter(y * y, window)
    mu_xy = uniform_filter(x * y, window)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    ssim_map = _valid_crop(num / den, window)
    return float(ssim_map.mean())


def psnr(a: Volume3D, b: Volume3D, peak: float = None) -> float:
    """Peak signal-to-noise ratio in dB, capped at the 99 dB sentinel."""
    if a.dims != b.dims:
        raise ShapeError(f"dims mismatch {a.dims} vs {b.dims}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    if peak is None:
        peak = float(x.max())
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0 or peak <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB))


def dice_iou(pred: LabelVolume, truth: LabelVolume, cls: int):
    """Hard-label Dice and IoU for one class.

    Both masks empty -> (1, 1); exactly one empty -> (0, 0).
    """
    if pred.dims != truth.dims:
        raise ShapeError(f"dims mismatch {pred.dims} vs {truth.dims}")
    if cls not in truth.class_map:
        raise DomainError(f"unknown class {cls}")
    p = pred.labels == cls
    t = truth.labels == cls
    return mask_dice_iou(p, t)


def mask_dice_iou(p: np.ndarray, t: np.ndarray):
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0, 1.0
    if np_ == 0 or nt == 0:
        return 0.0, 0.0
    inter = int(np.logical_and(p, t).sum())
    union = np_ + nt - inter
    return 2.0 * inter / (np_ + nt), inter / union


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face-adjacent background neighbour.

    Voxels on the array edge count as boundary (outside is background).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = tuple(slice(1, -1) for _ in range(mask.ndim))
    all_neighbours = np.ones_like(mask)
    for ax in range(mask.ndim):
        for shift in (1, -1):
            all_neighbours &= np.roll(padded, shift, axis=ax)[inner]
    return mask & ~all_neighbours


def hd95(pred_mask: np.ndarray, truth_mask: np.ndarray, spacing, mode: str = "surface3d") -> float:
    """Symmetric 95th-percentile boundary distance in millimetres.

    ``mode`` selects 2D slices (masks are 2D, spacing = in-plane (sx, sy)) or
    3D surfaces (masks are 3D, spacing = (sx, sy, sz)).
    """
    if mode not in ("surface2d", "surface3d"):
        raise DomainError(f"unknown mode {mode!r}")
    ndim = 2 if mode == "surface2d" else 3
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(truth_mask, dtype=bool)
    if p.ndim != ndim or t.ndim != ndim:
        raise ShapeError(f"{mode} expects {ndim}-D masks, got {p.ndim}-D/{t.ndim}-D")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not p.any() or not t.any():
        raise UndefinedDistanceError("HD95 undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (ndim,):
        raise ShapeError(f"spacing must have {ndim} components")

    pb = np.argwhere(boundary_voxels(p)) * sp
    tb = np.argwhere(boundary_voxels(t)) * sp
    d_pt = cKDTree(tb).query(pb)[0]
    d_tp = cKDTree(pb).query(tb)[0]
    pooled = np.concatenate([d_pt, d_tp])
    return float(np.percentile(pooled, 95.0))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ShapeError("length mismatch")
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc**2).sum() * (yc**2).sum())
    if den == 0.0:
        return float("nan")
    return float((xc * yc).sum() / den)


def motion_metrics(real: Volume4D, gen: Volume4D, window: int = 7):
    """Frame-difference motion agreement: (correlation, mean difference SSIM).

    Both definitions are house conventions: the correlation pools every voxel
    of every consecutive-frame difference; the SSIM term fixes its dynamic
    range to the pooled real differences. Zero-variance differences report 0.
    """
    if real.n_frames != gen.n_frames or real.dims != gen.dims:
        raise ShapeError("sequences must share T and dims")
    if real.n_frames < 2:
        raise InsufficientFramesError("motion metrics need T >= 2")
    diffs_r = [
        real.frames[k + 1].data.astype(np.float64) - real.frames[k].data.astype(np.float64)
        for k in range(real.n_frames - 1)
    ]
    diffs_g = [
        gen.frames[k + 1].data.astype(np.float64) - gen.frames[k].data.astype(np.float64)
        for k in range(gen.n_frames - 1)
    ]
    all_r = np.stack(diffs_r)
    all_g = np.stack(diffs_g)
    r = pearson(all_r, all_g)
    m_corr = 0.0 if np.isnan(r) else r

    drange = float(all_r.max() - all_r.min())
    spacing = real.spacing_mm
    vals = []
    for dr, dg in zip(diffs_r, diffs_g):
        if drange == 0.0:
            vals.append(1.0 if np.array_equal(dr, dg) else 0.0)
        else:
            ref = Volume3D(real.dims, spacing, dr)
            cmp_ = Volume3D(real.dims, spacing, dg)
            vals.append(_ssim_fixed_range(ref, cmp_, drange, window))
    return m_corr, float(np.mean(vals))


def _ssim_fixed_range(a: Volume3D, b: Volume3D, drange: float, window: int) -> float:
    if any(d < window for d in a.dims):
        raise ShapeError(f"dims {a.dims} smaller than window {window}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    c1 = (_SSIM_K1 * drange) ** 2
    c2 = (_SSIM_K2 * drange) ** 2
    mu_x = uniform_filter(x, window)
    mu_y = uniform_filter(y, window)
    var_x = uniform_filter(x * x, window) - mu_x**2
    var_y = uniform_filter(y * y, window) - mu_y**2
    cov = uniform_filter(x * y, window) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(_valid_crop(num / den, window).mean())


def topology_report(defs: DeformationSet) -> list:
    """Fraction of interior voxels with positive Jacobian determinant, per field."""
    fractions = []
    for f in defs.fields:
        det = jacobian_determinant(f).data
        interior = det[1:-1, 1:-1, 1:-1]
        if interior.size == 0:
            interior = det
        fractions.append(float((interior > 0).mean()))
    return fractions
