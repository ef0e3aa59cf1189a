"""Functional indices, volume-time curves, slice/resolution aggregation, bootstrap.

End-diastole anchors at frame 0 (the R peak) by default; an extrema-based
variant is available behind a flag and every report records which was used.
HD95 values from empty masks propagate as NaN and are excluded from means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateAnatomyError,
    DomainError,
    InsufficientDataError,
    ShapeError,
)
from .metrics import hd95, mask_dice_iou, pearson
from .errors import UndefinedDistanceError
from .volgrid import FOREGROUND_CLASSES, LV, MYO, LabelVolume


def chamber_volume(labels: LabelVolume, cls: int = LV) -> float:
    """Class volume in millilitres: voxel count times voxel volume."""
    count = int((labels.labels == cls).sum())
    sx, sy, sz = labels.spacing_mm
    return count * sx * sy * sz / 1000.0


@dataclass
class FunctionalIndices:
    edv_ml: float
    esv_ml: float
    sv_ml: float
    ef: float
    co_l_per_min: float
    heart_rate_bpm: float
    volume_curve_ml: np.ndarray
    ed_frame: int
    es_frame: int
    anchor: str  # "r_peak" or "extrema"

    def __post_init__(self):
        self.volume_curve_ml = np.asarray(self.volume_curve_ml, dtype=np.float64)


def functional_indices(
    label_seq: list,
    frame_times,
    rr_seconds: float,
    cls: int = LV,
    anchor: str = "r_peak",
) -> FunctionalIndices:
    """EDV, ESV, SV, EF, and CO from a label sequence and the cycle length."""
    if len(label_seq) < 2:
        raise ShapeError("need at least 2 frames")
    if rr_seconds <= 0:
        raise DomainError("rr_seconds must be positive")
    if anchor not in ("r_peak", "extrema"):
        raise DomainError(f"unknown anchor {anchor!r}")
    curve = np.array([chamber_volume(lab, cls) for lab in label_seq])
    if anchor == "r_peak":
        ed = 0
    else:
        ed = int(np.argmax(curve))
    es = int(np.argmin(curve))
    edv = float(curve[ed])
    esv = float(curve[es])  # min of the curve, so esv <= edv by construction
    if edv <= 0.0:
        raise DegenerateAnatomyError("EDV is zero; no cavity voxels at end-diastole")
    sv = edv - esv
    ef = sv / edv
    hr = 60.0 / rr_seconds
    co = sv * hr / 1000.0
    return FunctionalIndices(
        edv_ml=edv,
        esv_ml=esv,
        sv_ml=sv,
        ef=ef,
        co_l_per_min=co,
        heart_rate_bpm=hr,
        volume_curve_ml=curve,
        ed_frame=ed,
        es_frame=es,
        anchor=anchor,
    )


def curve_correlation(real: FunctionalIndices, gen: FunctionalIndices) -> float:
    """Pearson correlation of the two volume-time curves; NaN when degenerate."""
    a = real.volume_curve_ml
    b = gen.volume_curve_ml
    if a.size != b.size:
        raise ShapeError("curve length mismatch")
    return pearson(a, b)


@dataclass
class SliceProfile:
    """Per-slice-rank segmentation accuracy at the ED and ES phases."""

    z_indices: list  # retained slices, basal (low z) to apical
    peak_z: int
    # records: one dict per (rank, class, phase) with dice/iou/hd95_mm
    records: list = field(default_factory=list)

    @property
    def n_ranks(self) -> int:
        return len(self.z_indices)


def _myo_area_per_slice(labels: LabelVolume) -> np.ndarray:
    return (labels.labels == MYO).sum(axis=(0, 1)).astype(np.float64)


def retained_slices(truth_ed: LabelVolume, threshold: float = 0.25):
    """Slices kept by the myocardium-area rule: >= threshold of the peak area.

    Returns (z indices basal->apical, peak z). The retained set is the
    contiguous band around the peak slice (area profiles are unimodal for
    closed shells; any stragglers beyond a gap are dropped).
    """
    area = _myo_area_per_slice(truth_ed)
    if area.max() <= 0:
        raise DegenerateAnatomyError("no myocardium voxels in the ED frame")
    peak = int(np.argmax(area))
    keep = area >= threshold * area[peak]
    lo = peak
    while lo > 0 and keep[lo - 1]:
        lo -= 1
    hi = peak
    while hi < area.size - 1 and keep[hi + 1]:
        hi += 1
    return list(range(lo, hi + 1)), peak


def slice_profile(
    pred_seq: list,
    truth_seq: list,
    ed_frame: int,
    es_frame: int,
    threshold: float = 0.25,
) -> SliceProfile:
    """Slice-rank Dice/IoU/HD95(2D) for LV/RV/Myo at the ED and ES phases.

    Slice selection uses the truth ED myocardium area; HD95 uses the in-plane
    spacing and reports NaN when either 2D mask is empty.
    """
    if len(pred_seq) != len(truth_seq):
        raise ShapeError("pred/truth sequence length mismatch")
    truth_ed = truth_seq[ed_frame]
    zs, peak = retained_slices(truth_ed, threshold)
    sx, sy, _ = truth_ed.spacing_mm
    profile = SliceProfile(z_indices=zs, peak_z=peak)
    for rank, z in enumerate(zs):
        for cls in FOREGROUND_CLASSES:
            for phase, frame in (("ED", ed_frame), ("ES", es_frame)):
                p = pred_seq[frame].labels[:, :, z] == cls
                t = truth_seq[frame].labels[:, :, z] == cls
                dice, iou = mask_dice_iou(p, t)
                try:
                    h = hd95(p, t, (sx, sy), mode="surface2d")
                except UndefinedDistanceError:
                    h = float("nan")
                profile.records.append(
                    {
                        "rank": rank,
                        "z": z,
                        "class": cls,
                        "phase": phase,
                        "dice": dice,
                        "iou": iou,
                        "hd95_mm": h,
                    }
                )
    return profile


def aggregate_slice_profiles(profiles: list) -> list:
    """Mean metric per (rank, class, phase) across subjects, NaNs excluded."""
    buckets = {}
    for prof in profiles:
        for rec in prof.records:
            key = (rec["rank"], rec["class"], rec["phase"])
            buckets.setdefault(key, []).append(rec)
    out = []
    for (rank, cls, phase), recs in sorted(buckets.items()):
        row = {"rank": rank, "class": cls, "phase": phase, "n": len(recs)}
        for m in ("dice", "iou", "hd95_mm"):
            vals = np.array([r[m] for r in recs], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            row[m] = float(vals.mean()) if vals.size else float("nan")
        out.append(row)
    return out


@dataclass
class ResolutionCase:
    """One subject's 4D label pair for the resolution sweep."""

    subject_id: str
    pred_seq: list
    truth_seq: list

    @property
    def s_x(self) -> float:
        return self.truth_seq[0].spacing_mm[0]


def _subject_scores(case: ResolutionCase) -> dict:
    """Time-averaged per-frame 3D Dice/IoU/HD95 for each foreground class."""
    scores = {}
    spacing = case.truth_seq[0].spacing_mm
    for cls in FOREGROUND_CLASSES:
        dices, ious, hds = [], [], []
        for pred, truth in zip(case.pred_seq, case.truth_seq):
            p = pred.labels == cls
            t = truth.labels == cls
            d, i = mask_dice_iou(p, t)
            dices.append(d)
            ious.append(i)
            try:
                hds.append(hd95(p, t, spacing, mode="surface3d"))
            except UndefinedDistanceError:
                pass
        scores[cls] = {
            "dice": float(np.mean(dices)),
            "iou": float(np.mean(ious)),
            "hd95_mm": float(np.mean(hds)) if hds else float("nan"),
        }
    return scores


@dataclass
class ResolutionSweep:
    bin_edges: np.ndarray
    per_case: list  # dicts: subject_id, s_x, bin, class, dice, iou, hd95_mm
    bin_stats: list  # dicts: bin, class, metric means/stds, n
    slopes: dict  # (class, metric) -> least-squares slope vs s_x


def resolution_sweep(cases: list, n_bins: int = 4) -> ResolutionSweep:
    """Bin subject scores by in-plane spacing and fit metric-vs-spacing trends."""
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    if not cases:
        raise InsufficientDataError("no cases")
    sxs = np.array([c.s_x for c in cases], dtype=np.float64)
    if np.unique(sxs).size < 2:
        raise InsufficientDataError("need >= 2 distinct s_x values for trends")
    edges = np.linspace(sxs.min(), sxs.max(), n_bins + 1)

    def bin_of(sx: float) -> int:
        # Last bin is right-closed so the max spacing lands inside.
        b = int(np.searchsorted(edges, sx, side="right") - 1)
        return min(max(b, 0), n_bins - 1)

    per_case = []
    for case in cases:
        scores = _subject_scores(case)
        for cls, s in scores.items():
            per_case.append(
                {
                    "subject_id": case.subject_id,
                    "s_x": case.s_x,
                    "bin": bin_of(case.s_x),
                    "class": cls,
                    **s,
                }
            )

    bin_stats = []
    for b in range(n_bins):
        for cls in FOREGROUND_CLASSES:
            rows = [r for r in per_case if r["bin"] == b and r["class"] == cls]
            rec = {"bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]), "class": cls, "n": len(rows)}
            for m in ("dice", "iou", "hd95_mm"):
                vals = np.array([r[m] for r in rows], dtype=np.float64)
                vals = vals[~np.isnan(vals)]
                rec[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
                rec[f"{m}_std"] = float(vals.std()) if vals.size else float("nan")
            bin_stats.append(rec)

    slopes = {}
    for cls in FOREGROUND_CLASSES:
        for m in ("dice", "iou", "hd95_mm"):
            pts = [(r["s_x"], r[m]) for r in per_case if r["class"] == cls and not np.isnan(r[m])]
            if len(pts) >= 2:
                x = np.array([p[0] for p in pts])
                y = np.array([p[1] for p in pts])
                slopes[(cls, m)] = float(np.polyfit(x, y, 1)[0])
            else:
                slopes[(cls, m)] = float("nan")
    return ResolutionSweep(bin_edges=edges, per_case=per_case, bin_stats=bin_stats, slopes=slopes)


def bootstrap_correlation(real, gen, replicates: int = 1000, seed: int = 0):
    """Bootstrap the Pearson correlation of paired values.

    Resamples subject pairs with replacement; degenerate replicates are
    redrawn up to 10 times then recorded as NaN. Returns the point estimate,
    the replicate array, and the 2.5/97.5 percentile interval.
    """
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.shape != gen.shape or real.ndim != 1:
        raise ShapeError("paired 1-D value arrays required")
    n = real.size
    if n < 3:
        raise InsufficientDataError(f"need >= 3 pairs, got {n}")
    rng = np.random.default_rng(seed)
    r_point = pearson(real, gen)
    reps = np.empty(replicates, dtype=np.float64)
    for i in range(replicates):
        r = float("nan")
        for _ in range(10):
            idx = rng.integers(n, size=n)
            r = pearson(real[idx], gen[idx])
            if not np.isnan(r):
                break
        reps[i] = r
    good = reps[~np.isnan(reps)]
    if good.size:
        ci = (float(np.percentile(good, 2.5)), float(np.percentile(good, 97.5)))
    else:
        ci = (float("nan"), float("nan"))
    return r_point, reps, ci


def index_agreement(real_values, gen_values, replicates: int = 1000, seed: int = 0) -> dict:
    """Pearson + bootstrap CI + MAE/RMSE for one functional index across subjects."""
    real_values = np.asarray(real_values, dtype=np.float64)
    gen_values = np.asarray(gen_values, dtype=np.float64)
    r, _, ci = bootstrap_correlation(real_values, gen_values, replicates, seed)
    err = gen_values - real_values
    return {
        "pearson_r": r,
        "ci_lo": ci[0],
        "ci_hi": ci[1],
        "mae": float(np.abs(err).mean()),
        "rmse": float(np.sqrt((err**2).mean())),
        "n": int(real_values.size),
    }
