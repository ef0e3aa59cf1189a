"""Analytic beating-heart phantom with a paired synthetic 12-lead ECG.

The phantom is an ellipsoidal left ventricle (cavity + myocardial shell) and
an offset right-ventricular cavity clipped against the epicardium. Every
frame is the rest geometry pushed through a contraction affine
``A_k = (1 - kappa * g(t_k)) * I`` about the heart center, so cavity volumes
and ejection fraction have closed forms. The stored analytic displacement is
the matching pull-back field ``u_k(x) = (1/s_k - 1)(x - c)``: warping frame 0
by ``u_k`` reproduces frame k under the resampling warp convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ecg import LEAD_NAMES, EcgRecord
from .errors import DomainError
from .volgrid import (
    BACKGROUND,
    LV,
    MYO,
    RV,
    DisplacementField,
    LabelVolume,
    Volume3D,
    Volume4D,
    voxel_grid,
)

# Intensities of the rendered tissue classes.
INTENSITY_BACKGROUND = 0.1
INTENSITY_MYOCARDIUM = 0.6
INTENSITY_BLOOD = 1.0

# Gaussian wavelet model of one cardiac cycle: (phase offset, width, amplitude
# in mV on lead II). Offsets and widths are fractions of the R-R interval.
ECG_WAVES = {
    "P": (-0.20, 0.025, 0.15),
    "Q": (-0.020, 0.008, -0.12),
    "R": (0.0, 0.010, 1.00),
    "S": (0.020, 0.008, -0.25),
    "T": (0.30, 0.045, 0.35),
}

# Per-lead amplitude gains, order I, II, III, aVR, aVL, aVF, V1-V6.
LEAD_GAINS = (0.6, 1.0, 0.5, -0.9, 0.3, 0.7, -0.4, 1.1, 1.3, 1.4, 1.2, 0.9)


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    lv_endo_radii_mm: tuple = (14.0, 14.0, 18.0)
    lv_epi_radii_mm: tuple = (20.0, 20.0, 24.0)
    rv_offset_mm: tuple = (-18.0, 0.0, 0.0)
    rv_radii_mm: tuple = (9.0, 12.0, 16.0)
    center_voxel: tuple = None  # default: grid center
    heart_rate_bpm: float = 60.0
    contraction_fraction: float = 0.15  # peak fractional radial shortening
    systole_peak_phase: float = 0.35  # after the T-wave phase offset
    frames: int = 10
    noise_sigma: float = 0.0
    seed: int = 0
    ecg_cycles: int = 8
    ecg_snr_db: float = 20.0  # None disables ECG noise

    def __post_init__(self):
        if self.center_voxel is None:
            self.center_voxel = tuple((d - 1) / 2.0 for d in self.dims)
        if not all(e > n for e, n in zip(self.lv_epi_radii_mm, self.lv_endo_radii_mm)):
            raise DomainError("epi radii must exceed endo radii component-wise")
        if not 0.0 < self.contraction_fraction < 0.5:
            raise DomainError("contraction_fraction must lie in (0, 0.5)")
        if not 0.0 < self.systole_peak_phase < 1.0:
            raise DomainError("systole_peak_phase must lie in (0, 1)")
        if self.frames < 2:
            raise DomainError("frames must be >= 2")


@dataclass
class PhantomTruth:
    spec: PhantomSpec
    volumes: Volume4D
    labels: list
    displacements: list  # frame 0 -> frame k, element 0 is the zero field
    lv_cavity_volume_ml: np.ndarray
    ecg: EcgRecord
    frame_times: np.ndarray = field(init=False)

    def __post_init__(self):
        self.frame_times = self.volumes.frame_times

    def analytic_ejection_fraction(self) -> float:
        """1 - det(A) at the end-systolic scale (isotropic contraction)."""
        g = systolic_pulse(self.frame_times, self.spec.systole_peak_phase)
        s = 1.0 - self.spec.contraction_fraction * g.max()
        return 1.0 - s**3


def systolic_pulse(t, peak_phase: float) -> np.ndarray:
    """Raised-cosine pulse on [0,1]: 0 at t=0 and t=1, peak 1 at ``peak_phase``."""
    t = np.asarray(t, dtype=np.float64)
    # Piecewise-linear time warp sends [0, peak] -> [0, 0.5], [peak, 1] -> [0.5, 1].
    warped = np.where(
        t <= peak_phase,
        0.5 * t / peak_phase,
        0.5 + 0.5 * (t - peak_phase) / (1.0 - peak_phase),
    )
    return 0.5 * (1.0 - np.cos(2.0 * math.pi * warped))


def _ellipsoid_field(pts_mm, center_mm, radii_mm, scale):
    """Approximate signed distance (mm) to a scaled ellipsoid surface, negative inside."""
    q = (pts_mm - center_mm) / scale
    r = np.asarray(radii_mm, dtype=np.float64)
    rho = np.sqrt(((q / r) ** 2).sum(axis=-1))
    grad = np.sqrt(((q / r**2) ** 2).sum(axis=-1))
    np.maximum(grad, 1e-12, out=grad)
    rho_safe = np.where(rho > 1e-12, rho, 1e-12)
    return (rho - 1.0) * rho_safe / grad


def _occupancy(dist_mm, edge_mm):
    """Linear partial-volume ramp across a thin band around the surface."""
    return np.clip(0.5 - dist_mm / edge_mm, 0.0, 1.0)


def _render_frame(spec: PhantomSpec, scale: float, rng: np.random.Generator):
    dims = spec.dims
    sp = np.asarray(spec.spacing_mm)
    center_mm = np.asarray(spec.center_voxel) * sp
    pts_mm = voxel_grid(dims) * sp
    edge = float(sp.min())  # transition band of about one voxel

    d_endo = _ellipsoid_field(pts_mm, center_mm, spec.lv_endo_radii_mm, scale)
    d_epi = _ellipsoid_field(pts_mm, center_mm, spec.lv_epi_radii_mm, scale)
    rv_center = center_mm + np.asarray(spec.rv_offset_mm) * scale
    d_rv = _ellipsoid_field(pts_mm, rv_center, spec.rv_radii_mm, scale)

    occ_endo = _occupancy(d_endo, edge)
    occ_epi = _occupancy(d_epi, edge)
    occ_rv = _occupancy(d_rv, edge)

    img = np.full(dims, INTENSITY_BACKGROUND, dtype=np.float64)
    img += (INTENSITY_MYOCARDIUM - INTENSITY_BACKGROUND) * occ_epi
    img += (INTENSITY_BLOOD - INTENSITY_MYOCARDIUM) * occ_endo
    img += (INTENSITY_BLOOD - INTENSITY_BACKGROUND) * occ_rv * (1.0 - occ_epi)
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=dims)

    lab = np.full(dims, BACKGROUND, dtype=np.uint8)
    lab[d_epi < 0] = MYO
    lab[d_endo < 0] = LV
    lab[(d_rv < 0) & (d_epi >= 0)] = RV

    vol = Volume3D(dims, spec.spacing_mm, img.astype(np.float32))
    return vol, LabelVolume(dims, spec.spacing_mm, lab)


def _check_geometry_fits(spec: PhantomSpec):
    sp = np.asarray(spec.spacing_mm)
    center = np.asarray(spec.center_voxel)
    # Peak dilation is the rest geometry (contraction only shrinks).
    epi_vox = np.asarray(spec.lv_epi_radii_mm) / sp
    rv_center = center + np.asarray(spec.rv_offset_mm) / sp
    rv_vox = np.asarray(spec.rv_radii_mm) / sp
    for c, r in ((center, epi_vox), (rv_center, rv_vox)):
        lo = c - r
        hi = c + r
        if np.any(lo < 2.0) or np.any(hi > np.asarray(spec.dims) - 3.0):
            raise DomainError(
                "phantom geometry must fit inside the grid with a 2-voxel margin"
            )


def generate_phantom(spec: PhantomSpec) -> PhantomTruth:
    """Render the 4D phantom plus labels, analytic displacements, and ECG."""
    _check_geometry_fits(spec)
    times = np.arange(spec.frames, dtype=np.float64) / spec.frames
    pulses = systolic_pulse(times, spec.systole_peak_phase)
    grid = voxel_grid(spec.dims)
    center = np.asarray(spec.center_voxel, dtype=np.float64)

    frames, labels, disps = [], [], []
    for k in range(spec.frames):
        rng = np.random.default_rng([spec.seed, k])
        scale = 1.0 - spec.contraction_fraction * pulses[k]
        vol, lab = _render_frame(spec, scale, rng)
        frames.append(vol)
        labels.append(lab)
        if k == 0:
            disps.append(DisplacementField.zero(spec.dims, spec.spacing_mm))
        else:
            u = (1.0 / scale - 1.0) * (grid - center)
            disps.append(DisplacementField(spec.dims, spec.spacing_mm, u))

    endo = spec.lv_endo_radii_mm
    base_ml = 4.0 / 3.0 * math.pi * endo[0] * endo[1] * endo[2] / 1000.0
    lv_ml = base_ml * (1.0 - spec.contraction_fraction * pulses) ** 3

    ecg = generate_synthetic_ecg(
        heart_rate_bpm=spec.heart_rate_bpm,
        n_cycles=spec.ecg_cycles,
        noise_snr_db=spec.ecg_snr_db,
        seed=spec.seed,
    )
    return PhantomTruth(
        spec=spec,
        volumes=Volume4D(frames, times),
        labels=labels,
        displacements=disps,
        lv_cavity_volume_ml=lv_ml,
        ecg=ecg,
    )


def generate_synthetic_ecg(
    heart_rate_bpm: float,
    n_cycles: int,
    sample_rate_hz: float = 500.0,
    noise_snr_db: float = None,
    seed: int = 0,
) -> EcgRecord:
    """Sum-of-Gaussian-wavelets 12-lead ECG with known R-peak sample indices.

    The record holds ``n_cycles + 1`` R peaks (n_cycles complete R-R
    intervals) with half a period of lead-in and tail padding.
    """
    if not 30.0 <= heart_rate_bpm <= 200.0:
        raise DomainError(f"heart_rate_bpm {heart_rate_bpm} outside [30, 200]")
    if n_cycles < 1:
        raise DomainError("n_cycles must be >= 1")

    period = 60.0 / heart_rate_bpm * sample_rate_hz  # samples per cycle
    lead_in = int(round(period / 2.0))
    n_samples = int(round(period * n_cycles)) + 2 * lead_in + 1
    r_peaks = lead_in + np.round(np.arange(n_cycles + 1) * period).astype(np.int64)

    t = np.arange(n_samples, dtype=np.float64)
    base = np.zeros(n_samples, dtype=np.float64)
    # Include one phantom cycle on each side so wrapped waves cover the padding.
    for k in range(-1, n_cycles + 2):
        center = lead_in + k * period
        for offset, width, amp in ECG_WAVES.values():
            mu = center + offset * period
            sig = width * period
            base += amp * np.exp(-0.5 * ((t - mu) / sig) ** 2)

    leads = np.stack([g * base for g in LEAD_GAINS])
    if noise_snr_db is not None and math.isfinite(noise_snr_db):
        rng = np.random.default_rng([seed, 0xEC6])
        signal_power = float(np.mean(leads[1] ** 2))
        sigma = math.sqrt(signal_power / 10.0 ** (noise_snr_db / 10.0))
        leads = leads + rng.normal(0.0, sigma, size=leads.shape)

    return EcgRecord(
        sample_rate_hz=sample_rate_hz,
        leads=leads,
        true_r_peaks=r_peaks,
    )


def make_deformation_truth(truth: PhantomTruth):
    """Package the analytic displacements as a registration-style deformation set."""
    from .registration import DeformationSet

    return DeformationSet(fields=list(truth.displacements), frame_times=truth.frame_times)


assert len(LEAD_GAINS) == len(LEAD_NAMES)
