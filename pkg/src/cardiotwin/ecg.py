"""12-lead ECG preprocessing: R-peak detection, cycle cropping, embedding.

R peaks are found with a Pan-Tompkins style detector on lead II: zero-phase
5-15 Hz FIR band-pass, five-point derivative, squaring, 150 ms moving-window
integration, then adaptive dual-threshold peak picking with a 200 ms
refractory period and a search-back pass. All stages are linear or
scale-equivariant, so detected indices are invariant to amplitude scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import filtfilt, find_peaks, firwin

from .errors import DomainError, InsufficientSignalError, ShapeError

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

PHASE_SAMPLES = 64  # L, phase samples per resampled cycle

_BANDPASS_LOW_HZ = 5.0
_BANDPASS_HIGH_HZ = 15.0
_INTEGRATION_WINDOW_S = 0.150
_REFRACTORY_S = 0.200


@dataclass
class EcgRecord:
    """12 synchronously sampled leads in millivolts."""

    sample_rate_hz: float
    leads: np.ndarray  # (12, n_samples)
    true_r_peaks: np.ndarray = None  # phantom ground truth only

    def __post_init__(self):
        self.leads = np.ascontiguousarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2 or self.leads.shape[0] != len(LEAD_NAMES):
            raise ShapeError(f"leads must be (12, n), got {self.leads.shape}")
        if self.sample_rate_hz <= 0:
            raise DomainError("sample_rate_hz must be positive")
        if self.leads.shape[1] < 2 * self.sample_rate_hz:
            raise DomainError(
                f"record too short: {self.leads.shape[1]} samples < "
                f"2 x sample rate ({2 * self.sample_rate_hz:.0f})"
            )
        if not np.isfinite(self.leads).all():
            raise DomainError("leads contain non-finite samples")
        if self.true_r_peaks is not None:
            self.true_r_peaks = np.asarray(self.true_r_peaks, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return self.leads.shape[1]

    @property
    def lead_ii(self) -> np.ndarray:
        return self.leads[1]


@dataclass
class CardiacCycle:
    """One R-R crop of all 12 leads, resampled onto a fixed phase grid."""

    leads: np.ndarray  # (12, raw crop length)
    rr_seconds: float
    phase_grid: np.ndarray  # (L,), phases in [0, 1)
    resampled: np.ndarray  # (12, L)

    def __post_init__(self):
        if self.rr_seconds <= 0:
            raise DomainError("rr_seconds must be positive")
        if self.resampled.shape != (len(LEAD_NAMES), self.phase_grid.size):
            raise ShapeError("resampled matrix shape mismatch")


def detect_r_peaks(rec: EcgRecord) -> np.ndarray:
    """Detect R-peak sample indices on lead II.

    Raises InsufficientSignalError when fewer than two peaks are found.
    """
    fs = rec.sample_rate_hz
    sig = rec.lead_ii
    if np.ptp(sig) == 0.0:
        raise InsufficientSignalError("lead II is constant; no peaks exist")

    numtaps = int(fs * 0.4) | 1  # odd tap count, ~0.4 s FIR
    taps = firwin(numtaps, [_BANDPASS_LOW_HZ, _BANDPASS_HIGH_HZ], fs=fs, pass_zero=False)
    band = filtfilt(taps, [1.0], sig)

    deriv = np.convolve(band, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) / 8.0, mode="same")
    squared = deriv**2
    width = max(int(round(_INTEGRATION_WINDOW_S * fs)), 1)
    integrated = np.convolve(squared, np.full(width, 1.0 / width), mode="same")

    refractory = int(round(_REFRACTORY_S * fs))
    # One candidate per QRS energy packet: the integrated signal plateaus over
    # roughly the integration window, so enforce the refractory as a minimum
    # peak distance.
    candidates, _ = find_peaks(integrated, distance=refractory)
    if candidates.size == 0:
        raise InsufficientSignalError("no candidate peaks in the integrated signal")

    # Adaptive signal/noise levels initialized from the first two seconds.
    head = integrated[: int(2 * fs)]
    spki = 0.5 * float(head.max())
    npki = 0.25 * float(head.mean())

    accepted = []
    for idx in candidates:
        threshold1 = npki + 0.25 * (spki - npki)
        peak = integrated[idx]
        if peak > threshold1:
            accepted.append(int(idx))
            spki = 0.125 * peak + 0.875 * spki
        else:
            npki = 0.125 * peak + 0.875 * npki

    # Search-back: rescan long gaps against the lower threshold.
    if len(accepted) >= 2:
        mean_rr = float(np.diff(accepted).mean())
        threshold2 = 0.5 * (npki + 0.25 * (spki - npki))
        filled = list(accepted)
        for a, b in zip(accepted[:-1], accepted[1:]):
            if b - a > 1.66 * mean_rr:
                inside = candidates[(candidates > a + refractory) & (candidates < b - refractory)]
                filled.extend(int(i) for i in inside if integrated[i] > threshold2)
        accepted = sorted(set(filled))

    # The integrated plateau can sit tens of milliseconds off the QRS center;
    # refine each pick to the raw lead II maximum within half a window plus
    # the plateau slack.
    half = int(round((_INTEGRATION_WINDOW_S / 2 + 0.075) * fs))
    refined = []
    for idx in accepted:
        lo = max(idx - half, 0)
        hi = min(idx + half + 1, sig.size)
        refined.append(lo + int(np.argmax(sig[lo:hi])))
    refined = sorted(set(refined))

    # Refractory once more after refinement (keep the larger raw peak).
    peaks = []
    for idx in refined:
        if peaks and idx - peaks[-1] < refractory:
            if sig[idx] > sig[peaks[-1]]:
                peaks[-1] = idx
            continue
        peaks.append(idx)

    if len(peaks) < 2:
        raise InsufficientSignalError(f"found {len(peaks)} R peak(s), need at least 2")
    return np.asarray(peaks, dtype=np.int64)


def extract_cycle(
    rec: EcgRecord,
    peaks: np.ndarray,
    which="median",
    n_phase: int = PHASE_SAMPLES,
) -> CardiacCycle:
    """Crop one R-R interval and resample it onto the phase grid.

    ``which`` is either an integer cycle index or "median": the cycle whose
    length is the lower median of all cycle lengths (ties break earlier).
    """
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size < 2:
        raise DomainError("need at least 2 peaks to crop a cycle")
    lengths = np.diff(peaks)
    if which == "median":
        order = np.argsort(lengths, kind="stable")
        target_len = lengths[order[(lengths.size - 1) // 2]]
        cycle_idx = int(np.flatnonzero(lengths == target_len)[0])
    else:
        cycle_idx = int(which)
        if not 0 <= cycle_idx < lengths.size:
            raise DomainError(f"cycle index {cycle_idx} out of range [0, {lengths.size})")

    start = int(peaks[cycle_idx])
    stop = int(peaks[cycle_idx + 1])
    crop = rec.leads[:, start:stop]
    rr_seconds = (stop - start) / rec.sample_rate_hz

    phase_grid = np.arange(n_phase, dtype=np.float64) / n_phase
    sample_pos = phase_grid * (stop - start)
    base = np.arange(stop - start, dtype=np.float64)
    resampled = np.stack([np.interp(sample_pos, base, lead) for lead in crop])
    return CardiacCycle(
        leads=crop.copy(),
        rr_seconds=rr_seconds,
        phase_grid=phase_grid,
        resampled=resampled,
    )


def embed_ecg(cycle: CardiacCycle) -> np.ndarray:
    """Deterministic ECG feature vector: per-lead z-scored waveform + cycle length.

    Output length is 12 * L + 1. Constant leads embed as zeros.
    """
    mat = cycle.resampled
    mean = mat.mean(axis=1, keepdims=True)
    var = mat.var(axis=1, keepdims=True)
    safe = np.where(var < 1e-12, 1.0, np.sqrt(var))
    z = np.where(var < 1e-12, 0.0, (mat - mean) / safe)
    return np.concatenate([z.reshape(-1), [cycle.rr_seconds]])
