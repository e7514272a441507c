"""EEG preprocessing: both decoder-aligned pipelines plus artifact handling.

The envelope-aligned pipeline (output at 64 Hz):
highpass detrend -> amplitude threshold/interpolate -> frontal-power mask ->
multichannel Wiener suppression -> [layout harmonization] -> common average
reference -> resample.

The FFR-aligned pipeline (output at 512 Hz):
highpass detrend -> amplitude threshold/interpolate -> [layout
harmonization] -> common average reference -> zero-phase 70-220 Hz FIR
(one-second kernel) -> resample.

Layout harmonization, when a target layout is given, happens before
re-referencing: channels missing from the source are interpolated by
inverse-distance weighting over the nearest electrodes, and channels
absent from the target are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from .features import fir_zero_phase, resample
from .layouts import DEFAULT_FRONTAL, ChannelLayout

log = logging.getLogger(__name__)

GLITCH_THRESHOLD_VOLTS = 500e-6
FRONTAL_POWER_FACTOR = 5.0
HIGHPASS_CUTOFF_HZ = 0.5
FFR_BAND = (70.0, 220.0)
ENVELOPE_EEG_RATE = 64.0
FFR_EEG_RATE = 512.0

_MWF_REG = 1e-9
_INTERP_NEIGHBORS = 4
_INTERP_MAX_ANGLE = np.pi / 2


@dataclass(frozen=True)
class EegRecording:
    data: np.ndarray  # (channels, samples)
    rate: float
    layout: ChannelLayout
    participant_id: str = ""
    trial_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 2:
            raise ValueError("EEG data must be (channels, samples)")
        if arr.shape[0] != len(self.layout):
            raise ValueError(
                f"{arr.shape[0]} data channels but layout has {len(self.layout)}")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        object.__setattr__(self, "data", arr)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ArtifactMask:
    flags: np.ndarray         # (channels, samples) bool, per-channel glitches
    global_flags: np.ndarray  # (samples,) bool, recording-wide events

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        g = np.asarray(self.global_flags, dtype=bool)
        if f.ndim != 2 or g.shape != (f.shape[1],):
            raise ValueError("mask shapes must be (channels, samples) and (samples,)")
        object.__setattr__(self, "flags", f)
        object.__setattr__(self, "global_flags", g)


def highpass_detrend(x: EegRecording) -> EegRecording:
    """First-order Butterworth highpass (0.5 Hz) run forward and backward."""
    if x.rate < 64:
        raise ValueError(f"highpass expects rate >= 64 Hz, got {x.rate}")
    if x.n_samples == 0:
        raise ValueError("empty recording")
    b, a = sps.butter(1, HIGHPASS_CUTOFF_HZ, btype="highpass", fs=x.rate)
    padlen = min(int(3 * x.rate), x.n_samples - 1)
    y = sps.filtfilt(b, a, x.data, axis=-1, padlen=padlen)
    return replace(x, data=y)


def threshold_interpolate(x: EegRecording,
                          thresh: float = GLITCH_THRESHOLD_VOLTS) -> tuple[EegRecording, ArtifactMask]:
    """Replace samples with |amplitude| > thresh by linear interpolation.

    Each glitchy run is bridged by the line between the clean samples
    immediately before and after it; runs touching a boundary hold the
    nearest clean value. A channel with no clean samples at all is zeroed.
    """
    if thresh <= 0:
        raise ValueError("threshold must be positive")
    data = x.data.copy()
    bad = np.abs(data) > thresh
    n = data.shape[1]
    idx = np.arange(n)
    for ch in range(data.shape[0]):
        if not bad[ch].any():
            continue
        clean = ~bad[ch]
        if not clean.any():
            log.warning("channel %d entirely above threshold; zeroing", ch)
            data[ch] = 0.0
            continue
        data[ch, bad[ch]] = np.interp(idx[bad[ch]], idx[clean], data[ch, clean])
    return replace(x, data=data), ArtifactMask(bad, np.zeros(n, dtype=bool))


def frontal_power_mask(x: EegRecording, factor: float = FRONTAL_POWER_FACTOR,
                       frontal: tuple[str, ...] = DEFAULT_FRONTAL) -> ArtifactMask:
    """Flag samples where mean-frontal-channel power exceeds factor x its trial average."""
    missing = [n for n in frontal if n not in x.layout]
    if missing:
        raise ValueError(f"layout is missing frontal channels: {', '.join(missing)}")
    rows = [x.layout.index(n) for n in frontal]
    virtual = x.data[rows].mean(axis=0)
    power = virtual * virtual
    threshold = factor * power.mean()
    flags = power > threshold  # strict: an all-zero recording flags nothing
    return ArtifactMask(np.zeros_like(x.data, dtype=bool), flags)


def mwf_suppress(x: EegRecording, mask: ArtifactMask) -> EegRecording:
    """Multichannel Wiener filter estimated from clean vs flagged samples.

    C_a = C_flagged - C_clean projected onto the PSD cone; the filter
    W = (C_c + C_a)^-1 C_a estimates the artifact component, which is
    subtracted from every sample. With too few flagged (or clean) samples
    the recording is returned unchanged.
    """
    flags = mask.global_flags
    if flags.shape[0] != x.n_samples:
        raise ValueError("mask length does not match recording")
    n_ch = x.data.shape[0]
    n_bad = int(flags.sum())
    n_clean = int((~flags).sum())
    if n_bad < 2 * n_ch or n_clean < 2 * n_ch:
        if n_bad:
            log.warning("MWF skipped: %d flagged / %d clean samples for %d channels",
                        n_bad, n_clean, n_ch)
        return replace(x, data=x.data.copy())
    c_clean = np.cov(x.data[:, ~flags])
    c_dirty = np.cov(x.data[:, flags])
    c_art = (c_dirty - c_clean + (c_dirty - c_clean).T) / 2.0
    evals, evecs = np.linalg.eigh(c_art)
    c_art = (evecs * np.maximum(evals, 0.0)) @ evecs.T
    reg = _MWF_REG * np.trace(c_clean) / n_ch
    w = np.linalg.solve(c_clean + c_art + reg * np.eye(n_ch), c_art)
    return replace(x, data=x.data - w.T @ x.data)


def common_average_reference(x: EegRecording) -> EegRecording:
    """Subtract the per-sample mean across channels."""
    if x.data.shape[0] < 2:
        raise ValueError("need at least two channels to re-reference")
    return replace(x, data=x.data - x.data.mean(axis=0, keepdims=True))


def map_layout(x: EegRecording, target: ChannelLayout) -> EegRecording:
    """Reorder to the target layout, synthesizing missing channels.

    A target channel absent from the source is interpolated by
    inverse-great-circle-distance weighting over its 4 nearest source
    electrodes (within 90 degrees); source channels absent from the target
    are dropped. Channels present in both are copied verbatim.
    """
    src = x.layout
    out = np.empty((len(target), x.n_samples), dtype=x.data.dtype)
    for i, name in enumerate(target.names):
        if name in src:
            out[i] = x.data[src.index(name)]
            continue
        p = target.positions[i]
        angles = np.arccos(np.clip(src.positions @ p, -1.0, 1.0))
        candidates = np.flatnonzero(angles <= _INTERP_MAX_ANGLE)
        if candidates.size == 0:
            raise ValueError(
                f"cannot interpolate {name}: no source electrode within 90 degrees")
        nearest = candidates[np.argsort(angles[candidates])][:_INTERP_NEIGHBORS]
        d = angles[nearest]
        if d[0] < 1e-9:  # coincident electrode under another name
            out[i] = x.data[nearest[0]]
            continue
        wgt = 1.0 / d
        wgt /= wgt.sum()
        out[i] = wgt @ x.data[nearest]
    return replace(x, data=out, layout=target)


def _resample_recording(x: EegRecording, target_rate: float) -> EegRecording:
    return replace(x, data=resample(x.data, x.rate, target_rate), rate=target_rate)


def preprocess_envelope_pipeline(x: EegRecording,
                                 target_layout: ChannelLayout | None = None,
                                 frontal: tuple[str, ...] = DEFAULT_FRONTAL) -> EegRecording:
    """Full artifact-suppressed pipeline aligned with the 64 Hz envelope feature."""
    r = highpass_detrend(x)
    r, _ = threshold_interpolate(r)
    mask = frontal_power_mask(r, frontal=frontal)
    r = mwf_suppress(r, mask)
    if target_layout is not None:
        r = map_layout(r, target_layout)
    r = common_average_reference(r)
    return _resample_recording(r, ENVELOPE_EEG_RATE)


def preprocess_ffr_pipeline(x: EegRecording,
                            target_layout: ChannelLayout | None = None) -> EegRecording:
    """Pipeline aligned with the 512 Hz envelope-modulations feature."""
    r = highpass_detrend(x)
    r, _ = threshold_interpolate(r)
    if target_layout is not None:
        r = map_layout(r, target_layout)
    r = common_average_reference(r)
    taps = int(round(r.rate)) + 1  # one-second type-I kernel
    if taps % 2 == 0:
        taps += 1
    r = replace(r, data=fir_zero_phase(r.data, r.rate, FFR_BAND, taps))
    return _resample_recording(r, FFR_EEG_RATE)
