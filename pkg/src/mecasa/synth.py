"""Synthetic hybrid EEG/fNIRS recordings with a known class signal.

Each trial is 6 s of rest followed by 6 s of task. During task, a subset of
EEG channels carries a 10 Hz rhythm on top of pink noise, and a subset of
fNIRS sites carries a fast haemodynamic step (HbO up, HbR down) that is
converted to raw intensities through the forward Beer-Lambert model.
``snr`` scales both class signals; ``snr=0`` leaves pure noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import save_recording
from .signal import (
    REST,
    TASK,
    Interval,
    Modality,
    SignalRecording,
    forward_mbll,
)

TRIAL_REST_S = 6.0
TRIAL_TASK_S = 6.0
TRIAL_S = TRIAL_REST_S + TRIAL_TASK_S

EEG_FS = 256.0
EEG_CHANNELS = 21
EEG_INFORMATIVE = (4, 5, 6, 8, 9, 10, 12, 13)
EEG_RHYTHM_HZ = 10.0
EEG_AMPLITUDE = 0.5  # per unit snr, relative to unit-variance pink noise
EEG_BAND = (8, 12)

FNIRS_FS = 12.5
FNIRS_SITES = 34
FNIRS_WAVELENGTHS = (760.0, 850.0)
FNIRS_INFORMATIVE = tuple(range(8, 20))
HBO_PER_SNR = 0.5e-6  # mol/L
HBR_RATIO = -0.2
HEMO_TAU_S = 0.5
OD_WHITE_NOISE = 0.01
OD_MAYER_AMPLITUDE = 0.005

EEG_NAMES = (
    "Fp1 Fp2 F7 F3 Fz F4 F8 FC5 FC1 FC2 FC6 T7 C3 Cz C4 T8 CP5 CP1 CP2 CP6 Pz"
).split()


@dataclass
class SynthDataset:
    eeg: list
    fnirs: list
    labels: list  # interval list per recording (shared by both modalities)


def _pink_noise(rng, n_channels, n_samples):
    white = rng.standard_normal((n_channels, n_samples))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n_samples)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n=n_samples, axis=1)
    return x / x.std(axis=1, keepdims=True)


def _task_mask(fs, n_samples):
    t = np.arange(n_samples) / fs
    return ((t % TRIAL_S) >= TRIAL_REST_S).astype(np.float64)


def _intervals(n_trials):
    out = []
    for k in range(n_trials):
        t0 = k * TRIAL_S
        out.append(Interval(t0, t0 + TRIAL_REST_S, REST))
        out.append(Interval(t0 + TRIAL_REST_S, t0 + TRIAL_S, TASK))
    return out


def _taper(mask, fs, ramp_s=0.1):
    """Smooth the 0/1 task mask with raised-cosine edges."""
    n = max(int(round(ramp_s * fs)), 1)
    kernel = np.hanning(2 * n + 1)
    return np.convolve(mask, kernel / kernel.sum(), mode="same")


def _first_order(mask, fs, tau):
    """Causal first-order lag (time constant ``tau``) of the task mask."""
    a = np.exp(-1.0 / (fs * tau))
    out = np.empty_like(mask)
    acc = 0.0
    for i, m in enumerate(mask):
        acc = a * acc + (1 - a) * m
        out[i] = acc
    return out


def synth_eeg(rng, n_trials, snr, subject_id):
    n = int(round(n_trials * TRIAL_S * EEG_FS))
    x = _pink_noise(rng, EEG_CHANNELS, n)
    if snr:
        t = np.arange(n) / EEG_FS
        env = _taper(_task_mask(EEG_FS, n), EEG_FS)
        for ch in EEG_INFORMATIVE:
            phase = rng.uniform(0, 2 * np.pi)
            x[ch] += snr * EEG_AMPLITUDE * env * np.sin(2 * np.pi * EEG_RHYTHM_HZ * t + phase)
    return SignalRecording(x, EEG_FS, Modality.EEG, list(EEG_NAMES), intervals=_intervals(n_trials), subject_id=subject_id)


def fnirs_layout():
    """Channel order: all sites at 760 nm, then all sites at 850 nm."""
    sites = [f"S{i + 1}-D{i + 1}" for i in range(FNIRS_SITES)]
    ch_sites = sites * 2
    wl = [FNIRS_WAVELENGTHS[0]] * FNIRS_SITES + [FNIRS_WAVELENGTHS[1]] * FNIRS_SITES
    names = [f"{s} {int(w)}" for s, w in zip(ch_sites, wl)]
    return names, np.array(wl), ch_sites


def expected_od_response(snr=1.0):
    """Per-channel plateau optical-density change during task."""
    dod_lo, dod_hi = forward_mbll(snr * HBO_PER_SNR, snr * HBO_PER_SNR * HBR_RATIO, FNIRS_WAVELENGTHS)
    resp = np.zeros(2 * FNIRS_SITES)
    for s in FNIRS_INFORMATIVE:
        resp[s] = dod_lo
        resp[FNIRS_SITES + s] = dod_hi
    return resp


def synth_fnirs(rng, n_trials, snr, subject_id):
    n = int(round(n_trials * TRIAL_S * FNIRS_FS))
    names, wl, ch_sites = fnirs_layout()
    t = np.arange(n) / FNIRS_FS
    od = OD_WHITE_NOISE * rng.standard_normal((2 * FNIRS_SITES, n))
    mayer = np.sin(2 * np.pi * 0.1 * t + rng.uniform(0, 2 * np.pi))
    od += OD_MAYER_AMPLITUDE * rng.uniform(0.5, 1.5, (2 * FNIRS_SITES, 1)) * mayer
    if snr:
        r = _first_order(_task_mask(FNIRS_FS, n), FNIRS_FS, HEMO_TAU_S)
        od += expected_od_response(snr)[:, None] * r[None, :]
    baseline = rng.uniform(0.5, 2.0, (2 * FNIRS_SITES, 1))
    intensity = baseline * 10.0 ** (-od)
    return SignalRecording(
        intensity, FNIRS_FS, Modality.FNIRS_RAW, names, wavelengths=wl, sites=ch_sites,
        intervals=_intervals(n_trials), subject_id=subject_id,
    )


def synth_hybrid_dataset(n_trials, seed=0, snr=2.0, trials_per_recording=10):
    """Simultaneous EEG and fNIRS recordings, ``trials_per_recording`` trials each."""
    if n_trials < 10:
        raise ValueError(f"need at least 10 trials, got {n_trials}")
    counts = [trials_per_recording] * (n_trials // trials_per_recording)
    if n_trials % trials_per_recording:
        counts.append(n_trials % trials_per_recording)
    children = np.random.SeedSequence(seed).spawn(len(counts))
    eeg, fnirs, labels = [], [], []
    for i, (k, ss) in enumerate(zip(counts, children)):
        r_eeg, r_nirs = (np.random.default_rng(s) for s in ss.spawn(2))
        sid = f"sub-{i:02d}"
        eeg.append(synth_eeg(r_eeg, k, snr, sid))
        fnirs.append(synth_fnirs(r_nirs, k, snr, sid))
        labels.append(_intervals(k))
    return SynthDataset(eeg, fnirs, labels)


def write_synth(ds, root):
    for i, (e, f) in enumerate(zip(ds.eeg, ds.fnirs)):
        save_recording(e, root, f"eeg_{i:03d}")
        save_recording(f, root, f"fnirs_{i:03d}")


# -- oracles ------------------------------------------------------------------


def _threshold_accuracy(stat, labels):
    """Accuracy of a midpoint threshold between the class medians."""
    labels = np.asarray(labels)
    lo, hi = np.median(stat[labels == REST]), np.median(stat[labels == TASK])
    pred = (stat > (lo + hi) / 2) if hi >= lo else (stat < (lo + hi) / 2)
    return float(np.mean(pred.astype(int) == labels))


def eeg_band_power(epochs, fs, band=EEG_BAND, channels=EEG_INFORMATIVE):
    """Log mean periodogram power in ``band`` over the informative channels."""
    x = np.asarray(epochs)[:, 0][:, list(channels)]
    spec = np.abs(np.fft.rfft(x * np.hanning(x.shape[-1]), axis=-1)) ** 2
    f = np.fft.rfftfreq(x.shape[-1], 1 / fs)
    sel = (f >= band[0]) & (f <= band[1])
    return np.log(spec[..., sel].mean(axis=(1, 2)))


def fnirs_level(epochs):
    """Matched-filter projection of the epoch-mean OD onto the expected response."""
    w = expected_od_response(1.0)
    x = np.asarray(epochs)[:, 0]
    if x.shape[1] != w.size:
        raise ValueError(f"oracle expects {w.size} OD channels, got {x.shape[1]}")
    return x.mean(axis=-1) @ w


def oracle_accuracy(ds):
    """Band-power (EEG) or OD-level (fNIRS) threshold accuracy on an EpochDataset."""
    if ds.modality == "eeg":
        stat = eeg_band_power(ds.epochs, ds.fs)
    else:
        stat = fnirs_level(ds.epochs)
    return _threshold_accuracy(stat, ds.labels)
