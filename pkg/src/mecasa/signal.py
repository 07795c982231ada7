"""EEG / fNIRS preprocessing: filtering, resampling, optical density, MBLL, epoching."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction

import numpy as np
from scipy import signal as sps

log = logging.getLogger(__name__)

REST, TASK = 0, 1
LABEL_NAMES = {"rest": REST, "task": TASK}

# Molar extinction coefficients, cm^-1 / (mol/L), base-10 (Prahl tabulation).
# Columns: (HbO, HbR).
DEFAULT_EXTINCTION = {
    760.0: (1486.5865, 3843.707),
    850.0: (2526.391, 1798.643),
}
DEFAULT_DPF = 6.0
DEFAULT_DISTANCE_CM = 3.0


class Modality(str, Enum):
    EEG = "eeg"
    FNIRS_RAW = "fnirs_raw"
    FNIRS_OD = "fnirs_od"
    FNIRS_HBT = "fnirs_hbt"


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    label: int

    @classmethod
    def parse(cls, item):
        start, end, label = item
        if isinstance(label, str):
            try:
                label = LABEL_NAMES[label.lower()]
            except KeyError:
                raise ValueError(f"unknown interval label {label!r}") from None
        if int(label) not in (REST, TASK):
            raise ValueError(f"interval label must be rest/task, got {label!r}")
        return cls(float(start), float(end), int(label))

    def to_list(self):
        return [self.start, self.end, "task" if self.label == TASK else "rest"]


@dataclass
class SignalRecording:
    """Multichannel time series, channels x samples."""

    data: np.ndarray
    fs: float
    modality: Modality
    channel_names: list = None
    wavelengths: np.ndarray = None  # nm per channel, fNIRS only
    sites: list = None  # source-detector pair per channel, fNIRS only
    intervals: list = field(default_factory=list)
    subject_id: str = "sub-00"
    session_id: str = "ses-00"

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.data = np.array(self.data, dtype=np.float64, ndmin=2)
        if self.data.ndim != 2:
            raise ValueError(f"recording data must be channels x samples, got {self.data.shape}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        self.fs = float(self.fs)
        if self.data.shape[1] < 1:
            raise ValueError("recording has no samples")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("recording contains NaN or Inf")
        if self.modality is Modality.FNIRS_RAW and np.any(self.data <= 0):
            ch = int(np.argwhere(self.data <= 0)[0, 0])
            raise ValueError(f"raw fNIRS intensities must be strictly positive (channel {ch})")
        n = self.data.shape[0]
        if self.channel_names is None:
            self.channel_names = [f"ch{i}" for i in range(n)]
        if len(self.channel_names) != n:
            raise ValueError(f"{len(self.channel_names)} channel names for {n} channels")
        if self.wavelengths is not None:
            self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
            if self.wavelengths.shape != (n,):
                raise ValueError("need one wavelength per channel")
        if self.sites is not None and len(self.sites) != n:
            raise ValueError("need one site label per channel")
        self.intervals = [iv if isinstance(iv, Interval) else Interval.parse(iv) for iv in self.intervals]

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.fs

    def with_data(self, data, **changes):
        return replace(self, data=data, **changes)


@dataclass
class Epoch:
    data: np.ndarray  # (1, channels, window)
    label: int
    subject_id: str
    trial_id: int
    window_index: int = 0


# ---------------------------------------------------------------------------


def bandpass_filter(rec, lo=0.5, hi=45.0, order=4):
    """Zero-phase Butterworth band-pass (forward-backward)."""
    if rec.fs <= 2 * hi:
        raise ValueError(f"Nyquist violation: fs={rec.fs} Hz must exceed 2*{hi} Hz")
    if not 0 < lo < hi:
        raise ValueError(f"need 0 < lo < hi, got {lo}, {hi}")
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=rec.fs, output="sos")
    return rec.with_data(sps.sosfiltfilt(sos, rec.data, axis=1))


def _rate_ratio(fs_in, fs_out):
    frac = Fraction(fs_out / fs_in).limit_denominator(1000)
    return frac.numerator, frac.denominator


def design_resampling_filter(fs_in, fs_out, up, attenuation_db=80.0):
    """Kaiser-windowed sinc low-pass at 0.45*min(fs_in, fs_out), running at fs_in*up."""
    fs_poly = fs_in * up
    f_ref = min(fs_in, fs_out)
    cutoff = 0.45 * f_ref
    width = 0.05 * f_ref  # transition band, centred on the cutoff
    numtaps, beta = sps.kaiserord(attenuation_db, width / (fs_poly / 2))
    numtaps |= 1  # odd length keeps the delay an integer
    # unit DC gain; resample_poly applies the factor ``up`` itself
    return sps.firwin(numtaps, cutoff, window=("kaiser", beta), fs=fs_poly)


def resample(rec, fs_out):
    """Rational-rate resampling with a band-limited windowed-sinc filter.

    Output length is ``round(n_in * fs_out / fs_in)``.
    """
    if not fs_out > 0:
        raise ValueError(f"target rate must be positive, got {fs_out}")
    n_out = int(round(rec.n_samples * fs_out / rec.fs))
    if n_out == 0:
        raise ValueError(f"resampling {rec.n_samples} samples to {fs_out} Hz leaves none")
    if math.isclose(fs_out, rec.fs):
        return rec.with_data(rec.data.copy())
    up, down = _rate_ratio(rec.fs, fs_out)
    taps = design_resampling_filter(rec.fs, fs_out, up)
    # Odd reflection at both ends keeps value and slope continuous, so the
    # filter transient lands in the padding. A multiple of ``down`` keeps the
    # output grid aligned with the original samples.
    delay = len(taps) // (2 * up) + 2
    pad = -(-delay // down) * down
    x = np.pad(rec.data, ((0, 0), (pad, pad)), mode="reflect", reflect_type="odd")
    y = sps.resample_poly(x, up, down, axis=1, window=taps)
    y = y[:, pad * up // down :]
    if y.shape[1] < n_out:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])), mode="edge")
    return rec.with_data(np.ascontiguousarray(y[:, :n_out]), fs=float(fs_out))


def to_optical_density(rec):
    """OD = -log10(I / mean(I)) per channel."""
    if rec.modality is not Modality.FNIRS_RAW:
        raise ValueError(f"expected raw fNIRS intensities, got {rec.modality.value}")
    bad = np.argwhere(rec.data <= 0)
    if bad.size:
        raise ValueError(f"non-positive intensity on channel {int(bad[0, 0])}")
    ref = rec.data.mean(axis=1, keepdims=True)
    return rec.with_data(-np.log10(rec.data / ref), modality=Modality.FNIRS_OD)


def _pair_sites(rec):
    """site -> (index at lower wavelength, index at higher wavelength)."""
    if rec.sites is None or rec.wavelengths is None:
        raise ValueError("MBLL needs per-channel site labels and wavelengths")
    groups = {}
    for i, site in enumerate(rec.sites):
        groups.setdefault(site, []).append(i)
    pairs = {}
    for site, idx in groups.items():
        if len(idx) != 2 or rec.wavelengths[idx[0]] == rec.wavelengths[idx[1]]:
            raise ValueError(f"site {site!r} is unpaired: channels {idx}")
        pairs[site] = tuple(sorted(idx, key=lambda i: rec.wavelengths[i]))
    return pairs


def _extinction_matrix(extinction, wl_lo, wl_hi):
    try:
        return np.array([extinction[float(wl_lo)], extinction[float(wl_hi)]], dtype=np.float64)
    except KeyError as exc:
        raise ValueError(f"no extinction coefficients for wavelength {exc.args[0]} nm") from None


def mbll(od, extinction=None, distance_cm=DEFAULT_DISTANCE_CM, dpf=DEFAULT_DPF):
    """Solve the two-wavelength Modified Beer-Lambert system per site.

    For each site, dOD_l = (e_l,HbO * dHbO + e_l,HbR * dHbR) * distance * DPF_l
    is inverted exactly. ``dpf`` is a scalar or a ``{wavelength: dpf}`` dict.
    Returns ``(sites, hbo, hbr)`` with concentrations in mol/L.
    """
    if od.modality is not Modality.FNIRS_OD:
        raise ValueError(f"expected optical density, got {od.modality.value}")
    extinction = DEFAULT_EXTINCTION if extinction is None else {float(k): v for k, v in extinction.items()}
    pairs = _pair_sites(od)
    sites = list(pairs)
    hbo = np.empty((len(sites), od.n_samples))
    hbr = np.empty_like(hbo)
    for s, site in enumerate(sites):
        i_lo, i_hi = pairs[site]
        wl = (od.wavelengths[i_lo], od.wavelengths[i_hi])
        E = _extinction_matrix(extinction, *wl)
        cond = np.linalg.cond(E)
        if not np.isfinite(cond) or cond >= 1e6:
            raise ValueError(f"extinction matrix for {wl} nm is singular or ill-conditioned (cond={cond:.3g})")
        path = np.array([distance_cm * _dpf_at(dpf, w) for w in wl])
        M = E * path[:, None]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        a, b = od.data[i_lo], od.data[i_hi]
        hbo[s] = (M[1, 1] * a - M[0, 1] * b) / det
        hbr[s] = (-M[1, 0] * a + M[0, 0] * b) / det
    return sites, hbo, hbr


def _dpf_at(dpf, wavelength):
    if isinstance(dpf, dict):
        return float({float(k): v for k, v in dpf.items()}[float(wavelength)])
    return float(dpf)


def mbll_to_hbt(od, extinction=None, distance_cm=DEFAULT_DISTANCE_CM, dpf=DEFAULT_DPF):
    """Total haemoglobin change HbT = dHbO + dHbR; one channel per site."""
    sites, hbo, hbr = mbll(od, extinction, distance_cm, dpf)
    return od.with_data(
        hbo + hbr,
        modality=Modality.FNIRS_HBT,
        channel_names=[f"{s} HbT" for s in sites],
        wavelengths=None,
        sites=list(sites),
    )


def forward_mbll(hbo, hbr, wavelengths_pair, extinction=None, distance_cm=DEFAULT_DISTANCE_CM, dpf=DEFAULT_DPF):
    """Optical density at two wavelengths from concentration changes (used by the synthesiser)."""
    extinction = DEFAULT_EXTINCTION if extinction is None else {float(k): v for k, v in extinction.items()}
    out = []
    for wl in wavelengths_pair:
        e_o, e_r = extinction[float(wl)]
        out.append((e_o * np.asarray(hbo) + e_r * np.asarray(hbr)) * distance_cm * _dpf_at(dpf, wl))
    return out


def epoch_count(n_samples, window, step):
    return 0 if n_samples < window else (n_samples - window) // step + 1


def epoch_signal(rec, intervals=None, window_s=1.0, step_s=0.5):
    """Cut fixed windows from each labelled interval.

    Windows start at 0, step, 2*step, ... samples into the interval and are
    kept while they fit entirely inside it.
    """
    intervals = rec.intervals if intervals is None else [Interval.parse(i) if not isinstance(i, Interval) else i for i in intervals]
    W = int(round(window_s * rec.fs))
    S = int(round(step_s * rec.fs))
    if W < 1 or S < 1:
        raise ValueError(f"window/step too short at {rec.fs} Hz")
    epochs = []
    for trial, iv in enumerate(intervals):
        s0 = int(round(iv.start * rec.fs))
        s1 = min(int(round(iv.end * rec.fs)), rec.n_samples)
        n = epoch_count(s1 - s0, W, S)
        if n == 0:
            warnings.warn(f"interval {trial} ({iv.end - iv.start:.3f} s) shorter than the {window_s} s window")
            continue
        for k in range(n):
            a = s0 + k * S
            epochs.append(Epoch(rec.data[None, :, a : a + W].copy(), iv.label, rec.subject_id, trial, k))
    return epochs


def channel_stats(x):
    """Per-channel mean and floored std over an (n, 1, C, T) epoch array."""
    x = np.asarray(x)
    mean = x.mean(axis=(0, 1, 3))
    std = x.std(axis=(0, 1, 3))
    # exact value for constant channels, so they standardize to exact zeros
    flat = np.ptp(x, axis=(0, 1, 3)) == 0
    mean[flat] = x[0, 0, flat, 0]
    return mean, np.maximum(std, 1e-8)


def standardize(x, stats):
    mean, std = stats
    return (np.asarray(x) - mean[None, None, :, None]) / std[None, None, :, None]


@dataclass
class PrepConfig:
    eeg_band: tuple = (0.5, 45.0)
    eeg_filter_order: int = 4
    eeg_fs: float = 128.0
    od10_fs: float = 10.0
    od128_fs: float = 128.0
    window_s: float = 1.0
    step_s: float = 0.5
    extinction: dict = field(default_factory=lambda: dict(DEFAULT_EXTINCTION))
    distance_cm: float = DEFAULT_DISTANCE_CM
    dpf: float = DEFAULT_DPF

    def to_dict(self):
        return {
            "eeg_band": list(self.eeg_band),
            "eeg_filter_order": self.eeg_filter_order,
            "eeg_fs": self.eeg_fs,
            "od10_fs": self.od10_fs,
            "od128_fs": self.od128_fs,
            "window_s": self.window_s,
            "step_s": self.step_s,
            "extinction": {str(k): list(v) for k, v in self.extinction.items()},
            "distance_cm": self.distance_cm,
            "dpf": self.dpf,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "extinction" in d:
            d["extinction"] = {float(k): tuple(v) for k, v in d["extinction"].items()}
        if "eeg_band" in d:
            d["eeg_band"] = tuple(d["eeg_band"])
        return cls(**d)


REPRESENTATIONS = ("od10", "hbt", "od128")


def preprocess_eeg(rec, cfg=None):
    cfg = cfg or PrepConfig()
    lo, hi = cfg.eeg_band
    return resample(bandpass_filter(rec, lo, hi, cfg.eeg_filter_order), cfg.eeg_fs)


def preprocess_fnirs(rec, representation, cfg=None):
    """raw -> OD -> 10 Hz, then od10 as is, od128 upsampled, hbt via MBLL then upsampled."""
    cfg = cfg or PrepConfig()
    if representation not in REPRESENTATIONS:
        raise ValueError(f"unknown fNIRS representation {representation!r}; choose from {REPRESENTATIONS}")
    od10 = resample(to_optical_density(rec), cfg.od10_fs)
    if representation == "od10":
        return od10
    if representation == "od128":
        return resample(od10, cfg.od128_fs)
    hbt = mbll_to_hbt(od10, cfg.extinction, cfg.distance_cm, cfg.dpf)
    return resample(hbt, cfg.od128_fs)
