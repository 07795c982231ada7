import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecasa.signal import (
    DEFAULT_EXTINCTION,
    Interval,
    Modality,
    PrepConfig,
    SignalRecording,
    bandpass_filter,
    channel_stats,
    epoch_count,
    epoch_signal,
    forward_mbll,
    mbll,
    mbll_to_hbt,
    preprocess_eeg,
    preprocess_fnirs,
    resample,
    standardize,
    to_optical_density,
)


def eeg(data, fs=256.0, **kw):
    return SignalRecording(np.atleast_2d(data), fs, Modality.EEG, **kw)


def tone_amplitude(y, fs, f):
    """Single-bin DFT amplitude of an integer-cycle segment."""
    n = len(y)
    t = np.arange(n) / fs
    return 2 * abs(np.dot(y, np.exp(-2j * np.pi * f * t))) / n


def od_recording(data, wavelengths, sites):
    return SignalRecording(data, 10.0, Modality.FNIRS_OD, wavelengths=wavelengths, sites=sites)


# -- recording validation -----------------------------------------------------


def test_recording_validation():
    with pytest.raises(ValueError, match="positive"):
        eeg(np.zeros(10), fs=0)
    with pytest.raises(ValueError, match="NaN"):
        eeg(np.array([0.0, np.nan]))
    with pytest.raises(ValueError, match="channel 1"):
        SignalRecording(np.array([[1.0, 2.0], [1.0, 0.0]]), 10, Modality.FNIRS_RAW)
    with pytest.raises(ValueError):
        Interval.parse((0, 1, "blink"))
    assert Interval.parse((0, 6, "task")).to_list() == [0.0, 6.0, "task"]


# -- band-pass ------------------------------------------------------------------


def test_bandpass_removes_dc():
    y = bandpass_filter(eeg(np.full(2560, 3.0))).data
    assert np.abs(y).max() < 1e-3 * 3.0


@pytest.mark.parametrize("f, lo, hi", [(10.0, 0.95, 1.05), (60.0, 0.0, 0.1)])
def test_bandpass_tone_gain(f, lo, hi):
    fs = 256.0
    t = np.arange(int(10 * fs)) / fs
    y = bandpass_filter(eeg(np.sin(2 * np.pi * f * t))).data[0]
    amp = tone_amplitude(y[512:-512], fs, f)  # steady state: drop 2 s at each edge
    assert lo <= amp <= hi


def test_bandpass_is_zero_phase():
    fs = 256.0
    t = np.arange(2048) / fs
    x = np.sin(2 * np.pi * 10 * t)
    y = bandpass_filter(eeg(x)).data[0]
    seg = slice(256, -256)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[seg], np.roll(y, -lag)[seg]) for lag in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_bandpass_nyquist_guard():
    with pytest.raises(ValueError, match="Nyquist"):
        bandpass_filter(eeg(np.zeros(100), fs=80.0))


def test_bandpass_keeps_shape_and_rate(rng):
    rec = eeg(rng.standard_normal((3, 500)))
    out = bandpass_filter(rec)
    assert out.data.shape == (3, 500) and out.fs == 256.0


# -- resampling -----------------------------------------------------------------


def test_resample_length_arithmetic(rng):
    assert resample(eeg(rng.standard_normal(1000), fs=100.0), 10.0).n_samples == 100
    assert resample(eeg(rng.standard_normal(125), fs=12.5), 10.0).n_samples == 100
    assert resample(eeg(rng.standard_normal(7), fs=10.0), 128.0).n_samples == round(7 * 12.8)
    with pytest.raises(ValueError):
        resample(eeg(np.zeros(3), fs=100.0), 10.0)
    with pytest.raises(ValueError):
        resample(eeg(np.zeros(3)), 0.0)


def test_downsampled_sine_matches_ideal():
    t = np.arange(1000) / 100.0
    y = resample(eeg(np.sin(2 * np.pi * t), fs=100.0), 10.0).data[0]
    ideal = np.sin(2 * np.pi * np.arange(100) / 10.0)
    assert np.corrcoef(y, ideal)[0, 1] >= 0.999


def test_downsampling_rejects_alias():
    # 40 Hz content would fold onto 0 Hz at fs=10 Hz without the anti-alias stage.
    # Checked away from the edges: the 100 Hz design spans about +-5 s.
    t = np.arange(4000) / 100.0
    y = resample(eeg(np.sin(2 * np.pi * 40 * t), fs=100.0), 10.0).data[0]
    assert np.abs(y[60:-60]).max() < 1e-4


def test_round_trip_band_limited(rng):
    fs = 10.0
    t = np.arange(600) / fs
    x = sum(rng.uniform(0.5, 1) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (0.3, 1.1, 2.7, 3.6))
    back = resample(resample(eeg(x, fs=fs), 128.0), 10.0).data[0]
    assert back.shape == x.shape
    rmse = np.sqrt(np.mean((back - x) ** 2))
    assert rmse < 0.01 * np.sqrt(np.mean(x**2))


def test_eeg_chain_output_rate(rng):
    out = preprocess_eeg(eeg(rng.standard_normal((21, 256 * 12))))
    assert out.fs == 128.0 and out.data.shape == (21, 128 * 12)


# -- optical density ------------------------------------------------------------


def raw(data):
    return SignalRecording(data, 10.0, Modality.FNIRS_RAW)


def test_od_identities(rng):
    assert not to_optical_density(raw(np.full((2, 50), 7.0))).data.any()
    I = np.ones((1, 10))
    I[0, 3] = 0.1  # mean becomes 0.91; scale so the reference is exactly 1
    I /= I.mean()
    od = to_optical_density(raw(I)).data
    assert od[0, 3] == pytest.approx(-np.log10(I[0, 3]))
    x = np.exp(rng.standard_normal((3, 40)))
    np.testing.assert_array_equal(to_optical_density(raw(x)).data, to_optical_density(raw(2 * x)).data)


def test_od_tenfold_drop_is_unit():
    I = np.full((1, 1000), 1.0)
    I[0, 0] = 0.1
    I *= 1.0 / I.mean()
    od = to_optical_density(raw(I)).data
    assert od[0, 0] - od[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_od_requires_raw(rng):
    with pytest.raises(ValueError, match="raw"):
        to_optical_density(eeg(rng.standard_normal((1, 5))))


# -- modified Beer-Lambert ------------------------------------------------------


def synth_od(hbo, hbr, extinction=None, dpf=6.0):
    od760, od850 = forward_mbll(hbo, hbr, (760.0, 850.0), extinction, 3.0, dpf)
    n = hbo.shape[0]
    return od_recording(
        np.concatenate([od760, od850]),
        [760.0] * n + [850.0] * n,
        [f"S{i}" for i in range(n)] * 2,
    )


def test_mbll_zero_in_zero_out():
    rec = od_recording(np.zeros((4, 5)), [760, 760, 850, 850], ["a", "b", "a", "b"])
    _, hbo, hbr = mbll(rec)
    assert not hbo.any() and not hbr.any()
    assert not mbll_to_hbt(rec).data.any()


def test_mbll_recovers_known_concentrations():
    hbo, hbr = np.full((1, 3), 1e-6), np.full((1, 3), 5e-7)
    _, got_o, got_r = mbll(synth_od(hbo, hbr))
    np.testing.assert_allclose(got_o, hbo, rtol=1e-10)
    np.testing.assert_allclose(got_r, hbr, rtol=1e-10)


def test_hbt_is_sum_and_halves_channels(rng):
    hbo, hbr = 1e-6 * rng.standard_normal((34, 20)), 1e-6 * rng.standard_normal((34, 20))
    rec = synth_od(hbo, hbr)
    sites, o, r = mbll(rec)
    hbt = mbll_to_hbt(rec)
    assert hbt.data.shape == (34, 20) and hbt.modality is Modality.FNIRS_HBT
    np.testing.assert_array_equal(hbt.data, o + r)
    assert hbt.sites == sites


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mbll_round_trip_random_matrices(seed):
    rng = np.random.default_rng(seed)
    while True:
        E = rng.uniform(100, 5000, (2, 2))
        if np.linalg.cond(E) < 1e3:
            break
    ext = {760.0: tuple(E[0]), 850.0: tuple(E[1])}
    hbo, hbr = 1e-6 * rng.standard_normal((2, 8)), 1e-6 * rng.standard_normal((2, 8))
    _, o, r = mbll(synth_od(hbo, hbr, ext, dpf={760: 6.2, 850: 5.1}), ext, dpf={760: 6.2, 850: 5.1})
    scale = max(np.abs(hbo).max(), np.abs(hbr).max())
    assert np.abs(o - hbo).max() < 1e-10 * scale
    assert np.abs(r - hbr).max() < 1e-10 * scale


def test_mbll_errors():
    unpaired = od_recording(np.zeros((3, 4)), [760, 850, 760], ["a", "a", "b"])
    with pytest.raises(ValueError, match="unpaired"):
        mbll(unpaired)
    rec = od_recording(np.zeros((2, 4)), [760, 850], ["a", "a"])
    with pytest.raises(ValueError, match="singular|ill-conditioned"):
        mbll(rec, extinction={760: (1.0, 2.0), 850: (2.0, 4.0)})
    assert set(DEFAULT_EXTINCTION) == {760.0, 850.0}


# -- epoching -------------------------------------------------------------------


def test_epoch_counts():
    assert epoch_count(1536, 128, 64) == 23
    assert epoch_count(768, 128, 64) == 11
    assert epoch_count(128, 128, 64) == 1
    assert epoch_count(127, 128, 64) == 0


def test_epoch_trial_layout(rng):
    rec = eeg(rng.standard_normal((21, 128 * 12)), fs=128.0, intervals=[(0, 6, "rest"), (6, 12, "task")])
    eps = epoch_signal(rec)
    assert [e.label for e in eps] == [0] * 11 + [1] * 11
    assert all(e.data.shape == (1, 21, 128) for e in eps)
    np.testing.assert_array_equal(eps[11].data[0], rec.data[:, 768:896])
    np.testing.assert_array_equal(eps[1].data[0], rec.data[:, 64:192])


def test_long_interval_and_exact_window(rng):
    rec = eeg(rng.standard_normal((2, 1536)), fs=128.0)
    assert len(epoch_signal(rec, [(0, 12, "task")])) == 23
    assert len(epoch_signal(rec, [(0, 1, "rest")])) == 1


def test_short_interval_warns(rng):
    rec = eeg(rng.standard_normal((2, 256)), fs=128.0)
    with pytest.warns(UserWarning, match="shorter"):
        assert epoch_signal(rec, [(0, 0.5, "rest")]) == []


def test_od10_epochs_have_ten_samples(rng):
    rec = SignalRecording(rng.standard_normal((68, 120)), 10.0, Modality.FNIRS_OD, intervals=[(0, 6, 0), (6, 12, 1)])
    eps = epoch_signal(rec)
    assert len(eps) == 22 and eps[0].data.shape == (1, 68, 10)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 300), st.integers(1, 300))
def test_epoch_count_property(L, W, S):
    rec = eeg(np.arange(L, dtype=float), fs=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eps = epoch_signal(rec, [(0, L, "task")], window_s=W, step_s=S)
    expected = (L - W) // S + 1 if L >= W else 0
    assert len(eps) == expected == epoch_count(L, W, S)
    for k, e in enumerate(eps):
        assert e.data[0, 0, 0] == k * S and e.data.shape[-1] == W


# -- standardization ------------------------------------------------------------


def test_standardize_train_split(rng):
    x = rng.normal(3.0, 5.0, (40, 1, 6, 16))
    z = standardize(x, channel_stats(x))
    assert np.abs(z.mean(axis=(0, 1, 3))).max() < 1e-9
    assert np.abs(z.std(axis=(0, 1, 3)) - 1).max() < 1e-6


def test_constant_channel_becomes_zero(rng):
    x = rng.standard_normal((10, 1, 3, 8))
    x[:, :, 1] = 4.2
    z = standardize(x, channel_stats(x))
    assert not z[:, :, 1].any()
    assert np.all(np.isfinite(z))


def test_test_split_uses_train_statistics(rng):
    train = rng.normal(0.0, 1.0, (50, 1, 4, 16))
    test = rng.normal(2.0, 3.0, (50, 1, 4, 16))
    stats = channel_stats(train)
    z = standardize(test, stats)
    # Recomputing from the test split itself would have produced (0, 1).
    np.testing.assert_allclose(z, (test - stats[0][:, None]) / stats[1][:, None])
    assert np.abs(z.mean(axis=(0, 1, 3)) - 0).min() > 0.5


# -- full chains ----------------------------------------------------------------


def fnirs_raw(rng, n_sites=34, n=150, fs=12.5):
    data = np.exp(0.01 * rng.standard_normal((2 * n_sites, n)))
    sites = [f"S{i}" for i in range(n_sites)] * 2
    return SignalRecording(data, fs, Modality.FNIRS_RAW, wavelengths=[760.0] * n_sites + [850.0] * n_sites, sites=sites)


@pytest.mark.parametrize("rep, shape, fs", [("od10", (68, 120), 10.0), ("od128", (68, 1536), 128.0), ("hbt", (34, 1536), 128.0)])
def test_fnirs_representations(rng, rep, shape, fs):
    out = preprocess_fnirs(fnirs_raw(rng), rep)
    assert out.data.shape == shape and out.fs == fs


def test_pipeline_is_deterministic(rng):
    rec = fnirs_raw(rng)
    a, b = preprocess_fnirs(rec, "hbt"), preprocess_fnirs(rec, "hbt")
    assert a.data.tobytes() == b.data.tobytes()


def test_unknown_representation(rng):
    with pytest.raises(ValueError, match="representation"):
        preprocess_fnirs(fnirs_raw(rng), "od20")


def test_prep_config_round_trip():
    cfg = PrepConfig(dpf=5.5, extinction={760.0: (1.0, 2.0), 850.0: (3.0, 1.0)})
    assert PrepConfig.from_dict(cfg.to_dict()) == cfg
