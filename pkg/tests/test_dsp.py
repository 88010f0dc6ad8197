"""Front-end contracts: decimation fidelity, mel spectrogram geometry, the
power-scaling law, channel statistics, and amplitude envelopes."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonolearn.dsp import (AudioClip, ChannelStats, SpectrogramNormalizer,
                           amplitude_envelope, design_antialias_fir,
                           fit_channel_stats, hz_to_mel, mel_filterbank,
                           mel_spectrogram, mel_to_hz, pad_clip,
                           preprocess_clip, resample_down)
from sonolearn.ssl import normalize_batch
from sonolearn.synth import simulate


def sine_clip(freq, rate=44100, seconds=1.0, channels=1):
    t = np.arange(int(rate * seconds)) / rate
    x = np.sin(2 * np.pi * freq * t)
    return AudioClip(np.tile(x, (channels, 1)).astype(np.float32), rate)


def tone_amplitude(samples, freq, rate):
    """Amplitude of the `freq` component via quadrature projection."""
    x = samples.astype(np.float64)
    t = np.arange(x.size) / rate
    c = 2 * np.mean(x * np.cos(2 * np.pi * freq * t))
    s = 2 * np.mean(x * np.sin(2 * np.pi * freq * t))
    return float(np.hypot(c, s))


def test_factor_one_is_near_identity():
    clip = sine_clip(1000.0)
    out = resample_down(clip, 1)
    assert out.sample_rate == 44100
    ref = tone_amplitude(clip.samples[0], 1000.0, 44100)
    got = tone_amplitude(out.samples[0], 1000.0, 44100)
    assert abs(got - ref) / ref < 0.01


def test_one_khz_sine_survives_decimation():
    out = resample_down(sine_clip(1000.0), 4)
    assert out.sample_rate == 11025
    amp = tone_amplitude(out.samples[0], 1000.0, 11025)
    assert abs(amp - 1.0) < 0.01


def test_stopband_rejection_above_nyquist():
    # 6 kHz sits above the 11025/2 Hz target Nyquist and must be crushed.
    out = resample_down(sine_clip(6000.0), 4)
    rms = float(np.sqrt(np.mean(out.samples.astype(np.float64) ** 2)))
    attenuation_db = -20 * np.log10(max(rms / np.sqrt(0.5), 1e-12))
    assert attenuation_db > 40.0


def test_fir_is_symmetric_unit_dc():
    taps = design_antialias_fir(4)
    assert taps.shape == (127,)
    assert np.allclose(taps, taps[::-1])
    assert abs(taps.sum() - 1.0) < 1e-6


def test_pad_clip_pads_and_truncates():
    clip = AudioClip(np.ones((1, 10), dtype=np.float32), 44100)
    longer = pad_clip(clip, 16)
    assert longer.samples.shape == (1, 16)
    assert np.all(longer.samples[:, 10:] == 0)
    shorter = pad_clip(clip, 4)
    assert shorter.samples.shape == (1, 4)


def test_preprocess_yields_four_seconds_at_target_rate():
    clip = simulate("rattle", [1.0, 1.0, 2], repeat_seed=0)
    out = preprocess_clip(clip)
    assert out.sample_rate == 11025
    assert out.samples.shape == (1, 44100)
    assert out.samples.dtype == np.float64  # precision kept for scaling law


@pytest.mark.parametrize("task_id,channels", [("rattle", 1), ("swatter", 2)])
def test_mel_shape_contract(task_id, channels):
    action = {"rattle": [1.0, 1.0, 2], "swatter": [1.0, 1.0, 1.0]}[task_id]
    spec = mel_spectrogram(preprocess_clip(simulate(task_id, action, 0)))
    assert spec.values.shape == (channels, 16, 274)
    assert np.all(spec.values >= 0)


def test_power_scaling_law():
    clip = preprocess_clip(simulate("rattle", [1.0, 1.0, 2], repeat_seed=1))
    base = mel_spectrogram(clip).values
    scaled = mel_spectrogram(AudioClip(clip.samples * 3.0, clip.sample_rate)).values
    denom = np.maximum(np.abs(base) * 9.0, 1e-12)
    assert np.max(np.abs(scaled - 9.0 * base) / denom) < 1e-5


def test_mel_scale_round_trip():
    f = np.array([50.0, 440.0, 1000.0, 5000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12)


def test_filterbank_geometry():
    fb = mel_filterbank()
    assert fb.shape == (16, 201)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_channel_stats_normalize_batch(rattle_train):
    specs, _, stats = rattle_train
    normed = normalize_batch(specs, stats)
    assert normed.dtype == np.float32
    assert abs(float(normed.mean())) < 1e-4
    assert abs(float(normed.std()) - 1.0) < 1e-3


def test_channel_stats_std_floor():
    flat = np.zeros((3, 1, 16, 274), dtype=np.float32)
    stats = fit_channel_stats(flat)
    assert stats.std[0] == pytest.approx(1e-6)
    assert np.all(normalize_batch(flat, stats) == 0)


def test_channel_stats_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        fit_channel_stats([])


def test_spectrogram_normalizer_matches_function(rattle_train):
    specs, _, stats = rattle_train
    tf = SpectrogramNormalizer().fit(specs)
    assert np.allclose(tf.transform(specs), normalize_batch(specs, stats))
    assert "std_floor" in tf.get_params()


def test_envelope_shape_and_tail():
    clip = simulate("rattle", [1.0, 1.0, 2], repeat_seed=2)
    env = amplitude_envelope(clip)
    assert env.values.shape == (1, 176400 // 256)
    assert env.frame_len == 256


def test_envelope_frame_longer_than_clip_rejected():
    clip = AudioClip(np.zeros((1, 100), dtype=np.float32), 44100)
    with pytest.raises(ValueError, match="exceeds"):
        amplitude_envelope(clip, frame_len=256)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(min_value=0.0, max_value=50.0),
       seed=st.integers(min_value=0, max_value=999))
def test_envelope_scales_linearly(alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 1024)).astype(np.float32)
    base = amplitude_envelope(AudioClip(x, 44100), frame_len=64).values
    scaled = amplitude_envelope(AudioClip(x * alpha, 44100), frame_len=64).values
    assert np.allclose(scaled, alpha * base, rtol=1e-5, atol=1e-7)
