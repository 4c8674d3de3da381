import numpy as np
import pytest

from spice.audio import AudioClip
from spice.frontend import (
    LEARNABLE_FIELDS,
    FeatureMap,
    gabor_backward,
    gabor_energies,
    gabor_forward,
    hz_to_mel,
    init_gabor_mel,
    logmel_forward,
    mel_to_hz,
    n_frames_for,
    read_featuremap,
    write_featuremap,
)

SR = 16000


def _clip(x, sr=SR):
    return AudioClip(np.asarray(x, dtype=np.float64), sr, "t")


def _rand_clip(seed, seconds=0.2, amp=0.1):
    rng = np.random.default_rng(seed)
    return _clip(rng.normal(0, amp, int(seconds * SR)))


# --- initialization ----------------------------------------------------------

def test_mel_formula_at_1khz():
    assert hz_to_mel(1000.0) == pytest.approx(999.98554, abs=1e-3)


def test_mel_inverse_identity():
    assert mel_to_hz(hz_to_mel(4000.0)) == pytest.approx(4000.0, rel=1e-6)


def test_init_two_channels_ordered():
    fmax = 4000.0
    p = init_gabor_mel(2, SR, fmin=fmax / 2, fmax=fmax)
    assert p.center_freqs[0] < p.center_freqs[1]
    assert np.all(p.center_freqs > fmax / 2)
    assert np.all(p.center_freqs < fmax)


def test_init_defaults():
    p = init_gabor_mel(40, SR)
    assert p.n_channels == 40
    assert np.all(np.diff(p.center_freqs) > 0)
    assert p.filter_len == 401 and p.hop == 160
    assert np.all(p.pool_sigmas == 0.4 * 160)
    assert np.all(p.pcen_alpha == 0.96)
    assert np.all(p.pcen_delta == 2.0)
    assert np.all(p.pcen_root == 0.5)
    assert p.pcen_smooth == 0.04 and p.pcen_eps == 1e-6
    p.validate(SR)


def test_init_rejects_bad_range():
    with pytest.raises(ValueError):
        init_gabor_mel(8, SR, fmin=0.0, fmax=8000.0)
    with pytest.raises(ValueError):
        init_gabor_mel(8, SR, fmin=100.0, fmax=9000.0)
    with pytest.raises(ValueError):
        init_gabor_mel(1, SR)


# --- forward -----------------------------------------------------------------

def test_zero_input_gives_zero_features():
    p = init_gabor_mel(8, SR)
    fm = gabor_forward(_clip(np.zeros(4000)), p)
    assert np.all(fm.values == 0.0)


def test_sine_at_center_freq_peaks_its_channel():
    p = init_gabor_mel(12, SR)
    for j in (2, 6, 10):
        f = p.center_freqs[j]
        t = np.arange(int(0.3 * SR)) / SR
        clip = _clip(0.2 * np.sin(2 * np.pi * f * t))
        energies = gabor_energies(clip, p)
        assert int(np.argmax(energies.mean(axis=1))) == j


def test_pcen_steady_state():
    # constant energy, alpha = 1, eps -> 0: Y -> (1 + delta)^r - delta^r
    p = init_gabor_mel(4, SR)
    p.pcen_alpha[:] = 1.0
    p.pcen_eps = 1e-12
    t = np.arange(int(2.5 * SR)) / SR
    clip = _clip(0.3 * np.sin(2 * np.pi * p.center_freqs[1] * t))
    fm = gabor_forward(clip, p)
    assert fm.values.shape[1] >= 200
    expected = (1.0 + p.pcen_delta[1]) ** p.pcen_root[1] - p.pcen_delta[1] ** p.pcen_root[1]
    tail = fm.values[1, -22:-2]  # last frames see the zero-padded edge
    assert np.max(np.abs(tail - expected)) < 1e-3


def test_amplitude_scaling_squares_energy():
    p = init_gabor_mel(6, SR)
    clip = _rand_clip(3)
    e1 = gabor_energies(clip, p)
    e2 = gabor_energies(_clip(clip.samples * 3.0), p)
    assert np.allclose(e2, 9.0 * e1, rtol=1e-12)


def test_frame_count_is_pure_function_of_length():
    p = init_gabor_mel(4, SR)
    for n in (1, 159, 160, 161, 3200, 4001):
        fm = gabor_forward(_clip(np.random.default_rng(n).normal(0, 0.1, n)), p)
        assert fm.values.shape == (4, n_frames_for(n, p.hop))
        assert fm.frame_rate == SR / p.hop


# --- backward ----------------------------------------------------------------

def test_zero_upstream_gives_zero_grads():
    p = init_gabor_mel(6, SR)
    clip = _rand_clip(0)
    fm = gabor_forward(clip, p)
    grads = gabor_backward(clip, p, np.zeros_like(fm.values))
    for name in LEARNABLE_FIELDS:
        assert np.all(grads[name] == 0.0)


def test_grad_linearity_in_upstream():
    p = init_gabor_mel(6, SR)
    clip = _rand_clip(1)
    fm = gabor_forward(clip, p)
    up = np.random.default_rng(2).normal(size=fm.values.shape)
    g1 = gabor_backward(clip, p, up)
    g2 = gabor_backward(clip, p, 2.0 * up)
    for name in LEARNABLE_FIELDS:
        assert np.allclose(g2[name], 2.0 * g1[name], rtol=1e-12, atol=0)


def test_backward_shape_mismatch():
    p = init_gabor_mel(6, SR)
    clip = _rand_clip(1)
    with pytest.raises(ValueError, match="shape"):
        gabor_backward(clip, p, np.zeros((6, 3)))


def _fd_check(seed, n_channels=6, picks=2):
    rng = np.random.default_rng(seed)
    clip = _clip(rng.normal(0, 0.1, 3200))
    p = init_gabor_mel(n_channels, SR)
    fm = gabor_forward(clip, p)
    up = rng.normal(size=fm.values.shape)
    grads = gabor_backward(clip, p, up)

    def loss(q):
        return float(np.sum(up * gabor_forward(clip, q).values))

    worst = 0.0
    for name in LEARNABLE_FIELDS:
        arr = getattr(p, name)
        for idx in rng.choice(len(arr), size=min(picks, len(arr)), replace=False):
            h = 1e-4 * abs(arr[idx])
            q1, q2 = p.copy(), p.copy()
            getattr(q1, name)[idx] += h
            getattr(q2, name)[idx] -= h
            fd = (loss(q1) - loss(q2)) / (2 * h)
            an = grads[name][idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
            worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    assert _fd_check(seed) < 1e-4


# --- log-mel baseline --------------------------------------------------------

def test_logmel_zero_clip():
    fm = logmel_forward(_clip(np.zeros(1600)), n_mels=8)
    assert np.allclose(fm.values, np.log(1e-6))


def test_logmel_white_noise_flat():
    rng = np.random.default_rng(42)
    clip = _clip(rng.normal(0, 0.1, 4 * SR))
    fm = logmel_forward(clip, n_mels=20)
    means_db = 20 * fm.values.mean(axis=1) / np.log(10)
    assert means_db.max() - means_db.min() < 3.0


def test_logmel_sine_argmax_band():
    t = np.arange(SR) / SR
    clip = _clip(0.3 * np.sin(2 * np.pi * 1000.0 * t))
    n_mels = 20
    fm = logmel_forward(clip, n_mels=n_mels)
    peak = int(np.argmax(fm.values.mean(axis=1)))
    # band containing 1 kHz according to the shared mel spacing
    pts = mel_to_hz(np.linspace(hz_to_mel(60.0), hz_to_mel(7800.0), n_mels + 2))
    containing = [m for m in range(n_mels) if pts[m] < 1000.0 < pts[m + 2]]
    assert peak in containing


def test_logmel_too_short():
    with pytest.raises(ValueError, match="shorter"):
        logmel_forward(_clip(np.zeros(100)), win=400)


# --- SPFM dump ---------------------------------------------------------------

def test_spfm_roundtrip(tmp_path):
    fm = FeatureMap(np.random.default_rng(0).normal(size=(5, 9)).astype(np.float32).astype(np.float64), 100.0)
    p = tmp_path / "m.spfm"
    write_featuremap(fm, p)
    back = read_featuremap(p)
    assert back.values.shape == (5, 9)
    assert np.array_equal(back.values, fm.values)
    raw = bytearray(p.read_bytes())
    assert raw[:4] == b"SPFM"
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_featuremap(p)
