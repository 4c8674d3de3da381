"""Time-frequency frontends: a fixed log-mel baseline and a learnable
Gabor filterbank with Gaussian lowpass pooling and per-channel energy
normalization (PCEN), with analytic gradients for every learnable parameter.

Forward pipeline per channel n:

1. complex Gabor FIR  g_n[t] = (env_n[t] / sum env_n) * exp(i 2 pi eta_n t / sr)
   with env_n[t] = exp(-t^2 / (2 sigma_n^2)),  t in [-(W-1)/2, (W-1)/2]
2. full-rate energy   E_n = |x * g_n|^2            ("same" zero-padded conv)
3. Gaussian lowpass (std pool_sigma_n, fixed kernel length W), decimate by hop
4. PCEN               M[k] = (1-s) M[k-1] + s E[k],  M[0] = E[0]
                      Y[k] = (E[k] / (eps + M[k])^alpha + delta)^root
                             - delta^root

The backward pass differentiates the exact forward computation, including
backprop-through-time over the PCEN smoother, and returns gradients for
center_freqs, bandwidth_sigmas, pool_sigmas, pcen_alpha, pcen_delta and
pcen_root. Gradients with respect to the input waveform are not needed
(the waveform is data, not a parameter) and are not computed.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .audio import AudioClip

LEARNABLE_FIELDS = (
    "center_freqs",
    "bandwidth_sigmas",
    "pool_sigmas",
    "pcen_alpha",
    "pcen_delta",
    "pcen_root",
)


def _workers() -> int:
    try:
        return max(1, int(os.environ["SPICE_THREADS"]))
    except (KeyError, ValueError):
        return os.cpu_count() or 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class GaborFrontendParams:
    center_freqs: np.ndarray      # Hz, one per channel
    bandwidth_sigmas: np.ndarray  # Gaussian envelope std, samples
    pool_sigmas: np.ndarray       # pooling lowpass std, samples
    pcen_alpha: np.ndarray
    pcen_delta: np.ndarray
    pcen_root: np.ndarray
    pcen_smooth: float = 0.04
    pcen_eps: float = 1e-6
    filter_len: int = 401
    hop: int = 160

    def __post_init__(self):
        for name in LEARNABLE_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def n_channels(self) -> int:
        return len(self.center_freqs)

    def validate(self, sample_rate: int) -> None:
        eta, sig, pool = self.center_freqs, self.bandwidth_sigmas, self.pool_sigmas
        if np.any(eta <= 0) or np.any(eta >= sample_rate / 2):
            raise ValueError("center_freqs must lie in (0, sample_rate/2)")
        if np.any(sig <= 0) or np.any(pool <= 0):
            raise ValueError("bandwidth and pooling sigmas must be positive")
        if np.any(self.pcen_alpha <= 0) or np.any(self.pcen_alpha > 1.5):
            raise ValueError("pcen_alpha must lie in (0, 1.5]")
        if np.any(self.pcen_delta <= 0):
            raise ValueError("pcen_delta must be positive")
        if np.any(self.pcen_root <= 0) or np.any(self.pcen_root > 1):
            raise ValueError("pcen_root must lie in (0, 1]")
        if not 0 < self.pcen_smooth < 1:
            raise ValueError("pcen_smooth must lie in (0, 1)")
        if self.pcen_eps <= 0:
            raise ValueError("pcen_eps must be positive")
        if self.filter_len % 2 != 1:
            raise ValueError("filter_len must be odd")

    def copy(self) -> "GaborFrontendParams":
        return replace(
            self, **{name: getattr(self, name).copy() for name in LEARNABLE_FIELDS}
        )

    def clamp_(self, sample_rate: int) -> None:
        """Project back into the invariant ranges (after an optimizer step)."""
        np.clip(self.center_freqs, 1.0, sample_rate / 2 - 1.0, out=self.center_freqs)
        np.clip(self.bandwidth_sigmas, 0.1, None, out=self.bandwidth_sigmas)
        np.clip(self.pool_sigmas, 0.1, None, out=self.pool_sigmas)
        np.clip(self.pcen_alpha, 1e-3, 1.5, out=self.pcen_alpha)
        np.clip(self.pcen_delta, 1e-3, None, out=self.pcen_delta)
        np.clip(self.pcen_root, 1e-3, 1.0, out=self.pcen_root)


@dataclass
class FeatureMap:
    values: np.ndarray  # [n_channels, n_frames]
    frame_rate: float


def n_frames_for(n_samples: int, hop: int) -> int:
    return (n_samples - 1) // hop + 1


def init_gabor_mel(
    n_channels: int = 40,
    sample_rate: int = 16000,
    fmin: float = 60.0,
    fmax: float = 7800.0,
) -> GaborFrontendParams:
    """Mel-spaced initialization.

    Center frequencies are the peaks of mel-spaced triangular bands on
    [fmin, fmax]; each envelope std is set so the Gabor magnitude-response
    FWHM matches the band's half-base width.
    """
    if not (0 < fmin < fmax <= sample_rate / 2):
        raise ValueError(f"need 0 < fmin < fmax <= sr/2, got ({fmin}, {fmax})")
    if n_channels < 2:
        raise ValueError("n_channels must be >= 2")
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_channels + 2)
    freqs = mel_to_hz(mels)
    eta = freqs[1:-1]
    band_fwhm = (freqs[2:] - freqs[:-2]) / 2.0
    sigmas = math.sqrt(2 * math.log(2)) * sample_rate / (np.pi * band_fwhm)
    hop = 160
    n = n_channels
    return GaborFrontendParams(
        center_freqs=eta,
        bandwidth_sigmas=sigmas,
        pool_sigmas=np.full(n, 0.4 * hop),
        pcen_alpha=np.full(n, 0.96),
        pcen_delta=np.full(n, 2.0),
        pcen_root=np.full(n, 0.5),
        pcen_smooth=0.04,
        pcen_eps=1e-6,
        filter_len=401,
        hop=hop,
    )


def gabor_filters(params: GaborFrontendParams, sample_rate: int, dtype=np.complex128):
    """Complex filter bank [n_channels, filter_len] plus envelope internals."""
    w = params.filter_len
    tt = np.arange(w, dtype=np.float64) - (w - 1) / 2
    sig = params.bandwidth_sigmas[:, None]
    env = np.exp(-(tt[None, :] ** 2) / (2 * sig**2))
    norm = env.sum(axis=1, keepdims=True)
    amp = env / norm
    phase = 2 * np.pi * params.center_freqs[:, None] * tt[None, :] / sample_rate
    g = (amp * np.exp(1j * phase)).astype(dtype)
    return g, amp, env, norm, phase, tt


def _pool_kernel(params: GaborFrontendParams):
    w = params.filter_len
    u = np.arange(w, dtype=np.float64) - (w - 1) / 2
    raw = np.exp(-(u[None, :] ** 2) / (2 * params.pool_sigmas[:, None] ** 2))
    total = raw.sum(axis=1, keepdims=True)
    return raw / total, raw, total, u


class _Cache:
    """Everything the backward pass needs from one forward evaluation."""

    __slots__ = (
        "params", "sample_rate", "x", "lengths", "n_frames", "t_pad",
        "z", "e_full", "e_hat", "m_hat", "g_ratio", "kernel", "kernel_raw",
        "kernel_total", "cdtype", "rdtype", "pool_s", "pool_w2", "pool_k",
    )


def _pool_strided(e_full: np.ndarray, kernel: np.ndarray, hop: int, w: int):
    """Gaussian pooling + decimation as hop-strided batched matmuls.

    e_full is channel-major [N, B, T]. Splitting the kernel tap index u into
    j*hop + p turns the decimated correlation into one channel-batched GEMM
    over p, followed by a sum of J shifted slices; the channel-major layout
    makes every reshape here zero-copy.
    """
    n, b, t_pad = e_full.shape
    c = (w - 1) // 2
    k_frames = (t_pad - 1) // hop + 1
    j_steps = -(-w // hop)  # ceil
    m_rows = k_frames + j_steps
    s = np.zeros((n, b, m_rows * hop), dtype=e_full.dtype)
    s[:, :, c : c + t_pad] = e_full
    s = s.reshape(n, b, m_rows, hop)
    w2 = np.zeros((n, j_steps * hop), dtype=e_full.dtype)
    w2[:, :w] = kernel
    w2 = w2.reshape(n, j_steps, hop)
    # r[n,b,m,j] = sum_p s[n,b,m,p] w2[n,j,p]
    r = np.matmul(
        s.reshape(n, b * m_rows, hop), w2.transpose(0, 2, 1)
    ).reshape(n, b, m_rows, j_steps)
    e_hat = np.zeros((n, b, k_frames), dtype=e_full.dtype)
    for j in range(j_steps):
        e_hat += r[:, :, j : j + k_frames, j]
    return e_hat, s, w2, (k_frames, j_steps, m_rows, c)


def _pool_strided_backward(d_ehat: np.ndarray, s: np.ndarray, w2: np.ndarray, geom):
    """d_ehat channel-major [N, B, K] -> (d_epad [N, B, M*hop], d_w2)."""
    k_frames, j_steps, m_rows, c = geom
    n, b, _ = d_ehat.shape
    hop = s.shape[3]
    dr = np.zeros((n, b, m_rows, j_steps), dtype=d_ehat.dtype)
    for j in range(j_steps):
        dr[:, :, j : j + k_frames, j] = d_ehat
    dr2 = dr.reshape(n, b * m_rows, j_steps)
    ds = np.matmul(dr2, w2).reshape(n, b, m_rows * hop)
    dw2 = np.matmul(dr2.transpose(0, 2, 1), s.reshape(n, b * m_rows, hop))
    return ds, dw2.reshape(n, j_steps * hop)


def _forward_batch(
    x: np.ndarray,
    lengths: np.ndarray,
    params: GaborFrontendParams,
    sample_rate: int,
    dtype=np.float64,
):
    """Forward over a zero-padded batch [B, T_pad].

    Returns (features [B, N, K_max], n_frames [B], cache). Frames past each
    item's own frame count are garbage and must be masked by the caller.
    Internally everything runs channel-major [N, B, ...] so the pooling and
    filter-gradient GEMMs never transpose large arrays.
    """
    rdtype = np.dtype(dtype)
    cdtype = np.complex64 if rdtype == np.float32 else np.complex128
    b, t_pad = x.shape
    n = params.n_channels
    w = params.filter_len
    c = (w - 1) // 2
    hop = params.hop

    g, *_ = gabor_filters(params, sample_rate, cdtype)

    lfft = sfft.next_fast_len(t_pad + w - 1, real=False)
    xf = sfft.fft(x.astype(rdtype, copy=False), lfft, axis=1, workers=_workers())
    gf = sfft.fft(g, lfft, axis=1, workers=_workers())
    z = sfft.ifft(
        gf[:, None, :] * xf[None, :, :], axis=2, overwrite_x=True, workers=_workers()
    )  # [N, B, L], kept full-length for the backward pass
    zv = z[:, :, c : c + t_pad]

    e_full = np.empty((n, b, t_pad), dtype=rdtype)
    np.multiply(zv.real, zv.real, out=e_full)
    e_full += zv.imag * zv.imag
    # zero the region past each clip's true end so "same"-conv semantics per
    # clip are exact inside a padded batch
    for i in range(b):
        if lengths[i] < t_pad:
            e_full[:, i, lengths[i] :] = 0.0

    kernel, kernel_raw, kernel_total, _ = _pool_kernel(params)
    kernel = kernel.astype(rdtype)
    e_hat, pool_s, pool_w2, pool_k = _pool_strided(e_full, kernel, hop, w)
    k_max = pool_k[0]

    s = params.pcen_smooth
    alpha = params.pcen_alpha[:, None, None].astype(rdtype)
    delta = params.pcen_delta[:, None, None].astype(rdtype)
    root = params.pcen_root[:, None, None].astype(rdtype)
    eps = rdtype.type(params.pcen_eps)

    m_hat = np.empty_like(e_hat)
    m_hat[:, :, 0] = e_hat[:, :, 0]
    one_minus_s = rdtype.type(1.0 - s)
    s_t = rdtype.type(s)
    for k in range(1, k_max):
        m_hat[:, :, k] = one_minus_s * m_hat[:, :, k - 1] + s_t * e_hat[:, :, k]

    g_ratio = e_hat / (eps + m_hat) ** alpha
    y_cm = (g_ratio + delta) ** root - delta**root
    y = np.ascontiguousarray(y_cm.transpose(1, 0, 2))  # [B, N, K]

    n_frames = (lengths - 1) // hop + 1

    cache = _Cache()
    cache.params = params
    cache.sample_rate = sample_rate
    cache.x = x.astype(rdtype, copy=False)
    cache.lengths = lengths
    cache.n_frames = n_frames
    cache.t_pad = t_pad
    cache.z = z
    cache.e_full = e_full
    cache.e_hat = e_hat
    cache.m_hat = m_hat
    cache.g_ratio = g_ratio
    cache.kernel = kernel
    cache.kernel_raw = kernel_raw
    cache.kernel_total = kernel_total
    cache.cdtype = cdtype
    cache.rdtype = rdtype
    cache.pool_s = pool_s
    cache.pool_w2 = pool_w2
    cache.pool_k = pool_k
    return y, n_frames, cache


def _backward_batch(cache: _Cache, d_y: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(d_y * Y) for every learnable parameter group.

    d_y is [B, N, K] like the forward output; internals are channel-major.
    """
    params = cache.params
    rdtype = cache.rdtype
    sr = cache.sample_rate
    b, n, k_max = d_y.shape
    w = params.filter_len
    c = (w - 1) // 2
    t_pad = cache.t_pad

    d_y = np.ascontiguousarray(d_y.transpose(1, 0, 2)).astype(rdtype, copy=False)
    # frames past each item's own count carry no meaning
    for i in range(b):
        if cache.n_frames[i] < k_max:
            d_y[:, i, cache.n_frames[i] :] = 0.0

    alpha = params.pcen_alpha[:, None, None].astype(rdtype)
    delta = params.pcen_delta[:, None, None].astype(rdtype)
    root = params.pcen_root[:, None, None].astype(rdtype)
    eps = rdtype.type(params.pcen_eps)
    s = params.pcen_smooth
    g_ratio, m_hat, e_hat = cache.g_ratio, cache.m_hat, cache.e_hat

    gpd = g_ratio + delta
    gpd_rm1 = gpd ** (root - 1.0)
    d_g = d_y * root * gpd_rm1
    d_delta = (d_y * (root * gpd_rm1 - root * delta ** (root - 1.0))).sum(axis=(1, 2))
    d_root = (d_y * (gpd**root * np.log(gpd) - delta**root * np.log(delta))).sum(
        axis=(1, 2)
    )
    em = eps + m_hat
    log_em = np.log(em)
    d_alpha = (d_g * (-g_ratio) * log_em).sum(axis=(1, 2))

    d_ehat = d_g * em ** (-alpha)
    d_m = d_g * (-alpha) * e_hat * em ** (-alpha - 1.0)
    # backprop through time over the smoother, full utterance
    m_bar = np.zeros((n, b), dtype=rdtype)
    one_minus_s = rdtype.type(1.0 - s)
    s_t = rdtype.type(s)
    for k in range(k_max - 1, 0, -1):
        m_bar = d_m[:, :, k] + one_minus_s * m_bar
        d_ehat[:, :, k] += s_t * m_bar
    m_bar = d_m[:, :, 0] + one_minus_s * m_bar
    d_ehat[:, :, 0] += m_bar  # M[0] = E[0]

    # pooling backward: batched GEMMs back to full rate + kernel gradients
    d_epad, d_w2 = _pool_strided_backward(d_ehat, cache.pool_s, cache.pool_w2, cache.pool_k)
    d_kernel = d_w2[:, :w].astype(np.float64)
    d_efull = d_epad[:, :, c : c + t_pad]
    for i in range(b):
        if cache.lengths[i] < t_pad:
            d_efull[:, i, cache.lengths[i] :] = 0.0

    # kernel -> pool_sigma
    kernel_raw, kernel_total = cache.kernel_raw, cache.kernel_total
    uu = np.arange(w, dtype=np.float64) - c
    kern64 = kernel_raw / kernel_total
    d_raw = (d_kernel - (d_kernel * kern64).sum(axis=1, keepdims=True)) / kernel_total
    d_pool_sigma = (
        d_raw * kernel_raw * uu[None, :] ** 2 / params.pool_sigmas[:, None] ** 3
    ).sum(axis=1)

    # energy -> complex conv output; dz sits at offset c inside the FFT
    # buffer, shifting the correlation extraction below by the same c
    lfft = cache.z.shape[2]
    d_z = np.empty((n, b, lfft), dtype=cache.cdtype)
    d_z[:, :, :c] = 0.0
    d_z[:, :, c + t_pad :] = 0.0
    d_z[:, :, c : c + t_pad] = (2.0 * d_efull) * cache.z[:, :, c : c + t_pad]

    # filter-tap gradients via one batched FFT correlation per channel:
    # dgc[u] = sum_{b,j} dz[b,j] x[b, j + c - u]
    xr = cache.x[:, ::-1]
    xrf = sfft.fft(xr.astype(rdtype, copy=False), lfft, axis=1, workers=_workers())
    dzf = sfft.fft(d_z, axis=2, overwrite_x=True, workers=_workers())
    prod = np.einsum("nbl,bl->nl", dzf, xrf.astype(cache.cdtype, copy=False))
    y2 = sfft.ifft(prod, axis=1, workers=_workers())
    dgc = y2[:, t_pad - 1 : t_pad - 1 + w].astype(np.complex128)

    # filter taps -> eta, sigma
    _, amp, env, norm, phase, tt = gabor_filters(params, sr)
    rot = dgc * np.exp(-1j * phase)  # dgc * conj(carrier)
    d_amp = rot.real
    d_phi = (amp * tt[None, :] * rot.imag).sum(axis=1)
    d_eta = d_phi * 2 * np.pi / sr

    sig = params.bandwidth_sigmas[:, None]
    d_env = env * tt[None, :] ** 2 / sig**3
    d_norm = d_env.sum(axis=1, keepdims=True)
    d_sigma = (d_amp * (d_env - amp * d_norm) / norm).sum(axis=1)

    return {
        "center_freqs": d_eta,
        "bandwidth_sigmas": d_sigma,
        "pool_sigmas": d_pool_sigma,
        "pcen_alpha": d_alpha.astype(np.float64),
        "pcen_delta": d_delta.astype(np.float64),
        "pcen_root": d_root.astype(np.float64),
    }


def gabor_forward(clip: AudioClip, params: GaborFrontendParams) -> FeatureMap:
    """Run the learnable frontend on one clip (float64)."""
    params.validate(clip.sample_rate)
    if len(clip.samples) == 0:
        raise ValueError("empty clip")
    x = clip.samples[None, :].astype(np.float64)
    lengths = np.array([len(clip.samples)])
    y, n_frames, _ = _forward_batch(x, lengths, params, clip.sample_rate)
    values = y[0, :, : n_frames[0]]
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values in frontend output")
    return FeatureMap(values=values, frame_rate=clip.sample_rate / params.hop)


def gabor_energies(clip: AudioClip, params: GaborFrontendParams) -> np.ndarray:
    """Pre-PCEN pooled energies [n_channels, n_frames] (diagnostic view)."""
    params.validate(clip.sample_rate)
    x = clip.samples[None, :].astype(np.float64)
    lengths = np.array([len(clip.samples)])
    _, n_frames, cache = _forward_batch(x, lengths, params, clip.sample_rate)
    return cache.e_hat[:, 0, : n_frames[0]]


def gabor_backward(
    clip: AudioClip, params: GaborFrontendParams, upstream_grad: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients of sum(upstream_grad * gabor_forward(clip))."""
    params.validate(clip.sample_rate)
    x = clip.samples[None, :].astype(np.float64)
    lengths = np.array([len(clip.samples)])
    y, n_frames, cache = _forward_batch(x, lengths, params, clip.sample_rate)
    k = int(n_frames[0])
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (params.n_channels, k):
        raise ValueError(
            f"upstream grad shape {upstream_grad.shape} does not match "
            f"feature map ({params.n_channels}, {k})"
        )
    d_y = np.zeros_like(y)
    d_y[0, :, :k] = upstream_grad
    return _backward_batch(cache, d_y)


# --- fixed log-mel baseline --------------------------------------------------

def mel_filterbank(
    n_mels: int, n_fft: int, sample_rate: int, fmin: float = 60.0, fmax: float = 7800.0
) -> np.ndarray:
    """Triangular mel filters on rfft bins, area-normalized per band."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    pts = mel_to_hz(mels)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (bins - lo) / max(ctr - lo, 1e-12)
        down = (hi - bins) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    fb /= np.maximum(fb.sum(axis=1, keepdims=True), 1e-12)
    return fb


def logmel_forward(
    clip: AudioClip, n_mels: int = 40, win: int = 400, hop: int = 160
) -> FeatureMap:
    """Magnitude STFT (Hann) -> triangular mel bank on [60, 7800] Hz ->
    log(x + 1e-6)."""
    if win < hop:
        raise ValueError("win must be >= hop")
    if n_mels < 2:
        raise ValueError("n_mels must be >= 2")
    x = clip.samples
    if len(x) < win:
        raise ValueError(f"clip of {len(x)} samples shorter than one window ({win})")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win)[None, :]
    mag = np.abs(np.fft.rfft(frames, axis=1))
    fb = mel_filterbank(n_mels, win, clip.sample_rate)
    feats = np.log(fb @ mag.T + 1e-6)
    return FeatureMap(values=feats, frame_rate=clip.sample_rate / hop)


# --- SPFM debug dump ----------------------------------------------------------

SPFM_MAGIC = b"SPFM"
SPFM_VERSION = 1


def write_featuremap(fm: FeatureMap, path: str | Path) -> None:
    n, k = fm.values.shape
    blob = SPFM_MAGIC + struct.pack("<III", SPFM_VERSION, n, k)
    blob += fm.values.astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def read_featuremap(path: str | Path, frame_rate: float = 100.0) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != SPFM_MAGIC:
        raise ValueError(f"bad SPFM magic {raw[:4]!r}")
    version, n, k = struct.unpack_from("<III", raw, 4)
    if version != SPFM_VERSION:
        raise ValueError(f"unsupported SPFM version {version}")
    need = 16 + 4 * n * k
    if len(raw) < need:
        raise ValueError("truncated SPFM file")
    vals = np.frombuffer(raw, dtype="<f4", count=n * k, offset=16).reshape(n, k)
    return FeatureMap(values=vals.astype(np.float64), frame_rate=frame_rate)
