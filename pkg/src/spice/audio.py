"""Waveform loading and resampling.

Everything downstream works on mono float audio at a canonical 16 kHz rate.
The WAV reader is deliberately small: little-endian RIFF/WAVE, PCM 16-bit or
IEEE-float 32-bit, one or two channels. Stereo is downmixed by averaging.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000

# Kaiser-windowed sinc resampler: 64 taps per polyphase branch, beta 8.6.
_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


class WavError(Exception):
    """Base class for WAV reading failures."""


class WavHeaderError(WavError):
    """Malformed RIFF/WAVE structure; message names the offending field."""


class WavEncodingError(WavError):
    """Structurally valid file with an encoding this reader does not accept."""


class WavDataError(WavError):
    """Sample payload violates AudioClip invariants (e.g. NaN, empty data)."""


@dataclass
class AudioClip:
    """Mono waveform. Samples are dimensionless, nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _read_fmt_chunk(body: bytes) -> tuple[int, int, int, int]:
    if len(body) < 16:
        raise WavHeaderError(f"'fmt ' chunk too short ({len(body)} bytes)")
    code, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
    return code, channels, rate, bits


def load_wav(path: str | Path) -> AudioClip:
    """Load a RIFF/WAVE file as a mono AudioClip.

    Integer PCM is scaled by 1/32768; stereo is downmixed by channel
    averaging. Float samples outside [-1, 1] are accepted but reported
    through the module logger (the load report).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    raw = path.read_bytes()

    if len(raw) < 12:
        raise WavHeaderError(f"file too short for a RIFF header ({len(raw)} bytes)")
    if raw[0:4] != b"RIFF":
        raise WavHeaderError(f"bad RIFF magic {raw[0:4]!r}")
    if raw[8:12] != b"WAVE":
        raise WavHeaderError(f"bad WAVE form type {raw[8:12]!r}")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavHeaderError(f"chunk {cid!r} truncated: declares {size} bytes")
        if cid == b"fmt ":
            fmt = _read_fmt_chunk(body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavHeaderError("missing 'fmt ' chunk")
    if data is None:
        raise WavHeaderError("missing 'data' chunk")

    code, channels, rate, bits = fmt
    if code not in (1, 3):
        raise WavEncodingError(f"unsupported format code {code} (PCM=1, float=3)")
    if channels not in (1, 2):
        raise WavEncodingError(f"unsupported channel count {channels}")
    if code == 1 and bits != 16:
        raise WavEncodingError(f"unsupported PCM bit depth {bits} (need 16)")
    if code == 3 and bits != 32:
        raise WavEncodingError(f"unsupported float bit depth {bits} (need 32)")
    if rate <= 0:
        raise WavHeaderError(f"non-positive sample rate {rate}")

    if code == 1:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64)
        x /= 32768.0
    else:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)

    if channels == 2:
        x = x[: len(x) // 2 * 2].reshape(-1, 2).mean(axis=1)
    if len(x) == 0:
        raise WavDataError("empty data chunk")
    if not np.all(np.isfinite(x)):
        raise WavDataError("non-finite samples in data chunk")

    n_out = int(np.sum(np.abs(x) > 1.0))
    if n_out:
        log.warning("%s: %d samples outside [-1, 1]", path.name, n_out)

    return AudioClip(samples=x, sample_rate=int(rate), source_id=path.stem)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono 16-bit PCM. Values are clipped to [-1, 1) before scaling."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2")
    payload = pcm.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(hdr + payload)


def _design_lowpass(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    numtaps = 2 * (_TAPS_PER_PHASE // 2) * max_rate + 1
    # cutoff at the tighter of the two Nyquist limits, in units of the
    # upsampled Nyquist frequency; resample_poly compensates zero-stuffing gain
    return firwin(numtaps, 1.0 / max_rate, window=("kaiser", _KAISER_BETA))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to target_rate.

    Identity (bit-exact copy) when the rates already match; otherwise output
    length is ceil(n * target / source), preserving duration to within one
    sample period.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source_id)

    g = math.gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    h = _design_lowpass(up, down)
    y = resample_poly(clip.samples, up, down, window=h)
    return AudioClip(y, target_rate, clip.source_id)


def to_canonical(clip: AudioClip) -> AudioClip:
    return resample(clip, CANONICAL_RATE)
