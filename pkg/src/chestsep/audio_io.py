"""
Mono audio buffers, WAV I/O, antialiased resampling and segment extraction.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import DataError

#: Working sample rate (Hz) assumed by the default configuration.
WORKING_RATE = 4000

# antialiasing design: cutoff and transition width as fractions of the lower rate
_CUTOFF_FRACTION = 0.45
_TRANSITION_FRACTION = 0.1
_STOPBAND_DB = 80.0


class AudioFileNotFoundError(DataError, FileNotFoundError):
    pass


class UnsupportedEncodingError(DataError):
    pass


class EmptyAudioError(DataError):
    pass


class SegmentRangeError(DataError, ValueError):
    pass


@dataclass
class AudioBuffer:
    """Mono signal with its sample rate.

    Parameters
    ----------
    samples : ndarray
        Real amplitudes, nominally in [-1, 1].
    sample_rate : float
        Samples per second.
    """

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds a 1-D mono signal")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy(), self.sample_rate)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(float) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(float) / 32768.0
    if data.dtype == np.int32:
        # 24-bit PCM is returned left-justified in int32
        return data.astype(float) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(float)
    raise UnsupportedEncodingError(f"unsupported sample type {data.dtype}")


def read_wav(path) -> AudioBuffer:
    """Read a PCM or float WAV file as a mono buffer scaled to [-1, 1].

    Multi-channel files are averaged across channels.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioFileNotFoundError(f"no such WAV file: {path}")
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError, UnboundLocalError, struct.error) as exc:
        # malformed headers surface as assorted exceptions inside scipy
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise EmptyAudioError(f"{path} contains no samples")
    return AudioBuffer(samples, rate)


def write_wav(path, buf: AudioBuffer) -> int:
    """Write `buf` as 16-bit PCM mono.

    Samples outside [-1, 1] saturate.

    Returns
    -------
    int
        Number of clipped samples.
    """
    x = buf.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    scaled = np.round(np.clip(x, -1.0, 1.0) * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype(np.int16)
    rate = buf.sample_rate
    if float(rate) != int(rate):
        raise ValueError("WAV files need an integer sample rate")
    scipy.io.wavfile.write(os.fspath(path), int(rate), pcm)
    return clipped


def antialias_filter(up: int, down: int, rate: float) -> np.ndarray:
    """Kaiser-windowed sinc lowpass for rational resampling by up/down.

    The filter runs at ``rate * up``; its cutoff sits at 0.45 of the lower
    of the two rates with the stopband starting at half of that rate.
    """
    fast = rate * up
    low = min(rate, rate * up / down)
    width = _TRANSITION_FRACTION * low
    numtaps, beta = scipy.signal.kaiserord(_STOPBAND_DB, width / (0.5 * fast))
    numtaps |= 1  # odd length keeps the delay integral
    return scipy.signal.firwin(numtaps, _CUTOFF_FRACTION * low, window=("kaiser", beta), fs=fast)


def resample(buf: AudioBuffer, target_rate: float) -> AudioBuffer:
    """Resample to `target_rate` with a polyphase windowed-sinc filter.

    When downsampling, content above the new Nyquist frequency is attenuated
    by at least 60 dB. Equal rates return an unmodified copy.
    """
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    if target_rate == buf.sample_rate:
        return buf.copy()
    ratio = Fraction(target_rate) / Fraction(buf.sample_rate)
    ratio = ratio.limit_denominator(10000)
    up, down = ratio.numerator, ratio.denominator
    h = antialias_filter(up, down, buf.sample_rate)
    # periodic extension at the ends, as FFT resampling would assume; zero
    # padding turns a truncated in-band edge into broadband leakage
    y = scipy.signal.resample_poly(buf.samples, up, down, window=h, padtype="wrap")
    return AudioBuffer(y, target_rate)


def extract_segment(buf: AudioBuffer, start: float, duration: float) -> AudioBuffer:
    """Copy ``round(duration * rate)`` samples starting at ``round(start * rate)``."""
    offset = int(round(start * buf.sample_rate))
    count = int(round(duration * buf.sample_rate))
    if start < 0 or duration < 0 or offset + count > len(buf):
        raise SegmentRangeError(
            f"window [{start}, {start + duration}] s outside a {buf.duration:.3f} s buffer"
        )
    return AudioBuffer(buf.samples[offset:offset + count].copy(), buf.sample_rate)
