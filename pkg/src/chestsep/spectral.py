"""
STFT analysis/synthesis, soft masks and spectrogram export.

Frames are taken without padding: frame ``t`` covers samples
``[t * hop, t * hop + window_length)`` and trailing samples that do not fill
a window are dropped. Synthesis is weighted overlap-add normalised by the
summed squared window, which reconstructs exactly wherever that sum is at
least a tenth of its interior value (everything but the outermost part of
the first and last windows).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .audio_io import AudioBuffer
from .errors import ShapeError

#: Denominator floor for mask ratios.
MASK_EPS = 1e-12
#: Lowest overlap-add normaliser, relative to its interior value.
EDGE_FLOOR = 0.1


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 2048
    overlap_fraction: float = 0.75
    window_kind: str = "hann"
    fft_length: int | None = None

    def __post_init__(self):
        if self.fft_length is None:
            object.__setattr__(self, "fft_length", self.window_length)
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.fft_length < self.window_length:
            raise ValueError("fft_length must be >= window_length")
        hop = self.window_length * (1 - self.overlap_fraction)
        if hop < 1 or abs(hop - round(hop)) > 1e-9:
            raise ValueError(f"hop {hop} is not a positive integer")

    @property
    def hop(self) -> int:
        return int(round(self.window_length * (1 - self.overlap_fraction)))

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1

    def window(self) -> np.ndarray:
        # periodic (DFT-even) taper, which is what makes Hann at 75% overlap COLA
        return scipy.signal.get_window(self.window_kind, self.window_length, fftbins=True)

    def cola_deviation(self) -> float:
        """Max relative deviation of the interior squared-window overlap-add from its mean."""
        w2 = self.window() ** 2
        hop = self.hop
        n = self.window_length
        total = np.zeros(n)
        for k in range(-(n // hop) - 1, n // hop + 2):
            lo, hi = max(0, k * hop), min(n, k * hop + n)
            if lo < hi:
                total[lo:hi] += w2[lo - k * hop:hi - k * hop]
        return float(np.max(np.abs(total / total.mean() - 1)))

    def to_dict(self) -> dict:
        return {
            "window_length": self.window_length,
            "overlap_fraction": self.overlap_fraction,
            "window_kind": self.window_kind,
            "fft_length": self.fft_length,
        }


@dataclass
class Spectrogram:
    """Magnitude/phase pair of shape (F, T)."""

    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: float = 4000
    n_samples: int | None = None

    @property
    def shape(self):
        return self.magnitude.shape

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.config.n_bins) * self.sample_rate / self.config.fft_length

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@dataclass
class Mask:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mask entries must lie in [0, 1]")


def n_frames(n_samples: int, cfg: StftConfig) -> int:
    return (n_samples - cfg.window_length) // cfg.hop + 1


def stft(buf: AudioBuffer, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    x = buf.samples
    if x.size < cfg.window_length:
        raise ShapeError(f"signal of {x.size} samples is shorter than one {cfg.window_length}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[::cfg.hop]
    spec = np.fft.rfft(frames * cfg.window(), n=cfg.fft_length, axis=1).T
    return Spectrogram(np.abs(spec), np.angle(spec), cfg, buf.sample_rate, x.size)


def istft(spec: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    The output spans the analysed region, ``(T - 1) * hop + window_length``
    samples.
    """
    cfg = spec.config
    if spec.magnitude.shape != spec.phase.shape or spec.magnitude.shape[0] != cfg.n_bins:
        raise ShapeError(
            f"spectrogram {spec.magnitude.shape} / phase {spec.phase.shape} "
            f"inconsistent with {cfg.n_bins} bins"
        )
    n_t = spec.magnitude.shape[1]
    win = cfg.window()
    frames = np.fft.irfft(spec.complex(), n=cfg.fft_length, axis=0)[:cfg.window_length].T
    length = (n_t - 1) * cfg.hop + cfg.window_length
    out = np.zeros(length)
    norm = np.zeros(length)
    w2 = win ** 2
    for t in range(n_t):
        lo = t * cfg.hop
        out[lo:lo + cfg.window_length] += frames[t] * win
        norm[lo:lo + cfg.window_length] += w2
    # near both ends the summed squared window tends to zero; clamping it
    # fades the edges instead of amplifying whatever a mask left there
    out /= np.maximum(norm, EDGE_FLOOR * norm.max())
    return AudioBuffer(out, spec.sample_rate)


def apply_mask(spec: Spectrogram, m: Mask) -> Spectrogram:
    values = m.values if isinstance(m, Mask) else np.asarray(m)
    if values.shape != spec.magnitude.shape:
        raise ShapeError(f"mask {values.shape} does not match spectrogram {spec.magnitude.shape}")
    return Spectrogram(spec.magnitude * values, spec.phase.copy(), spec.config,
                       spec.sample_rate, spec.n_samples)


def build_masks(dictionary, activations, eps: float = MASK_EPS) -> dict[str, Mask]:
    """Soft masks ``W_b H_b / W H`` for every non-empty block.

    The floor is spread evenly over the blocks, ``(W_b H_b + eps / B) /
    (W H + eps)``, so the masks stay an exact partition of unity even on
    silent bins, where each block receives ``1 / B``.
    """
    if [b for b in dictionary.blocks] != [b for b in activations.blocks]:
        raise ShapeError(f"block mismatch: {dictionary.blocks} vs {activations.blocks}")
    parts = {}
    for name, _ in dictionary.blocks:
        w, h = dictionary.block(name), activations.block(name)
        if w.shape[1]:
            parts[name] = w @ h
    if not parts:
        raise ShapeError("no non-empty blocks")
    total = sum(parts.values())
    share = eps / len(parts)
    denom = total + eps
    return {name: Mask(np.clip((p + share) / denom, 0.0, 1.0)) for name, p in parts.items()}


def write_matrix_csv(path, matrix: np.ndarray, frequencies: np.ndarray | None = None):
    """Dump an (F, T) matrix, one row per frequency bin.

    The first column holds the bin frequency in Hz when `frequencies` is
    given; the header names it ``freq_hz`` followed by ``frame_0 ...``.
    """
    matrix = np.atleast_2d(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        head = [f"col_{j}" if frequencies is None else f"frame_{j}" for j in range(matrix.shape[1])]
        if frequencies is not None:
            head = ["freq_hz"] + head
        writer.writerow(head)
        for i, row in enumerate(matrix):
            cells = [repr(float(v)) for v in row]
            if frequencies is not None:
                cells = [repr(float(frequencies[i]))] + cells
            writer.writerow(cells)


def read_matrix_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], np.array(rows[1:], dtype=float)
    if head and head[0] == "freq_hz":
        return body[:, 1:], body[:, 0]
    return body, None


def plot_matrix_png(path, matrix: np.ndarray, sample_rate: float | None = None,
                    hop: int | None = None, title: str = "", db: bool = True):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = 20 * np.log10(np.maximum(matrix, 1e-10)) if db else matrix
    fig, ax = plt.subplots(figsize=(8, 4))
    extent = None
    if sample_rate and hop:
        extent = [0, matrix.shape[1] * hop / sample_rate, 0, sample_rate / 2]
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("Frequency (Hz)")
    im = ax.imshow(data, origin="lower", aspect="auto", extent=extent, cmap="magma")
    fig.colorbar(im, ax=ax, label="dB" if db else "")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
