"""
Seeded synthetic heart, lung and noise signals with exact ground truth.

Heart sounds are S1/S2 pairs of exponentially damped tones, lung sounds are
band-limited noise shaped by a breathing envelope, and noise comes in three
flavours: white, babble-like (several amplitude-modulated noise bands) and
transient bursts. Each source draws from its own random stream derived from
the mix seed, so changing one source never perturbs another.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .audio_io import WORKING_RATE, AudioBuffer
from .errors import DataError

NOISE_KINDS = ("none", "white", "babble", "transient", "mixed")

# stream ids for np.random.default_rng([seed, stream])
_HEART, _LUNG, _NOISE, _PRESET = 1, 2, 3, 4


@dataclass(frozen=True)
class HeartSpec:
    rate_bpm: float = 120.0
    amplitude: float = 0.1          # RMS of the generated signal
    s1_s2_spacing: float | None = None  # seconds; None -> 0.35 of the beat period
    decay: float = 0.06             # time constant of the damped tones (s)
    s1_freq: float = 90.0
    s2_freq: float = 110.0
    s2_gain: float = 0.6

    def spacing(self) -> float:
        return self.s1_s2_spacing if self.s1_s2_spacing is not None else 0.35 * 60.0 / self.rate_bpm


@dataclass(frozen=True)
class LungSpec:
    rate_bpm: float = 40.0          # breaths per minute
    ie_ratio: float = 1 / 1.5       # inspiration : expiration duration
    center: float = 350.0
    bandwidth: float = 300.0
    amplitude: float = 0.1          # RMS
    depth: float = 1.0              # breathing modulation depth in [0, 1]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "mixed"
    snr_db: float = 0.0             # heart+lung power over noise power

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")


@dataclass(frozen=True)
class MixSpec:
    heart: HeartSpec = field(default_factory=HeartSpec)
    lung: LungSpec = field(default_factory=LungSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    duration: float = 10.0
    sample_rate: float = WORKING_RATE
    seed: int = 0

    def __post_init__(self):
        if not 70 <= self.heart.rate_bpm <= 220:
            raise ValueError("heart rate must lie in 70-220 bpm")
        if not self.lung.rate_bpm > 0:
            raise ValueError("breathing rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixSpec":
        return cls(HeartSpec(**d["heart"]), LungSpec(**d["lung"]), NoiseSpec(**d["noise"]),
                   d["duration"], d["sample_rate"], d["seed"])


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def _n(spec: MixSpec) -> int:
    return int(round(spec.duration * spec.sample_rate))


def _scale_rms(x, rms):
    p = np.sqrt(np.mean(x ** 2))
    return x * (rms / p) if p > 0 else x


def _beat_offset(spec: MixSpec) -> float:
    period = 60.0 / spec.heart.rate_bpm
    return float(_rng(spec.seed, _HEART).random()) * period


def beat_times(spec: MixSpec) -> np.ndarray:
    """S1 onset times (s) inside the segment."""
    period = 60.0 / spec.heart.rate_bpm
    t = _beat_offset(spec) + period * np.arange(int(np.ceil(spec.duration / period)) + 1)
    return t[t < spec.duration]


def _damped_tone(t, onset, freq, tau):
    u = t - onset
    out = np.zeros_like(t)
    on = (u >= 0) & (u < 8 * tau)
    out[on] = np.exp(-u[on] / tau) * np.sin(2 * np.pi * freq * u[on])
    return out


def gen_heart(spec: MixSpec) -> AudioBuffer:
    """S1/S2 damped-tone pairs at the specified heart rate."""
    h = spec.heart
    n = _n(spec)
    t = np.arange(n) / spec.sample_rate
    x = np.zeros(n)
    if h.amplitude > 0:
        rng = _rng(spec.seed, _HEART)
        rng.random()  # consumed by _beat_offset
        period = 60.0 / h.rate_bpm
        offset = _beat_offset(spec)
        # one extra beat before t=0 so the segment starts mid-rhythm
        onsets = offset + period * np.arange(-1, int(np.ceil(spec.duration / period)) + 1)
        for onset in onsets:
            gain = 1.0 + 0.1 * (rng.random() - 0.5)
            x += gain * _damped_tone(t, onset, h.s1_freq, h.decay)
            x += gain * h.s2_gain * _damped_tone(t, onset + h.spacing(), h.s2_freq, h.decay)
        x = _scale_rms(x, h.amplitude)
    return AudioBuffer(x, spec.sample_rate)


def _breath_offset(spec: MixSpec) -> float:
    return float(_rng(spec.seed, _LUNG).random()) * 60.0 / spec.lung.rate_bpm


def breath_onsets(spec: MixSpec) -> np.ndarray:
    """Inspiration onset times (s) inside the segment."""
    period = 60.0 / spec.lung.rate_bpm
    t = _breath_offset(spec) + period * np.arange(int(np.ceil(spec.duration / period)) + 1)
    return t[t < spec.duration]


def breath_peaks(spec: MixSpec) -> np.ndarray:
    """Inspiration-to-expiration transition times (s), where the envelope peaks."""
    period = 60.0 / spec.lung.rate_bpm
    insp = spec.lung.ie_ratio / (1 + spec.lung.ie_ratio)
    t = _breath_offset(spec) + period * (np.arange(-1, int(np.ceil(spec.duration / period)) + 1) + insp)
    return t[(t >= 0) & (t < spec.duration)]


def breathing_envelope(spec: MixSpec) -> np.ndarray:
    lung = spec.lung
    period = 60.0 / lung.rate_bpm
    t = np.arange(_n(spec)) / spec.sample_rate
    phase = np.mod(t - _breath_offset(spec), period) / period
    insp = lung.ie_ratio / (1 + lung.ie_ratio)
    shape = np.where(phase < insp,
                     np.sin(0.5 * np.pi * phase / insp) ** 2,
                     np.cos(0.5 * np.pi * (phase - insp) / (1 - insp)) ** 2)
    return 1.0 - lung.depth + lung.depth * shape


def band_noise(rng, n, rate, lo, hi) -> np.ndarray:
    """Unit-RMS Gaussian noise restricted to [lo, hi] Hz by DFT masking."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / rate)
    spec[(f < lo) | (f > hi)] = 0
    return _scale_rms(np.fft.irfft(spec, n), 1.0)


def gen_lung(spec: MixSpec) -> AudioBuffer:
    """Band-limited noise modulated by a breathing-cycle envelope."""
    lung = spec.lung
    n = _n(spec)
    if lung.amplitude <= 0:
        return AudioBuffer(np.zeros(n), spec.sample_rate)
    rng = _rng(spec.seed, _LUNG)
    rng.random()  # consumed by _breath_offset
    lo, hi = lung.center - lung.bandwidth / 2, lung.center + lung.bandwidth / 2
    x = band_noise(rng, n, spec.sample_rate, lo, hi) * breathing_envelope(spec)
    return AudioBuffer(_scale_rms(x, lung.amplitude), spec.sample_rate)


def _smooth_random(rng, n, rate, cutoff):
    """Slowly varying non-negative modulation in [0, 1]."""
    m = band_noise(rng, n, rate, 0.0, cutoff)
    m = m - m.min()
    return m / m.max() if m.max() > 0 else m


def _babble(rng, n, rate):
    x = np.zeros(n)
    for _ in range(6):
        centre = rng.uniform(150, 1500)
        width = rng.uniform(100, 400)
        x += band_noise(rng, n, rate, max(20.0, centre - width / 2), centre + width / 2) \
            * _smooth_random(rng, n, rate, rng.uniform(2, 6))
    return x


def _transients(rng, n, rate):
    x = np.zeros(n)
    duration = n / rate
    count = rng.poisson(1.5 * duration)
    t = np.arange(n) / rate
    for onset in np.sort(rng.uniform(0, duration, count)):
        tau = rng.uniform(0.01, 0.04)
        env = np.where(t >= onset, np.exp(-np.maximum(t - onset, 0.0) / tau), 0.0)
        x += rng.uniform(0.5, 1.5) * env * rng.standard_normal(n)
    return x


def gen_noise(spec: MixSpec) -> AudioBuffer:
    """Unit-RMS noise of ``spec.noise.kind`` (all zeros for ``none``)."""
    n = _n(spec)
    kind = spec.noise.kind
    if kind == "none":
        return AudioBuffer(np.zeros(n), spec.sample_rate)
    rng = _rng(spec.seed, _NOISE)
    rate = spec.sample_rate
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "babble":
        x = _babble(rng, n, rate)
    elif kind == "transient":
        x = _transients(rng, n, rate)
    else:
        parts = [_scale_rms(f(rng, n, rate), 1.0)
                 for f in (lambda r, n, _: r.standard_normal(n), _babble, _transients)]
        x = sum(parts)
    return AudioBuffer(_scale_rms(x, 1.0), rate)


def mix(heart: AudioBuffer, lung: AudioBuffer, noise: AudioBuffer | None, snr_db: float = 0.0):
    """Scale `noise` to `snr_db` below heart+lung and add everything up.

    Returns
    -------
    mixture : AudioBuffer
    truth : dict
        ``heart``, ``lung`` and the scaled ``noise`` stems; they sum to the
        mixture exactly.
    noise_scale : float
        Factor applied to the input noise.
    """
    if len(heart) != len(lung) or (noise is not None and len(noise) != len(heart)):
        raise DataError("heart, lung and noise must have equal lengths")
    clean = heart.samples + lung.samples
    if noise is None or not np.any(noise.samples):
        scale = 0.0
        scaled = np.zeros_like(clean)
    else:
        p_clean = np.mean(clean ** 2)
        if p_clean == 0 and np.isfinite(snr_db):
            raise DataError("cannot set an SNR against silent heart+lung")
        p_noise = np.mean(noise.samples ** 2)
        scale = float(np.sqrt(p_clean / p_noise * 10 ** (-snr_db / 10))) if np.isfinite(snr_db) else 0.0
        scaled = noise.samples * scale
    rate = heart.sample_rate
    truth = {
        "heart": AudioBuffer(heart.samples.copy(), rate),
        "lung": AudioBuffer(lung.samples.copy(), rate),
        "noise": AudioBuffer(scaled, rate),
    }
    mixture = AudioBuffer(truth["heart"].samples + truth["lung"].samples + truth["noise"].samples, rate)
    return mixture, truth, scale


@dataclass
class SyntheticMixture:
    spec: MixSpec
    mixture: AudioBuffer
    truth: dict
    noise_scale: float

    @property
    def beat_times(self):
        return beat_times(self.spec)

    @property
    def breath_peaks(self):
        return breath_peaks(self.spec)

    @property
    def heart_rate(self) -> float:
        """Ground-truth beats per 10 s."""
        return self.spec.heart.rate_bpm / 6.0

    @property
    def breathing_rate(self) -> float:
        """Ground-truth breaths per 10 s."""
        return self.spec.lung.rate_bpm / 6.0


def synthesize(spec: MixSpec) -> SyntheticMixture:
    noise = gen_noise(spec) if spec.noise.kind != "none" else None
    mixture, truth, scale = mix(gen_heart(spec), gen_lung(spec), noise, spec.noise.snr_db)
    return SyntheticMixture(spec, mixture, truth, scale)


PRESETS = ("default", "clean", "white", "babble", "transient")


def preset_spec(name: str = "default", seed: int = 0, duration: float = 10.0) -> MixSpec:
    """Randomised mixture spec: heart 70-220 bpm, lung 20-60 breaths/min.

    ``default`` adds mixed noise at 0 dB, ``clean`` adds none, and the
    remaining presets use a single noise kind at 0 dB.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    rng = _rng(seed, _PRESET)
    heart = HeartSpec(rate_bpm=float(rng.uniform(70, 220)),
                      s1_freq=float(rng.uniform(80, 100)), s2_freq=float(rng.uniform(100, 120)))
    lung = LungSpec(rate_bpm=float(rng.uniform(20, 60)))
    kind = {"default": "mixed", "clean": "none"}.get(name, name)
    return MixSpec(heart, lung, NoiseSpec(kind, 0.0), duration, WORKING_RATE, seed)


def exemplar_specs(kind: str, n: int, seed: int = 1000, duration: float = 10.0) -> list[MixSpec]:
    """Specs for clean single-source database recordings.

    Seeds ``seed .. seed + n - 1`` are used; keep them disjoint from the
    evaluation mixtures.
    """
    if kind not in ("heart", "lung"):
        raise ValueError("kind must be 'heart' or 'lung'")
    specs = []
    for i in range(n):
        s = preset_spec("clean", seed + i, duration)
        if kind == "heart":
            s = replace(s, lung=replace(s.lung, amplitude=0.0))
        else:
            s = replace(s, heart=replace(s.heart, amplitude=0.0))
        specs.append(s)
    return specs


def exemplar_buffers(kind: str, n: int, seed: int = 1000, duration: float = 10.0) -> list[AudioBuffer]:
    gen = gen_heart if kind == "heart" else gen_lung
    return [gen(s) for s in exemplar_specs(kind, n, seed, duration)]
