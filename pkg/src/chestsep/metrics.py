"""
Heart-rate and breathing-rate estimation, SDR/SIR against ground truth, an
exact one-sided Wilcoxon signed-rank test and Table-style error reports.

Rates are expressed per 10 seconds (b/10s).
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.signal
import scipy.stats

from .audio_io import AudioBuffer
from .errors import DataError

# heart envelope
HEART_BAND = (25.0, 250.0)
HEART_ENVELOPE_CUTOFF = 20.0
HEART_BPM_RANGE = (70.0, 220.0)
# breathing envelope
LUNG_BAND = (300.0, 450.0)
LUNG_ENVELOPE_CUTOFF = 1.5
MIN_BREATH_INTERVAL = 1.0
# beat gate used for temporal correlation
GATE_HALF_WIDTH = 0.05

_ENVELOPE_RATE = 200.0
SDR_CAP = 100.0
EXACT_MAX_N = 25


class TooShortError(DataError, ValueError):
    pass


class SilentReferenceError(DataError, ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


@dataclass
class RateEstimate:
    """Events per 10 s with event times (s) and the detection envelope."""

    rate: float
    event_times: np.ndarray
    envelope: np.ndarray
    envelope_rate: float = _ENVELOPE_RATE
    low_confidence: bool = False

    @property
    def per_minute(self) -> float:
        return self.rate * 6.0


def _band_energy_envelope(x, rate, band, cutoff):
    """Lowpassed squared band signal, decimated to about 200 Hz."""
    nyq = rate / 2
    lo, hi = band[0], min(band[1], 0.95 * nyq)
    sos = scipy.signal.butter(4, [lo, hi], btype="bandpass", fs=rate, output="sos")
    y = scipy.signal.sosfiltfilt(sos, x)
    sos_lp = scipy.signal.butter(2, cutoff, fs=rate, output="sos")
    env = scipy.signal.sosfiltfilt(sos_lp, y * y)
    step = max(1, int(round(rate / _ENVELOPE_RATE)))
    env = np.maximum(env[::step], 0.0)
    return env, rate / step


def _normalised(env):
    peak = env.max() if env.size else 0.0
    if not peak > 0 or not np.isfinite(peak):
        return None
    return env / peak


def _acf(env):
    x = env - env.mean()
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    r = np.fft.irfft(spec * np.conj(spec))[:n]
    return r / r[0] if r[0] > 0 else r


def _parabolic(y, i):
    if 0 < i < len(y) - 1:
        a, b, c = y[i - 1], y[i], y[i + 1]
        den = a - 2 * b + c
        if den < 0:
            return i + 0.5 * (a - c) / den
    return float(i)


def heart_rate(heart: AudioBuffer, bpm_range=HEART_BPM_RANGE) -> RateEstimate:
    """Heart rate from a band-energy envelope.

    Envelope autocorrelation restricted to beat periods inside `bpm_range`
    sets the rate; envelope peaks at least 0.6 periods apart give the beat
    times.
    """
    if heart.duration < 2.0:
        raise TooShortError("heart-rate estimation needs at least 2 s of audio")
    env, env_rate = _band_energy_envelope(heart.samples, heart.sample_rate, HEART_BAND, HEART_ENVELOPE_CUTOFF)
    norm = _normalised(env)
    if norm is None:
        return RateEstimate(0.0, np.array([]), env, env_rate, True)
    r = _acf(norm)
    lo = int(np.floor(env_rate * 60.0 / bpm_range[1]))
    hi = min(int(np.ceil(env_rate * 60.0 / bpm_range[0])), r.size - 2)
    i = lo + int(np.argmax(r[lo:hi + 1]))
    lag = _parabolic(r, i) / env_rate
    period = float(np.clip(lag, 60.0 / bpm_range[1], 60.0 / bpm_range[0]))
    peaks, _ = scipy.signal.find_peaks(norm, distance=max(1, int(0.6 * period * env_rate)), height=0.2)
    return RateEstimate(10.0 / period, peaks / env_rate, env, env_rate, bool(r[i] < 0.2))


def breathing_rate(lung: AudioBuffer, min_interval: float = MIN_BREATH_INTERVAL) -> RateEstimate:
    """Breathing rate from peaks of the 300-450 Hz power envelope."""
    if lung.duration < 4.0:
        raise TooShortError("breathing-rate estimation needs at least 4 s of audio")
    env, env_rate = _band_energy_envelope(lung.samples, lung.sample_rate, LUNG_BAND, LUNG_ENVELOPE_CUTOFF)
    norm = _normalised(env)
    if norm is None:
        return RateEstimate(0.0, np.array([]), env, env_rate, True)
    peaks, _ = scipy.signal.find_peaks(norm, distance=max(1, int(0.9 * min_interval * env_rate)), prominence=0.3)
    times = peaks / env_rate
    if times.size >= 2:
        rate = 10.0 * (times.size - 1) / (times[-1] - times[0])
    else:
        rate = 10.0 * times.size / lung.duration
    return RateEstimate(rate, times, env, env_rate, bool(times.size < 2))


def beat_gate(beat_times, n_frames: int, hop: int, window_length: int, sample_rate: float,
              half_width: float = GATE_HALF_WIDTH) -> np.ndarray:
    """Binary per-frame gate: 1 where a beat +-`half_width` overlaps the frame's hop span.

    Frame ``t`` is centred on sample ``t * hop + window_length / 2`` and owns
    the span of one hop around that centre.
    """
    centres = (np.arange(n_frames) * hop + window_length / 2) / sample_rate
    half_span = hop / 2 / sample_rate + half_width
    gate = np.zeros(n_frames)
    for b in np.asarray(beat_times, dtype=float):
        gate[np.abs(centres - b) < half_span] = 1.0
    return gate


def _check_pair(estimate, reference):
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=float)
    r = np.asarray(getattr(reference, "samples", reference), dtype=float)
    if e.shape != r.shape:
        raise DataError(f"length mismatch: {e.shape} vs {r.shape}")
    if not np.any(r):
        raise SilentReferenceError("reference signal is silent")
    return e, r


def _ratio_db(num, den):
    if den <= 0:
        return SDR_CAP
    if num <= 0:
        return -SDR_CAP
    return float(np.clip(10 * np.log10(num / den), -SDR_CAP, SDR_CAP))


def sdr(estimate, reference) -> float:
    """Signal-to-distortion ratio (dB) with an optimal scalar gain on the reference.

    Capped to [-100, 100] dB.
    """
    e, r = _check_pair(estimate, reference)
    target = (e @ r) / (r @ r) * r
    return _ratio_db(target @ target, np.sum((e - target) ** 2))


def sir(estimate, reference, interferers) -> float:
    """Signal-to-interference ratio (dB).

    The interference is the part of the estimate explained by the joint
    span of reference and interferers beyond its projection onto the
    reference alone.
    """
    e, r = _check_pair(estimate, reference)
    others = [np.asarray(getattr(s, "samples", s), dtype=float) for s in interferers]
    target = (e @ r) / (r @ r) * r
    basis = np.column_stack([r] + others)
    coef, *_ = np.linalg.lstsq(basis, e, rcond=None)
    interference = basis @ coef - target
    return _ratio_db(target @ target, interference @ interference)


def signed_ranks(a, b):
    """Average ranks of the non-zero |a - b| and the signs of a - b."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    return scipy.stats.rankdata(np.abs(d)), np.sign(d)


def _exact_upper_tail(ranks, t_plus):
    # ranks are multiples of 1/2, so work with doubled integer ranks
    r2 = np.rint(2 * ranks).astype(int)
    dist = np.zeros(r2.sum() + 1)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:-r] if r else dist
        dist = dist + shifted
    t2 = int(np.rint(2 * t_plus))
    return float(dist[t2:].sum() / dist.sum())


def wilcoxon_one_sided(paired_a, paired_b) -> float:
    """P-value of the signed-rank test of ``a > b``.

    Zero differences are dropped and tied ranks averaged. The null
    distribution of the positive-rank sum is enumerated exactly up to 25
    non-zero pairs; larger samples use the normal approximation with tie
    and continuity corrections.

    Examples
    --------
    >>> wilcoxon_one_sided(np.arange(10) + 1.0, np.zeros(10))
    0.0009765625
    """
    a = np.asarray(paired_a, dtype=float)
    b = np.asarray(paired_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if a.size < 5:
        raise ValueError("need at least 5 pairs")
    ranks, signs = signed_ranks(a, b)
    n = ranks.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    t_plus = float(ranks[signs > 0].sum())
    if n <= EXACT_MAX_N:
        return _exact_upper_tail(ranks, t_plus)
    mean = n * (n + 1) / 4
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(counts ** 3 - counts) / 48
    z = (t_plus - mean - 0.5) / np.sqrt(var)
    return float(scipy.stats.norm.sf(z))


def median_iqr(values):
    """Median and interquartile range with linear-interpolation quartiles."""
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q3 - q1)


def _pairwise(errors: dict) -> dict:
    """One-sided tests that the row method's errors are smaller than the column's."""
    out = {}
    for m1, m2 in itertools.permutations(errors, 2):
        e1, e2 = np.asarray(errors[m1]), np.asarray(errors[m2])
        if e1.size != e2.size or e1.size < 5:
            out[(m1, m2)] = "insufficient-n"
            continue
        try:
            out[(m1, m2)] = wilcoxon_one_sided(e2, e1)
        except DegenerateTestError:
            out[(m1, m2)] = "degenerate"
    return out


@dataclass
class RateReport:
    rows: list
    pvalues: dict = field(default_factory=dict)


def rate_error_report(results) -> RateReport:
    """Median absolute error and IQR per method, plus pairwise Wilcoxon p-values.

    `results` is a sequence of ``(method, estimate, truth)`` where the
    estimate is a :class:`RateEstimate` or a plain rate; entries are paired
    across methods by their order of appearance.
    """
    if not results:
        raise ValueError("no results")
    errors = {}
    for method, est, truth in results:
        rate = est.rate if isinstance(est, RateEstimate) else float(est)
        errors.setdefault(method, []).append(abs(rate - truth))
    rows = []
    for method, errs in errors.items():
        med, iqr = median_iqr(errs)
        rows.append({"method": method, "n": len(errs), "mae": med, "iqr": iqr})
    return RateReport(rows, _pairwise(errors))


@dataclass
class BenchmarkReport:
    """Per-method summary of a synthetic benchmark.

    Columns follow the layout of a rate-error/quality table: heart-rate MAE
    (IQR), heart SDR gain mean (STD), breathing-rate MAE (IQR), lung SDR gain
    mean (STD). SDR gains are relative to the unprocessed mixture. P-values
    test that the first method of each pair is better than the second.
    """

    rows: list
    pvalues: dict

    columns = ("method", "n", "hr_mae", "hr_iqr", "heart_sdr", "heart_sdr_gain_mean", "heart_sdr_gain_std",
               "br_mae", "br_iqr", "lung_sdr", "lung_sdr_gain_mean", "lung_sdr_gain_std")

    def row(self, method):
        return next(r for r in self.rows if r["method"] == method)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in self.columns])

    def pvalues_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "better", "worse", "p_value"])
            for (metric, m1, m2), p in sorted(self.pvalues.items()):
                w.writerow([metric, m1, m2, p if isinstance(p, str) else repr(p)])

    def to_text(self) -> str:
        head = ["Method", "HR MAE (IQR) b/10s", "Heart SDR gain dB mean (STD)",
                "BR MAE (IQR) b/10s", "Lung SDR gain dB mean (STD)"]
        body = []
        for r in self.rows:
            body.append([
                r["method"],
                f"{r['hr_mae']:.2f} ({r['hr_iqr']:.2f})",
                f"{r['heart_sdr_gain_mean']:.2f} ({r['heart_sdr_gain_std']:.2f})",
                f"{r['br_mae']:.2f} ({r['br_iqr']:.2f})",
                f"{r['lung_sdr_gain_mean']:.2f} ({r['lung_sdr_gain_std']:.2f})",
            ])
        widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
        fmt = " | ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
        lines += [fmt.format(*b) for b in body]
        if self.pvalues:
            lines.append("")
            lines.append("One-sided Wilcoxon signed-rank p-values (first method better than second):")
            for (metric, m1, m2), p in sorted(self.pvalues.items()):
                ptxt = p if isinstance(p, str) else f"{p:.4g}"
                lines.append(f"  {metric:<10} {m1} > {m2}: {ptxt}")
        return "\n".join(lines) + "\n"


def benchmark_report(records, reference: str | None = None) -> BenchmarkReport:
    """Summarise per-mixture benchmark records.

    Each record is a dict with keys ``method``, ``mixture``, ``hr``,
    ``hr_true``, ``br``, ``br_true``, ``heart_sdr``, ``lung_sdr``,
    ``heart_sdr_mix`` and ``lung_sdr_mix``. Records are paired across
    methods by mixture name. When `reference` is given, p-values compare it
    against every other method; otherwise all ordered pairs are tested.
    """
    if not records:
        raise ValueError("no benchmark records")
    by_method = {}
    for rec in sorted(records, key=lambda r: r["mixture"]):
        by_method.setdefault(rec["method"], []).append(rec)
    rows = []
    metrics = {"hr_error": {}, "br_error": {}, "heart_sdr": {}, "lung_sdr": {}}
    for method, recs in by_method.items():
        hr_err = [abs(r["hr"] - r["hr_true"]) for r in recs]
        br_err = [abs(r["br"] - r["br_true"]) for r in recs]
        hs = np.array([r["heart_sdr"] for r in recs])
        ls = np.array([r["lung_sdr"] for r in recs])
        hg = hs - np.array([r["heart_sdr_mix"] for r in recs])
        lg = ls - np.array([r["lung_sdr_mix"] for r in recs])
        hr_mae, hr_iqr = median_iqr(hr_err)
        br_mae, br_iqr = median_iqr(br_err)
        rows.append({
            "method": method, "n": len(recs),
            "hr_mae": hr_mae, "hr_iqr": hr_iqr,
            "heart_sdr": float(np.median(hs)),
            "heart_sdr_gain_mean": float(hg.mean()), "heart_sdr_gain_std": float(hg.std(ddof=1)) if hg.size > 1 else 0.0,
            "br_mae": br_mae, "br_iqr": br_iqr,
            "lung_sdr": float(np.median(ls)),
            "lung_sdr_gain_mean": float(lg.mean()), "lung_sdr_gain_std": float(lg.std(ddof=1)) if lg.size > 1 else 0.0,
        })
        # errors: lower is better, so negate to make "larger is better" uniform
        metrics["hr_error"][method] = [-e for e in hr_err]
        metrics["br_error"][method] = [-e for e in br_err]
        metrics["heart_sdr"][method] = list(hs)
        metrics["lung_sdr"][method] = list(ls)
    pvalues = {}
    for metric, values in metrics.items():
        for m1, m2 in itertools.permutations(values, 2):
            if reference is not None and m1 != reference:
                continue
            a, b = np.asarray(values[m1]), np.asarray(values[m2])
            if a.size != b.size or a.size < 5:
                pvalues[(metric, m1, m2)] = "insufficient-n"
                continue
            try:
                pvalues[(metric, m1, m2)] = wilcoxon_one_sided(a, b)
            except DegenerateTestError:
                pvalues[(metric, m1, m2)] = "degenerate"
    return BenchmarkReport(rows, pvalues)
