"""
Single-source NMF baselines: blind factorisation, then every component is
clustered into heart or lung.

``shah_separate`` seeds heart and lung references with the components
holding the most power in 50-250 Hz and 250-1000 Hz and grows both
clusters greedily by cosine similarity. ``cq_separate`` scores components by
spectral correlation with a clean heart database, temporal correlation with
detected beats and spectral roll-off, and gives the top 55 to the heart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import WORKING_RATE, AudioBuffer
from .metrics import beat_gate, heart_rate
from .nmcf import EmptyDatabaseError, ExemplarDb, SeparationResult, reconstruct
from .nmf_core import Activations, Dictionary, NmfConfig, factorize
from .spectral import StftConfig, stft

HEART_BAND = (50.0, 250.0)
LUNG_BAND = (250.0, 1000.0)
SHAH_COMPONENTS = 20
CQ_HEART_COMPONENTS = 55
CQ_LUNG_COMPONENTS = 64
ROLLOFF_FRACTION = 0.85


def band_power(W, freqs, band) -> np.ndarray:
    """Per-column energy of the dictionary inside ``band`` (Hz, inclusive)."""
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return np.sum(W[sel] ** 2, axis=0)


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


def _pearson(a, b) -> float:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def shah_cluster(W, freqs, heart_band=HEART_BAND, lung_band=LUNG_BAND):
    """Split dictionary columns into heart and lung index lists.

    If one component wins both bands it keeps the band where its power is
    larger and the other band is reseeded from its runner-up.
    """
    K = W.shape[1]
    hp, lp = band_power(W, freqs, heart_band), band_power(W, freqs, lung_band)
    h_seed, l_seed = int(np.argmax(hp)), int(np.argmax(lp))
    if h_seed == l_seed:
        if K < 2:
            raise ValueError("need at least two components to seed two clusters")
        if hp[h_seed] >= lp[h_seed]:
            l_seed = int(np.argmax(np.where(np.arange(K) == h_seed, -np.inf, lp)))
        else:
            h_seed = int(np.argmax(np.where(np.arange(K) == l_seed, -np.inf, hp)))
    clusters = {"heart": [h_seed], "lung": [l_seed]}
    refs = {"heart": W[:, h_seed].copy(), "lung": W[:, l_seed].copy()}
    remaining = [k for k in range(K) if k not in (h_seed, l_seed)]
    while remaining:
        best = None
        for k in remaining:
            for name in ("heart", "lung"):
                s = _cosine(W[:, k], refs[name])
                if best is None or s > best[0]:
                    best = (s, k, name)
        _, k, name = best
        clusters[name].append(k)
        remaining.remove(k)
        refs[name] = W[:, clusters[name]].mean(axis=1)
    return sorted(clusters["heart"]), sorted(clusters["lung"])


def _regroup(W, H, heart_idx, lung_idx):
    order = list(heart_idx) + list(lung_idx)
    blocks = [("heart", len(heart_idx)), ("lung", len(lung_idx))]
    return Dictionary(W[:, order], blocks), Activations(H[order], blocks)


def _result(spec, W, H, trace, config):
    stems, masks = reconstruct(spec, W, H)
    return SeparationResult(stems, masks, W, H, trace, config, spec)


def shah_separate(mixture: AudioBuffer, cfg: NmfConfig | None = None, stft_cfg: StftConfig | None = None,
                  n_components: int = SHAH_COMPONENTS) -> SeparationResult:
    """Blind NMF with band-seeded greedy clustering into heart and lung stems."""
    cfg = cfg or NmfConfig(sparsity=0.0)
    stft_cfg = stft_cfg or StftConfig()
    spec = stft(mixture, stft_cfg)
    W, H, trace = factorize(spec.magnitude, n_components, cfg)
    heart_idx, lung_idx = shah_cluster(W.matrix, spec.frequencies)
    Wc, Hc = _regroup(W.matrix, H.matrix, heart_idx, lung_idx)
    config = {"method": "shah", "nmf": cfg.to_dict(), "n_components": n_components,
              "stft": stft_cfg.to_dict(), "sample_rate": mixture.sample_rate,
              "heart_components": heart_idx, "lung_components": lung_idx}
    return _result(spec, Wc, Hc, trace, config)


def spectral_correlation(w_k, heart_db) -> float:
    """Largest Pearson correlation between `w_k` and the items' mean spectra.

    `heart_db` is an :class:`ExemplarDb` or an (F, n_items) matrix of mean
    spectra. A flat `w_k` scores 0.
    """
    refs = heart_db.mean_spectra() if isinstance(heart_db, ExemplarDb) else np.asarray(heart_db, dtype=float)
    refs = refs.reshape(refs.shape[0], -1)
    return max(_pearson(w_k, refs[:, i]) for i in range(refs.shape[1]))


def temporal_correlation(h_k, gate) -> float:
    """Pearson correlation between an activation row and a per-frame beat gate."""
    h_k, gate = np.asarray(h_k, dtype=float), np.asarray(gate, dtype=float)
    if h_k.shape != gate.shape:
        raise ValueError(f"activation has {h_k.size} frames, gate has {gate.size}")
    return _pearson(h_k, gate)


def spectral_rolloff(w_k, fraction: float = ROLLOFF_FRACTION, sample_rate: float = WORKING_RATE) -> float:
    """Lowest bin frequency at which cumulative energy reaches `fraction` of the total.

    Bins are ``sample_rate / (2 (F - 1))`` apart. An all-zero basis returns
    the Nyquist frequency.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    w = np.asarray(w_k, dtype=float)
    energy = np.cumsum(w ** 2)
    nyquist = sample_rate / 2
    if energy[-1] <= 0:
        return nyquist
    j = int(np.searchsorted(energy, fraction * energy[-1], side="left"))
    return j * sample_rate / (2 * (w.size - 1))


def _minmax(x):
    x = np.asarray(x, dtype=float)
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


@dataclass
class ClusterCriteria:
    spectral_correlation: np.ndarray
    temporal_correlation: np.ndarray
    rolloff: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        """Sum of min-max normalised criteria; low roll-off counts as heart-like."""
        return (_minmax(self.spectral_correlation) + _minmax(self.temporal_correlation)
                + (1.0 - _minmax(self.rolloff)) * (np.ptp(self.rolloff) > 0))


def cluster_criteria(W, H, heart_db, gate, sample_rate=WORKING_RATE, fraction=ROLLOFF_FRACTION) -> ClusterCriteria:
    refs = heart_db.mean_spectra() if isinstance(heart_db, ExemplarDb) else heart_db
    K = W.shape[1]
    return ClusterCriteria(
        np.array([spectral_correlation(W[:, k], refs) for k in range(K)]),
        np.array([temporal_correlation(H[k], gate) for k in range(K)]),
        np.array([spectral_rolloff(W[:, k], fraction, sample_rate) for k in range(K)]),
    )


def cq_assign(criteria: ClusterCriteria, n_heart: int = CQ_HEART_COMPONENTS):
    """Top `n_heart` combined scores go to the heart; ties prefer lower roll-off."""
    combined = criteria.combined
    order = sorted(range(combined.size), key=lambda k: (-combined[k], criteria.rolloff[k], k))
    return sorted(order[:n_heart]), sorted(order[n_heart:])


def cq_separate(mixture: AudioBuffer, heart_db: ExemplarDb, cfg: NmfConfig | None = None,
                stft_cfg: StftConfig | None = None, n_heart: int = CQ_HEART_COMPONENTS,
                n_lung: int = CQ_LUNG_COMPONENTS, fraction: float = ROLLOFF_FRACTION) -> SeparationResult:
    """Blind sparse NMF with criteria-ranked clustering (55 heart / 64 lung by default).

    Beat times for the temporal criterion come from :func:`heart_rate` on
    the mixture.
    """
    if heart_db is None or len(heart_db) == 0:
        raise EmptyDatabaseError("the heart reference database is empty")
    cfg = cfg or NmfConfig()
    stft_cfg = stft_cfg or StftConfig()
    spec = stft(mixture, stft_cfg)
    W, H, trace = factorize(spec.magnitude, n_heart + n_lung, cfg)
    beats = heart_rate(mixture).event_times
    gate = beat_gate(beats, spec.shape[1], stft_cfg.hop, stft_cfg.window_length, mixture.sample_rate)
    crit = cluster_criteria(W.matrix, H.matrix, heart_db, gate, mixture.sample_rate, fraction)
    heart_idx, lung_idx = cq_assign(crit, n_heart)
    Wc, Hc = _regroup(W.matrix, H.matrix, heart_idx, lung_idx)
    config = {"method": "cq", "nmf": cfg.to_dict(), "n_components": n_heart + n_lung,
              "stft": stft_cfg.to_dict(), "sample_rate": mixture.sample_rate,
              "rolloff_fraction": fraction, "heart_components": heart_idx, "lung_components": lung_idx}
    return _result(spec, Wc, Hc, trace, config)
