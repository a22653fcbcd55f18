"""
Non-negative matrix co-factorisation of a chest-sound mixture with weighted
heart and lung exemplar databases plus a free noise block.

The mixture and every exemplar share dictionary blocks: heart exemplars are
modelled by the heart block only, lung exemplars by the lung block only,
and the noise block is learnt from the mixture alone. Per iteration the
mixture activations, then all exemplar activations, then the dictionary are
updated; dictionary statistics from the mixture and from the lambda-weighted
exemplars are pooled before the multiplicative ratio is formed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio_io
from .audio_io import AudioBuffer
from .errors import DataError, ShapeError
from .nmf_core import (
    Activations,
    CostTrace,
    Dictionary,
    FitTerm,
    NmfConfig,
    _normalize,
    factorize,
    initialize,
    prepare_input,
    solve,
)
from .spectral import (
    Mask,
    Spectrogram,
    StftConfig,
    apply_mask,
    build_masks,
    istft,
    stft,
    write_matrix_csv,
)

BLOCK_NAMES = ("heart", "lung", "noise")
MODES = ("cofactorise", "supervised", "semi_supervised")


class EmptyDatabaseError(DataError, ValueError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class ExemplarItem:
    magnitude: np.ndarray
    weight: float = 1.0
    label: str = ""

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=float)
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"exemplar weight {self.weight} outside [0, 1]")
        if self.magnitude.ndim != 2 or np.any(self.magnitude < 0):
            raise ValueError("exemplar magnitude must be a non-negative 2-D matrix")


@dataclass
class ExemplarDb:
    """High-quality reference spectrograms with per-item weights (lambda)."""

    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def n_bins(self):
        return self.items[0].magnitude.shape[0] if self.items else None

    @classmethod
    def from_buffers(cls, buffers, stft_cfg: StftConfig | None = None, weights=None, labels=None):
        stft_cfg = stft_cfg or StftConfig()
        weights = [1.0] * len(buffers) if weights is None else list(weights)
        labels = [f"item{i}" for i in range(len(buffers))] if labels is None else list(labels)
        items = [ExemplarItem(stft(b, stft_cfg).magnitude, w, lab)
                 for b, w, lab in zip(buffers, weights, labels)]
        return cls(items)

    def with_weights(self, weight: float) -> "ExemplarDb":
        return ExemplarDb([replace(it, weight=weight) for it in self.items])

    def stacked(self):
        """Frames of all items side by side and the matching per-frame weights."""
        V = np.hstack([it.magnitude for it in self.items])
        w = np.concatenate([np.full(it.magnitude.shape[1], it.weight) for it in self.items])
        return V, w

    def mean_spectra(self) -> np.ndarray:
        """(F, n_items) matrix of per-item time-averaged magnitude spectra."""
        return np.stack([it.magnitude.mean(axis=1) for it in self.items], axis=1)


def manifest_path(path) -> str:
    path = os.fspath(path)
    return os.path.join(path, "manifest.json") if os.path.isdir(path) else path


def read_manifest(path) -> list[dict]:
    """Entries ``{"path", "label", "weight"}`` of a database manifest.

    The manifest is JSON of the form ``{"items": [{"path": "a.wav",
    "label": "a", "weight": 0.9}, ...]}``; relative paths resolve against
    the manifest's directory and weight defaults to 1.
    """
    mpath = manifest_path(path)
    if not os.path.isfile(mpath):
        raise ManifestError(f"database manifest not found: {mpath}")
    try:
        with open(mpath) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(mpath))
    entries = []
    for i, item in enumerate(doc.get("items", [])):
        if "path" not in item:
            raise ManifestError(f"{mpath}: item {i} has no path")
        entries.append({
            "path": os.path.join(base, item["path"]),
            "label": item.get("label", os.path.splitext(os.path.basename(item["path"]))[0]),
            "weight": float(item.get("weight", 1.0)),
        })
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        json.dump({"items": entries}, fh, indent=2)
        fh.write("\n")


def load_database(path, stft_cfg: StftConfig | None = None, sample_rate: float = audio_io.WORKING_RATE) -> ExemplarDb:
    """Read a manifest and STFT every listed WAV at `sample_rate`."""
    entries = read_manifest(path)
    buffers = [audio_io.resample(audio_io.read_wav(e["path"]), sample_rate) for e in entries]
    return ExemplarDb.from_buffers(buffers, stft_cfg,
                                   [e["weight"] for e in entries], [e["label"] for e in entries])


@dataclass(frozen=True)
class NmcfConfig:
    nmf: NmfConfig = field(default_factory=NmfConfig)
    components: tuple = (20, 20, 10)
    mode: str = "cofactorise"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.components) != 3 or any(int(c) < 0 for c in self.components):
            raise ValueError("components must be three non-negative counts")
        object.__setattr__(self, "components", tuple(int(c) for c in self.components))

    @classmethod
    def for_mode(cls, mode: str, nmf: NmfConfig | None = None) -> "NmcfConfig":
        """Default block sizes for each mode (no noise block for supervised NMF)."""
        comps = {"cofactorise": (20, 20, 10), "supervised": (20, 20, 0),
                 "semi_supervised": (20, 20, 10)}[mode]
        return cls(nmf or NmfConfig(), comps, mode)

    @property
    def blocks(self):
        return list(zip(BLOCK_NAMES, self.components))

    def to_dict(self) -> dict:
        return {"nmf": self.nmf.to_dict(), "components": list(self.components), "mode": self.mode}


def _block_slices(blocks):
    out, start = {}, 0
    for name, count in blocks:
        out[name] = slice(start, start + count)
        start += count
    return out


def _co_factorize(V, blocks, cfg: NmfConfig, exemplars=None, fixed=None):
    """Set up and run the shared multiplicative engine.

    `exemplars` maps a block name to ``(V_stack, frame_weights, item_lengths)``;
    `fixed` maps a block name to a dictionary block that is never updated.
    The random draws for W and the mixture H come first, in the same order
    as :func:`factorize`, and exemplar activations are drawn afterwards.
    """
    exemplars = exemplars or {}
    fixed = fixed or {}
    F, T = V.shape
    K = sum(c for _, c in blocks)
    sl = _block_slices(blocks)
    rng = np.random.default_rng(cfg.seed)
    W = np.maximum(_normalize(initialize(rng, F, K), cfg.floor), cfg.floor)
    terms = [FitTerm(V, initialize(rng, K, T), slice(0, K), cfg, name="mixture")]
    for name, Wb in fixed.items():
        W[:, sl[name]] = Wb
    for name, (Vx, wx, lengths) in exemplars.items():
        c = sl[name].stop - sl[name].start
        Hx = np.hstack([initialize(rng, c, n) for n in lengths])
        terms.append(FitTerm(Vx, Hx, sl[name], cfg, weights=wx, name=f"{name}_exemplars"))
    W, trace = solve(W, terms, cfg, fixed_columns=[sl[name] for name in fixed])

    ex_out = {}
    for term, (name, (_, _, lengths)) in zip(terms[1:], exemplars.items()):
        bounds = np.cumsum([0] + list(lengths))
        ex_out[name] = [term.H[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return Dictionary(W, blocks), Activations(terms[0].H, blocks), ex_out, trace


def _check_db(db, name, n_bins):
    if db is None or len(db) == 0:
        raise EmptyDatabaseError(f"{name} database is empty")
    for it in db.items:
        if it.magnitude.shape[0] != n_bins:
            raise ShapeError(f"{name} exemplar '{it.label}' has {it.magnitude.shape[0]} bins, mixture has {n_bins}")


def _exemplar_entry(db):
    V, w = db.stacked()
    return V, w, [it.magnitude.shape[1] for it in db.items]


def cofactorize(V_m, heart_db: ExemplarDb, lung_db: ExemplarDb, cfg: NmcfConfig | None = None):
    """Jointly factorise the mixture and the exemplar databases.

    Returns
    -------
    dictionary : Dictionary
        Unit-norm columns in blocks heart | lung | noise.
    activations : Activations
        Mixture activations.
    exemplar_activations : dict
        ``{"heart": [H_1, ...], "lung": [...]}``, one matrix per item.
    trace : CostTrace
        Weighted co-factorisation objective; terms ``mixture``,
        ``heart_exemplars`` and ``lung_exemplars`` break it down.
    """
    cfg = cfg or NmcfConfig()
    V = prepare_input(V_m, cfg.nmf)
    F = V.shape[0]
    _check_db(heart_db, "heart", F)
    _check_db(lung_db, "lung", F)
    exemplars = {}
    for name, db in (("heart", heart_db), ("lung", lung_db)):
        Vx, wx, lengths = _exemplar_entry(db)
        exemplars[name] = (prepare_input(Vx, cfg.nmf), wx, lengths)
    return _co_factorize(V, cfg.blocks, cfg.nmf, exemplars)


def _train_block(db, count, cfg: NmfConfig):
    V, _ = db.stacked()
    W, _, trace = factorize(V, count, cfg)
    return W.matrix, trace


def supervised_nmf(V_m, heart_db: ExemplarDb, lung_db: ExemplarDb, cfg: NmcfConfig | None = None):
    """Train heart and lung blocks on the databases, then fit the mixture with them fixed.

    A non-zero noise block in ``cfg.components`` is learnt blind in the second phase.

    Returns
    -------
    dictionary, activations, trace, trained
        ``trained`` maps ``heart``/``lung`` to the phase-one dictionary blocks.
    """
    cfg = cfg or NmcfConfig.for_mode("supervised")
    V = prepare_input(V_m, cfg.nmf)
    _check_db(heart_db, "heart", V.shape[0])
    _check_db(lung_db, "lung", V.shape[0])
    b_h, b_l, _ = cfg.components
    trained = {}
    if b_h:
        trained["heart"], _ = _train_block(heart_db, b_h, cfg.nmf)
    if b_l:
        trained["lung"], _ = _train_block(lung_db, b_l, replace(cfg.nmf, seed=cfg.nmf.seed + 1))
    W, H, _, trace = _co_factorize(V, cfg.blocks, cfg.nmf, fixed=trained)
    return W, H, trace, trained


def semi_supervised_nmf(V_m, heart_db: ExemplarDb, cfg: NmcfConfig | None = None):
    """Train the heart block on its database, then fit the mixture with lung and noise blocks free."""
    cfg = cfg or NmcfConfig.for_mode("semi_supervised")
    V = prepare_input(V_m, cfg.nmf)
    _check_db(heart_db, "heart", V.shape[0])
    trained = {}
    if cfg.components[0]:
        trained["heart"], _ = _train_block(heart_db, cfg.components[0], cfg.nmf)
    W, H, _, trace = _co_factorize(V, cfg.blocks, cfg.nmf, fixed=trained)
    return W, H, trace, trained


@dataclass
class SeparationResult:
    """Stems, masks and factors from one separation run."""

    stems: dict
    masks: dict
    dictionary: Dictionary
    mixture_activations: Activations
    cost_trace: CostTrace
    config: dict
    spectrogram: Spectrogram | None = None
    exemplar_activations: dict | None = None

    def mixture_reconstruction(self) -> AudioBuffer:
        return istft(self.spectrogram)

    def save(self, outdir, write_masks: bool = False, png: bool = False):
        """Write stems, cost trace, config snapshot and factors into `outdir`.

        Files: ``<stem>.wav``, ``cost_trace.csv``, ``config.json`` and
        ``factors.npz`` (arrays ``W``, ``H``, ``mask_<name>``, ``freqs`` and
        ``blocks`` as a JSON string), plus ``mask_<name>.csv`` / ``.png``
        when requested.
        """
        os.makedirs(outdir, exist_ok=True)
        clipped = {}
        for name, buf in self.stems.items():
            clipped[name] = audio_io.write_wav(os.path.join(outdir, f"{name}.wav"), buf)
        self.cost_trace.to_csv(os.path.join(outdir, "cost_trace.csv"))
        snapshot = dict(self.config)
        snapshot["clipped_samples"] = clipped
        with open(os.path.join(outdir, "config.json"), "w") as fh:
            json.dump(snapshot, fh, indent=2, sort_keys=True)
            fh.write("\n")
        freqs = self.spectrogram.frequencies
        arrays = {f"mask_{k}": m.values for k, m in self.masks.items()}
        # plain np.savez embeds no timestamps, keeping reruns byte-identical
        np.savez(os.path.join(outdir, "factors.npz"), W=self.dictionary.matrix,
                 H=self.mixture_activations.matrix, freqs=freqs,
                 blocks=np.array(json.dumps(self.dictionary.blocks)),
                 sample_rate=np.array(self.spectrogram.sample_rate),
                 hop=np.array(self.spectrogram.config.hop), **arrays)
        if write_masks:
            for name, m in self.masks.items():
                write_matrix_csv(os.path.join(outdir, f"mask_{name}.csv"), m.values, freqs)
                if png:
                    from .spectral import plot_matrix_png

                    plot_matrix_png(os.path.join(outdir, f"mask_{name}.png"), m.values,
                                    self.spectrogram.sample_rate, self.spectrogram.config.hop,
                                    title=f"{name} mask", db=False)


def reconstruct(spec: Spectrogram, dictionary: Dictionary, activations: Activations):
    """Masks for every non-empty block and the corresponding time-domain stems."""
    masks = build_masks(dictionary, activations)
    stems = {name: istft(apply_mask(spec, m)) for name, m in masks.items()}
    return stems, masks


def separate(mixture: AudioBuffer, heart_db: ExemplarDb | None, lung_db: ExemplarDb | None,
             cfg: NmcfConfig | None = None, stft_cfg: StftConfig | None = None) -> SeparationResult:
    """STFT, factorise according to ``cfg.mode``, mask and resynthesise each stem.

    Every stem uses the mixture phase and spans the analysed region of the
    input, ``(T - 1) * hop + window_length`` samples.
    """
    cfg = cfg or NmcfConfig()
    stft_cfg = stft_cfg or StftConfig()
    spec = stft(mixture, stft_cfg)
    exemplar_H = None
    if cfg.mode == "cofactorise":
        W, H, exemplar_H, trace = cofactorize(spec.magnitude, heart_db, lung_db, cfg)
    elif cfg.mode == "supervised":
        W, H, trace, _ = supervised_nmf(spec.magnitude, heart_db, lung_db, cfg)
    else:
        W, H, trace, _ = semi_supervised_nmf(spec.magnitude, heart_db, cfg)
    stems, masks = reconstruct(spec, W, H)
    config = {"method": {"cofactorise": "nmcf"}.get(cfg.mode, cfg.mode),
              "nmcf": cfg.to_dict(), "stft": stft_cfg.to_dict(),
              "sample_rate": mixture.sample_rate}
    return SeparationResult(stems, masks, W, H, trace, config, spec, exemplar_H)
