"""
Sparse beta-divergence NMF with unit-norm dictionary columns.

The model is ``V ~ W_hat H`` where every column of ``W_hat`` has unit L2
norm and the cost is ``D_beta(V | W_hat H) + mu * sum(H)``. Activations use
the standard multiplicative rule with ``mu`` added to the denominator; the
dictionary uses the normalisation-aware rule whose gradient is projected
onto the tangent space of the unit sphere.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

FLOOR = 1e-12


@dataclass(frozen=True)
class NmfConfig:
    beta: float = 1.0
    sparsity: float = 0.001
    max_iter: int = 500
    seed: int = 0
    floor: float = FLOOR
    tol: float = 0.0

    def __post_init__(self):
        if self.sparsity < 0:
            raise ValueError("sparsity must be >= 0")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if not self.floor > 0:
            raise ValueError("floor must be positive")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_blocks(blocks, size, what):
    blocks = [(str(n), int(c)) for n, c in blocks]
    if any(c < 0 for _, c in blocks) or sum(c for _, c in blocks) != size:
        raise ShapeError(f"{what} blocks {blocks} do not add up to {size}")
    if len({n for n, _ in blocks}) != len(blocks):
        raise ShapeError(f"duplicate block names in {blocks}")
    return blocks


class _Blocked:
    """Shared block bookkeeping for dictionaries (columns) and activations (rows)."""

    _axis = 0

    def _init(self, matrix, blocks, name):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ShapeError(f"{name} must be a 2-D matrix")
        size = self.matrix.shape[self._axis]
        self.blocks = _check_blocks(blocks if blocks is not None else [("all", size)], size, name)

    @property
    def n_components(self) -> int:
        return self.matrix.shape[self._axis]

    def block_slice(self, name: str) -> slice:
        start = 0
        for n, c in self.blocks:
            if n == name:
                return slice(start, start + c)
            start += c
        raise KeyError(name)

    def block(self, name: str) -> np.ndarray:
        sl = self.block_slice(name)
        return self.matrix[:, sl] if self._axis == 1 else self.matrix[sl]

    @property
    def block_names(self) -> list[str]:
        return [n for n, _ in self.blocks]


class Dictionary(_Blocked):
    """(F, K) basis matrix whose columns are partitioned into named blocks."""

    _axis = 1

    def __init__(self, matrix, blocks=None):
        self._init(matrix, blocks, "dictionary")

    def __repr__(self):
        return f"Dictionary(shape={self.matrix.shape}, blocks={self.blocks})"


class Activations(_Blocked):
    """(K, T) activation matrix whose rows mirror the dictionary blocks."""

    _axis = 0

    def __init__(self, matrix, blocks=None):
        self._init(matrix, blocks, "activations")

    def __repr__(self):
        return f"Activations(shape={self.matrix.shape}, blocks={self.blocks})"


@dataclass
class CostTrace:
    """Objective values, one row per iteration (row 0 is the initial point)."""

    total: list = field(default_factory=list)
    divergence: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)

    def append(self, divergence, sparsity, **terms):
        total = divergence + sparsity
        if not np.isfinite(total):
            raise NumericalError(f"non-finite cost at iteration {len(self.total)}")
        self.total.append(float(total))
        self.divergence.append(float(divergence))
        self.sparsity.append(float(sparsity))
        for k, v in terms.items():
            self.terms.setdefault(k, []).append(float(v))

    def __len__(self):
        return len(self.total)

    def to_csv(self, path):
        names = list(self.terms)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "cost", "divergence", "sparsity"] + names)
            for i in range(len(self.total)):
                row = [i, self.total[i], self.divergence[i], self.sparsity[i]]
                row += [self.terms[k][i] for k in names]
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])


def beta_divergence(x, y, beta: float):
    """Elementwise beta-divergence ``D_beta(x | y)``.

    Works on scalars or arrays. For ``beta == 1`` zeros in `x` use the
    limit ``0 log 0 = 0``; for ``beta <= 0`` a zero `x` gives ``inf``.

    Examples
    --------
    >>> float(beta_divergence(2.0, 1.0, 2))
    0.5
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("beta_divergence needs finite inputs")
    if np.any(x < 0) or np.any(y <= 0):
        raise ValueError("beta_divergence needs x >= 0 and y > 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        if beta == 1:
            xlogx = np.where(x > 0, x * (np.log(np.where(x > 0, x, 1.0)) - np.log(y)), 0.0)
            d = xlogx + (y - x)
        elif beta == 0:
            r = x / y
            d = np.where(r > 0, r - np.log(np.where(r > 0, r, 1.0)) - 1, np.inf)
        else:
            d = (x ** beta - y ** beta - beta * y ** (beta - 1) * (x - y)) / (beta * (beta - 1))
    # rounding can leave tiny negatives where x ~ y
    d = np.maximum(d, 0.0)
    return d[()] if d.ndim == 0 else d


def _divergence_sum(V, L, beta, weights=None):
    d = beta_divergence(V, L, beta)
    if weights is not None:
        d = d * weights
    return float(np.sum(d))


def total_cost(V, dictionary: Dictionary, activations: Activations, cfg: NmfConfig) -> float:
    """``sum D_beta(V | W H) + mu * sum(H)``."""
    div, sp = cost_terms(V, dictionary.matrix, activations.matrix, cfg)
    return div + sp


def cost_terms(V, W, H, cfg: NmfConfig, weights=None):
    """Divergence and sparsity parts of the cost for raw arrays.

    `weights`, if given, scales each column (frame) of both parts.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != (W.shape[0], H.shape[1]) or W.shape[1] != H.shape[0]:
        raise ShapeError(f"V {V.shape} vs W {W.shape} H {H.shape}")
    L = np.maximum(W @ H, cfg.floor)
    div = _divergence_sum(V, L, cfg.beta, weights)
    hsum = H.sum(axis=0)
    sp = cfg.sparsity * float(np.sum(hsum * weights) if weights is not None else np.sum(hsum))
    return div, sp


def _model(W, H, floor):
    L = W @ H
    return np.maximum(L, floor, out=L)


def _h_step(V, W, H, L, cfg: NmfConfig) -> np.ndarray:
    beta = cfg.beta
    if beta == 1:
        num = W.T @ (V / L)
        den = W.sum(axis=0)[:, None] + cfg.sparsity
    elif beta == 2:
        num = W.T @ V
        den = W.T @ L + cfg.sparsity
    else:
        num = W.T @ (V * L ** (beta - 2))
        den = W.T @ L ** (beta - 1) + cfg.sparsity
    H = H * num
    H /= np.maximum(den, cfg.floor)
    return np.maximum(H, cfg.floor, out=H)


def _w_stats(V, H, L, cfg: NmfConfig, weights=None):
    beta = cfg.beta
    Ht = H.T if weights is None else (H * weights).T
    if beta == 1:
        N = (V / L) @ Ht
        P = np.broadcast_to(Ht.sum(axis=0), N.shape).copy()
    elif beta == 2:
        N = V @ Ht
        P = L @ Ht
    else:
        N = (V * L ** (beta - 2)) @ Ht
        P = L ** (beta - 1) @ Ht
    return N, P


def activation_step(V, W, H, cfg: NmfConfig) -> np.ndarray:
    """One multiplicative update of H for a fixed (normalised) W.

    ``H <- H * W^T (V * L^(beta-2)) / (W^T L^(beta-1) + mu)`` with ``L = W H``.
    """
    return _h_step(V, W, H, _model(W, H, cfg.floor), cfg)


def dictionary_statistics(V, W, H, cfg: NmfConfig, weights=None):
    """Negative and positive gradient parts for the dictionary update.

    Returns ``(N, P)`` with ``N = (L^(beta-2) * V) H^T`` and
    ``P = L^(beta-1) H^T`` where ``L = W H``. Optional per-frame `weights`
    scale each frame's contribution. Both are linear in the frame
    contributions, so statistics from several factorisations sharing columns
    of W may simply be added.
    """
    return _w_stats(V, H, _model(W, H, cfg.floor), cfg, weights)


def dictionary_step(W, N, P, cfg: NmfConfig) -> np.ndarray:
    """Normalisation-aware multiplicative step followed by column normalisation.

    ``W <- W * (N + W * 1 1^T (W * P)) / (P + W * 1 1^T (W * N))``
    """
    WP = np.sum(W * P, axis=0)
    WN = np.sum(W * N, axis=0)
    num = N + W * WP
    den = P + W * WN
    W = np.maximum(W * num / np.maximum(den, cfg.floor), cfg.floor)
    return np.maximum(_normalize(W, cfg.floor), cfg.floor)


def _normalize(W, floor=FLOOR):
    W = np.asarray(W, dtype=float)
    norms = np.sqrt(np.sum(W * W, axis=0))
    out = np.empty_like(W)
    ok = norms >= floor
    out[:, ok] = W[:, ok] / norms[ok]
    out[:, ~ok] = 1.0 / np.sqrt(W.shape[0])
    return out


def normalize_columns(dictionary: Dictionary, floor: float = FLOOR) -> Dictionary:
    """Scale each column to unit L2 norm; near-zero columns become uniform."""
    return Dictionary(_normalize(dictionary.matrix, floor), dictionary.blocks)


def update_activations(V, dictionary: Dictionary, activations: Activations, cfg: NmfConfig) -> Activations:
    V = np.asarray(V, dtype=float)
    H = activation_step(V, dictionary.matrix, activations.matrix, cfg)
    return Activations(H, activations.blocks)


def update_dictionary(V, dictionary: Dictionary, activations: Activations, cfg: NmfConfig) -> Dictionary:
    V = np.asarray(V, dtype=float)
    N, P = dictionary_statistics(V, dictionary.matrix, activations.matrix, cfg)
    return Dictionary(dictionary_step(dictionary.matrix, N, P, cfg), dictionary.blocks)


def initialize(rng: np.random.Generator, n_rows: int, n_cols: int) -> np.ndarray:
    """Entries i.i.d. uniform on (0, 1]."""
    return 1.0 - rng.random((n_rows, n_cols))


def prepare_input(V, cfg: NmfConfig) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise ShapeError("V must be a 2-D matrix")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ValueError("V must be finite and non-negative")
    if cfg.beta <= 0:
        # Itakura-Saito and below are undefined on exact zeros
        V = np.maximum(V, cfg.floor)
    return V


def stop_early(trace: CostTrace, tol: float) -> bool:
    if tol <= 0 or len(trace) < 2:
        return False
    prev, cur = trace.total[-2], trace.total[-1]
    return prev > 0 and (prev - cur) / prev < tol


def warn_if_increasing(trace: CostTrace, warned: list, slack: float = 1e-9):
    if not warned and len(trace) >= 2 and trace.total[-1] > trace.total[-2] + slack:
        warned.append(True)
        warnings.warn(
            f"cost increased at iteration {len(trace) - 1}: "
            f"{trace.total[-2]!r} -> {trace.total[-1]!r}",
            RuntimeWarning,
            stacklevel=3,
        )


class FitTerm:
    """One data matrix modelled by a contiguous group of dictionary columns.

    Parameters
    ----------
    V : ndarray, shape (F, T)
    H : ndarray, shape (n_columns, T)
        Initial activations.
    columns : slice
        Columns of the shared dictionary used by this term.
    weights : ndarray, shape (T,), optional
        Per-frame weights applied to this term's cost and dictionary
        statistics.
    name : str
    """

    def __init__(self, V, H, columns: slice, cfg: NmfConfig, weights=None, name="data"):
        self.V = V
        self.H = H
        self.columns = columns
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.name = name
        self.cfg = cfg
        self.L = None
        if cfg.beta == 1:
            # frame-wise constant part of the KL cost: sum_f V log V - V
            with np.errstate(divide="ignore", invalid="ignore"):
                xlogx = np.where(V > 0, V * np.log(np.where(V > 0, V, 1.0)), 0.0)
            self._const = (xlogx - V).sum(axis=0)

    def refresh(self, W):
        self.L = _model(W[:, self.columns], self.H, self.cfg.floor)

    def h_step(self, W):
        self.H = _h_step(self.V, W[:, self.columns], self.H, self.L, self.cfg)

    def statistics(self):
        return _w_stats(self.V, self.H, self.L, self.cfg, self.weights)

    def cost(self):
        """(divergence, sparsity) at the current ``L``, weighted per frame."""
        cfg = self.cfg
        if cfg.beta == 1:
            per_frame = self._const - np.einsum("ft,ft->t", self.V, np.log(self.L)) + self.L.sum(axis=0)
        else:
            per_frame = beta_divergence(self.V, self.L, cfg.beta).sum(axis=0)
        sp = cfg.sparsity * self.H.sum(axis=0)
        if self.weights is not None:
            return float(per_frame @ self.weights), float(sp @ self.weights)
        return float(per_frame.sum()), float(sp.sum())


def solve(W, terms, cfg: NmfConfig, fixed_columns=None):
    """Alternate activation and dictionary updates over several terms.

    ``terms[0]`` must cover every column of `W`; its dictionary statistics
    are computed first and those of the remaining terms are added onto the
    columns they use. Columns listed in `fixed_columns` (slices) are reset
    after every dictionary step.

    Returns
    -------
    W : ndarray
    trace : CostTrace
        Row 0 is the initial cost; the extra ``terms`` hold each term's
        weighted cost.
    """
    fixed = [(sl, W[:, sl].copy()) for sl in (fixed_columns or [])]

    def record():
        div = sp = 0.0
        parts = {}
        for term in terms:
            d, s = term.cost()
            div += d
            sp += s
            parts[term.name] = d + s
        trace.append(div, sp, **(parts if len(terms) > 1 else {}))

    trace = CostTrace()
    for term in terms:
        term.refresh(W)
    record()
    warned = []
    for _ in range(cfg.max_iter):
        for term in terms:
            term.h_step(W)
            term.refresh(W)
        N, P = terms[0].statistics()
        for term in terms[1:]:
            Nx, Px = term.statistics()
            N[:, term.columns] += Nx
            P[:, term.columns] += Px
        W = dictionary_step(W, N, P, cfg)
        for sl, block in fixed:
            W[:, sl] = block
        for term in terms:
            term.refresh(W)
        record()
        warn_if_increasing(trace, warned)
        if stop_early(trace, cfg.tol):
            break
    return W, trace


def factorize(V, n_components: int, cfg: NmfConfig | None = None, blocks=None):
    """Blind sparse NMF.

    Parameters
    ----------
    V : ndarray, shape (F, T)
        Non-negative data.
    n_components : int
        Number of basis vectors K.
    cfg : NmfConfig
    blocks : list of (name, count), optional
        Block labels attached to the returned factors.

    Returns
    -------
    dictionary : Dictionary
    activations : Activations
    trace : CostTrace
        ``trace.total[0]`` is the cost at initialisation, followed by one
        entry per iteration.
    """
    cfg = cfg or NmfConfig()
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    V = prepare_input(V, cfg)
    F, T = V.shape
    rng = np.random.default_rng(cfg.seed)
    W = np.maximum(_normalize(initialize(rng, F, n_components), cfg.floor), cfg.floor)
    term = FitTerm(V, initialize(rng, n_components, T), slice(0, n_components), cfg)
    W, trace = solve(W, [term], cfg)
    blocks = blocks if blocks is not None else [("all", n_components)]
    return Dictionary(W, blocks), Activations(term.H, blocks), trace
