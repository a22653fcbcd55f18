import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chestsep.errors import NumericalError, ShapeError
from chestsep.nmf_core import (
    Activations,
    CostTrace,
    Dictionary,
    FitTerm,
    NmfConfig,
    activation_step,
    beta_divergence,
    cost_terms,
    dictionary_statistics,
    dictionary_step,
    factorize,
    normalize_columns,
    stop_early,
    total_cost,
    update_activations,
    update_dictionary,
    warn_if_increasing,
)


def scalar_beta(x, y, beta):
    if beta == 0:
        return x / y - math.log(x / y) - 1
    if beta == 1:
        return (x * math.log(x / y) if x > 0 else 0.0) - x + y
    return (x ** beta + (beta - 1) * y ** beta - beta * x * y ** (beta - 1)) / (beta * (beta - 1))


def test_closed_forms():
    assert beta_divergence(3.0, 1.5, 2) == pytest.approx((3.0 - 1.5) ** 2 / 2, abs=1e-12)
    assert beta_divergence(2.7, 2.7, 1) == 0.0
    assert beta_divergence(1.0, 2.0, 0) == pytest.approx(math.log(2) - 0.5, abs=1e-12)


def test_zero_limits():
    assert beta_divergence(0.0, 2.0, 1) == pytest.approx(2.0)
    assert beta_divergence(0.0, 2.0, 0) == math.inf
    assert beta_divergence(0.0, 2.0, 2) == pytest.approx(2.0)


@pytest.mark.parametrize("beta", [0, 0.5, 1, 1.5, 2, 3])
def test_scalar_loop_oracle(beta):
    rng = np.random.default_rng(int(beta * 10))
    x = rng.uniform(0.01, 5, (7, 9))
    y = rng.uniform(0.01, 5, (7, 9))
    got = beta_divergence(x, y, beta)
    for i in range(7):
        for j in range(9):
            assert got[i, j] == pytest.approx(scalar_beta(x[i, j], y[i, j], beta), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.floats(1e-3, 100), st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0]))
def test_divergence_non_negative_and_zero_on_diagonal(x, y, beta):
    assert beta_divergence(x, y, beta) >= 0
    if y > 0:
        assert beta_divergence(y, y, beta) == pytest.approx(0.0, abs=1e-9 * max(1.0, y ** beta))


def test_divergence_rejects_bad_input():
    with pytest.raises(ValueError):
        beta_divergence(-1.0, 1.0, 1)
    with pytest.raises(ValueError):
        beta_divergence(1.0, 0.0, 1)
    with pytest.raises(ValueError):
        beta_divergence(np.nan, 1.0, 1)


def loop_activation_step(V, W, H, beta, mu):
    F, T = V.shape
    K = W.shape[1]
    L = W @ H
    out = np.empty_like(H)
    for k in range(K):
        for t in range(T):
            num = sum(W[f, k] * V[f, t] * L[f, t] ** (beta - 2) for f in range(F))
            den = sum(W[f, k] * L[f, t] ** (beta - 1) for f in range(F)) + mu
            out[k, t] = H[k, t] * num / den
    return out


def loop_dictionary_step(V, W, H, beta):
    F, T = V.shape
    K = W.shape[1]
    L = W @ H
    N = np.zeros((F, K))
    P = np.zeros((F, K))
    for f in range(F):
        for k in range(K):
            N[f, k] = sum(L[f, t] ** (beta - 2) * V[f, t] * H[k, t] for t in range(T))
            P[f, k] = sum(L[f, t] ** (beta - 1) * H[k, t] for t in range(T))
    out = np.empty_like(W)
    for k in range(K):
        wp = sum(W[g, k] * P[g, k] for g in range(F))
        wn = sum(W[g, k] * N[g, k] for g in range(F))
        for f in range(F):
            out[f, k] = W[f, k] * (N[f, k] + W[f, k] * wp) / (P[f, k] + W[f, k] * wn)
    return out / np.sqrt((out ** 2).sum(axis=0))


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0, 2.0])
def test_updates_match_scalar_loops(beta):
    rng = np.random.default_rng(7)
    V = rng.uniform(0.1, 2, (6, 5))
    W = rng.uniform(0.1, 1, (6, 3))
    W /= np.linalg.norm(W, axis=0)
    H = rng.uniform(0.1, 1, (3, 5))
    cfg = NmfConfig(beta=beta, sparsity=0.01)
    assert np.allclose(activation_step(V, W, H, cfg), loop_activation_step(V, W, H, beta, 0.01), rtol=1e-12)
    N, P = dictionary_statistics(V, W, H, cfg)
    assert np.allclose(dictionary_step(W, N, P, cfg), loop_dictionary_step(V, W, H, beta), rtol=1e-12)


def test_weighted_statistics_are_frame_scaled():
    rng = np.random.default_rng(8)
    V, W, H = rng.random((5, 6)) + 0.1, rng.random((5, 2)) + 0.1, rng.random((2, 6)) + 0.1
    w = rng.random(6)
    cfg = NmfConfig()
    N, P = dictionary_statistics(V, W, H, cfg, weights=w)
    N1, P1 = np.zeros_like(N), np.zeros_like(P)
    for t in range(6):
        Nt, Pt = dictionary_statistics(V[:, t:t + 1], W, H[:, t:t + 1], cfg)
        N1 += w[t] * Nt
        P1 += w[t] * Pt
    assert np.allclose(N, N1) and np.allclose(P, P1)


def test_statistics_add_over_frames():
    rng = np.random.default_rng(9)
    V, W, H = rng.random((5, 8)) + 0.1, rng.random((5, 3)) + 0.1, rng.random((3, 8)) + 0.1
    cfg = NmfConfig(beta=1.5)
    N, P = dictionary_statistics(V, W, H, cfg)
    Na, Pa = dictionary_statistics(V[:, :3], W, H[:, :3], cfg)
    Nb, Pb = dictionary_statistics(V[:, 3:], W, H[:, 3:], cfg)
    assert np.allclose(N, Na + Nb) and np.allclose(P, Pa + Pb)


def test_monotone_kl_without_sparsity():
    rng = np.random.default_rng(0)
    for seed in range(10):
        F, T, K = rng.integers(4, 40), rng.integers(4, 40), rng.integers(1, 8)
        V = rng.random((F, T)) * 3
        _, _, trace = factorize(V, int(K), NmfConfig(sparsity=0.0, max_iter=100, seed=seed))
        assert np.all(np.diff(trace.total) <= 1e-9)


def test_factors_nonnegative_and_unit_norm():
    V = np.random.default_rng(1).random((30, 25))
    W, H, trace = factorize(V, 5, NmfConfig(max_iter=50))
    assert np.all(W.matrix >= 0) and np.all(H.matrix >= 0)
    assert np.allclose(np.linalg.norm(W.matrix, axis=0), 1.0, atol=1e-12)
    assert len(trace) == 51
    assert trace.total[0] > trace.total[-1]


def test_trace_matches_cost_evaluator():
    V = np.random.default_rng(2).random((20, 15))
    cfg = NmfConfig(max_iter=30, sparsity=0.05)
    W, H, trace = factorize(V, 4, cfg)
    assert trace.total[-1] == pytest.approx(total_cost(V, W, H, cfg), rel=1e-10)
    div, sp = cost_terms(V, W.matrix, H.matrix, cfg)
    assert trace.sparsity[-1] == pytest.approx(sp) and trace.divergence[-1] == pytest.approx(div, rel=1e-10)


def test_kl_fast_path_matches_divergence():
    rng = np.random.default_rng(3)
    V = rng.random((10, 12))
    V[0, :3] = 0.0
    W, H = rng.random((10, 3)), rng.random((3, 12))
    w = rng.random(12)
    cfg = NmfConfig(sparsity=0.1)
    term = FitTerm(V, H, slice(0, 3), cfg, weights=w)
    term.refresh(W)
    d, s = term.cost()
    assert d == pytest.approx(float(np.sum(beta_divergence(V, W @ H, 1) * w)), rel=1e-10)
    assert s == pytest.approx(0.1 * float(H.sum(axis=0) @ w))


def test_determinism_and_seed_dependence():
    V = np.random.default_rng(4).random((16, 16))
    a = factorize(V, 3, NmfConfig(max_iter=20, seed=5))
    b = factorize(V, 3, NmfConfig(max_iter=20, seed=5))
    c = factorize(V, 3, NmfConfig(max_iter=20, seed=6))
    assert a[0].matrix.tobytes() == b[0].matrix.tobytes()
    assert a[1].matrix.tobytes() == b[1].matrix.tobytes()
    assert a[0].matrix.tobytes() != c[0].matrix.tobytes()


def test_sparsity_shrinks_activations():
    V = np.random.default_rng(5).random((20, 30))
    h0 = factorize(V, 6, NmfConfig(max_iter=100, sparsity=0.0))[1].matrix.sum()
    h1 = factorize(V, 6, NmfConfig(max_iter=100, sparsity=1.0))[1].matrix.sum()
    assert h1 < h0


@pytest.mark.parametrize("beta", [0.0, 0.5, 2.0])
def test_other_betas_decrease_cost(beta):
    V = np.random.default_rng(6).random((15, 20)) + 0.05
    _, _, trace = factorize(V, 4, NmfConfig(beta=beta, max_iter=60, sparsity=0.0))
    assert trace.total[-1] < trace.total[0]
    assert np.all(np.isfinite(trace.total))


def test_exact_low_rank_recovered():
    rng = np.random.default_rng(7)
    V = rng.random((12, 3)) @ rng.random((3, 40))
    W, H, trace = factorize(V, 3, NmfConfig(max_iter=2000, sparsity=0.0))
    assert trace.total[-1] < 1e-3 * trace.total[0]


def test_block_views():
    rng = np.random.default_rng(8)
    W = Dictionary(rng.random((4, 5)), [("a", 2), ("b", 3)])
    H = Activations(rng.random((5, 6)), [("a", 2), ("b", 3)])
    assert W.block("b").shape == (4, 3) and H.block("a").shape == (2, 6)
    assert W.block_names == ["a", "b"] and W.n_components == 5
    with pytest.raises(ShapeError):
        Dictionary(rng.random((4, 5)), [("a", 2), ("b", 2)])
    with pytest.raises(ShapeError):
        Activations(rng.random((4, 5)), [("a", 2), ("a", 2)])


def test_normalize_zero_column_is_uniform():
    W = Dictionary(np.array([[3.0, 0.0], [4.0, 0.0]]))
    out = normalize_columns(W).matrix
    assert np.allclose(out[:, 0], [0.6, 0.8]) and np.allclose(out[:, 1], 1 / np.sqrt(2))


def test_wrappers_preserve_blocks():
    rng = np.random.default_rng(9)
    blocks = [("x", 1), ("y", 2)]
    V = rng.random((5, 4))
    W = normalize_columns(Dictionary(rng.random((5, 3)), blocks))
    H = Activations(rng.random((3, 4)), blocks)
    assert update_activations(V, W, H, NmfConfig()).blocks == blocks
    assert update_dictionary(V, W, H, NmfConfig()).blocks == blocks


def test_non_finite_cost_raises():
    trace = CostTrace()
    with pytest.raises(NumericalError):
        trace.append(np.inf, 0.0)


def test_warning_on_increase():
    trace = CostTrace()
    trace.append(1.0, 0.0)
    trace.append(2.0, 0.0)
    warned = []
    with pytest.warns(RuntimeWarning):
        warn_if_increasing(trace, warned)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        warn_if_increasing(trace, warned)  # only once


def test_tolerance_stops_early():
    V = np.random.default_rng(10).random((10, 10))
    _, _, trace = factorize(V, 2, NmfConfig(max_iter=500, tol=1e-3))
    assert len(trace) < 501
    t = CostTrace()
    t.append(100.0, 0.0)
    t.append(99.95, 0.0)
    assert stop_early(t, 1e-3) and not stop_early(t, 0.0)


def test_trace_csv(tmp_path):
    V = np.random.default_rng(11).random((6, 6))
    _, _, trace = factorize(V, 2, NmfConfig(max_iter=3))
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,cost,divergence,sparsity" and len(lines) == 5


def test_config_validation():
    with pytest.raises(ValueError):
        NmfConfig(sparsity=-1)
    with pytest.raises(ValueError):
        NmfConfig(max_iter=-1)
    with pytest.raises(ValueError):
        factorize(np.ones((3, 3)), 0)
    with pytest.raises(ValueError):
        factorize(-np.ones((3, 3)), 1)
