import numpy as np
import pytest
from _oracles import INDEX_GAMMA, angle_deg, known_index_sigma, naive_sigma
from hypothesis import given, settings
from hypothesis import strategies as st

from fastddc.constraints import (
    ConstraintError,
    SigmaMatrix,
    annihilation_ratio,
    biweight,
    default_k_grid,
    knn_ccp,
    low_rank,
    oracle_sigma,
    pooled,
    principal_angles,
    qr_reparam,
    reparam,
    rot_bandwidth,
    sigma_tilde,
    sigma_tilde_arrays,
    theta_reparam,
)
from fastddc.dp import EntryModelParams, Panel, ccp_mixture, default_n_max, default_params, simulate_panel

P = default_params()


@pytest.fixture(scope="module")
def panel():
    return simulate_panel(P, 150, 8, seed=21)


def test_biweight_is_a_density():
    u = np.linspace(-1, 1, 200001)
    assert np.trapezoid(biweight(u), u) == pytest.approx(1.0, abs=1e-8)
    assert biweight(1.5) == 0.0 and biweight(-1.0) == 0.0


def test_default_k_grid():
    assert default_k_grid(40) == [1, 2, 4, 8]
    assert default_k_grid(3) == [1]


def test_rot_bandwidth_values():
    assert rot_bandwidth(100, 8) == pytest.approx(1.06 * 554400 ** (-0.2), rel=1e-15)
    assert rot_bandwidth(100, 8) == pytest.approx(0.075256, abs=5e-6)
    assert rot_bandwidth(2, 2) == pytest.approx(0.803330, abs=5e-6)
    assert rot_bandwidth(200, 8) < rot_bandwidth(100, 8)
    with pytest.raises(ValueError):
        rot_bandwidth(1, 8)


def _toy_panel(A_rows):
    A = np.asarray(A_rows)
    n, T = A.shape
    N = np.zeros_like(A)
    N[:, 1:] = np.cumsum(A, axis=1)[:, :-1]
    W = np.random.default_rng(0).random((n, 2))
    return Panel(W=W, N=N, A=A)


def test_knn_all_entries_predict_one():
    panel = _toy_panel(np.ones((20, 3), dtype=int))
    ccp = knn_ccp(panel, k_grid=[1, 3])
    assert np.all(ccp.fitted == 1.0)
    assert ccp.predict([0.5, 0.5], 1) == 1.0


def test_knn_full_stratum_gives_stratum_mean(panel):
    W, N, A, _ = pooled(panel)
    ccp = knn_ccp(panel, k_grid=[1, 2])
    ccp.k = int(np.sum(N == 0))
    assert ccp.predict(np.full(9, 0.5), 0) == pytest.approx(A[N == 0].mean())


def test_knn_missing_stratum_raises(panel):
    ccp = knn_ccp(panel, k_grid=[1, 2])
    with pytest.raises(ConstraintError, match="N=99"):
        ccp.predict(np.zeros(9), 99)


def test_knn_loo_matches_brute_force():
    panel = simulate_panel(P, 25, 4, seed=3)
    grid = [1, 2, 4, 8]
    ccp = knn_ccp(panel, k_grid=grid)
    W, N, A, _ = pooled(panel)
    sse = {k: 0.0 for k in grid}
    for i in range(len(A)):
        same = np.flatnonzero((N == N[i]) & (np.arange(len(A)) != i))
        if same.size == 0:
            continue
        order = same[np.argsort(np.linalg.norm(W[same] - W[i], axis=1), kind="stable")]
        for k in grid:
            sse[k] += (A[order[: min(k, order.size)]].mean() - A[i]) ** 2
    for k in grid:
        assert ccp.cv_error[k] == pytest.approx(sse[k] / len(A), abs=1e-12)


def test_knn_beats_stratum_constant_predictor():
    panel = simulate_panel(P, 2000, 8, seed=5)
    W, N, A, _ = pooled(panel)
    ccp = knn_ccp(panel)
    n_max = default_n_max(8)
    rows = np.random.default_rng(0).choice(len(A), 400, replace=False)
    truth = np.array([ccp_mixture(W[i], N[i], P, n_max) for i in rows])
    const = np.array([A[N == N[i]].mean() for i in rows])
    assert np.mean((ccp.fitted[rows] - truth) ** 2) < np.mean((const - truth) ** 2)


def test_ccp_csv_export(tmp_path, panel):
    ccp = knn_ccp(panel, k_grid=[1, 4])
    path = tmp_path / "pi.csv"
    ccp.to_csv(path, panel)
    lines = path.read_text().splitlines()
    assert lines[0] == "market_id,t,pi_hat" and len(lines) == panel.n * panel.T + 1


def test_sigma_tilde_matches_double_loop():
    rng = np.random.default_rng(8)
    P_ = 30
    Z = np.column_stack([rng.random((P_, 2)), rng.integers(0, 2, P_)])
    pi = rng.random(P_)
    strata = Z[:, 2].astype(int)
    groups = np.repeat(np.arange(10), 3)
    fast = sigma_tilde_arrays(Z, pi, strata, groups, 0.9)
    slow = naive_sigma(Z, pi, strata, groups, 0.9, biweight)
    assert np.allclose(fast.m, slow, atol=1e-12)


def test_sigma_tilde_constant_ccp_is_pairwise_second_moment():
    rng = np.random.default_rng(9)
    w = rng.random((12, 1))
    fast = sigma_tilde_arrays(w, np.full(12, 0.3), np.zeros(12, dtype=int), np.arange(12), 0.5)
    diffs = (w[:, None, 0] - w[None, :, 0]).ravel()
    assert fast.m[0, 0] == pytest.approx(np.sum(diffs**2) / (12 * 11), rel=1e-12)


def test_identical_observations_contribute_nothing():
    Z = np.ones((4, 2))
    s = sigma_tilde_arrays(Z, np.array([0.1, 0.2, 0.1, 0.2]), np.zeros(4, dtype=int), np.arange(4), 1.0)
    assert np.allclose(s.m, 0.0)


def test_sigma_tilde_zero_mass_raises():
    Z = np.random.default_rng(1).random((4, 2))
    # only same-group pairs exist
    with pytest.raises(ConstraintError):
        sigma_tilde_arrays(Z, np.array([0.1, 0.2, 0.3, 0.4]), np.zeros(4, dtype=int), np.zeros(4, dtype=int), 1.0)
    with pytest.raises(ValueError):
        sigma_tilde_arrays(Z, np.zeros(4), np.zeros(4, dtype=int), np.arange(4), 0.0)


def test_sigma_tilde_symmetric_psd_and_equivariant(panel):
    ccp = knn_ccp(panel)
    s = sigma_tilde(panel, ccp, rot_bandwidth(panel.n, panel.T))
    assert np.allclose(s.m, s.m.T, atol=1e-10)
    assert s.eigenvalues.min() >= -1e-10
    assert s.d == panel.d_w + 1
    perm = np.r_[np.random.default_rng(2).permutation(9), 9]
    W, N, _, market = pooled(panel)
    Z = np.column_stack([W, N])
    sp = sigma_tilde_arrays(Z[:, perm], ccp.fitted, N, market, rot_bandwidth(panel.n, panel.T))
    assert np.allclose(sp.m, s.m[np.ix_(perm, perm)], atol=1e-12)


def test_known_index_alignment():
    s = known_index_sigma(2000, seed=0)
    assert angle_deg(s.eigenvectors[:, -1], INDEX_GAMMA) < 10.0


def test_low_rank_examples():
    s = SigmaMatrix(np.diag([3.0, 2.0, 1.0, 0.0]))
    hat = low_rank(s, rank=2)
    assert np.allclose(hat.m, np.diag([3.0, 2.0, 0.0, 0.0]), atol=1e-15)
    assert hat.kind == "hat" and hat.rank == 2
    assert np.count_nonzero(hat.eigenvalues) == 2
    again = low_rank(SigmaMatrix(hat.m), threshold=0.5)
    assert np.max(np.abs(again.m - hat.m)) < 1e-12
    with pytest.raises(ValueError):
        low_rank(s, rank=5)
    with pytest.raises(ValueError):
        low_rank(s)


def test_sigma_json_roundtrip():
    hat = low_rank(SigmaMatrix(np.diag([3.0, 2.0, 1.0])), rank=2)
    back = SigmaMatrix.from_json(hat.to_json())
    assert np.array_equal(back.m, hat.m) and back.rank == 2 and back.kind == "hat"
    assert np.array_equal(back.eigenvalues, hat.eigenvalues)


def test_reparam_zero_matrix_is_identity():
    hat = low_rank(SigmaMatrix(np.zeros((4, 4))), rank=0)
    r = reparam(hat)
    assert np.allclose(r.basis, np.eye(4))


def test_reparam_explicit_nullspace():
    b = np.array([1.0, 2.0, -2.0]) / 3.0
    hat = low_rank(SigmaMatrix(np.eye(3) - np.outer(b, b)), rank=2)
    for build in (reparam, qr_reparam):
        r = build(hat)
        assert r.q == 1
        assert abs(abs(r.basis[:, 0] @ b) - 1) < 1e-12


def test_reparam_no_free_directions():
    hat = low_rank(SigmaMatrix(np.eye(3)), rank=3)
    with pytest.raises(ConstraintError):
        reparam(hat)
    with pytest.raises(ConstraintError):
        qr_reparam(hat)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rank=st.integers(1, 8))
def test_reparam_annihilates_and_matches_qr(seed, rank):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(10, 10))
    A[-1] = 0.0
    A[:, -1] = 0.0
    hat = low_rank(SigmaMatrix(A @ A.T), rank=rank)
    layout = np.arange(9)
    r = reparam(hat, layout=layout)
    assert np.allclose(r.basis.T @ r.basis, np.eye(r.q), atol=1e-12)
    for eta in rng.normal(size=(20, r.q)):
        assert np.linalg.norm(hat.m @ r.full_gamma(eta)) <= 1e-10 * np.linalg.norm(hat.m, 2) * max(1, np.linalg.norm(eta))
    q = qr_reparam(hat, layout=layout)
    assert q.q == r.q
    assert np.max(principal_angles(r, q)) <= 1e-8


def test_theta_reparam_roundtrip():
    hat = low_rank(SigmaMatrix(np.diag([1.0] * 8 + [0.0, 0.0])), rank=8)
    tm = theta_reparam(reparam(hat, layout=np.arange(9)), 9)
    assert tm.dim == 3
    x = np.array([0.7, -0.2, 1.3])
    th = tm.to_full(x)
    assert np.allclose(th[:8], 0.0) and np.allclose(tm.to_reduced(th), x)


def test_oracle_single_covariate_design():
    p = EntryModelParams((1.0, 0.0, 0.0), 0.5, 0.5, 0.95, (0.5,), (1.0,))
    s = oracle_sigma(p, 200_000, 0.002, seed=0, T=4)
    assert s.m[0, 0] < 0.01
    assert s.m[1, 1] == pytest.approx(1 / 6, abs=0.03)
    assert s.m[2, 2] == pytest.approx(1 / 6, abs=0.03)
    assert np.allclose(s.m[3], 0.0) and np.allclose(s.m[:, 3], 0.0)
    assert annihilation_ratio(s, np.array([1.0, 0, 0, 0])) < 0.05


def test_oracle_rejects_bad_inputs():
    with pytest.raises(ValueError):
        oracle_sigma(P, 100, 0.0, seed=0)
    with pytest.raises(ConstraintError):
        oracle_sigma(P, 50, 1e-9, seed=0)
