import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflqg.model import TimeGrid, al_problem
from mflqg.riccati import solve_sigma
from mflqg.simulate import (
    SimulationError,
    brownian_increments,
    discrete_mean,
    innovation_diagnostics,
    kalman_filter,
    law_mean,
    noise_block,
    simulate_closed_loop,
    simulate_eta,
    simulate_k,
    simulate_truth,
)
from mflqg.synthesis import FeedbackLaw, synthesize_all

from scenarios import random_problem, scalar_problem

AL_PATHS = 20000


@pytest.fixture(scope="module")
def al_run():
    p = al_problem(256)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=42, paths=AL_PATHS)
    return s, ens


def _se(x, axis=0):
    return np.std(x, axis=axis, ddof=1) / np.sqrt(x.shape[axis])


# ------------------------------------------------------------------- noise


def test_increments_reproducible():
    g = TimeGrid(1.0, 50)
    a = brownian_increments(7, 3, g, 2, 1, 2)
    b = brownian_increments(7, 3, g, 2, 1, 2)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.dWt, b.dWt) and np.array_equal(a.xi, b.xi)
    assert a.dW.shape == (50, 2) and a.dWt.shape == (50, 1)


def test_increments_block_matches_slabs():
    g = TimeGrid(1.0, 20)
    nb = noise_block(5, [4, 9, 2], g, 1, 2, 1)
    for j, pid in enumerate((4, 9, 2)):
        s = brownian_increments(5, pid, g, 1, 2, 1)
        assert np.array_equal(nb.dW[j], s.dW) and np.array_equal(nb.dWt[j], s.dWt)


def test_increments_independent_paths():
    g = TimeGrid(1.0, 100_000)
    a = brownian_increments(42, 0, g, 1, 0).dW[:, 0]
    b = brownian_increments(42, 1, g, 1, 0).dW[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_increments_variance():
    g = TimeGrid(1.0, 1000)
    nb = noise_block(42, range(100), g, 1, 0, 0)
    z = nb.dW.ravel()
    assert z.size == 100_000
    assert abs(z.var() / g.step - 1) < 0.02
    assert abs(z.mean()) < 3 * np.sqrt(g.step / z.size)


# ------------------------------------------------------------------- truth


def test_noiseless_truth_follows_mean():
    p = scalar_problem(steps=100, a=0.4, abar=0.2, bbar=0.1, mu0=1.3)
    u = np.zeros((101, 1))
    m = discrete_mean(p, lambda i, mi: u[i][None])
    x, Y, uu = simulate_truth(p, u, brownian_increments(1, 0, p.grid, 1, 1, 1), m)
    assert np.array_equal(x[:, 0], m[:, 0])


def test_pure_integration():
    p = scalar_problem(steps=100, c=1.0)
    slab = brownian_increments(3, 0, p.grid, 1, 1, 1)
    x, _, _ = simulate_truth(p, np.zeros((101, 1)), slab, np.zeros((101, 1)))
    assert np.array_equal(x[1:, 0] - x[0, 0], np.cumsum(slab.dW[:, 0]))


def test_truth_mean_al(al_run):
    s, ens = al_run
    xT = ens.x[:, -1, 0]
    assert abs(xT.mean() - s.bundle.Ex[-1, 0]) <= 3 * _se(xT)
    assert s.bundle.Ex[-1, 0] == pytest.approx(3.2622, abs=1e-4)


def test_nonfinite_state_raises():
    p = scalar_problem(steps=200, a=1e5, mu0=1.0)
    with pytest.raises(SimulationError) as exc:
        simulate_truth(p, np.zeros((201, 1)), brownian_increments(0, 0, p.grid, 1, 1, 1), np.zeros((201, 1)),
                       sigma=np.zeros((201, 1, 1)))
    assert exc.value.step > 0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_linearity_in_control(lam, seed):
    p = random_problem(seed, steps=50)
    rng = np.random.default_rng(seed)
    v1, v2 = rng.standard_normal((2, 51, p.k))
    nb = noise_block(seed, range(3), p.grid, p.r, p.rt, p.n)
    sig = solve_sigma(p)
    m0 = np.zeros((51, p.n))
    x1, _, _ = simulate_truth(p, v1, nb, m0, sig)
    x2, _, _ = simulate_truth(p, v2, nb, m0, sig)
    xl, _, _ = simulate_truth(p, lam * v1 + (1 - lam) * v2, nb, m0, sig)
    assert np.max(np.abs(xl - (lam * x1 + (1 - lam) * x2))) <= 1e-12


# ------------------------------------------------------------------ filter


def test_filter_without_information():
    p = scalar_problem(steps=100, c=0.5, sigma0=0.3, mu0=0.7)
    nb = noise_block(0, range(5), p.grid, 1, 1, 1)
    m = np.full((101, 1), 0.7)
    sig = solve_sigma(p)
    x, Y, u = simulate_truth(p, np.zeros((101, 1)), nb, m, sig)
    xh, _ = kalman_filter(p, sig, Y, u, m)
    assert np.all(xh == 0.7)
    assert np.std(x[:, -1]) > 0


def test_filter_perfect_knowledge():
    p = scalar_problem(steps=100, a=0.3, b=1.0, f=1.0, mu0=0.5)
    nb = noise_block(0, range(5), p.grid, 1, 1, 1)
    sig = solve_sigma(p)
    assert np.all(sig == 0)
    m = discrete_mean(p, lambda i, mi: np.ones((1, 1)))
    x, Y, u = simulate_truth(p, np.ones((101, 1)), nb, m, sig)
    xh, _ = kalman_filter(p, sig, Y, u, m)
    assert np.array_equal(xh, x)


def test_filter_grid_mismatch():
    p = scalar_problem(steps=10)
    with pytest.raises(ValueError):
        kalman_filter(p, np.zeros((11, 1, 1)), np.zeros((5, 1)), np.zeros((11, 1)), np.zeros((11, 1)))


def test_engine_filter_matches_standalone():
    p = random_problem(2, steps=60)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=1, paths=7)
    xh, wb = kalman_filter(p, s.bundle.Sigma, ens.Y, ens.u, ens.mean)
    # differencing Y reorders the rounding of the innovation
    assert np.allclose(xh, ens.xhat, rtol=0, atol=1e-12)
    assert np.allclose(wb, ens.wbar, rtol=0, atol=1e-12)


def test_filter_mse_al(al_run):
    s, ens = al_run
    g = s.problem.grid
    for t in (0.25, 0.5, 1.0):
        i = g.index_of(t)
        mse = np.mean((ens.x[:, i, 0] - ens.xhat[:, i, 0]) ** 2)
        assert abs(mse / s.bundle.Sigma[i, 0, 0] - 1) <= 0.05


# ------------------------------------------------------------- closed loop


def test_zero_law_is_open_loop():
    p = scalar_problem(steps=50, a=0.2, c=0.3, f=1.0, mu0=1.0)
    K = 51
    law = FeedbackLaw(p.grid, np.zeros((K, 1, 1)), np.zeros((K, 1, 1)), np.zeros((K, 1)))
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, law, s.bundle, seed=3, paths=4)
    nb = noise_block(3, range(4), p.grid, 1, 1, 1)
    x, Y, u = simulate_truth(p, np.zeros((K, 1)), nb, ens.mean, s.bundle.Sigma)
    assert np.array_equal(x, ens.x) and np.array_equal(Y, ens.Y) and np.all(ens.u == 0)


def test_initial_control_identical(al_run):
    s, ens = al_run
    u0 = -(s.bundle.Gamma[0, 0, 0] + s.bundle.Lambda[0, 0]) + 1.0
    assert np.all(ens.u[:, 0, 0] == ens.u[0, 0, 0])
    assert ens.u[0, 0, 0] == pytest.approx(u0, abs=1e-14)


def test_tower_consistency(al_run):
    _, ens = al_run
    d = ens.x - ens.xhat
    z = np.abs(d.mean(axis=0)) / np.maximum(_se(d), 1e-300)
    # one z-test per knot; Bonferroni at the 3-sigma family-wise level
    assert np.max(z[1:]) <= 4.4


def test_filter_mean_tracks_ex(al_run):
    s, ens = al_run
    xh = ens.xhat[:, :, 0]
    gap = np.abs(xh.mean(axis=0) - ens.mean[:, 0])
    assert np.all(gap <= 4.4 * _se(xh) + 1e-12)


def test_discrete_mean_is_ensemble_expectation(al_run):
    s, ens = al_run
    assert np.array_equal(ens.mean, law_mean(s.problem, s.law))
    assert np.max(np.abs(ens.mean[:, 0] - s.bundle.Ex[:, 0])) < 1e-3


def test_reproducible_and_worker_invariant():
    p = random_problem(3, steps=40)
    s = synthesize_all(p)
    a = simulate_closed_loop(p, s.law, s.bundle, seed=9, paths=5000, workers=1)
    b = simulate_closed_loop(p, s.law, s.bundle, seed=9, paths=5000, workers=3)
    for name in ("x", "Y", "xhat", "u", "wbar"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    h1, t1 = a.columns(limit=10)
    h2, t2 = b.columns(limit=10)
    assert h1 == h2 and np.array_equal(t1, t2)


def test_first_path_offset_matches_slice():
    p = random_problem(3, steps=40)
    s = synthesize_all(p)
    full = simulate_closed_loop(p, s.law, s.bundle, seed=9, paths=10)
    tail = simulate_closed_loop(p, s.law, s.bundle, seed=9, paths=4, first_path=6)
    assert np.array_equal(full.x[6:], tail.x)


def test_columns_layout():
    p = random_problem(3, steps=10)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=1, paths=3)
    names, table = ens.columns()
    assert names == ["path_id", "t", "x_0", "x_1", "Y_0", "Y_1", "xhat_0", "xhat_1", "u_0", "u_1"]
    assert table.shape == (33, 10)
    assert np.array_equal(table[11:22, 0], np.ones(11))


def test_fresh_mode_matches_innovation_mode():
    p = al_problem(100)
    s = synthesize_all(p)
    a = simulate_closed_loop(p, s.law, s.bundle, seed=5, paths=20000)
    b = simulate_closed_loop(p, s.law, s.bundle, seed=6, paths=20000, mode="fresh")
    assert np.all(np.isnan(b.x))
    xa, xb = a.xhat[:, -1, 0], b.xhat[:, -1, 0]
    se = np.sqrt(_se(xa) ** 2 + _se(xb) ** 2)
    assert abs(xa.mean() - xb.mean()) <= 3 * se
    va, vb = xa.var(ddof=1), xb.var(ddof=1)
    assert abs(va - vb) <= 3 * np.sqrt(2 / 20000) * (va + vb) / np.sqrt(2)


# --------------------------------------------------------------- adjoint k


def test_k_deterministic_al():
    p = al_problem(200)
    k = simulate_k(p, noise_block(0, range(2), p.grid, 1, 1, 1), np.zeros(1))
    assert np.array_equal(k[0], k[1])
    euler = (1 + 0.06 * p.grid.step) ** np.arange(201)
    assert np.allclose(k[0, :, 0], euler, rtol=1e-13)
    assert np.allclose(k[0, :, 0], np.exp(0.06 * p.grid.times), rtol=1e-4)


def test_k_zero():
    p = scalar_problem(steps=20, beta=0.3)
    assert np.all(simulate_k(p, brownian_increments(0, 0, p.grid, 1, 1), np.ones(1)) == 0)


def test_k_martingale():
    p = scalar_problem(steps=200, gammatilde=1.0, N=1.0)
    k = simulate_k(p, noise_block(42, range(20000), p.grid, 1, 1, 1), np.zeros(1))
    for i in (50, 100, 200):
        assert abs(k[:, i, 0].mean() + 1) <= 3 * _se(k[:, i, 0])


# --------------------------------------------------------------------- eta


def test_eta_matches_mean_reduction():
    p = scalar_problem(steps=200, a=0.2, abar=0.1, b=1.0, bbar=0.05, c=0.3, f=1.0, mu0=1.0, sigma0=0.2,
                       psi=0.7, psibar=0.2, rho=1.5, rhobar=-0.5)
    v = np.sin(2 * np.pi * p.grid.times)[:, None]
    est = simulate_eta(p, seed=42, paths=20000, control=v)
    m = discrete_mean(p, lambda i, mi: v[i][None])
    t = p.grid.times
    src = 0.7 * v[:, 0] + 0.2
    ref = (1.5 - 0.5) * m[-1, 0] + np.sum(0.5 * (src[1:] + src[:-1])) * p.grid.step
    assert abs(est.value - ref) <= 3 * est.stderr
    assert est.stderr > 0 and t.size == 201


def test_eta_trivial():
    p = scalar_problem(steps=50, c=1.0, mu0=2.0)
    est = simulate_eta(p, seed=1, paths=100, control=np.ones((51, 1)))
    assert est.value == 0.0 and est.stderr == 0.0


def test_eta_martingale_mean():
    p = scalar_problem(steps=200, a=0.3, mu0=1.0, gammatilde=0.5, rho=1.0)
    est = simulate_eta(p, seed=42, paths=20000, control=np.zeros((201, 1)))
    xT = (1 + 0.3 * p.grid.step) ** 200
    assert abs(est.value - xT) <= 3 * est.stderr


def test_eta_precondition():
    with pytest.raises(ValueError):
        simulate_eta(scalar_problem(beta=0.1), seed=0, paths=2, control=np.zeros((201, 1)))


# -------------------------------------------------------------- innovation


def test_innovation_al(al_run):
    _, ens = al_run
    d = innovation_diagnostics(ens)
    assert abs(d["mean"][0]) <= 3 * d["mean_stderr"][0]
    assert abs(d["variance"][0] - 1.0) <= 0.02
    assert d["paths"] == AL_PATHS


def test_innovation_equals_observation_noise():
    p = scalar_problem(steps=100, a=0.3, c=0.5, h=1.0)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=4, paths=6)
    nb = noise_block(4, range(6), p.grid, 1, 1, 1)
    assert np.array_equal(ens.wbar, nb.dWt)


def test_innovation_quadratic_variation():
    p = al_problem(1000)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=42, paths=2000)
    d = innovation_diagnostics(ens)
    assert abs(d["qv"][0] - 1.0) <= 0.02


def test_innovation_empty():
    p = scalar_problem(steps=10)
    s = synthesize_all(p)
    ens = simulate_closed_loop(p, s.law, s.bundle, seed=0, paths=1)
    empty = type(ens)(ens.grid, 0, ens.path_ids[:0], ens.x[:0], ens.Y[:0], ens.xhat[:0], ens.u[:0],
                      ens.wbar[:0], ens.mean)
    with pytest.raises(ValueError):
        innovation_diagnostics(empty)
