"""Stochastic layer: Euler-Maruyama paths of state, observation and filter.

Randomness is counter based.  Every path owns a Philox stream keyed on
``(seed, path_id)``, so a path's noise does not depend on how many workers
run, in which order paths are visited or how they are chunked.

All path arrays carry a leading path axis: states are ``(P, K, n)``,
observations ``(P, K, rtilde)``, controls ``(P, K, k)`` and innovation
increments ``(P, N, rtilde)``.  Controls are evaluated at every knot,
including ``t_N`` where the value only enters cost quadrature.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import MFLQProblem, TimeGrid
from .riccati import CoefficientTables, solve_sigma
from .synthesis import FeedbackLaw

WORKERS_ENV = "MFLQG_WORKERS"
CHUNK_PATHS = 2048
_MASK64 = (1 << 64) - 1
_STREAM_INCREMENTS = 0
_STREAM_INITIAL = 1


class SimulationError(ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, what: str, step: int):
        super().__init__(f"{what} became non-finite at step {step}")
        self.step = step


def _generator(seed: int, path_id: int, stream: int) -> np.random.Generator:
    key = np.array([int(seed) & _MASK64, int(path_id) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True, eq=False)
class NoiseSlab:
    """Brownian increments of one path.

    ``dW`` is ``(N, r)``, ``dWt`` is ``(N, rtilde)``; both are Normal(0, dt).
    ``xi`` holds ``n`` standard normals for the initial state.
    """

    seed: int
    path_id: int
    dW: np.ndarray
    dWt: np.ndarray
    xi: np.ndarray


def brownian_increments(seed: int, path_id: int, grid: TimeGrid, r: int, rt: int, n: int = 0) -> NoiseSlab:
    """Noise of path ``path_id`` under ``seed``.

    The increments come from stream 0 of the path's Philox key as one
    ``(N, r + rtilde)`` block in step-major order; the initial-state normals
    come from stream 1.
    """
    g = _generator(seed, path_id, _STREAM_INCREMENTS)
    z = g.standard_normal((grid.step_count, r + rt)) * np.sqrt(grid.step)
    xi = _generator(seed, path_id, _STREAM_INITIAL).standard_normal(n) if n else np.zeros(0)
    return NoiseSlab(int(seed), int(path_id), z[:, :r], z[:, r:], xi)


@dataclass(frozen=True, eq=False)
class NoiseBlock:
    """Noise of several paths stacked along a leading axis."""

    seed: int
    path_ids: np.ndarray
    dW: np.ndarray
    dWt: np.ndarray
    xi: np.ndarray

    @property
    def count(self) -> int:
        return len(self.path_ids)

    @classmethod
    def from_slabs(cls, slabs: Sequence[NoiseSlab]) -> "NoiseBlock":
        return cls(
            slabs[0].seed,
            np.array([s.path_id for s in slabs]),
            np.stack([s.dW for s in slabs]),
            np.stack([s.dWt for s in slabs]),
            np.stack([s.xi for s in slabs]),
        )

    def subset(self, sl: slice) -> "NoiseBlock":
        return NoiseBlock(self.seed, self.path_ids[sl], self.dW[sl], self.dWt[sl], self.xi[sl])


def noise_block(seed: int, path_ids, grid: TimeGrid, r: int, rt: int, n: int) -> NoiseBlock:
    ids = np.asarray(path_ids, dtype=np.int64)
    N = grid.step_count
    dW = np.empty((len(ids), N, r))
    dWt = np.empty((len(ids), N, rt))
    xi = np.empty((len(ids), n))
    for j, pid in enumerate(ids):
        s = brownian_increments(seed, int(pid), grid, r, rt, n)
        dW[j], dWt[j], xi[j] = s.dW, s.dWt, s.xi
    return NoiseBlock(int(seed), ids, dW, dWt, xi)


def _as_block(noise) -> NoiseBlock:
    if isinstance(noise, NoiseBlock):
        return noise
    if isinstance(noise, NoiseSlab):
        return NoiseBlock.from_slabs([noise])
    raise TypeError("noise must be a NoiseSlab or NoiseBlock")


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def initial_factor(sigma0: np.ndarray) -> np.ndarray:
    """Square root of the initial covariance via eigen-factorization."""
    w, V = np.linalg.eigh(0.5 * (sigma0 + sigma0.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


# ------------------------------------------------------------------ controls

# A control source is a callable ``(i, xhat, x) -> u`` on (P, n) arrays.
ControlFn = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def law_control(law: FeedbackLaw, mean: np.ndarray) -> ControlFn:
    """Closed-loop control of a feedback law using ``mean`` as ``Ex``."""

    def fn(i, xhat, x):
        return law.control(i, xhat, mean[i])

    return fn


class open_loop_control:
    """Fixed control path ``(K, k)`` shared by all paths, or ``(P, K, k)``.

    Per-path arrays are sliced to the chunk being simulated via :meth:`bind`.
    """

    def __init__(self, u: np.ndarray):
        self.u = np.asarray(u, dtype=float)

    def bind(self, sl: slice) -> "open_loop_control":
        return open_loop_control(self.u[sl]) if self.u.ndim == 3 else self

    def __call__(self, i, xhat, x):
        ui = self.u[..., i, :]
        return np.broadcast_to(ui, xhat.shape[:-1] + ui.shape[-1:])


def callable_control(problem: MFLQProblem, source, mean: np.ndarray) -> ControlFn:
    """Wrap ``source(t, xhat, ex) -> u`` as a control function."""
    times = problem.grid.times

    def fn(i, xhat, x):
        out = np.asarray(source(times[i], xhat, mean[i]), dtype=float)
        return np.broadcast_to(out, xhat.shape[:-1] + (problem.k,))

    return fn


def discrete_mean(problem: MFLQProblem, mean_control: Callable[[int, np.ndarray], np.ndarray], tables=None) -> np.ndarray:
    """Exact mean of the Euler state under a control with known mean.

    ``mean_control(i, m)`` must return ``E[u_i]`` given ``E[x_i] = m``; for
    controls affine in the filter this is the control evaluated at ``m``.
    The recursion uses the same arithmetic as the path update, so a
    noiseless path started at ``mu0`` reproduces it bitwise.
    """
    tb = tables if tables is not None else CoefficientTables(problem)
    N, dt = problem.grid.step_count, problem.grid.step
    m = np.empty((N + 1, problem.n))
    m[0] = problem.mu0
    for i in range(N):
        mi = m[i][None, :]
        ui = np.asarray(mean_control(i, mi), dtype=float).reshape(1, problem.k)
        m[i + 1] = (mi + _drift(tb, i, mi, m[i], ui) * dt)[0]
    return m


def law_mean(problem: MFLQProblem, law: FeedbackLaw, tables=None) -> np.ndarray:
    """Exact mean of the Euler closed loop under ``law``."""
    return discrete_mean(problem, lambda i, m: law.control(i, m, m[0]), tables)


def _drift(tb: CoefficientTables, i: int, x, m, u):
    return x @ tb.kn_a[i].T + tb.kn_abar[i] @ m + u @ tb.kn_b[i].T + tb.kn_bbar[i]


def _obs_drift(tb: CoefficientTables, i: int, x, m):
    return x @ tb.kn_f[i].T + tb.kn_fbar[i] @ m + tb.kn_g[i]


def filter_gain(problem: MFLQProblem, sigma: np.ndarray, tables=None) -> np.ndarray:
    """``Sigma f^T (h^{-1})^T h^{-1}`` at every knot, shape ``(K, n, rtilde)``."""
    tb = tables if tables is not None else CoefficientTables(problem)
    return sigma @ tb.kn_fT_R


def _engine(problem, tb, noise: NoiseBlock, mean, control: ControlFn, gain, fresh: bool = False):
    P = noise.count
    N, dt = problem.grid.step_count, problem.grid.step
    n, k, rt = problem.n, problem.k, problem.rt
    K = N + 1
    x = np.empty((P, K, n))
    Y = np.empty((P, K, rt))
    xh = np.empty((P, K, n))
    u = np.empty((P, K, k))
    wbar = np.empty((P, N, rt))
    if noise.xi.shape[1] == n:
        x[:, 0] = problem.mu0 + noise.xi @ initial_factor(problem.sigma0).T
    elif np.any(problem.sigma0 != 0):
        raise ValueError("noise carries no initial-state draws but sigma0 is nonzero")
    else:
        x[:, 0] = problem.mu0
    xh[:, 0] = problem.mu0
    Y[:, 0] = 0.0
    for i in range(N):
        xi_, xhi, mi = x[:, i], xh[:, i], mean[i]
        ui = control(i, xhi, xi_)
        u[:, i] = ui
        if fresh:
            wbar[:, i] = noise.dWt[:, i]
            xh[:, i + 1] = xhi + _drift(tb, i, xhi, mi, ui) * dt + noise.dWt[:, i] @ (gain[i] @ tb.kn_h[i]).T
            continue
        x[:, i + 1] = xi_ + _drift(tb, i, xi_, mi, ui) * dt + noise.dW[:, i] @ tb.kn_c[i].T
        dY = _obs_drift(tb, i, xi_, mi) * dt + noise.dWt[:, i] @ tb.kn_h[i].T
        Y[:, i + 1] = Y[:, i] + dY
        innov = dY - _obs_drift(tb, i, xhi, mi) * dt
        wbar[:, i] = innov @ tb.kn_hinv[i].T
        xh[:, i + 1] = xhi + _drift(tb, i, xhi, mi, ui) * dt + innov @ gain[i].T
        if not np.all(np.isfinite(x[:, i + 1])):
            raise SimulationError("state", i + 1)
    u[:, N] = control(N, xh[:, N], x[:, N])
    if fresh:
        x.fill(np.nan)
        Y.fill(np.nan)
    return x, Y, xh, u, wbar


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated trajectories with their seed metadata.

    ``mean`` is the deterministic ``Ex`` path used for the mean-field terms.
    """

    grid: TimeGrid
    seed: int
    path_ids: np.ndarray
    x: np.ndarray
    Y: np.ndarray
    xhat: np.ndarray
    u: np.ndarray
    wbar: np.ndarray
    mean: np.ndarray
    mean_mode: str = "discrete"

    @property
    def count(self) -> int:
        return len(self.path_ids)

    def path(self, j: int) -> dict:
        return {
            "path_id": int(self.path_ids[j]),
            "x": self.x[j],
            "Y": self.Y[j],
            "xhat": self.xhat[j],
            "u": self.u[j],
            "wbar": self.wbar[j],
        }

    @property
    def paths(self) -> list[dict]:
        return [self.path(j) for j in range(self.count)]

    def columns(self, limit: int | None = None) -> tuple[list[str], np.ndarray]:
        """Header and long-format table for ``paths.csv``."""
        P = self.count if limit is None else min(limit, self.count)
        K = self.grid.knot_count
        n, rt, k = self.x.shape[2], self.Y.shape[2], self.u.shape[2]
        names = (
            ["path_id", "t"]
            + [f"x_{i}" for i in range(n)]
            + [f"Y_{i}" for i in range(rt)]
            + [f"xhat_{i}" for i in range(n)]
            + [f"u_{i}" for i in range(k)]
        )
        ids = np.repeat(self.path_ids[:P].astype(float), K)[:, None]
        t = np.tile(self.grid.times, P)[:, None]
        body = [a[:P].reshape(P * K, -1) for a in (self.x, self.Y, self.xhat, self.u)]
        return names, np.hstack([ids, t] + body)


def _run_chunks(problem, tb, seed, path_ids, mean, control, gain, workers, noise=None, fresh=False):
    ids = np.asarray(path_ids, dtype=np.int64)
    chunks = [slice(s, min(s + CHUNK_PATHS, len(ids))) for s in range(0, len(ids), CHUNK_PATHS)]

    def work(sl):
        if noise is not None:
            nb = noise.subset(sl)
        else:
            nb = noise_block(seed, ids[sl], problem.grid, problem.r, problem.rt, problem.n)
        fn = control.bind(sl) if hasattr(control, "bind") else control
        return _engine(problem, tb, nb, mean, fn, gain, fresh)

    nw = min(worker_count(workers), max(1, len(chunks)))
    if nw == 1:
        parts = [work(sl) for sl in chunks]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(work, chunks))
    return tuple(np.concatenate([p[j] for p in parts]) for j in range(5))


def simulate_ensemble(
    problem: MFLQProblem,
    control: ControlFn,
    mean: np.ndarray,
    sigma: np.ndarray,
    *,
    seed: int = 42,
    paths: int = 1000,
    first_path: int = 0,
    noise: NoiseBlock | None = None,
    workers: int | None = None,
    fresh: bool = False,
    mean_mode: str = "discrete",
    tables: CoefficientTables | None = None,
) -> PathEnsemble:
    """Simulate ``paths`` paths under a control function.

    Parameters
    ----------
    control : callable
        ``(i, xhat, x) -> u`` on ``(P, n)`` arrays.
    mean : ndarray, shape (K, n)
        Deterministic mean used in the mean-field drift terms.
    sigma : ndarray, shape (K, n, n)
        Filter error covariance for the gain.
    noise : NoiseBlock, optional
        Pre-generated noise (its path ids override ``paths``).
    fresh : bool
        Drive the filter directly by the observation-noise slot as its
        innovation instead of simulating truth and observations.
    """
    tb = tables if tables is not None else CoefficientTables(problem)
    gain = filter_gain(problem, sigma, tb)
    if noise is not None:
        ids = noise.path_ids
        seed = noise.seed
    else:
        ids = np.arange(first_path, first_path + paths, dtype=np.int64)
    x, Y, xh, u, wbar = _run_chunks(problem, tb, seed, ids, mean, control, gain, workers, noise, fresh)
    return PathEnsemble(problem.grid, int(seed), ids, x, Y, xh, u, wbar, np.asarray(mean, float), mean_mode)


def simulate_closed_loop(
    problem: MFLQProblem,
    law: FeedbackLaw,
    bundle,
    seed: int = 42,
    paths: int = 1000,
    *,
    mean: str = "discrete",
    first_path: int = 0,
    noise: NoiseBlock | None = None,
    workers: int | None = None,
    mode: str = "innovation",
) -> PathEnsemble:
    """Closed loop under a feedback law.

    The filter is driven by the innovation of the simulated observations,
    so the control is a function of the observation path only.

    Parameters
    ----------
    mean : {"discrete", "solver"}
        ``"discrete"`` uses the exact mean of the Euler closed loop (the
        default; it is the true expectation of the simulated process);
        ``"solver"`` uses the RK4 ``Ex`` from the bundle, which differs by
        O(dt).
    mode : {"innovation", "fresh"}
        ``"fresh"`` drives the filter by independent Brownian increments in
        place of the innovation; truth and observations are then not
        simulated (filled with NaN).
    """
    tb = CoefficientTables(problem)
    if mean == "discrete":
        m = law_mean(problem, law, tb)
    elif mean == "solver":
        m = np.asarray(bundle.Ex, dtype=float)
    else:
        raise ValueError(f"mean must be 'discrete' or 'solver', got {mean!r}")
    if mode not in ("innovation", "fresh"):
        raise ValueError(f"mode must be 'innovation' or 'fresh', got {mode!r}")
    return simulate_ensemble(
        problem, law_control(law, m), m, bundle.Sigma,
        seed=seed, paths=paths, first_path=first_path, noise=noise, workers=workers,
        fresh=(mode == "fresh"), mean_mode=mean, tables=tb,
    )


def _control_fn(problem, control, mean) -> ControlFn:
    if isinstance(control, FeedbackLaw):
        return law_control(control, mean)
    if callable(control):
        return callable_control(problem, control, mean)
    return open_loop_control(np.asarray(control, dtype=float))


def simulate_truth(problem: MFLQProblem, control, noise, ex_path, sigma=None):
    """State, observation and control paths for given noise.

    Parameters
    ----------
    control : FeedbackLaw, callable or array
        A law or ``callable(t, xhat, ex)`` is evaluated on the concurrently
        filtered state; an array ``(K, k)`` or ``(P, K, k)`` is open loop.
    noise : NoiseSlab or NoiseBlock
    ex_path : ndarray, shape (K, n)
        Mean path used in the mean-field terms.
    sigma : ndarray, optional
        Filter covariance; solved from the problem when omitted.

    Returns
    -------
    x, Y, u : ndarray
        With a leading path axis when ``noise`` is a block.
    """
    single = isinstance(noise, NoiseSlab)
    nb = _as_block(noise)
    ex = np.asarray(ex_path, dtype=float)
    sig = solve_sigma(problem) if sigma is None else sigma
    tb = CoefficientTables(problem)
    x, Y, xh, u, wbar = _engine(problem, tb, nb, ex, _control_fn(problem, control, ex), filter_gain(problem, sig, tb))
    if single:
        return x[0], Y[0], u[0]
    return x, Y, u


def kalman_filter(problem: MFLQProblem, sigma, Y, u, ex_path):
    """Innovation-form filter for a given observation path.

    ``Y`` is ``(K, rtilde)`` or ``(P, K, rtilde)``; ``u`` has ``K`` or
    ``N`` knots.  Returns ``(xhat, wbar)`` with ``wbar`` the innovation
    increments ``h^{-1}[dY - (f xhat + fbar Ex + g) dt]``.
    """
    tb = CoefficientTables(problem)
    Y = np.asarray(Y, dtype=float)
    u = np.asarray(u, dtype=float)
    ex = np.asarray(ex_path, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    K = problem.grid.knot_count
    N, dt = problem.grid.step_count, problem.grid.step
    single = Y.ndim == 2
    if single:
        Y, u = Y[None], u[None]
    if Y.shape[1] != K or u.shape[1] not in (K, N) or ex.shape[0] != K or sigma.shape[0] != K:
        raise ValueError("grid mismatch between problem and supplied paths")
    gain = filter_gain(problem, sigma, tb)
    P = Y.shape[0]
    xh = np.empty((P, K, problem.n))
    wbar = np.empty((P, N, problem.rt))
    xh[:, 0] = problem.mu0
    for i in range(N):
        xhi = xh[:, i]
        innov = (Y[:, i + 1] - Y[:, i]) - _obs_drift(tb, i, xhi, ex[i]) * dt
        wbar[:, i] = innov @ tb.kn_hinv[i].T
        xh[:, i + 1] = xhi + _drift(tb, i, xhi, ex[i], u[:, i]) * dt + innov @ gain[i].T
    if single:
        return xh[0], wbar[0]
    return xh, wbar


def simulate_k(problem: MFLQProblem, noise, y0) -> np.ndarray:
    """Forward adjoint of the backward equation.

    Euler-Maruyama of ``dk = (beta^T k + betabar^T Ek) dt
    + sum_j (gamma_j^T k + gammabar_j^T Ek) dW_j
    + sum_j (gammatilde_j^T k + gammabartilde_j^T Ek) dWt_j`` from
    ``k(0) = -M y0 - N``, with ``Ek`` from the matching deterministic
    recursion.
    """
    single = isinstance(noise, NoiseSlab)
    nb = _as_block(noise)
    N, dt = problem.grid.step_count, problem.grid.step
    beta, betab = problem.beta.samples, problem.betabar.samples
    gam, gamb = problem.gamma.samples, problem.gammabar.samples
    gt, gtb = problem.gammatilde.samples, problem.gammabartilde.samples
    k0 = -problem.M @ np.asarray(y0, dtype=float) - problem.N
    P = nb.count
    out = np.empty((P, N + 1, problem.m))
    Ek = np.empty((N + 1, problem.m))
    out[:, 0] = k0
    Ek[0] = k0
    for i in range(N):
        e = Ek[i]
        Ek[i + 1] = e + (e @ beta[i] + e @ betab[i]) * dt
        k = out[:, i]
        drift = k @ beta[i] + e @ betab[i]
        vol = np.einsum("pa,jab,pj->pb", k, gam[i], nb.dW[:, i]) + np.einsum("a,jab,pj->pb", e, gamb[i], nb.dW[:, i])
        vol += np.einsum("pa,jab,pj->pb", k, gt[i], nb.dWt[:, i]) + np.einsum("a,jab,pj->pb", e, gtb[i], nb.dWt[:, i])
        out[:, i + 1] = k + drift * dt + vol
        if not np.all(np.isfinite(out[:, i + 1])):
            raise SimulationError("adjoint k", i + 1)
    return out[0] if single else out


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    stderr: float
    paths: int


def _estimate(samples: np.ndarray) -> Estimate:
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample")
    se = float(np.std(s, ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
    return Estimate(float(np.mean(s)), se, int(s.size))


def simulate_eta(problem: MFLQProblem, seed: int, paths: int, control, *, first_path: int = 0) -> Estimate:
    """Estimate ``y0`` through the exponential-martingale representation.

    Requires ``alpha = alphabar = beta = betabar = gammabar = gammabartilde = 0``.
    ``eta`` solves ``d eta = sum_j gamma_j eta dW_j + sum_j gammatilde_j eta dWt_j``
    with ``eta(0) = 1`` on the same noise as the state, and each path
    contributes ``<eta_T, rho x_T + rhobar Ex_T> + int <eta, psi v + psibar> dt``.

    Parameters
    ----------
    control : array ``(K, k)`` or FeedbackLaw
        Open-loop deterministic control, or a feedback law evaluated on the
        filtered state.
    """
    for name in ("alpha", "alphabar", "beta", "betabar", "gammabar", "gammabartilde"):
        if getattr(problem, name).max_abs() != 0.0:
            raise ValueError(f"simulate_eta needs {name} = 0")
    tb = CoefficientTables(problem)
    grid = problem.grid
    N, dt = grid.step_count, grid.step
    if isinstance(control, FeedbackLaw):
        m = law_mean(problem, control, tb)
        fn = law_control(control, m)
    else:
        v = np.asarray(control, dtype=float)
        m = discrete_mean(problem, lambda i, mi: v[i][None, :], tb)
        fn = open_loop_control(v)
    nb = noise_block(seed, np.arange(first_path, first_path + paths), grid, problem.r, problem.rt, problem.n)
    sigma = solve_sigma(problem)
    x, Y, xh, u, _ = _engine(problem, tb, nb, m, fn, filter_gain(problem, sigma, tb))
    gam, gt = problem.gamma.samples, problem.gammatilde.samples
    eta = np.empty((paths, N + 1, problem.m))
    eta[:, 0] = 1.0
    for i in range(N):
        e = eta[:, i]
        eta[:, i + 1] = (
            e
            + np.einsum("jab,pb,pj->pa", gam[i], e, nb.dW[:, i])
            + np.einsum("jab,pb,pj->pa", gt[i], e, nb.dWt[:, i])
        )
    psi, psib = problem.psi.samples, problem.psibar.samples
    src = np.einsum("pka,kab,pkb->pk", eta, psi, u) + np.einsum("pka,ka->pk", eta, psib)
    run = dt * (0.5 * src[:, 0] + src[:, 1:-1].sum(axis=1) + 0.5 * src[:, -1])
    term = np.einsum("pa,ab,pb->p", eta[:, -1], problem.rho, x[:, -1]) + eta[:, -1] @ (problem.rhobar @ m[-1])
    return _estimate(term + run)


def innovation_diagnostics(ensemble: PathEnsemble) -> dict:
    """Statistics of the innovation process at the horizon.

    Returns per-component arrays: sample mean of ``wbar(T)`` and its
    standard error, sample variance and its standard error, and realized
    quadratic variation with its standard error, plus the horizon ``T``.
    """
    if ensemble.count == 0:
        raise ValueError("empty ensemble")
    w = ensemble.wbar
    if not np.all(np.isfinite(w)):
        raise ValueError("ensemble has no innovation increments")
    P = w.shape[0]
    wT = w.sum(axis=1)
    mean = wT.mean(axis=0)
    var = wT.var(axis=0, ddof=1)
    c = wT - mean
    m4 = np.mean(c**4, axis=0)
    var_se = np.sqrt(np.maximum(m4 - var**2, 0.0) / P)
    qv = np.sum(w**2, axis=1)
    return {
        "T": ensemble.grid.horizon,
        "mean": mean,
        "mean_stderr": np.sqrt(var / P),
        "variance": var,
        "variance_stderr": var_se,
        "qv": qv.mean(axis=0),
        "qv_stderr": qv.std(axis=0, ddof=1) / np.sqrt(P),
        "paths": P,
    }
