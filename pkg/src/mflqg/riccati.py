"""Deterministic layer: fixed-step RK4 for the Riccati and mean equations.

All solvers work on the problem grid.  Coefficients enter a step through
their values at the start, midpoint and end of the interval
(:attr:`CoefficientPath.stages`).  Solutions that feed other equations are
kept as :class:`DensePath` objects whose midpoint values come from cubic
Hermite interpolation with the ODE slopes, which keeps coupled solves fourth
order.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import MFLQProblem, TimeGrid

BLOWUP_NORM = 1e12
FORWARD = "forward"
BACKWARD = "backward"


class BlowUpError(ArithmeticError):
    """A solution left the bounded region (Riccati escape or ill-posed data).

    Attributes
    ----------
    stage : str
        Which equation was being integrated.
    time : float
        Grid time of the first offending sample.
    index : int
        Knot index of the first offending sample.
    """

    def __init__(self, stage: str, time: float, index: int, norm: float):
        super().__init__(
            f"{stage}: solution blew up at t = {time:.6g} (knot {index}, max-norm {norm:.3e})"
        )
        self.stage = stage
        self.time = time
        self.index = index
        self.norm = norm


def _stage_code(theta: float) -> int:
    return int(round(2.0 * theta))


def _sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def integrate_matrix_ode(
    rhs: Callable[[int, float, np.ndarray], np.ndarray],
    start,
    grid: TimeGrid,
    direction: str = FORWARD,
    *,
    symmetrize: bool = False,
    stage: str = "ode",
    return_slopes: bool = False,
):
    """Classical RK4 on the uniform grid.

    Parameters
    ----------
    rhs : callable
        ``rhs(i, theta, y)`` gives the derivative on interval ``i`` at time
        ``t_i + theta * step`` with ``theta`` in ``{0, 0.5, 1}``.
    start : array_like
        Initial value (forward) or terminal value (backward).
    grid : TimeGrid
    direction : {"forward", "backward"}
        Backward problems are stepped from ``T`` down to 0 with the same
        stepper in reversed time.
    symmetrize : bool
        Replace the state by ``(Y + Y^T) / 2`` after every step.
    stage : str
        Label carried by :class:`BlowUpError`.
    return_slopes : bool
        Also return derivatives at both ends of every interval, shaped
        ``(N, *shape)`` each.

    Returns
    -------
    ndarray, shape (K, *shape)
        Samples at every knot, ordered by time.

    Raises
    ------
    BlowUpError
        When a sample is non-finite or its max-norm exceeds 1e12.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    y = np.array(start, dtype=float)
    N = grid.step_count
    dt = grid.step
    out = np.empty((N + 1,) + y.shape)
    left = np.empty((N,) + y.shape)
    right = np.empty((N,) + y.shape)
    times = grid.times

    def check(i, val):
        norm = float(np.max(np.abs(val))) if val.size else 0.0
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise BlowUpError(stage, float(times[i]), i, norm)

    check(0 if direction == FORWARD else N, y)
    with np.errstate(over="ignore", invalid="ignore"):
        if direction == FORWARD:
            out[0] = y
            for i in range(N):
                k1 = rhs(i, 0.0, y)
                k2 = rhs(i, 0.5, y + 0.5 * dt * k1)
                k3 = rhs(i, 0.5, y + 0.5 * dt * k2)
                k4 = rhs(i, 1.0, y + dt * k3)
                y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if symmetrize:
                    y = _sym(y)
                check(i + 1, y)
                out[i + 1] = y
                left[i] = k1
        else:
            out[N] = y
            for i in range(N - 1, -1, -1):
                k1 = rhs(i, 1.0, y)
                k2 = rhs(i, 0.5, y - 0.5 * dt * k1)
                k3 = rhs(i, 0.5, y - 0.5 * dt * k2)
                k4 = rhs(i, 0.0, y - dt * k3)
                y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if symmetrize:
                    y = _sym(y)
                check(i, y)
                out[i] = y
                right[i] = k1
    if not return_slopes:
        return out
    if direction == FORWARD:
        for i in range(N):
            right[i] = rhs(i, 1.0, out[i + 1])
    else:
        for i in range(N):
            left[i] = rhs(i, 0.0, out[i])
    return out, left, right


@dataclass(frozen=True, eq=False)
class DensePath:
    """Knot values plus per-interval start/mid/end values.

    ``stages[s, i]`` is the value on interval ``i`` at ``theta = s / 2``.
    """

    values: np.ndarray
    stages: np.ndarray

    @classmethod
    def hermite(cls, values, left, right, step: float) -> "DensePath":
        v0, v1 = values[:-1], values[1:]
        mid = 0.5 * (v0 + v1) + (step / 8.0) * (left - right)
        return cls(values, np.stack([v0, mid, v1]))

    @classmethod
    def from_rhs(cls, values, rhs, grid: TimeGrid) -> "DensePath":
        """Dense path for knot values of a known ODE solution."""
        values = np.asarray(values, dtype=float)
        N = grid.step_count
        left = np.stack([rhs(i, 0.0, values[i]) for i in range(N)])
        right = np.stack([rhs(i, 1.0, values[i + 1]) for i in range(N)])
        return cls.hermite(values, left, right, grid.step)

    def at(self, i: int, theta: float) -> np.ndarray:
        return self.stages[_stage_code(theta), i]


def _solve_dense(rhs, start, grid, direction, *, symmetrize=False, stage="ode") -> DensePath:
    vals, left, right = integrate_matrix_ode(
        rhs, start, grid, direction, symmetrize=symmetrize, stage=stage, return_slopes=True
    )
    return DensePath.hermite(vals, left, right, grid.step)


def _T(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class CoefficientTables:
    """Derived coefficient combinations at every RK4 stage and knot.

    Arrays prefixed ``st_`` have shape ``(3, N, ...)``; arrays prefixed
    ``kn_`` have shape ``(K, ...)``.
    """

    def __init__(self, problem: MFLQProblem):
        self.problem = problem
        for prefix, pick in (("st_", lambda p: p.stages), ("kn_", lambda p: p.samples)):
            a, abar, b, bbar = pick(problem.a), pick(problem.abar), pick(problem.b), pick(problem.bbar)
            c, f, h = pick(problem.c), pick(problem.f), pick(problem.h)
            A, Abar, B = pick(problem.A), pick(problem.Abar), pick(problem.B)
            D, Dbar = pick(problem.D), pick(problem.Dbar)
            Binv = np.linalg.inv(B)
            bBinv = b @ Binv
            DDb = D + Dbar
            hinv = np.linalg.inv(h)
            R = _T(hinv) @ hinv
            vals = {
                "a": a, "abar": abar, "b": b, "bbar": bbar, "c": c, "f": f, "h": h,
                "fbar": pick(problem.fbar), "g": pick(problem.g),
                "A": A, "Abar": Abar, "B": B, "D": D, "Dbar": Dbar,
                "Binv": Binv,
                "bBinv": bBinv,
                "S": bBinv @ _T(b),
                "a_gam": a - bBinv @ D,
                "a_phi": a + abar - bBinv @ DDb,
                "q_gam": A - _T(D) @ Binv @ D,
                "q_phi": A + Abar - _T(DDb) @ Binv @ DDb,
                "DDbT_Binv": _T(DDb) @ Binv,
                "abar_th": abar - bBinv @ Dbar,
                "Abar_th": Abar - _T(D) @ Binv @ Dbar - _T(Dbar) @ Binv @ D - _T(Dbar) @ Binv @ Dbar,
                "abarT_th": _T(abar) - _T(Dbar) @ Binv @ _T(b),
                "hinv": hinv,
                "fRf": _T(f) @ R @ f,
                "ccT": c @ _T(c),
                "beta_sum": pick(problem.beta) + pick(problem.betabar),
                "psi": pick(problem.psi),
                "psibar": pick(problem.psibar),
                "alpha": pick(problem.alpha),
                "alphabar": pick(problem.alphabar),
                "Ftilde": pick(problem.Ftilde),
                "Fbartilde": pick(problem.Fbartilde),
                "Gtilde": pick(problem.Gtilde),
                "fT_R": _T(f) @ R,
            }
            for name, v in vals.items():
                setattr(self, prefix + name, v)


def _tables(problem, tables=None) -> CoefficientTables:
    return tables if tables is not None else CoefficientTables(problem)


# ---------------------------------------------------------------- equations


def _sigma_dense(problem: MFLQProblem, tb: CoefficientTables) -> DensePath:
    a, fRf, ccT = tb.st_a, tb.st_fRf, tb.st_ccT

    def rhs(i, th, X):
        s = _stage_code(th)
        ai = a[s, i]
        return ai @ X + X @ ai.T - X @ fRf[s, i] @ X + ccT[s, i]

    return _solve_dense(rhs, problem.sigma0, problem.grid, FORWARD, symmetrize=True, stage="Sigma")


def solve_sigma(problem: MFLQProblem) -> np.ndarray:
    """Filter error covariance.

    Integrates ``Sigma' = a Sigma + Sigma a^T - Sigma f^T (h h^T)^{-1} f Sigma
    + c c^T`` forward from ``sigma0``, symmetrizing after each step.

    Returns
    -------
    ndarray, shape (K, n, n)
    """
    out = _sigma_dense(problem, CoefficientTables(problem)).values
    lo = float(np.min(np.linalg.eigvalsh(out)))
    if lo < -1e-8:
        warnings.warn(f"Sigma is not positive semidefinite (smallest eigenvalue {lo:.3e})", RuntimeWarning)
    return out


def _chi_dense(problem: MFLQProblem, tb: CoefficientTables) -> DensePath:
    M = tb.st_beta_sum

    def rhs(i, th, X):
        return X @ M[_stage_code(th), i]

    return _solve_dense(rhs, np.eye(problem.m), problem.grid, FORWARD, stage="chi")


def chi(problem: MFLQProblem, t: float, s: float) -> np.ndarray:
    """Propagator of the mean BSDE generator on ``[t, s]``.

    Solves ``X' = X (beta + betabar)`` with ``X(t) = I`` by RK4 on substeps
    aligned with the grid, which is the time-ordered exponential that turns
    the mean of the backward equation into a forward integral.  For
    commuting (e.g. constant or scalar) generators it equals
    ``exp(int_t^s (beta + betabar))``.
    """
    grid = problem.grid
    if t > s:
        raise ValueError(f"chi needs t <= s, got t={t}, s={s}")
    if t < -1e-12 * grid.horizon or s > grid.horizon * (1 + 1e-12):
        raise ValueError(f"times must lie in [0, {grid.horizon}]")
    X = np.eye(problem.m)
    if s == t:
        return X
    nsub = max(1, int(np.ceil((s - t) / grid.step - 1e-9)))
    h = (s - t) / nsub

    def gen(tau, left):
        tau = min(max(tau, 0.0), grid.horizon)
        if left and tau > 0:
            tau = tau - 1e-9 * grid.step
        return problem.beta.value_at(tau, grid) + problem.betabar.value_at(tau, grid)

    for j in range(nsub):
        t0 = t + j * h
        M0, Mh, M1 = gen(t0, False), gen(t0 + 0.5 * h, False), gen(t0 + h, True)
        k1 = X @ M0
        k2 = (X + 0.5 * h * k1) @ Mh
        k3 = (X + 0.5 * h * k2) @ Mh
        k4 = (X + h * k3) @ M1
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def _phi_rhs(tb: CoefficientTables):
    ap, S, q = tb.st_a_phi, tb.st_S, tb.st_q_phi

    def rhs(i, th, P):
        s = _stage_code(th)
        A_ = ap[s, i]
        return -(P @ A_ + A_.T @ P - P @ S[s, i] @ P + q[s, i])

    return rhs


def _phi_dense(problem, tb) -> DensePath:
    return _solve_dense(
        _phi_rhs(tb), problem.H + problem.Hbar, problem.grid, BACKWARD, symmetrize=True, stage="Phi"
    )


def solve_phi(problem: MFLQProblem, reduced=None) -> np.ndarray:
    """Mean Riccati equation, backward from ``Phi(T) = H + Hbar``.

    ``reduced`` is accepted for a uniform call signature; the equation does
    not involve the reduced linear terms.

    Returns
    -------
    ndarray, shape (K, n, n)
    """
    return _phi_dense(problem, CoefficientTables(problem)).values


def _as_dense(x, rhs, grid) -> DensePath:
    return x if isinstance(x, DensePath) else DensePath.from_rhs(x, rhs, grid)


def _psi_rhs(tb: CoefficientTables, red, phi: DensePath):
    ap, S, bBinv, bbar, DT_Binv = tb.st_a_phi, tb.st_S, tb.st_bBinv, tb.st_bbar, tb.st_DDbT_Binv
    G, FF = red.st_G, red.st_F + red.st_Fbar

    def rhs(i, th, y):
        s = _stage_code(th)
        P = phi.stages[s, i]
        Gi = G[s, i]
        return -(
            (ap[s, i].T - P @ S[s, i]) @ y
            + P @ (bbar[s, i] - bBinv[s, i] @ Gi)
            - DT_Binv[s, i] @ Gi
            + FF[s, i]
        )

    return rhs


def solve_psi(problem: MFLQProblem, reduced, Phi) -> np.ndarray:
    """Linear mean equation for ``Psi``, backward from ``L + Lbar``.

    Returns
    -------
    ndarray, shape (K, n)
    """
    tb = CoefficientTables(problem)
    phi = _as_dense(Phi, _phi_rhs(tb), problem.grid)
    return _solve_dense(
        _psi_rhs(tb, reduced, phi), reduced.L + reduced.Lbar, problem.grid, BACKWARD, stage="Psi"
    ).values


def _ex_rhs(tb, red, phi: DensePath, psi: DensePath):
    ap, S, bBinv, bbar = tb.st_a_phi, tb.st_S, tb.st_bBinv, tb.st_bbar
    G = red.st_G

    def rhs(i, th, x):
        s = _stage_code(th)
        Si = S[s, i]
        return (ap[s, i] - Si @ phi.stages[s, i]) @ x - Si @ psi.stages[s, i] - bBinv[s, i] @ G[s, i] + bbar[s, i]

    return rhs


def solve_mean_state(problem: MFLQProblem, reduced, Phi, Psi) -> np.ndarray:
    """Optimal mean state, forward from ``mu0``.

    Returns
    -------
    ndarray, shape (K, n)
    """
    tb = CoefficientTables(problem)
    phi = _as_dense(Phi, _phi_rhs(tb), problem.grid)
    psi = _as_dense(Psi, _psi_rhs(tb, reduced, phi), problem.grid)
    return _solve_dense(_ex_rhs(tb, reduced, phi, psi), problem.mu0, problem.grid, FORWARD, stage="Ex").values


def mean_costate(Phi, Psi, Ex) -> np.ndarray:
    """``Ep = Phi Ex + Psi`` knot by knot."""
    Phi = getattr(Phi, "values", Phi)
    Psi = getattr(Psi, "values", Psi)
    Ex = getattr(Ex, "values", Ex)
    return np.einsum("kij,kj->ki", Phi, Ex) + Psi


def _gamma_rhs(tb: CoefficientTables):
    ag, S, q = tb.st_a_gam, tb.st_S, tb.st_q_gam

    def rhs(i, th, G):
        s = _stage_code(th)
        A_ = ag[s, i]
        return -(G @ A_ + A_.T @ G - G @ S[s, i] @ G + q[s, i])

    return rhs


def _gamma_dense(problem, tb) -> DensePath:
    return _solve_dense(_gamma_rhs(tb), problem.H, problem.grid, BACKWARD, symmetrize=True, stage="Gamma")


def solve_gamma(problem: MFLQProblem) -> np.ndarray:
    """Filter-feedback Riccati equation, backward from ``Gamma(T) = H``.

    The constant term is ``A - D^T B^{-1} D``.

    Returns
    -------
    ndarray, shape (K, n, n)
    """
    return _gamma_dense(problem, CoefficientTables(problem)).values


def _theta(tb, red, ex, ep, s, i):
    th1 = tb.st_abar_th[s, i] @ ex - tb.st_bBinv[s, i] @ red.st_G[s, i] + tb.st_bbar[s, i]
    th2 = (
        tb.st_Abar_th[s, i] @ ex
        + tb.st_abarT_th[s, i] @ ep
        - tb.st_DDbT_Binv[s, i] @ red.st_G[s, i]
        + red.st_F[s, i]
        + red.st_Fbar[s, i]
    )
    return th1, th2


def _lambda_rhs(tb, red, gamma: DensePath, ex: DensePath, ep: DensePath):
    ag, S = tb.st_a_gam, tb.st_S

    def rhs(i, th, lam):
        s = _stage_code(th)
        Gm = gamma.stages[s, i]
        th1, th2 = _theta(tb, red, ex.stages[s, i], ep.stages[s, i], s, i)
        return -((ag[s, i].T - Gm @ S[s, i]) @ lam + Gm @ th1 + th2)

    return rhs


def thetas(problem: MFLQProblem, reduced, Ex, Ep) -> tuple[np.ndarray, np.ndarray]:
    """Source terms ``theta1``, ``theta2`` of the ``Lambda`` equation at knots."""
    tb = CoefficientTables(problem)
    Ex, Ep = getattr(Ex, "values", Ex), getattr(Ep, "values", Ep)
    G, F, Fb = reduced.G, reduced.F, reduced.Fbar
    th1 = np.einsum("kij,kj->ki", tb.kn_abar_th, Ex) - np.einsum("kij,kj->ki", tb.kn_bBinv, G) + tb.kn_bbar
    th2 = (
        np.einsum("kij,kj->ki", tb.kn_Abar_th, Ex)
        + np.einsum("kij,kj->ki", tb.kn_abarT_th, Ep)
        - np.einsum("kij,kj->ki", tb.kn_DDbT_Binv, G)
        + F
        + Fb
    )
    return th1, th2


def solve_lambda(problem: MFLQProblem, reduced, partial) -> np.ndarray:
    """Filter-feedback offset, backward from ``Hbar Ex(T) + L + Lbar``.

    Parameters
    ----------
    partial : RiccatiBundle or mapping
        Must provide ``Gamma``, ``Ex`` and ``Ep`` (arrays or dense paths).

    Returns
    -------
    ndarray, shape (K, n)
    """
    get = partial.get if isinstance(partial, dict) else lambda k: getattr(partial, k)
    tb = CoefficientTables(problem)
    grid = problem.grid
    dense = getattr(partial, "dense", {}) or {}
    gamma = dense["Gamma"] if "Gamma" in dense else _as_dense(get("Gamma"), _gamma_rhs(tb), grid)
    ex, ep = _ex_ep_dense(problem, tb, reduced, get, dense)
    return _lambda_dense(problem, tb, reduced, gamma, ex, ep).values


def _ex_ep_dense(problem, tb, reduced, get, dense):
    if "Ex" in dense and "Ep" in dense:
        return dense["Ex"], dense["Ep"]
    # knot values alone do not carry the slopes needed for fourth-order
    # midpoints, so the mean pair is rebuilt and checked against the input
    grid = problem.grid
    phi = _phi_dense(problem, tb)
    psi = _solve_dense(_psi_rhs(tb, reduced, phi), reduced.L + reduced.Lbar, grid, BACKWARD, stage="Psi")
    ex = _solve_dense(_ex_rhs(tb, reduced, phi, psi), problem.mu0, grid, FORWARD, stage="Ex")
    ep = _compose_ep(phi, psi, ex)
    for label, mine in (("Ex", ex.values), ("Ep", ep.values)):
        theirs = np.asarray(get(label), dtype=float)
        if theirs.shape != mine.shape or not np.allclose(theirs, mine, rtol=1e-9, atol=1e-12):
            raise ValueError(f"{label} supplied to solve_lambda does not match the mean equations")
    return ex, ep


def _compose_ep(phi: DensePath, psi: DensePath, ex: DensePath) -> DensePath:
    vals = np.einsum("kij,kj->ki", phi.values, ex.values) + psi.values
    st = np.einsum("snij,snj->sni", phi.stages, ex.stages) + psi.stages
    return DensePath(vals, st)


def _lambda_dense(problem, tb, reduced, gamma, ex, ep) -> DensePath:
    term = problem.Hbar @ ex.values[-1] + reduced.L + reduced.Lbar
    return _solve_dense(_lambda_rhs(tb, reduced, gamma, ex, ep), term, problem.grid, BACKWARD, stage="Lambda")


@dataclass(frozen=True, eq=False)
class RiccatiBundle:
    """Grid samples of every deterministic quantity of the synthesis.

    Arrays have a leading knot axis of length ``K``.
    """

    grid: TimeGrid
    Sigma: np.ndarray
    Phi: np.ndarray
    Psi: np.ndarray
    Ex: np.ndarray
    Ep: np.ndarray
    Gamma: np.ndarray
    Lambda: np.ndarray
    k_det: np.ndarray
    dense: dict = field(default_factory=dict, repr=False)

    def columns(self) -> tuple[list[str], np.ndarray]:
        """Header and table for ``riccati.csv``."""
        names = ["t"]
        blocks = [self.grid.times[:, None]]
        for label in ("Sigma", "Phi", "Psi", "Ex", "Ep", "Gamma", "Lambda"):
            arr = getattr(self, label)
            K = arr.shape[0]
            if arr.ndim == 3:
                names += [f"{label}_{i}{j}" for i in range(arr.shape[1]) for j in range(arr.shape[2])]
            else:
                names += [f"{label}_{i}" for i in range(arr.shape[1])]
            blocks.append(arr.reshape(K, -1))
        return names, np.hstack(blocks)


def solve_bundle(problem: MFLQProblem, reduced, tables: CoefficientTables | None = None) -> RiccatiBundle:
    """Run every solve in dependency order.

    Sigma forward, Phi and Psi backward, Ex forward, Ep algebraically, Gamma
    backward and finally Lambda backward (it needs ``Ex(T)`` and ``Ep``).
    """
    tb = _tables(problem, tables)
    grid = problem.grid
    sigma = _sigma_dense(problem, tb)
    phi = _phi_dense(problem, tb)
    psi = _solve_dense(_psi_rhs(tb, reduced, phi), reduced.L + reduced.Lbar, grid, BACKWARD, stage="Psi")
    ex = _solve_dense(_ex_rhs(tb, reduced, phi, psi), problem.mu0, grid, FORWARD, stage="Ex")
    ep = _compose_ep(phi, psi, ex)
    gamma = _gamma_dense(problem, tb)
    lam = _lambda_dense(problem, tb, reduced, gamma, ex, ep)
    k_det = -np.einsum("kji,j->ki", reduced.chi, problem.N)
    dense = {"Sigma": sigma, "Phi": phi, "Psi": psi, "Ex": ex, "Ep": ep, "Gamma": gamma, "Lambda": lam}
    return RiccatiBundle(
        grid=grid,
        Sigma=sigma.values,
        Phi=phi.values,
        Psi=psi.values,
        Ex=ex.values,
        Ep=ep.values,
        Gamma=gamma.values,
        Lambda=lam.values,
        k_det=k_det,
        dense=dense,
    )


def hamiltonian_flow(problem: MFLQProblem, reduced, ex0, ep0) -> tuple[np.ndarray, np.ndarray]:
    """Forward RK4 of the coupled mean system for ``(Ex, Ep)``.

    Used to check that ``Phi Ex + Psi`` reproduces the costate obtained by
    shooting from ``Ep(0)``.
    """
    tb = CoefficientTables(problem)
    n = problem.n

    def rhs(i, th, y):
        s = _stage_code(th)
        x, p = y[:n], y[n:]
        a_, ab, b_, bb = tb.st_a[s, i], tb.st_abar[s, i], tb.st_b[s, i], tb.st_bbar[s, i]
        Binv, D_, Db = tb.st_Binv[s, i], tb.st_D[s, i], tb.st_Dbar[s, i]
        A_, Ab = tb.st_A[s, i], tb.st_Abar[s, i]
        G = reduced.st_G[s, i]
        Eu = -Binv @ (b_.T @ p + (D_ + Db) @ x + G)
        dx = (a_ + ab) @ x + b_ @ Eu + bb
        dp = -((a_ + ab).T @ p + (A_ + Ab) @ x + (D_ + Db).T @ Eu + reduced.st_F[s, i] + reduced.st_Fbar[s, i])
        return np.concatenate([dx, dp])

    y0 = np.concatenate([np.asarray(ex0, float), np.asarray(ep0, float)])
    out = integrate_matrix_ode(rhs, y0, problem.grid, FORWARD, stage="mean-flow")
    return out[:, :n], out[:, n:]
