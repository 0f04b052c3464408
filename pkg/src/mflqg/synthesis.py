"""Cost reduction, optimal feedback law and optimal cost.

Under the special-case gate the adjoint of the backward equation is
deterministic, so the ``<N, y0>`` part of the cost folds into linear state
and control terms (:func:`reduce_cost`).  The optimal control is then an
affine function of the filter and the mean state (:class:`FeedbackLaw`),
and the optimal cost has a closed form in terms of the Riccati bundle
(:func:`analytic_cost`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GateError, MFLQProblem, TimeGrid, special_case_gate
from .riccati import (
    FORWARD,
    CoefficientTables,
    RiccatiBundle,
    _chi_dense,
    _solve_dense,
    _stage_code,
    solve_bundle,
)


def _trapz(y: np.ndarray, dt: float) -> float:
    y = np.asarray(y, dtype=float)
    return float(dt * (0.5 * y[0] + y[1:-1].sum() + 0.5 * y[-1]))


@dataclass(frozen=True, eq=False)
class ReducedCost:
    """Linear cost terms after folding in ``<N, y0>``.

    Knot arrays ``F``, ``Fbar`` (K, n) and ``G`` (K, k); terminal vectors
    ``L``, ``Lbar``; the constant ``J0``; the propagator ``chi`` from 0 to
    each knot (K, m, m).  ``st_*`` hold the same paths at RK4 stages.
    """

    F: np.ndarray
    Fbar: np.ndarray
    G: np.ndarray
    L: np.ndarray
    Lbar: np.ndarray
    J0: float
    chi: np.ndarray
    st_F: np.ndarray = field(repr=False)
    st_Fbar: np.ndarray = field(repr=False)
    st_G: np.ndarray = field(repr=False)


def reduce_cost(problem: MFLQProblem, tables: CoefficientTables | None = None) -> ReducedCost:
    """Fold the initial-value term of the backward equation into the cost.

    With ``w_t = chi_0^t^T N``::

        F = Ftilde + alpha^T w        Fbar = Fbartilde + alphabar^T w
        G = Gtilde + psi^T w          L = Ltilde + rho^T w_T
        Lbar = Lbartilde + rhobar^T w_T
        J0 = int_0^T <w_t, psibar_t> dt   (trapezoid)

    Raises
    ------
    GateError
        If the special-case gate rejects the problem.
    """
    gate = special_case_gate(problem)
    if not gate.accepted:
        raise GateError(gate.violations)
    tb = tables if tables is not None else CoefficientTables(problem)
    chi_path = _chi_dense(problem, tb)
    N = problem.N
    w = np.einsum("kji,j->ki", chi_path.values, N)
    w_st = np.einsum("snji,j->sni", chi_path.stages, N)

    def fold(tilde_kn, tilde_st, coef_kn, coef_st):
        return (
            tilde_kn + np.einsum("kmx,km->kx", coef_kn, w),
            tilde_st + np.einsum("snmx,snm->snx", coef_st, w_st),
        )

    F, st_F = fold(tb.kn_Ftilde, tb.st_Ftilde, tb.kn_alpha, tb.st_alpha)
    Fb, st_Fb = fold(tb.kn_Fbartilde, tb.st_Fbartilde, tb.kn_alphabar, tb.st_alphabar)
    G, st_G = fold(tb.kn_Gtilde, tb.st_Gtilde, tb.kn_psi, tb.st_psi)
    L = problem.Ltilde + problem.rho.T @ w[-1]
    Lb = problem.Lbartilde + problem.rhobar.T @ w[-1]
    J0 = _trapz(np.einsum("km,km->k", w, tb.kn_psibar), problem.grid.step)
    return ReducedCost(F, Fb, G, L, Lb, J0, chi_path.values, st_F, st_Fb, st_G)


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """``u = gain_filter xhat + gain_mean Ex + offset`` on the grid.

    Values at knot ``i`` hold on ``[t_i, t_{i+1})``.
    """

    grid: TimeGrid
    gain_filter: np.ndarray
    gain_mean: np.ndarray
    offset: np.ndarray

    def control(self, i: int, xhat: np.ndarray, ex: np.ndarray) -> np.ndarray:
        """Control at knot ``i``; ``xhat`` may carry leading path axes."""
        return xhat @ self.gain_filter[i].T + self.gain_mean[i] @ ex + self.offset[i]

    def shifted(self, delta) -> "FeedbackLaw":
        """Same gains with ``delta`` added to the offset."""
        return FeedbackLaw(self.grid, self.gain_filter, self.gain_mean, self.offset + np.asarray(delta, float))


def feedback_law(problem: MFLQProblem, reduced: ReducedCost, bundle: RiccatiBundle) -> FeedbackLaw:
    B = problem.B.samples
    b = problem.b.samples
    bT = np.swapaxes(b, 1, 2)
    gf = -np.linalg.solve(B, bT @ bundle.Gamma + problem.D.samples)
    gm = -np.linalg.solve(B, problem.Dbar.samples)
    off = -np.linalg.solve(B, (np.einsum("kij,kj->ki", bT, bundle.Lambda) + reduced.G)[..., None])[..., 0]
    return FeedbackLaw(problem.grid, gf, gm, off)


@dataclass(frozen=True, eq=False)
class Synthesis:
    """Everything the deterministic pipeline produces for one problem."""

    problem: MFLQProblem
    tables: CoefficientTables
    reduced: ReducedCost
    bundle: RiccatiBundle
    law: FeedbackLaw


def synthesize_all(problem: MFLQProblem) -> Synthesis:
    """Reduction, Riccati bundle and feedback law in one pass."""
    tb = CoefficientTables(problem)
    reduced = reduce_cost(problem, tb)
    bundle = solve_bundle(problem, reduced, tb)
    return Synthesis(problem, tb, reduced, bundle, feedback_law(problem, reduced, bundle))


def synthesize(problem: MFLQProblem) -> tuple[RiccatiBundle, FeedbackLaw]:
    """Optimal feedback law for a gated problem.

    Returns
    -------
    (RiccatiBundle, FeedbackLaw)

    Raises
    ------
    GateError
        Gate rejection.
    BlowUpError
        A Riccati or mean equation escaped; ``stage`` names which one.
    """
    s = synthesize_all(problem)
    return s.bundle, s.law


def evaluate_control(law: FeedbackLaw, xhat, ex, t: float) -> np.ndarray:
    """Evaluate the law at time ``t`` (piecewise constant from the left knot)."""
    i = law.grid.index_of(t)
    return law.control(i, np.asarray(xhat, float), np.asarray(ex, float))


# -------------------------------------------------------------- optimal cost


@dataclass(frozen=True)
class AnalyticCost:
    """Closed-form optimal cost split into named terms."""

    terms: dict
    J: float
    kappa: float

    def as_rows(self) -> list[tuple[str, float]]:
        return list(self.terms.items()) + [("J_analytic", self.J)]


def analytic_cost(problem: MFLQProblem, reduced: ReducedCost, bundle: RiccatiBundle, kappa: float = 0.5) -> AnalyticCost:
    """Optimal cost from the Riccati bundle.

    All time integrals use the trapezoid rule on the grid.  The terminal
    covariance correction is ``kappa * tr(H Sigma_T)``; ``kappa = 1/2``
    follows from splitting ``E<H x_T, x_T>`` into its filtered part and the
    filter error, and ``kappa = 1`` is kept selectable for comparison.

    Returns
    -------
    AnalyticCost
        ``terms`` maps each contribution to its value and ``J`` is the sum.
    """
    dt = problem.grid.step
    for label in ("Sigma", "Gamma", "Lambda", "Ex"):
        if getattr(bundle, label, None) is None:
            raise ValueError(f"bundle is missing {label}")
    b = problem.b.samples
    bT = np.swapaxes(b, 1, 2)
    Binv = np.linalg.inv(problem.B.samples)
    D, Db = problem.D.samples, problem.Dbar.samples
    DbT = np.swapaxes(Db, 1, 2)
    A, Ab, abar = problem.A.samples, problem.Abar.samples, problem.abar.samples
    bbar = problem.bbar.samples
    Gam, Lam, Ex, Sig = bundle.Gamma, bundle.Lambda, bundle.Ex, bundle.Sigma
    G = reduced.G
    f, h = problem.f.samples, problem.h.samples
    hinv = np.linalg.inv(h)
    Kg = Sig @ np.swapaxes(f, 1, 2) @ np.swapaxes(hinv, 1, 2)

    def quad(M, x):
        return np.einsum("ki,kij,kj->k", x, M, x)

    def dot(x, y):
        return np.einsum("ki,ki->k", x, y)

    def mv(M, x):
        return np.einsum("kij,kj->ki", M, x)

    mq = (2 * np.swapaxes(D, 1, 2) + DbT) @ Binv @ Db - Ab - 2 * np.swapaxes(abar, 1, 2) @ Gam
    bG = mv(bT, mv(Gam, Ex))
    terms = {
        "initial_quadratic": 0.5 * float(bundle.Gamma[0] @ problem.mu0 @ problem.mu0),
        "initial_linear": float(bundle.Lambda[0] @ problem.mu0),
        "terminal_mean": -0.5 * float(problem.Hbar @ Ex[-1] @ Ex[-1]),
        "filter_gain": 0.5 * _trapz(np.einsum("kij,kil,klj->k", Kg, Gam, Kg), dt),
        "mean_quadratic": 0.5 * _trapz(quad(mq, Ex), dt),
        "mean_cross": _trapz(
            dot(mv(DbT @ Binv, bG) - mv(Gam @ b @ Binv, G) - mv(Gam @ b @ Binv @ bT, Lam), Ex), dt
        ),
        "gain_offset": _trapz(dot(bG, mv(Binv, mv(bT, Lam) + G)), dt),
        "offset_linear": 0.5 * _trapz(dot(Lam, 2 * bbar - 2 * mv(b @ Binv, G) - mv(b @ Binv @ bT, Lam)), dt),
        "offset_quadratic": -0.5 * _trapz(quad(Binv, G), dt),
        "J0": reduced.J0,
        "trace_running": 0.5 * _trapz(np.einsum("kij,kji->k", A, Sig), dt),
        "trace_terminal": kappa * float(np.trace(problem.H @ Sig[-1])),
    }
    return AnalyticCost(terms, float(sum(terms.values())), kappa)


def filtered_covariance(problem: MFLQProblem, bundle: RiccatiBundle, tables: CoefficientTables | None = None) -> np.ndarray:
    """Covariance of the filter ``xhat`` under the optimal law.

    Solves ``P' = Acl P + P Acl^T + K K^T`` with ``P(0) = 0``, where
    ``Acl = a - b B^{-1}(b^T Gamma + D)`` and ``K = Sigma f^T h^{-T}``.
    """
    tb = tables if tables is not None else CoefficientTables(problem)
    gam = bundle.dense["Gamma"]
    sig = bundle.dense["Sigma"]

    def rhs(i, th, P):
        s = _stage_code(th)
        Acl = tb.st_a[s, i] - tb.st_bBinv[s, i] @ (tb.st_b[s, i].T @ gam.stages[s, i] + tb.st_D[s, i])
        Sg = sig.stages[s, i]
        return Acl @ P + P @ Acl.T + Sg @ tb.st_fRf[s, i] @ Sg

    n = problem.n
    return _solve_dense(rhs, np.zeros((n, n)), problem.grid, FORWARD, symmetrize=True, stage="P").values


def moment_cost(problem: MFLQProblem, reduced: ReducedCost, bundle: RiccatiBundle, law: FeedbackLaw) -> float:
    """Optimal cost from first and second moments of the closed loop.

    An independent route to the same number as :func:`analytic_cost` with
    ``kappa = 1/2``: ``Cov(x) = Sigma + P`` and ``Cov(x, u) = P Kf^T`` turn
    every expectation in the reduced cost into deterministic quantities.
    """
    dt = problem.grid.step
    P = filtered_covariance(problem, bundle)
    Ex, Sig = bundle.Ex, bundle.Sigma
    Kf, Km, o = law.gain_filter, law.gain_mean, law.offset
    ubar = np.einsum("kij,kj->ki", Kf + Km, Ex) + o
    A, Ab, B = problem.A.samples, problem.Abar.samples, problem.B.samples
    D, Db = problem.D.samples, problem.Dbar.samples

    def quad(M, x):
        return np.einsum("ki,kij,kj->k", x, M, x)

    integrand = (
        np.einsum("kij,kji->k", A, Sig + P)
        + quad(A + Ab, Ex)
        + quad(B, ubar)
        + np.einsum("kji,kjl,kli->k", Kf, B, Kf @ P)
        + 2 * np.einsum("ki,kji,kj->k", Ex, D + Db, ubar)
        + 2 * np.einsum("kji,kjl,kli->k", D, Kf, P)
        + 2 * np.einsum("ki,ki->k", reduced.F + reduced.Fbar, Ex)
        + 2 * np.einsum("ki,ki->k", reduced.G, ubar)
    )
    H, Hb = problem.H, problem.Hbar
    xT = Ex[-1]
    terminal = (
        np.trace(H @ (Sig[-1] + P[-1]))
        + xT @ (H + Hb) @ xT
        + 2 * (reduced.L + reduced.Lbar) @ xT
    )
    return float(0.5 * _trapz(integrand, dt) + 0.5 * terminal + reduced.J0)


# ---------------------------------------------------------- Hamiltonian etc.


def _coef(problem: MFLQProblem, name: str, t: float) -> np.ndarray:
    return getattr(problem, name).value_at(t, problem.grid)


def hamiltonian(problem: MFLQProblem, t, x, y, z, zt, xbar, ybar, zbar, ztbar, v, k, p, q) -> float:
    """Hamiltonian of the LQ problem at time ``t``.

    ``z``/``zbar`` are ``m x r`` and ``zt``/``ztbar`` are ``m x rtilde``
    (one column per noise component); ``q`` is ``n x r``.
    """
    g = lambda name: _coef(problem, name, t)  # noqa: E731
    x, xbar, v = (np.asarray(u, float) for u in (x, xbar, v))
    y, ybar, k, p = (np.asarray(u, float) for u in (y, ybar, k, p))
    z, zt, zbar, ztbar, q = (np.asarray(u, float) for u in (z, zt, zbar, ztbar, q))
    n, m, kk, r, rt = problem.n, problem.m, problem.k, problem.r, problem.rt
    for name, arr, shape in (
        ("x", x, (n,)), ("xbar", xbar, (n,)), ("v", v, (kk,)), ("y", y, (m,)), ("ybar", ybar, (m,)),
        ("k", k, (m,)), ("p", p, (n,)), ("z", z, (m, r)), ("zbar", zbar, (m, r)),
        ("zt", zt, (m, rt)), ("ztbar", ztbar, (m, rt)), ("q", q, (n, r)),
    ):
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    drift = g("a") @ x + g("abar") @ xbar + g("b") @ v + g("bbar")
    gen = (
        g("alpha") @ x + g("alphabar") @ xbar + g("beta") @ y + g("betabar") @ ybar
        + np.einsum("jab,bj->a", g("gamma"), z) + np.einsum("jab,bj->a", g("gammabar"), zbar)
        + np.einsum("jab,bj->a", g("gammatilde"), zt) + np.einsum("jab,bj->a", g("gammabartilde"), ztbar)
        + g("psi") @ v + g("psibar")
    )
    cost = 0.5 * (
        x @ g("A") @ x + xbar @ g("Abar") @ xbar + v @ g("B") @ v
        + 2 * v @ g("D") @ x + 2 * v @ g("Dbar") @ xbar
        + 2 * g("Ftilde") @ x + 2 * g("Fbartilde") @ xbar + 2 * g("Gtilde") @ v
    )
    return float(drift @ p + np.sum(g("c") * q) - gen @ k + cost)


def hamiltonian_v(problem: MFLQProblem, t, x, xbar, v, k, p) -> np.ndarray:
    """Gradient of :func:`hamiltonian` in the control argument."""
    g = lambda name: _coef(problem, name, t)  # noqa: E731
    x, xbar, v, k, p = (np.asarray(u, float) for u in (x, xbar, v, k, p))
    return g("b").T @ p - g("psi").T @ k + g("B") @ v + g("D") @ x + g("Dbar") @ xbar + g("Gtilde")


def stationarity_residual(problem: MFLQProblem, reduced: ReducedCost, bundle: RiccatiBundle, t, xhat, ex, u) -> np.ndarray:
    """Filtered first-order condition ``B u + (b^T Gamma + D) xhat + Dbar Ex + b^T Lambda + G``.

    Zero exactly when ``u`` is the optimal feedback value.  ``xhat`` and
    ``u`` may carry matching leading path axes.
    """
    gate = special_case_gate(problem)
    if not gate.accepted:
        raise GateError(gate.violations)
    i = problem.grid.index_of(t)
    B = problem.B.samples[i]
    b = problem.b.samples[i]
    xhat, ex, u = (np.asarray(w, float) for w in (xhat, ex, u))
    lin = b.T @ bundle.Gamma[i] + problem.D.samples[i]
    const = problem.Dbar.samples[i] @ ex + b.T @ bundle.Lambda[i] + reduced.G[i]
    return u @ B.T + xhat @ lin.T + const
