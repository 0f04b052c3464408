import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflqg.model import (
    PIECEWISE_LINEAR,
    CoefficientPath,
    DimensionError,
    ScenarioError,
    TimeGrid,
    al_problem,
    dump_scenario,
    load_scenario,
    scenario_dict,
    special_case_gate,
    validate,
)

from scenarios import random_problem, scalar_problem


# ---------------------------------------------------------------- TimeGrid


def test_grid_endpoints_and_monotone():
    g = TimeGrid(1.0, 1000)
    assert g.times[0] == 0.0 and g.times[-1] == 1.0
    assert np.all(np.diff(g.times) > 0)
    assert g.step == pytest.approx(1e-3)
    assert g.knot_count == 1001


@pytest.mark.parametrize("T, n", [(0.0, 10), (-1.0, 10), (1.0, 1), (1.0, 2.5)])
def test_grid_rejects_bad_input(T, n):
    with pytest.raises(ValueError):
        TimeGrid(T, n)


def test_index_of_left_closed():
    g = TimeGrid(1.0, 4)
    assert g.index_of(0.0) == 0
    assert g.index_of(0.25) == 1
    assert g.index_of(0.3) == 1
    assert g.index_of(1.0) == 4
    with pytest.raises(ValueError):
        g.index_of(1.5)


# --------------------------------------------------------- CoefficientPath


def test_coefficient_path_stages():
    s = np.arange(5.0).reshape(5, 1, 1)
    pc = CoefficientPath(s)
    assert np.array_equal(pc.stages[1, :, 0, 0], [0, 1, 2, 3])
    pl = CoefficientPath(s, PIECEWISE_LINEAR)
    assert np.array_equal(pl.stages[1, :, 0, 0], [0.5, 1.5, 2.5, 3.5])
    assert np.array_equal(pl.stages[2, :, 0, 0], [1, 2, 3, 4])


def test_coefficient_path_rejects_nonfinite():
    with pytest.raises(ValueError):
        CoefficientPath(np.array([[1.0], [np.nan]]))


# --------------------------------------------------------------- loading


def test_al_scenario_fields():
    p = al_problem()
    assert (p.n, p.m, p.k, p.r, p.rt) == (1, 1, 1, 1, 1)
    assert np.all(p.a.samples == 0.03) and np.all(p.c.samples == 0.04) and np.all(p.h.samples == 0.1)
    assert p.H[0, 0] == 0.01 and p.Hbar[0, 0] == -0.01
    # the liability target appears as -2 y0 in the cost, hence N = -1
    assert p.N[0] == -1.0
    assert p.mu0[0] == 1.0 and p.sigma0[0, 0] == 0.0
    assert p.grid.horizon == 1.0 and p.grid.step_count == 1000


def test_omitted_keys_default_to_zero():
    p = scalar_problem()
    assert p.M.shape == (1, 1) and np.all(p.M == 0)
    assert p.gammatilde.samples.shape == (201, 1, 1, 1)


def test_dimension_mismatch_names_key():
    doc = scenario_dict(scalar_problem())
    doc["dynamics"]["b"] = [1.0, 2.0]
    with pytest.raises(DimensionError) as exc:
        load_scenario(doc)
    assert "dynamics.b" in str(exc.value)


def test_parse_error_carries_location():
    with pytest.raises(ScenarioError) as exc:
        load_scenario("[problem]\nn = = 1\n")
    assert "line 2" in str(exc.value)


def test_unknown_key_rejected():
    doc = scenario_dict(scalar_problem())
    doc["cost"]["Q"] = 1.0
    with pytest.raises(ScenarioError):
        load_scenario(doc)


@pytest.mark.parametrize("key", ["B", "h"])
def test_required_keys(key):
    doc = scenario_dict(scalar_problem())
    section = "cost" if key == "B" else "observation"
    del doc[section][key]
    with pytest.raises(ScenarioError):
        load_scenario(doc)


def test_time_table_piecewise_constant():
    doc = scenario_dict(scalar_problem(steps=4))
    doc["dynamics"]["a"] = {"t": [0.0, 0.5], "value": [1.0, 2.0]}
    p = load_scenario(doc)
    assert np.array_equal(p.a.samples[:, 0, 0], [1, 1, 2, 2, 2])


def test_time_table_linear():
    doc = scenario_dict(scalar_problem(steps=4))
    doc["dynamics"]["a"] = {"t": [0.0, 1.0], "value": [0.0, 1.0], "interpolation": "piecewise-linear"}
    p = load_scenario(doc)
    assert np.allclose(p.a.samples[:, 0, 0], [0, 0.25, 0.5, 0.75, 1.0])


def test_round_trip_al():
    p = al_problem()
    assert load_scenario(dump_scenario(p)) == p


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_random(seed):
    p = random_problem(seed, steps=20)
    doc = scenario_dict(p)
    doc["dynamics"]["a"] = {
        "t": [float(t) for t in p.grid.times],
        "value": [np.random.default_rng(seed).standard_normal(4).tolist() for _ in p.grid.times],
    }
    q = load_scenario(doc)
    assert load_scenario(dump_scenario(q)) == q


def test_regrid_keeps_constants():
    p = al_problem().regrid(256)
    assert p.grid.step_count == 256
    assert np.all(p.beta.samples == 0.06)


# -------------------------------------------------------------- validate


def test_validate_al():
    rep = validate(al_problem())
    assert rep.a1_margin == 0.0 and rep.gate_ok and rep.ok and rep.a1_ok


def test_validate_a1_flagged():
    doc = {
        "problem": {"n": 2, "m": 1, "k": 1, "r": 1, "rtilde": 1, "T": 1.0, "steps": 10},
        "observation": {"h": 1.0},
        "cost": {"B": 1.0, "A": [1.0, 0.0, 0.0, 0.0], "Abar": [0.0, 0.0, 0.0, -1.0]},
    }
    rep = validate(load_scenario(doc))
    assert rep.a1_margin == pytest.approx(-1.0)
    assert not rep.a1_ok
    assert any("(A1) fails" in m for m in rep.messages)


def test_validate_a2_constant():
    rep = validate(scalar_problem(D=1.0))
    assert rep.a2_constant == pytest.approx(1.0)


def test_validate_hard_errors():
    rep = validate(scalar_problem(B=0.0))
    assert not rep.ok and any("cost.B" in e for e in rep.errors)
    rep = validate(scalar_problem(h=0.0))
    assert not rep.ok and any("observation.h" in e for e in rep.errors)
    doc = scenario_dict(random_problem(0))
    doc["cost"]["A"] = [1.0, 0.5, 0.0, 1.0]
    rep = validate(load_scenario(doc))
    assert any("cost.A is not symmetric" in e for e in rep.errors)


def test_validate_idempotent():
    p = random_problem(3)
    assert validate(p) == validate(p)


def test_a1_margin_rotation_invariant():
    p = random_problem(5, n=2, k=2)
    theta = 0.7
    Q = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    q = p.replace(
        A=Q @ p.A.samples[0] @ Q.T,
        Abar=Q @ p.Abar.samples[0] @ Q.T,
        D=Q @ p.D.samples[0] @ Q.T,
        Dbar=Q @ p.Dbar.samples[0] @ Q.T,
        B=Q @ p.B.samples[0] @ Q.T,
    )
    assert validate(q).a1_margin == pytest.approx(validate(p).a1_margin, abs=1e-12)


# ------------------------------------------------------------------ gate


def test_gate_accepts_al():
    assert special_case_gate(al_problem()).accepted


def test_gate_rejects_m():
    d = special_case_gate(scalar_problem(M=1.0))
    assert not d.accepted and d.violations == ("M",)


def test_gate_rejects_gammatilde():
    d = special_case_gate(scalar_problem(gammatilde=0.5))
    assert d.violations == ("gammatilde",)
    assert "γ̃" in d.message()


def test_gate_ignores_beta():
    assert special_case_gate(scalar_problem(beta=1.0, betabar=2.0)).accepted
