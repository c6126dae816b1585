import numpy as np
import pytest
from hypothesis import given, strategies as st

from wdmqnet.quantum import (
    AnalyzerSetting, Basis, TwoQubitState, fidelity, outcome_probs, phi_plus, visibility, werner,
    werner_visibility,
)


def test_phi_plus_basics():
    s = phi_plus()
    assert fidelity(s, s) == pytest.approx(1.0)
    assert np.trace(s.rho).real == pytest.approx(1.0, abs=1e-12)
    assert s.element("HH", "VV") == pytest.approx(0.5)


def test_werner_limits():
    np.testing.assert_allclose(werner(1.0).rho, phi_plus().rho, atol=1e-15)
    np.testing.assert_allclose(werner(0.25).rho, np.eye(4) / 4, atol=1e-15)


@pytest.mark.parametrize("f", [0.2, 1.01])
def test_werner_range(f):
    with pytest.raises(ValueError):
        werner(f)


def test_werner_fidelity_and_visibility():
    s = werner(0.85)
    assert fidelity(s) == pytest.approx(0.85)
    # (4f-1)/3 evaluated by an explicit projector computation: 0.8
    assert visibility(s, Basis.HV) == pytest.approx(0.8, abs=1e-12)
    assert visibility(s, Basis.DA) == pytest.approx(0.8, abs=1e-12)
    assert visibility(werner(0.925), Basis.DA) == pytest.approx(0.9, abs=1e-12)


def test_outcome_tables_phi_plus():
    s = phi_plus()
    np.testing.assert_allclose(outcome_probs(s, Basis.HV, Basis.HV), [[0.5, 0], [0, 0.5]], atol=1e-12)
    np.testing.assert_allclose(outcome_probs(s, Basis.DA, Basis.DA), [[0.5, 0], [0, 0.5]], atol=1e-12)
    np.testing.assert_allclose(outcome_probs(s, Basis.HV, Basis.DA), np.full((2, 2), 0.25), atol=1e-12)


def test_visibility_extremes():
    assert visibility(phi_plus(), Basis.HV) == pytest.approx(1.0)
    assert visibility(TwoQubitState(np.eye(4) / 4), Basis.HV) == pytest.approx(0.0)


def test_invalid_states_rejected():
    with pytest.raises(ValueError):
        TwoQubitState(np.eye(4))
    with pytest.raises(ValueError):
        TwoQubitState(np.diag([1.5, -0.5, 0, 0]))
    bad = np.eye(4, dtype=complex) / 4
    bad[0, 1] = 0.1j
    with pytest.raises(ValueError):
        TwoQubitState(bad)


def _random_state(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    rho = g @ g.conj().T
    return TwoQubitState(rho / np.trace(rho))


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Basis)), st.sampled_from(list(Basis)))
def test_outcome_marginals_match_reduced_states(seed, a, b):
    s = _random_state(seed)
    p = outcome_probs(s, a, b)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert (p >= 0).all()
    ra, rb = s.reduced(0), s.reduced(1)
    proj = {
        Basis.HV: [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])],
        Basis.DA: [np.full((2, 2), 0.5), np.array([[0.5, -0.5], [-0.5, 0.5]])],
    }
    for i in range(2):
        assert p[i].sum() == pytest.approx(np.trace(ra @ proj[a][i]).real, abs=1e-12)
        assert p[:, i].sum() == pytest.approx(np.trace(rb @ proj[b][i]).real, abs=1e-12)
    for basis in Basis:
        assert abs(visibility(s, basis)) <= 1 + 1e-12


@given(st.floats(0.25, 1.0))
def test_werner_isotropy(f):
    s = werner(f)
    assert visibility(s, Basis.HV) == pytest.approx(visibility(s, Basis.DA), abs=1e-12)
    assert visibility(s, Basis.HV) == pytest.approx(werner_visibility(f), abs=1e-12)


@pytest.mark.parametrize("text,basis,output", [("H", "HV", 0), ("v", "HV", 1), ("D", "DA", 0), ("A", "DA", 1), ("DA", "DA", None)])
def test_analyzer_setting_parse(text, basis, output):
    s = AnalyzerSetting.parse(text)
    assert s.basis is Basis(basis) and s.output == output
    assert AnalyzerSetting.parse(s.label()) == s


def test_analyzer_setting_parse_rejects_garbage():
    with pytest.raises(ValueError):
        AnalyzerSetting.parse("X")
