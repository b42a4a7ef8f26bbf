import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpct.lti import LtiModel, discretize, quadrature_blocks, transition, wnoa_model, wnoa_q


def test_wnoa_closed_form_small_case():
    # frozen: Qc = 1, dt = 2
    q = wnoa_q(np.eye(1), 2.0)
    assert np.allclose(q, [[8.0 / 3.0, 2.0], [2.0, 2.0]])
    phi = transition(wnoa_model(np.eye(1)), 2.0)
    assert np.allclose(phi, [[1.0, 2.0], [0.0, 1.0]])


@pytest.mark.parametrize("dt", [1e-3, 0.01, 0.1, 1.0, 3.7, 10.0])
@pytest.mark.parametrize("qc", [[0.5], [1.0, 4.0], [0.2, 0.05, 0.2]])
def test_wnoa_matches_quadrature(dt, qc):
    model = wnoa_model(np.diag(qc))
    closed = discretize(model, 1.0, 1.0 + dt)
    _, q_num = quadrature_blocks(model, 1.0, 1.0 + dt)
    scale = np.abs(closed.Q_disc).max()
    assert np.max(np.abs(closed.Q_disc - q_num)) <= 1e-8 * max(scale, 1e-300) + 1e-14


def test_general_lti_uses_matrix_exponential():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    model = LtiModel(A, np.array([[0.0], [1.0]]), np.eye(1))
    from scipy.linalg import expm

    assert np.allclose(transition(model, 0.7), expm(0.7 * A))


def test_transition_semigroup():
    A = np.array([[0.0, 1.0], [-1.0, -0.5]])
    model = LtiModel(A, np.array([[0.0], [1.0]]), np.eye(1))
    assert np.allclose(transition(model, 0.3) @ transition(model, 0.4), transition(model, 0.7))


def test_input_term_is_integrated():
    model = LtiModel(np.zeros((1, 1)), np.eye(1), np.eye(1), v=lambda t: np.array([2.0 * t]))
    blk = discretize(model, 0.0, 1.5)
    assert blk.v_disc[0] == pytest.approx(1.5**2)  # int_0^1.5 2t dt
    assert blk.Q_disc[0, 0] == pytest.approx(1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_noise_composes_over_split_intervals(a, b):
    """Q(0, a+b) = Phi(b) Q(0, a) Phi(b)^T + Q(a, a+b)."""
    model = wnoa_model(np.diag([0.7, 1.3]))
    q1 = discretize(model, 0.0, a)
    q2 = discretize(model, a, a + b)
    whole = discretize(model, 0.0, a + b)
    comp = q2.Phi @ q1.Q_disc @ q2.Phi.T + q2.Q_disc
    assert np.allclose(comp, whole.Q_disc, rtol=1e-10, atol=1e-12)


def test_rejects_bad_inputs():
    model = wnoa_model(np.eye(1))
    with pytest.raises(ValueError):
        discretize(model, 1.0, 1.0)
    with pytest.raises(ValueError):
        transition(model, -0.1)
    with pytest.raises(ValueError):
        wnoa_model(np.array([[1.0, 2.0], [2.0, 1.0]]))
