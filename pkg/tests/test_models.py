import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qfc.linalg import herm_defect, kron
from qfc.models import (
    ControlGrid,
    SystemModel,
    detokenize_lambda,
    feedback_generator,
    hamiltonian,
    jump_operator,
    lowering_operator,
    target_state,
    tokenize_lambda,
)

Y_TARGET = np.array([1.0, 1.0j]) / np.sqrt(2)


class TestHamiltonian:
    def test_tls_zero(self):
        m = SystemModel(mode="TLS", epsilon=0.0)
        assert np.array_equal(hamiltonian(m, 0.0), np.zeros((2, 2)))

    def test_tls_bias(self):
        m = SystemModel(mode="TLS", epsilon=0.5)
        assert np.allclose(hamiltonian(m, 0.0), np.diag([0.25, -0.25]), atol=0)

    def test_rc_explicit_kron_expansion(self):
        # eps=0, lam=0, Omega=1, g=0.5, rc_dim=2: worked out entry by entry
        m = SystemModel(mode="TLS_RC", epsilon=0.0, omega=1.0, g=0.5, rc_dim=2)
        h = hamiltonian(m, 0.0)
        expected = np.zeros((4, 4), dtype=complex)
        expected[1, 1] = 1.0
        expected[3, 3] = 1.0
        expected[0, 1] = expected[1, 0] = 0.5
        expected[2, 3] = expected[3, 2] = -0.5
        assert np.allclose(h, expected, atol=0)

    def test_always_hermitian(self):
        m = SystemModel(mode="TLS_RC", epsilon=0.3, omega=1.2, g=0.4, rc_dim=4)
        for lam in (-7.0, 0.0, 3.3):
            assert herm_defect(hamiltonian(m, lam)) == 0.0

    def test_uncoupled_rc_splits(self):
        tls = SystemModel(mode="TLS", epsilon=0.7)
        rc = SystemModel(mode="TLS_RC", epsilon=0.7, omega=1.3, g=0.0, rc_dim=3)
        a = lowering_operator(3)
        expected = kron(hamiltonian(tls, 1.1), np.eye(3)) + 1.3 * kron(
            np.eye(2), a.conj().T @ a
        )
        assert np.array_equal(hamiltonian(rc, 1.1), expected)


class TestJumpAndFeedback:
    def test_tls_jump(self):
        m = SystemModel(mode="TLS", kappa=1.0)
        assert np.array_equal(jump_operator(m), np.array([[0, 1], [0, 0]]))

    def test_jump_scaling(self):
        m = SystemModel(mode="TLS", kappa=4.0)
        assert np.array_equal(jump_operator(m), 2 * np.array([[0, 1], [0, 0]]))

    def test_rc_jump_ladder_elements(self):
        m = SystemModel(mode="TLS_RC", kappa=1.0, rc_dim=3)
        c = jump_operator(m)
        a = np.zeros((3, 3))
        a[0, 1] = 1.0
        a[1, 2] = np.sqrt(2.0)
        assert np.allclose(c, np.kron(np.eye(2), a), atol=0)

    def test_feedback_tls(self):
        m = SystemModel(mode="TLS")
        assert np.array_equal(feedback_generator(m), np.array([[0, 0.5], [0.5, 0]]))

    def test_feedback_rc_block_form(self):
        m = SystemModel(mode="TLS_RC", rc_dim=2)
        hf = feedback_generator(m)
        assert np.array_equal(hf, np.kron(np.array([[0, 0.5], [0.5, 0]]), np.eye(2)))
        assert herm_defect(hf) == 0.0
        assert abs(np.trace(hf)) == 0.0


class TestTargetState:
    def test_tls_passthrough(self):
        m = SystemModel(mode="TLS")
        assert np.array_equal(target_state(m, Y_TARGET), Y_TARGET)

    def test_rc_vacuum_extension(self):
        m = SystemModel(mode="TLS_RC", rc_dim=2)
        psi = target_state(m, np.array([1.0, 0.0]))
        assert np.array_equal(psi, np.array([1, 0, 0, 0], dtype=complex))

    def test_norm_one(self):
        m = SystemModel(mode="TLS_RC", rc_dim=5)
        psi = target_state(m, Y_TARGET)
        assert np.linalg.norm(psi) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_wrong_dim(self):
        m = SystemModel(mode="TLS")
        with pytest.raises(ValueError):
            target_state(m, np.array([1.0, 0.0, 0.0]))


class TestModelValidation:
    def test_bad_eta(self):
        with pytest.raises(ValueError):
            SystemModel(eta=0.0)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            SystemModel(mode="XX")

    def test_dim(self):
        assert SystemModel(mode="TLS").dim == 2
        assert SystemModel(mode="TLS_RC", rc_dim=6).dim == 12

    def test_roundtrip_dict(self):
        m = SystemModel(mode="TLS_RC", epsilon=0.1, kappa=2.0, eta=0.7, omega=1.5,
                        g=0.5, rc_dim=6)
        assert SystemModel.from_dict(m.to_dict()) == m

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError):
            SystemModel.from_dict({"mode": "TLS", "bogus": 1})


class TestControlGrid:
    def test_midpoint_tie_breaks_low(self):
        grid = ControlGrid(-5.0, 5.0, 64)
        assert tokenize_lambda(grid, 0.0) == 31

    def test_clamp_below(self):
        grid = ControlGrid(-5.0, 5.0, 64)
        assert tokenize_lambda(grid, -7.0) == 0
        assert tokenize_lambda(grid, 123.0) == 63

    def test_bin_center_exact(self):
        grid = ControlGrid(-5.0, 5.0, 64)
        center = detokenize_lambda(grid, 10)
        assert tokenize_lambda(grid, center) == 10

    def test_detokenize_range(self):
        grid = ControlGrid(-5.0, 5.0, 8)
        with pytest.raises(ValueError):
            detokenize_lambda(grid, 8)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_round_trip_within_half_bin(self, lam):
        grid = ControlGrid(-20.0, 20.0, 64)
        tok = tokenize_lambda(grid, lam)
        assert 0 <= tok < grid.n_bins
        clamped = min(max(lam, grid.lambda_min), grid.lambda_max)
        assert abs(detokenize_lambda(grid, tok) - clamped) <= grid.bin_width / 2 + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            ControlGrid(1.0, -1.0, 8)
        with pytest.raises(ValueError):
            ControlGrid(-1.0, 1.0, 1)
