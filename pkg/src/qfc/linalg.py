"""Dense complex linear algebra for small Hilbert spaces (dim <= 16 typical).

All operators are plain complex128 numpy arrays; density matrices and pure
states are validated with the check helpers below rather than wrapped in
classes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "matmul",
    "dagger",
    "trace",
    "kron",
    "expect",
    "expm_hermitian",
    "eigh_smallest",
    "herm_defect",
    "check_density_matrix",
    "normalize_density",
    "pure_state_density",
    "check_pure_state",
]

# Tolerances used by the validity checks; stochastic integration is allowed
# a slightly negative eigenvalue.
TRACE_TOL = 1e-9
HERM_TOL = 1e-9
EIG_TOL = 1e-7


def _as_complex(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a.view(np.float64))):
        raise ValueError("matrix has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a, b = _as_complex(a), _as_complex(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def dagger(a) -> np.ndarray:
    """Conjugate transpose."""
    return _as_complex(a).conj().T


def trace(a) -> complex:
    a = _as_complex(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"trace requires a square matrix, got {a.shape}")
    return complex(np.trace(a))


def kron(a, b) -> np.ndarray:
    """Tensor (Kronecker) product."""
    return np.kron(_as_complex(a), _as_complex(b))


def expect(op, rho) -> complex:
    """Tr(op @ rho); both arguments square and of equal dimension."""
    op, rho = _as_complex(op), _as_complex(rho)
    if op.shape != rho.shape or op.shape[0] != op.shape[1]:
        raise ValueError(f"dimension mismatch: op {op.shape}, rho {rho.shape}")
    # Tr(AB) as an elementwise sum avoids forming the product.
    return complex(np.sum(op.T * rho))


def herm_defect(a) -> float:
    """Max-norm distance from Hermiticity."""
    a = _as_complex(a)
    return float(np.abs(a - a.conj().T).max())


def expm_hermitian(h, angle: float) -> np.ndarray:
    """exp(-1j * angle * h) for Hermitian h, via eigendecomposition.

    Raises if h is not Hermitian within HERM_TOL. The result is unitary to
    the same tolerance by construction.
    """
    h = _as_complex(h)
    if herm_defect(h) > HERM_TOL:
        raise ValueError("expm_hermitian requires a Hermitian generator")
    w, v = np.linalg.eigh(h)
    phases = np.exp(-1j * angle * w)
    return (v * phases) @ v.conj().T


def eigh_smallest(rho) -> float:
    """Smallest eigenvalue of a Hermitian matrix (PSD monitoring)."""
    rho = _as_complex(rho)
    return float(np.linalg.eigvalsh(rho)[0])


def check_density_matrix(rho, eig_tol: float = EIG_TOL) -> np.ndarray:
    """Validate trace-one, Hermiticity and near-positivity; return rho."""
    rho = _as_complex(rho)
    if rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    tr = np.trace(rho)
    if abs(tr - 1.0) > TRACE_TOL:
        raise ValueError(f"trace deviates from one: {tr}")
    if herm_defect(rho) > HERM_TOL:
        raise ValueError("density matrix is not Hermitian")
    lam = eigh_smallest(rho)
    if lam < -eig_tol:
        raise ValueError(f"density matrix has eigenvalue {lam} < -{eig_tol}")
    return rho


def normalize_density(rho) -> np.ndarray:
    """Re-Hermitize and trace-normalize; raises if the trace is not positive."""
    rho = _as_complex(rho)
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if tr <= 0.0:
        raise ValueError(f"state trace {tr} <= 0 (time step too large?)")
    return rho / tr


def pure_state_density(psi) -> np.ndarray:
    """|psi><psi| from a normalized state vector."""
    psi = check_pure_state(psi)
    return np.outer(psi, psi.conj())


def check_pure_state(psi, tol: float = 1e-12) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.complex128).reshape(-1)
    norm = float(np.linalg.norm(psi))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"state vector norm {norm} deviates from one")
    return psi
