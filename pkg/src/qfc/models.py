"""System models: Hamiltonians, jump operators, feedback generators, targets.

Two settings are supported, in units of the measurement rate (kappa = 1,
hbar = 1):

* TLS      -- a qubit, H(lam) = (eps/2) sz + (lam/2) sx, monitored through
              c = sqrt(kappa) sigma_minus.
* TLS_RC   -- the qubit coupled to a damped oscillator mode (the reaction
              coordinate), H(lam) = (eps/2) sz + (lam/2) sx + W a'a
              + g sz (a + a'), monitored through c = sqrt(kappa) a.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .linalg import check_pure_state, kron

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=np.complex128)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.complex128)
SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=np.complex128)
IDENTITY_2 = np.eye(2, dtype=np.complex128)

MODE_TLS = "TLS"
MODE_TLS_RC = "TLS_RC"


def lowering_operator(dim: int) -> np.ndarray:
    """Truncated oscillator annihilation operator a, a[n-1, n] = sqrt(n)."""
    a = np.zeros((dim, dim), dtype=np.complex128)
    for n in range(1, dim):
        a[n - 1, n] = np.sqrt(n)
    return a


@dataclass(frozen=True)
class SystemModel:
    """Physics parameters plus derived operator builders."""

    mode: str = MODE_TLS
    epsilon: float = 0.0
    kappa: float = 1.0
    eta: float = 1.0
    omega: float = 1.0
    g: float = 0.0
    rc_dim: int = 6

    def __post_init__(self):
        if self.mode not in (MODE_TLS, MODE_TLS_RC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.mode == MODE_TLS_RC and self.rc_dim < 2:
            raise ValueError("rc_dim must be >= 2")

    @property
    def dim(self) -> int:
        return 2 if self.mode == MODE_TLS else 2 * self.rc_dim

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "kappa": self.kappa,
            "eta": self.eta,
            "omega": self.omega,
            "g": self.g,
            "rc_dim": self.rc_dim,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemModel":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SystemModel keys: {sorted(unknown)}")
        return cls(**d)


def hamiltonian(model: SystemModel, lam: float) -> np.ndarray:
    """System Hamiltonian at control value lam (Hermitian by construction)."""
    h_tls = 0.5 * model.epsilon * SIGMA_Z + 0.5 * lam * SIGMA_X
    if model.mode == MODE_TLS:
        return h_tls
    a = lowering_operator(model.rc_dim)
    number = a.conj().T @ a
    h = kron(h_tls, np.eye(model.rc_dim))
    h += model.omega * kron(IDENTITY_2, number)
    h += model.g * kron(SIGMA_Z, a + a.conj().T)
    return h


def jump_operator(model: SystemModel) -> np.ndarray:
    """Measurement jump operator: sqrt(kappa) sigma_minus or sqrt(kappa) a."""
    root = np.sqrt(model.kappa)
    if model.mode == MODE_TLS:
        return root * SIGMA_MINUS
    return root * kron(IDENTITY_2, lowering_operator(model.rc_dim))


def feedback_generator(model: SystemModel) -> np.ndarray:
    """Feedback Hamiltonian sx/2, extended by identity on the RC factor."""
    hf = 0.5 * SIGMA_X
    if model.mode == MODE_TLS:
        return hf
    return kron(hf, np.eye(model.rc_dim))


def target_state(model: SystemModel, system_target) -> np.ndarray:
    """Full-space target: the qubit target, tensored with RC vacuum if present."""
    psi = check_pure_state(system_target)
    if psi.shape[0] != 2:
        raise ValueError("system target must be a qubit state")
    if model.mode == MODE_TLS:
        return psi
    vacuum = np.zeros(model.rc_dim, dtype=np.complex128)
    vacuum[0] = 1.0
    return np.kron(psi, vacuum)


@dataclass(frozen=True)
class ControlGrid:
    """Uniform discretization of the control amplitude for the token head.

    The default range keeps >= 98% of locally optimal labels in range
    (teacher kicks are clamped to lambda_max * dt) while resolving the
    small tracking corrections near zero.
    """

    lambda_min: float = -10.0
    lambda_max: float = 10.0
    n_bins: int = 64

    def __post_init__(self):
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be < lambda_max")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    @property
    def bin_width(self) -> float:
        return (self.lambda_max - self.lambda_min) / self.n_bins

    def centers(self) -> np.ndarray:
        return self.lambda_min + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "n_bins": self.n_bins,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ControlGrid":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ControlGrid keys: {sorted(unknown)}")
        return cls(**d)


def tokenize_lambda(grid: ControlGrid, lam: float) -> int:
    """Nearest-bin-center index, clamped; ties break toward the lower index."""
    x = (lam - grid.lambda_min) / grid.bin_width - 0.5
    idx = int(np.ceil(x - 0.5))  # round half toward lower index
    return min(max(idx, 0), grid.n_bins - 1)


def detokenize_lambda(grid: ControlGrid, token: int) -> float:
    if not 0 <= token < grid.n_bins:
        raise ValueError(f"token {token} outside [0, {grid.n_bins})")
    return grid.lambda_min + (token + 0.5) * grid.bin_width
