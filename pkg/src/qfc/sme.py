"""Stochastic master equation engine.

Conditional dynamics under continuous diffusive measurement:

    d rho = -i [H(lam_t), rho] dt + D[c] rho dt + sqrt(eta) Hcal[c] rho dW_t
    dr_t  = Tr[(c + c') rho] dt + dW_t / sqrt(eta)

integrated by the positivity-preserving split Kraus scheme implemented in
``qfc.kernels`` (measurement update, then exact unitary conjugation for
the Hamiltonian). A deterministic Runge-Kutta Lindblad solver serves as
the ensemble-average oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .linalg import check_density_matrix, expm_hermitian
from .models import SystemModel, feedback_generator, hamiltonian, jump_operator

# Stability guard for the step size, in units of the measurement rate.
MAX_KAPPA_DT = 0.05

# Eigenvalues of the conditional state may dip below zero by at most this
# much before a trajectory is rejected (flagged, never clipped).
NEG_TOL = 1e-6


def make_rng(master_seed: int, traj_id: int = 0) -> np.random.Generator:
    """Counter-based Philox stream for trajectory traj_id.

    Streams for distinct (master_seed, traj_id) pairs are statistically
    independent and reproducible regardless of scheduling order.
    """
    seed_word = np.uint64(master_seed % (1 << 64))
    key = (seed_word << np.uint64(32)) ^ np.uint64(0x9E3779B97F4A7C15)
    bg = np.random.Philox(key=[np.uint64(traj_id % (1 << 64)), key])
    return np.random.Generator(bg)


def draw_wiener(rng: np.random.Generator, n_steps: int, dt: float) -> np.ndarray:
    return rng.standard_normal(n_steps) * np.sqrt(dt)


@dataclass
class Trajectory:
    """One Monte-Carlo realization of the closed loop."""

    dt: float
    n_steps: int
    rho0: np.ndarray
    dW: np.ndarray
    dr: np.ndarray
    lam: np.ndarray
    fidelity: np.ndarray  # length n_steps + 1; empty if no target given
    seed: int
    rho_final: np.ndarray | None = None

    def __post_init__(self):
        for name in ("dW", "dr", "lam"):
            arr = getattr(self, name)
            if len(arr) != self.n_steps:
                raise ValueError(f"{name} has length {len(arr)} != {self.n_steps}")
        if len(self.fidelity) not in (0, self.n_steps + 1):
            raise ValueError("fidelity length must be n_steps + 1 (or empty)")
        bad = (self.fidelity < -1e-9) | (self.fidelity > 1 + 1e-9)
        if bad.any():
            raise ValueError("fidelity outside [0, 1]")


# controller(step_index, record_so_far, rho_or_none) -> lambda
ControllerFn = Callable[[int, np.ndarray, Optional[np.ndarray]], float]


def step_unitary(u0_half: np.ndarray, hf: np.ndarray, theta: float) -> np.ndarray:
    """exp(-i h0 dt/2) R(theta) exp(-i h0 dt/2), the per-step propagator."""
    return u0_half @ kernels.feedback_rotation(hf, theta) @ u0_half


def simulate(
    model: SystemModel,
    rho0: np.ndarray,
    controller: ControllerFn,
    n_steps: int,
    dt: float,
    rng: np.random.Generator,
    target: np.ndarray | None = None,
    expose_state: bool = False,
    seed: int = 0,
    check_positivity: bool = True,
) -> Trajectory:
    """Closed-loop trajectory: the controller is invoked before each step
    with the record up to the previous step (and the conditional state
    only when expose_state is set)."""
    if dt <= 0 or dt * model.kappa > MAX_KAPPA_DT:
        raise ValueError(f"dt * kappa = {dt * model.kappa} exceeds {MAX_KAPPA_DT}")
    rho = check_density_matrix(rho0).copy()
    c = jump_operator(model)
    hf = feedback_generator(model)
    h0 = hamiltonian(model, 0.0)
    u0_half = expm_hermitian(h0, 0.5 * dt)
    sqrt_eta = float(np.sqrt(model.eta))

    dw_in = draw_wiener(rng, n_steps, dt)
    dw = np.zeros(n_steps)
    dr = np.zeros(n_steps)
    lam = np.zeros(n_steps)
    fid = np.zeros(n_steps + 1) if target is not None else np.zeros(0)
    if target is not None:
        fid[0] = float((target.conj() @ rho @ target).real)

    for k in range(n_steps):
        val = controller(k, dr[:k], rho if expose_state else None)
        if not np.isfinite(val):
            raise ValueError(f"controller returned non-finite lambda at step {k}")
        lam[k] = float(val)
        u = step_unitary(u0_half, hf, lam[k] * dt)
        rho, dr[k], dw[k] = kernels.sme_step(rho, u, c, sqrt_eta, dt, dw_in[k])
        if check_positivity:
            lo = float(np.linalg.eigvalsh(rho)[0])
            if lo < -NEG_TOL:
                raise ValueError(f"state eigenvalue {lo} < -{NEG_TOL} at step {k}")
        if target is not None:
            fid[k + 1] = float((target.conj() @ rho @ target).real)

    return Trajectory(
        dt=dt, n_steps=n_steps, rho0=rho0.copy(), dW=dw, dr=dr, lam=lam,
        fidelity=fid, seed=seed, rho_final=rho,
    )


def _lindblad_rhs(rho: np.ndarray, h: np.ndarray, c: np.ndarray) -> np.ndarray:
    return -1j * (h @ rho - rho @ h) + kernels.dissipator(c, rho)


def lindblad_solve(
    model: SystemModel,
    rho0: np.ndarray,
    lambda_schedule,
    n_steps: int,
    dt: float,
) -> np.ndarray:
    """RK4 integration of the ensemble-average (Lindblad) equation.

    lambda_schedule may be a scalar, an array of per-step values, or a
    callable of the step index. Returns the stack of states, shape
    (n_steps + 1, d, d).
    """
    rho = check_density_matrix(rho0).copy()
    c = jump_operator(model)
    if callable(lambda_schedule):
        lams = [float(lambda_schedule(k)) for k in range(n_steps)]
    else:
        lams = np.broadcast_to(np.asarray(lambda_schedule, dtype=float), (n_steps,))
    out = np.zeros((n_steps + 1, *rho.shape), dtype=np.complex128)
    out[0] = rho
    for k in range(n_steps):
        h = hamiltonian(model, lams[k])
        k1 = _lindblad_rhs(rho, h, c)
        k2 = _lindblad_rhs(rho + 0.5 * dt * k1, h, c)
        k3 = _lindblad_rhs(rho + 0.5 * dt * k2, h, c)
        k4 = _lindblad_rhs(rho + dt * k3, h, c)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        out[k + 1] = rho
    return out
