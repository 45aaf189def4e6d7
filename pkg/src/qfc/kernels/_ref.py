"""Reference (pure numpy) backend for the hot per-step kernels.

The compiled backend in ``_cykernels.pyx`` mirrors every public function
here; ``qfc.kernels`` selects one of the two at import time. Keep the two
implementations in lockstep -- ``tests/test_kernels.py`` checks agreement.

Integration scheme (split Kraus step): the measurement and dissipation
parts advance through the record-driven Kraus pair

    rho -> N rho N' + (1 - eta) dt c rho c',
    N = 1 + eta dr c - (dt/2) c'c,      eta dr = sqrt(eta) dW + eta <x> dt,

which is completely positive for every noise draw; after normalization
its mean drift is exactly the dissipator D[c] and its fluctuating part
the innovation term. (Driving N with the bare noise instead of the
record leaves an O(1) ensemble bias -<x> Hcal[c] rho; driving it with
the record cancels that bias exactly.) The Hamiltonian part is then
applied as an exact unitary conjugation, so large control amplitudes
remain stable. Plain Euler on the master equation loses positivity at
near-pure states for ordinary noise draws (|dW| > sqrt(dt)) and is not
usable here.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def dissipator(c: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """D[c] rho = c rho c' - (c'c rho + rho c'c) / 2."""
    if c.shape != rho.shape:
        raise ValueError(f"dimension mismatch: c {c.shape}, rho {rho.shape}")
    cdc = c.conj().T @ c
    return c @ rho @ c.conj().T - 0.5 * (cdc @ rho + rho @ cdc)


def innovation(c: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """H[c] rho = c rho + rho c' - Tr[(c + c') rho] rho."""
    if c.shape != rho.shape:
        raise ValueError(f"dimension mismatch: c {c.shape}, rho {rho.shape}")
    m = c @ rho
    m = m + m.conj().T
    return m - np.trace(m).real * rho


def sme_step(
    rho: np.ndarray,
    u: np.ndarray,
    c: np.ndarray,
    sqrt_eta: float,
    dt: float,
    dw: float,
):
    """One split SME step: Kraus measurement update, then u = exp(-i H dt).

    Returns (rho_next, dr, dw_used). The record increment is
    dr = Tr[(c + c') rho] dt + dw / sqrt_eta, and dw_used is the Wiener
    increment re-derived from dr exactly as a record consumer would
    (dw_used = sqrt_eta * (dr - Tr[...] dt)), so the reconstruction is
    bit-exact by construction; dw_used differs from the drawn dw by at
    most one rounding step.
    """
    m = c @ rho
    x = 2.0 * np.trace(m).real  # Tr[(c + c') rho]
    uu = x * dt
    dr = uu + dw / sqrt_eta
    dw_used = sqrt_eta * (dr - uu)

    eta = sqrt_eta * sqrt_eta
    n_op = np.eye(rho.shape[0], dtype=np.complex128)
    n_op += (sqrt_eta * dw_used + eta * uu) * c
    n_op -= (0.5 * dt) * (c.conj().T @ c)
    nr = n_op @ rho
    out = nr @ n_op.conj().T
    if eta < 1.0:
        out += ((1.0 - eta) * dt) * (c @ rho @ c.conj().T)
    if u is not None:
        out = u @ out @ u.conj().T
    out = 0.5 * (out + out.conj().T)
    tr = np.trace(out).real
    if tr <= 0.0:
        raise ValueError(f"state trace {tr} <= 0 after SME step (dt too large)")
    return out / tr, dr, dw_used


def sme_step_record(
    rho: np.ndarray,
    u: np.ndarray,
    c: np.ndarray,
    sqrt_eta: float,
    dt: float,
    dr: float,
):
    """Filter variant of sme_step driven by an observed record increment.

    Derives dw_used = sqrt_eta * (dr - Tr[(c + c') rho] dt) with the same
    float expression sme_step uses internally, so a filter holding the
    same state as the simulator reproduces its update bit-exactly.
    Returns (rho_next, dw_used).
    """
    m = c @ rho
    x = 2.0 * np.trace(m).real
    dw_used = sqrt_eta * (dr - x * dt)

    eta = sqrt_eta * sqrt_eta
    n_op = np.eye(rho.shape[0], dtype=np.complex128)
    n_op += (sqrt_eta * dw_used + eta * (x * dt)) * c
    n_op -= (0.5 * dt) * (c.conj().T @ c)
    out = n_op @ rho @ n_op.conj().T
    if eta < 1.0:
        out += ((1.0 - eta) * dt) * (c @ rho @ c.conj().T)
    if u is not None:
        out = u @ out @ u.conj().T
    out = 0.5 * (out + out.conj().T)
    tr = np.trace(out).real
    if tr <= 0.0:
        raise ValueError(f"state trace {tr} <= 0 after SME step (dt too large)")
    return out / tr, dw_used


def sinusoid_components(rho: np.ndarray, psi_t: np.ndarray, hf: np.ndarray):
    """Coefficients (f0, b, c) of F(theta) = a + b cos(theta) + c sin(theta).

    F(theta) = <psi_T| U(theta) rho U'(theta) |psi_T> with
    U(theta) = exp(-i theta hf) and (2 hf)^2 = 1. f0 = F(0) is returned for
    convenience; a = f0 - b.
    """
    s = 2.0 * hf
    spsi = s @ psi_t
    f0 = (psi_t.conj() @ rho @ psi_t).real
    fs = (spsi.conj() @ rho @ spsi).real
    cross = spsi.conj() @ rho @ psi_t
    b = 0.5 * (f0 - fs)
    c = float(cross.imag)  # equals -i<psi|[hf,rho]|psi> for Hermitian rho
    return f0, b, c


def paqs_theta_opt(
    rho: np.ndarray, psi_t: np.ndarray, hf: np.ndarray, sat_delta: float
):
    """Rotation angle maximizing the target fidelity of rho, in [-pi, pi].

    Solves the stationarity condition of F(theta) exactly via the sinusoid
    form. Returns (theta, saturated); saturated is set when the gradient
    coefficient |c| falls below sat_delta (control frozen at singular
    points, theta = 0).
    """
    _, b, c = sinusoid_components(rho, psi_t, hf)
    if abs(c) < sat_delta:
        return 0.0, True
    return float(np.arctan2(c, b)), False


def _min_eig_2x2(rho: np.ndarray) -> float:
    a = rho[0, 0].real
    d = rho[1, 1].real
    b = rho[0, 1]
    disc = np.sqrt(max((a - d) * (a - d) + 4.0 * (b.real * b.real + b.imag * b.imag), 0.0))
    return 0.5 * (a + d - disc)


def feedback_rotation(hf: np.ndarray, theta: float) -> np.ndarray:
    """exp(-i theta hf) for involutory 2 hf, via the half-angle closed form."""
    dim = hf.shape[0]
    return np.cos(0.5 * theta) * np.eye(dim) - (2j * np.sin(0.5 * theta)) * hf


def paqs_label_rollout(
    rho0: np.ndarray,
    psi_t: np.ndarray,
    u0_half: np.ndarray,
    hf: np.ndarray,
    c: np.ndarray,
    sqrt_eta: float,
    dt: float,
    dw_in: np.ndarray,
    theta_clamp: float,
    sat_delta: float,
    neg_tol: float,
):
    """Closed-loop label generation, fused over one trajectory.

    Mirrors simulate() driven by PaqsController: the control applied
    during step k is the fidelity-maximizing kick for the filter state
    before step k (the initial state for k = 0); at unit efficiency the
    filter is the simulated state itself. The per-step unitary is the
    Strang split u0_half R(theta) u0_half with u0_half = exp(-i h0 dt/2)
    precomputed by the caller. Returns a dict of per-step arrays. Raises
    if the state develops an eigenvalue below -neg_tol (checked inline for
    dim 2; larger dims are monitored by the caller).
    """
    n = len(dw_in)
    dim = rho0.shape[0]
    lam = np.zeros(n)
    dr = np.zeros(n)
    dw_used = np.zeros(n)
    thetas = np.zeros(n)  # unclamped optimal kick angle decided before step k
    saturated = np.zeros(n, dtype=bool)
    clamped = np.zeros(n, dtype=bool)
    fid = np.zeros(n + 1)

    rho = rho0.copy()
    fid[0] = (psi_t.conj() @ rho @ psi_t).real
    for k in range(n):
        theta, sat = paqs_theta_opt(rho, psi_t, hf, sat_delta)
        thetas[k], saturated[k] = theta, sat
        if theta > theta_clamp:
            theta, clamped[k] = theta_clamp, True
        elif theta < -theta_clamp:
            theta, clamped[k] = -theta_clamp, True
        lam[k] = theta / dt
        # rotate by lam*dt (not theta) to mirror the deployment roundtrip
        u = u0_half @ feedback_rotation(hf, lam[k] * dt) @ u0_half
        rho, dr[k], dw_used[k] = sme_step(rho, u, c, sqrt_eta, dt, dw_in[k])
        if dim == 2 and _min_eig_2x2(rho) < -neg_tol:
            raise ValueError(f"state eigenvalue below -{neg_tol} at step {k}")
        fid[k + 1] = (psi_t.conj() @ rho @ psi_t).real

    return {
        "lambda": lam,
        "dr": dr,
        "dw": dw_used,
        "fidelity": fid,
        "theta_opt": thetas,
        "saturated": saturated,
        "clamped": clamped,
        "rho_final": rho,
    }


def sme_fixed_rollout(
    rho0: np.ndarray,
    u: np.ndarray,
    c: np.ndarray,
    sqrt_eta: float,
    dt: float,
    dw_in: np.ndarray,
    rho_accum: np.ndarray | None = None,
):
    """Fixed-Hamiltonian trajectory (u = exp(-i H dt) precomputed); optionally
    accumulates the per-step states into rho_accum (shape (n+1, d, d)) for
    ensemble averaging. Returns (rho_final, dr, dw_used)."""
    n = len(dw_in)
    dr = np.zeros(n)
    dw_used = np.zeros(n)
    rho = rho0.copy()
    if rho_accum is not None:
        rho_accum[0] += rho
    for k in range(n):
        rho, dr[k], dw_used[k] = sme_step(rho, u, c, sqrt_eta, dt, dw_in[k])
        if rho_accum is not None:
            rho_accum[k + 1] += rho
    return rho, dr, dw_used
