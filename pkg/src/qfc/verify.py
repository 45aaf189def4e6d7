"""Invariant verification suite (the `qfc verify` subcommand).

Each check returns (id, name, passed, detail); the CLI prints one line per
check and exits nonzero on any failure. The acceptance test module runs
the same checks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels, rnn as rnn_mod, transformer as tf_mod
from .linalg import expm_hermitian
from .models import SystemModel, feedback_generator, hamiltonian, jump_operator
from .paqs import SAT_DELTA, brute_force_theta
from .sme import draw_wiener, lindblad_solve, make_rng
from .dataset import sample_initial_states, KIND_PURE_HAAR


def check_sme_lindblad(n_traj: int = 2000, seed: int = 20250808):
    """Trajectory-averaged conditional state vs the Lindblad solution."""
    model = SystemModel(mode="TLS", epsilon=0.3, kappa=1.0, eta=1.0)
    n_steps, dt = 100, 0.01
    rho0 = np.array([[0, 0], [0, 1]], dtype=np.complex128)
    h = hamiltonian(model, 0.0)
    u = expm_hermitian(h, dt)
    c = jump_operator(model)
    accum = np.zeros((n_steps + 1, 2, 2), dtype=np.complex128)
    for traj in range(n_traj):
        dws = draw_wiener(make_rng(seed, traj), n_steps, dt)
        kernels.sme_fixed_rollout(rho0, u, c, 1.0, dt, dws, rho_accum=accum)
    mean_rho = accum / n_traj
    oracle = lindblad_solve(model, rho0, 0.0, n_steps, dt)
    err = float(np.abs(mean_rho - oracle).max())
    return err <= 0.02, f"max elementwise deviation {err:.4f} (tol 0.02, {n_traj} traj)"


def check_analytic_decay():
    """Uncontrolled amplitude damping: excited population e^{-kappa t}."""
    model = SystemModel(mode="TLS", epsilon=0.0, kappa=1.0, eta=1.0)
    rho0 = np.array([[0, 0], [0, 1]], dtype=np.complex128)
    out = lindblad_solve(model, rho0, 0.0, 100, 0.01)
    err = abs(float(out[-1][1, 1].real) - np.exp(-1.0))
    return err <= 1e-6, f"|P1(t=1) - e^-1| = {err:.2e} (tol 1e-6)"


def _scan_two_stage(rho, psi_t, hf, coarse_spacing=5e-3, fine_spacing=1e-4):
    coarse = np.arange(-np.pi, np.pi + coarse_spacing, coarse_spacing)
    t0 = brute_force_theta(rho, psi_t, hf, coarse)
    fine = t0 + np.arange(-2 * coarse_spacing, 2 * coarse_spacing + fine_spacing, fine_spacing)
    return brute_force_theta(rho, psi_t, hf, fine)


def check_paqs_optimality(n_traj: int = 50, seed: int = 77):
    """Controller angle vs brute-force scan along closed-loop trajectories."""
    model = SystemModel(mode="TLS", epsilon=0.0, kappa=1.0, eta=1.0)
    psi_t = np.array([1.0, 1.0j]) / np.sqrt(2)
    hf = feedback_generator(model)
    c = jump_operator(model)
    n_steps, dt = 100, 0.01
    u0_half = expm_hermitian(hamiltonian(model, 0.0), 0.5 * dt)
    theta_clamp = 0.2

    worst_gap, worst_grad, checked = 0.0, 0.0, 0
    for traj in range(n_traj):
        rng = make_rng(seed, traj)
        rho = sample_initial_states(1, rng, KIND_PURE_HAAR)[0]
        dws = draw_wiener(make_rng(seed, 10_000 + traj), n_steps, dt)
        for k in range(n_steps):
            theta, sat = kernels.paqs_theta_opt(rho, psi_t, hf, SAT_DELTA)
            if not sat:
                f0, b, cc = kernels.sinusoid_components(rho, psi_t, hf)
                a_coef = f0 - b
                gain = (a_coef + np.hypot(b, cc)) - f0  # F(theta*) - F(0), exact
                if gain > 1e-6:
                    checked += 1
                    th_scan = _scan_two_stage(rho, psi_t, hf)
                    worst_gap = max(worst_gap, abs(theta - th_scan))
                    h = 1e-5
                    up = expm_hermitian(hf, theta + h)
                    dn = expm_hermitian(hf, theta - h)
                    fp = float((psi_t.conj() @ (up @ rho @ up.conj().T) @ psi_t).real)
                    fm = float((psi_t.conj() @ (dn @ rho @ dn.conj().T) @ psi_t).real)
                    worst_grad = max(worst_grad, abs(fp - fm) / (2 * h))
            lam = float(np.clip(theta, -theta_clamp, theta_clamp)) / dt
            u = u0_half @ kernels.feedback_rotation(hf, lam * dt) @ u0_half
            rho, _, _ = kernels.sme_step(rho, u, c, 1.0, dt, dws[k])
    ok = worst_gap <= 1e-3 and worst_grad <= 1e-4
    return ok, (
        f"{checked} steps checked; max |theta*-scan| = {worst_gap:.2e} (tol 1e-3), "
        f"max |dF/dtheta| = {worst_grad:.2e} (tol 1e-4)"
    )


def check_paqs_stabilization(n_traj: int = 200, seed: int = 42):
    """Mean final fidelity >= 0.90 and >= mean initial + 0.15."""
    model = SystemModel(mode="TLS", epsilon=0.0, kappa=1.0, eta=1.0)
    psi_t = np.array([1.0, 1.0j]) / np.sqrt(2)
    hf = feedback_generator(model)
    c = jump_operator(model)
    n_steps, dt = 100, 0.01
    u0_half = expm_hermitian(hamiltonian(model, 0.0), 0.5 * dt)
    init, final = [], []
    for traj in range(n_traj):
        rng = make_rng(seed, 60_000 + traj)
        rho0 = sample_initial_states(1, rng, KIND_PURE_HAAR)[0]
        dws = draw_wiener(make_rng(seed, traj), n_steps, dt)
        out = kernels.paqs_label_rollout(
            rho0, psi_t, u0_half, hf, c, 1.0, dt, dws, 0.2, SAT_DELTA, 1e-6
        )
        init.append(out["fidelity"][0])
        final.append(out["fidelity"][-1])
    mi, mf = float(np.mean(init)), float(np.mean(final))
    ok = mf >= 0.90 and (mf - mi) >= 0.15
    return ok, f"mean final F = {mf:.4f} (gate 0.90), mean initial F = {mi:.4f} (gain gate 0.15)"


def check_gradients():
    """All autodiff primitives, one transformer block, one GRU cell."""
    rng = np.random.default_rng(123)
    worst = {}

    x = ad.parameter(rng.normal(size=(3, 5)) + 0.31)  # keep relu off its kink
    w_const = ad.Tensor(rng.normal(size=(3, 5)))
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 5)))
    g = ad.parameter(rng.normal(size=5))
    bias = ad.parameter(rng.normal(size=5))
    table = ad.parameter(rng.normal(size=(7, 4)))
    idx = np.array([[0, 3, 6], [1, 1, 2]])
    w_emb = ad.Tensor(rng.normal(size=(2, 3, 4)))
    logits = ad.parameter(rng.normal(size=(2, 3, 6)))
    tgt = np.array([[0, 5, 2], [1, 1, 4]])
    c1 = ad.parameter(rng.normal(size=(2, 3)))
    c2 = ad.parameter(rng.normal(size=(2, 2)))
    w_cat = ad.Tensor(rng.normal(size=(2, 3)))
    w_tr = ad.Tensor(rng.normal(size=(4, 3)))

    cases = {
        "matmul": (lambda: ad.sum_(ad.matmul(a, b)), [a, b]),
        "add_broadcast": (lambda: ad.sum_(ad.mul(ad.add(x, g), w_const)), [x, g]),
        "scale": (lambda: ad.sum_(ad.scale(x, -2.5)), [x]),
        "relu": (lambda: ad.sum_(ad.mul(ad.relu(x), w_const)), [x]),
        "softmax": (lambda: ad.sum_(ad.mul(ad.softmax(x), w_const)), [x]),
        "layer_norm": (lambda: ad.sum_(ad.mul(ad.layer_norm(x, g, bias), w_const)), [x, g, bias]),
        "embedding": (lambda: ad.sum_(ad.mul(ad.embedding_lookup(table, idx), w_emb)), [table]),
        "concat_slice": (
            lambda: ad.sum_(ad.mul(ad.concat([c1, c2], axis=1)[:, 1:4], w_cat)), [c1, c2]),
        "transpose": (lambda: ad.sum_(ad.mul(ad.transpose(a), w_tr)), [a]),
        "cross_entropy": (lambda: ad.cross_entropy(logits, tgt), [logits]),
        "tanh": (lambda: ad.sum_(ad.tanh(x)), [x]),
        "sigmoid": (lambda: ad.sum_(ad.sigmoid(x)), [x]),
    }
    for name, (f, params) in cases.items():
        worst[name] = ad.grad_check(f, params, rng=np.random.default_rng(7))

    # full transformer block (encoder layer + decoder layer via the loss)
    config = tf_mod.TransformerConfig(
        n_enc_layers=1, n_dec_layers=1, d_model=8, n_heads=2, d_ff=16,
        context_len=16, vocab=9, dropout_rate=0.0,
    )
    params = tf_mod.init_params(config, seed=5)
    feats = rng.normal(size=(2, 8))
    rec = rng.normal(size=(2, 5))
    toks = rng.integers(0, 9, size=(2, 5))
    dec_rec = rng.normal(size=(2, 5))
    tgts = rng.integers(0, 8, size=(2, 5))

    def tf_loss():
        mem = tf_mod.encode_batch(params, config, feats, rec)
        lg = tf_mod.decode_batch(params, config, mem, toks, dec_rec)
        return ad.cross_entropy(lg, tgts)

    worst["transformer_block"] = ad.grad_check(
        tf_loss, list(params.values()), n_coords=2, rng=np.random.default_rng(9)
    )

    rcfg = rnn_mod.RnnConfig(cell="gru", hidden_dim=8, embed_dim=8, vocab=9)
    rparams = rnn_mod.init_params(rcfg, seed=6)
    rtoks = rng.integers(0, 9, size=(2, 4))
    rrec = rng.normal(size=(2, 4))
    rtgt = rng.integers(0, 8, size=(2, 4))

    def rnn_loss():
        lg, _ = rnn_mod.forward(rparams, rcfg, rtoks, rrec)
        return ad.cross_entropy(lg, rtgt)

    worst["gru_cell"] = ad.grad_check(
        rnn_loss, list(rparams.values()), n_coords=3, rng=np.random.default_rng(11)
    )

    bad = {k: v for k, v in worst.items() if v > 1e-4}
    top = max(worst, key=worst.get)
    return not bad, f"max rel error {worst[top]:.2e} ({top}); all <= 1e-4: {not bad}"


def check_causality(n_cases: int = 10):
    """Perturbing decoder position k' must leave logits at < k' bit-identical."""
    for case in range(n_cases):
        rng = np.random.default_rng(1000 + case)
        config = tf_mod.TransformerConfig(
            n_enc_layers=1, n_dec_layers=2, d_model=16, n_heads=2, d_ff=32,
            context_len=32, vocab=9, dropout_rate=0.0,
        )
        params = tf_mod.init_params(config, seed=case)
        feats = rng.normal(size=(1, 8))
        rec = rng.normal(size=(1, 6))
        toks = rng.integers(0, 9, size=(1, 6))
        dec_rec = rng.normal(size=(1, 6))
        with ad.no_grad():
            mem = tf_mod.encode_batch(params, config, feats, rec)
            base = tf_mod.decode_batch(params, config, mem, toks, dec_rec).data.copy()
            kp = int(rng.integers(1, 6))
            toks2 = toks.copy()
            toks2[0, kp] = (toks2[0, kp] + 3) % 9
            rec2 = dec_rec.copy()
            rec2[0, kp] += 1.7
            pert = tf_mod.decode_batch(params, config, mem, toks2, rec2).data
        if not np.array_equal(base[:, :kp], pert[:, :kp]):
            return False, f"case {case}: logits before position {kp} changed"
        if np.array_equal(base[:, kp:], pert[:, kp:]):
            return False, f"case {case}: perturbation had no effect at all"
    return True, f"{n_cases} random cases, all bit-exact before the perturbed position"


def check_attention_examples():
    """The three hand-derived attention identities."""
    # singleton key: output equals the single value row
    q = ad.Tensor(np.array([[0.3, -1.2], [2.0, 0.1]]))
    k = ad.Tensor(np.array([[0.5, 0.5]]))
    v = ad.Tensor(np.array([[7.0, -3.0]]))
    out = tf_mod.attention(q, k, v, None).data
    ok1 = np.allclose(out, [[7.0, -3.0], [7.0, -3.0]], atol=1e-12)

    # identical keys: output is the mean of the value rows
    k2 = ad.Tensor(np.ones((3, 2)))
    v2 = ad.Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]))
    out2 = tf_mod.attention(q, k2, v2, None).data
    ok2 = np.allclose(out2, np.tile(v2.data.mean(axis=0), (2, 1)), atol=1e-12)

    # 2x2 identity case: softmax([1/sqrt2, 0]) mixing
    eye = ad.Tensor(np.eye(2))
    out3 = tf_mod.attention(eye, eye, eye, None).data
    expect = np.array([[0.670, 0.330], [0.330, 0.670]])
    ok3 = np.abs(out3 - expect).max() <= 1e-3
    ok = ok1 and ok2 and ok3
    return ok, (
        f"singleton {ok1}, identical-keys {ok2}, "
        f"2x2 case max dev {np.abs(out3 - expect).max():.2e} (tol 1e-3)"
    )


CHECKS = [
    (1, "sme_lindblad_agreement", check_sme_lindblad),
    (2, "analytic_decay", check_analytic_decay),
    (3, "paqs_optimality", check_paqs_optimality),
    (4, "paqs_stabilization", check_paqs_stabilization),
    (5, "gradient_checks", check_gradients),
    (6, "decoder_causality", check_causality),
    (7, "attention_examples", check_attention_examples),
]


def run_verify(quiet: bool = False):
    """Run checks 1-7; returns list of (id, name, passed, detail)."""
    results = []
    for cid, name, fn in CHECKS:
        passed, detail = fn()
        results.append((cid, name, passed, detail))
        if not quiet:
            print(f"[{'PASS' if passed else 'FAIL'}] criterion {cid} {name}: {detail}")
    return results
