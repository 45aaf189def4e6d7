"""Closed-loop deployment and evaluation of controllers.

Controllers are played against fresh stochastic trajectories; learned
controllers observe only the initial state, the record so far and their
own past outputs (the rollout harness never hands them the simulator
state). Produces fidelity-versus-time curves with standard errors, CSV
and minimal-SVG exports, and controller/backend timing benchmarks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import kernels, rnn as rnn_mod, transformer as tf_mod
from .linalg import check_density_matrix, check_pure_state, pure_state_density
from .models import (
    ControlGrid, SystemModel, detokenize_lambda, feedback_generator,
    hamiltonian, jump_operator, target_state,
)
from .paqs import PaqsController
from .sme import draw_wiener, make_rng, simulate
from .dataset import _embed_initial_state, sample_initial_states, KIND_PURE_HAAR

CONTROLLER_KINDS = ("transformer", "rnn", "gru", "paqs", "random", "zero")
EVAL_STATE_STREAM = 2**49


def fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """<psi_targ| rho |psi_targ>, real in [0, 1]."""
    psi = check_pure_state(target)
    if rho.shape[0] != psi.shape[0]:
        raise ValueError(f"dimension mismatch: rho {rho.shape}, target {psi.shape}")
    return float((psi.conj() @ rho @ psi).real)


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    controller: str
    model: SystemModel
    grid: ControlGrid
    system_target: np.ndarray
    n_trajectories: int = 200
    n_steps: int = 100
    dt: float = 0.01
    seed: int = 0
    initial_state: dict | None = None  # None → fresh Haar states per trajectory
    checkpoint: str | None = None

    def __post_init__(self):
        if self.controller not in CONTROLLER_KINDS:
            raise ValueError(f"controller must be one of {CONTROLLER_KINDS}")
        if self.n_trajectories < 1 or self.n_steps < 0:
            raise ValueError("counts must be positive")

    @classmethod
    def from_dict(cls, d: dict, model: SystemModel, grid: ControlGrid) -> "ExperimentPreset":
        known = {
            "name", "controller", "n_trajectories", "n_steps", "dt", "seed",
            "initial_state", "checkpoint", "eta", "epsilon", "target",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown preset keys: {sorted(unknown)}")
        overrides = {}
        if "eta" in d:
            overrides["eta"] = d["eta"]
        if "epsilon" in d:
            overrides["epsilon"] = d["epsilon"]
        if overrides:
            model = SystemModel.from_dict({**model.to_dict(), **overrides})
        target = np.array([complex(re, im) for re, im in d["target"]]) if "target" in d \
            else np.array([1.0, 1.0j]) / np.sqrt(2.0)
        return cls(
            name=d["name"],
            controller=d["controller"],
            model=model,
            grid=grid,
            system_target=target,
            n_trajectories=d.get("n_trajectories", 200),
            n_steps=d.get("n_steps", 100),
            dt=d.get("dt", 0.01),
            seed=d.get("seed", 0),
            initial_state=d.get("initial_state"),
            checkpoint=d.get("checkpoint"),
        )


@dataclass
class FidelityCurve:
    t: np.ndarray
    mean_F: np.ndarray
    stderr_F: np.ndarray
    n_traj: int

    def __post_init__(self):
        if ((self.mean_F < -1e-9) | (self.mean_F > 1 + 1e-9)).any():
            raise ValueError("mean fidelity outside [0, 1]")
        if (self.stderr_F < 0).any():
            raise ValueError("negative standard error")


def _initial_qubit_state(preset: ExperimentPreset, traj: int) -> np.ndarray:
    spec = preset.initial_state
    if spec is None or spec.get("kind", "haar") == "haar":
        rng = make_rng(preset.seed, EVAL_STATE_STREAM + traj)
        return sample_initial_states(1, rng, KIND_PURE_HAAR)[0]
    if spec["kind"] == "fixed_pure":
        amps = np.array([complex(re, im) for re, im in spec["amplitudes"]])
        return pure_state_density(amps / np.linalg.norm(amps))
    if spec["kind"] == "fixed_mixed":
        rho = np.array(spec["matrix_re"], dtype=float) + 1j * np.array(spec["matrix_im"], dtype=float)
        return check_density_matrix(rho)
    raise ValueError(f"unknown initial_state kind {spec.get('kind')!r}")


class _TimedController:
    """Wraps a controller callback, accumulating wall-clock time inside it."""

    def __init__(self, fn: Callable):
        self.fn = fn
        self.elapsed = 0.0

    def __call__(self, k, record, rho=None):
        t0 = time.perf_counter()
        out = self.fn(k, record, rho)
        self.elapsed += time.perf_counter() - t0
        return out


def make_controller(preset: ExperimentPreset, rho0: np.ndarray, psi_t: np.ndarray,
                    traj: int = 0, ck_cache: dict | None = None):
    """Controller callback for one trajectory. Learned kinds see only
    observable data: (initial state, record so far, own past outputs)."""
    kind = preset.controller
    if kind == "zero":
        return lambda k, record, rho=None: 0.0
    if kind == "random":
        rng = make_rng(preset.seed, EVAL_STATE_STREAM * 2 + traj)
        centers = preset.grid.centers()

        def random_ctrl(k, record, rho=None):
            return float(centers[rng.integers(0, len(centers))])

        return random_ctrl
    if kind == "paqs":
        return PaqsController(
            preset.model, psi_t, rho0, preset.dt,
            theta_clamp=min(-preset.grid.lambda_min, preset.grid.lambda_max) * preset.dt,
        )
    if kind in ("transformer", "rnn", "gru"):
        if preset.checkpoint is None:
            raise FileNotFoundError("preset requires a checkpoint path")
        if ck_cache is not None and preset.checkpoint in ck_cache:
            config_d, params = ck_cache[preset.checkpoint]
        else:
            config_d, params, _ = tf_mod.load_checkpoint(preset.checkpoint)
            if ck_cache is not None:
                ck_cache[preset.checkpoint] = (config_d, params)
        if config_d["model_kind"] != kind:
            raise ValueError(
                f"checkpoint is {config_d['model_kind']!r}, preset wants {kind!r}"
            )
        grid = preset.grid
        if kind == "transformer":
            config = tf_mod.TransformerConfig.from_dict(config_d["model_config"])
            feats = tf_mod.state_features(rho0)
            tokens: list[int] = []

            def tf_ctrl(k, record, rho=None):
                tok = tf_mod.predict_next(
                    params, config, feats, np.asarray(record), np.array(tokens, dtype=np.int64)
                )
                tokens.append(tok)
                return detokenize_lambda(grid, tok)

            return tf_ctrl
        config = rnn_mod.RnnConfig.from_dict(config_d["model_config"])
        state = rnn_mod.RnnRolloutState(params, config)

        def rnn_ctrl(k, record, rho=None):
            tok = state.step(record[-1] if k > 0 else None)
            return detokenize_lambda(grid, tok)

        return rnn_ctrl
    raise ValueError(f"unknown controller kind {kind!r}")


def rollout(preset: ExperimentPreset, collect_timing: bool = False):
    """Run the preset; returns (FidelityCurve, per-trajectory records)."""
    psi_t = target_state(preset.model, preset.system_target)
    fids = np.zeros((preset.n_trajectories, preset.n_steps + 1))
    per_traj = []
    times = []
    ck_cache: dict = {}
    for traj in range(preset.n_trajectories):
        rho_sys = _initial_qubit_state(preset, traj)
        rho0 = _embed_initial_state(preset.model, rho_sys)
        ctrl = make_controller(preset, rho0, psi_t, traj, ck_cache)
        timed = _TimedController(ctrl) if collect_timing else ctrl
        # learned/random/zero controllers never receive the simulator state
        expose = preset.controller == "paqs"
        t = simulate(
            preset.model, rho0, timed, preset.n_steps, preset.dt,
            make_rng(preset.seed, traj), target=psi_t, expose_state=expose,
            seed=preset.seed,
        )
        fids[traj] = t.fidelity
        rec = {"traj_id": traj, "lam": t.lam, "dr": t.dr, "fidelity": t.fidelity}
        if collect_timing:
            rec["controller_seconds"] = timed.elapsed
            times.append(timed.elapsed)
        per_traj.append(rec)
    curve = FidelityCurve(
        t=np.arange(preset.n_steps + 1) * preset.dt,
        mean_F=fids.mean(axis=0),
        stderr_F=fids.std(axis=0, ddof=1) / np.sqrt(max(preset.n_trajectories, 2))
        if preset.n_trajectories > 1 else np.zeros(preset.n_steps + 1),
        n_traj=preset.n_trajectories,
    )
    return curve, per_traj


def bench_inference(
    transformer_preset: ExperimentPreset,
    paqs_preset: ExperimentPreset,
    n_reps: int = 20,
) -> dict[str, Any]:
    """Wall-clock comparison over full closed-loop trajectories.

    (a) transformer forward passes only (the simulator's own stepping is
    excluded) versus (b) the locally optimal controller including its
    filter propagation. Median seconds per trajectory of >= 20 runs each;
    ratio > 1 means the transformer infers faster than the filter-based
    controller computes. Also reports the kernel-backend comparison when
    the compiled extension is available.
    """
    tp = _with_n(transformer_preset, n_reps)
    pp = _with_n(paqs_preset, n_reps)
    _, tf_recs = rollout(tp, collect_timing=True)
    _, pq_recs = rollout(pp, collect_timing=True)
    tf_times = np.array([r["controller_seconds"] for r in tf_recs])
    pq_times = np.array([r["controller_seconds"] for r in pq_recs])
    report = {
        "n_steps": transformer_preset.n_steps,
        "n_repetitions": n_reps,
        "transformer_seconds_per_traj": float(np.median(tf_times)),
        "paqs_seconds_per_traj": float(np.median(pq_times)),
        "ratio_paqs_over_transformer": float(np.median(pq_times) / np.median(tf_times)),
        "kernel_backend": kernels.BACKEND_NAME,
    }
    report["backend_comparison"] = _bench_backends(paqs_preset)
    return report


def _with_n(preset: ExperimentPreset, n: int) -> ExperimentPreset:
    return ExperimentPreset(**{**preset.__dict__, "n_trajectories": n})


def _bench_backends(preset: ExperimentPreset, n_reps: int = 20) -> dict[str, Any]:
    """Median per-trajectory time of the fused label rollout, per backend."""
    from .kernels import _ref
    from .linalg import expm_hermitian

    model = preset.model
    psi_t = target_state(model, preset.system_target)
    rho_sys = _initial_qubit_state(preset, 0)
    rho0 = _embed_initial_state(model, rho_sys)
    h0 = hamiltonian(model, 0.0)
    u0_half = expm_hermitian(h0, 0.5 * preset.dt)
    hf = feedback_generator(model)
    c = jump_operator(model)
    clamp = min(-preset.grid.lambda_min, preset.grid.lambda_max) * preset.dt
    dws = draw_wiener(make_rng(preset.seed, 0), preset.n_steps, preset.dt)

    backends = {"python": _ref}
    if kernels.active is not kernels.reference:
        backends["compiled"] = kernels.active

    out = {}
    for name, impl in backends.items():
        times = []
        for _ in range(n_reps):
            t0 = time.perf_counter()
            impl.paqs_label_rollout(
                rho0, psi_t, u0_half, hf, c, float(np.sqrt(model.eta)),
                preset.dt, dws, clamp, 1e-8, 1e-6,
            )
            times.append(time.perf_counter() - t0)
        out[f"{name}_seconds_per_traj"] = float(np.median(times))
    if "compiled_seconds_per_traj" in out:
        out["speedup_compiled_over_python"] = (
            out["python_seconds_per_traj"] / out["compiled_seconds_per_traj"]
        )
    return out


def export_curve(curve: FidelityCurve, path_csv, path_svg=None):
    """Write t, mean_F, stderr_F as CSV (and optionally a small SVG plot)."""
    lines = ["t,mean_F,stderr_F"]
    for t, m, s in zip(curve.t, curve.mean_F, curve.stderr_F):
        lines.append(f"{float(t)!r},{float(m)!r},{float(s)!r}")
    path_csv = Path(path_csv)
    tmp = path_csv.with_name(path_csv.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path_csv)
    if path_svg is not None:
        _write_svg(curve, Path(path_svg))


def _write_svg(curve: FidelityCurve, path: Path, width=640, height=420, margin=50):
    if len(curve.t):
        t0, t1 = float(curve.t[0]), float(curve.t[-1]) or 1.0
    else:
        t0, t1 = 0.0, 1.0
    span = (t1 - t0) or 1.0

    def sx(t):
        return margin + (t - t0) / span * (width - 2 * margin)

    def sy(f):
        return height - margin - f * (height - 2 * margin)

    pts = " ".join(f"{sx(t):.2f},{sy(f):.2f}" for t, f in zip(curve.t, curve.mean_F))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13">t (units of 1/kappa)</text>',
        f'<text x="15" y="{height // 2}" font-size="13" '
        f'transform="rotate(-90 15 {height // 2})" text-anchor="middle">fidelity</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{margin - 8}" y="{sy(frac) + 4}" text-anchor="end" '
            f'font-size="11">{frac:.1f}</text>'
        )
    if pts:
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#c33" stroke-width="1.5"/>')
    parts.append("</svg>")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(parts))
    tmp.replace(path)
