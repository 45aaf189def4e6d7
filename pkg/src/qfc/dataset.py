"""Supervised control datasets: generation, serialization, batch loading.

A dataset directory holds ``manifest.json`` plus ``train.jsonl``,
``val.jsonl`` and ``test.jsonl`` (UTF-8, one sample per line, float values
round-tripping bit-exactly through their decimal representation). Splits
partition initial states, so validation and test trajectories start from
states never seen in training.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import kernels
from .linalg import expm_hermitian, pure_state_density
from .models import (
    ControlGrid,
    SystemModel,
    feedback_generator,
    hamiltonian,
    jump_operator,
    target_state,
    tokenize_lambda,
)
from .paqs import SAT_DELTA, PaqsController
from .sme import NEG_TOL, draw_wiener, make_rng, simulate
from .transformer import state_features

SCHEMA_VERSION = 1
# auxiliary stream ids, outside the per-trajectory id range
STATE_STREAM = 2**48
SPLIT_STREAM = 2**48 + 1

KIND_PURE_HAAR = "pure_haar"
KIND_MIXED_RANDOM = "mixed_random"


@dataclass
class DatasetManifest:
    model: SystemModel
    grid: ControlGrid
    n_initial_states: int
    n_traj_per_state: int
    n_steps: int
    dt: float
    master_seed: int
    system_target: np.ndarray
    state_kind: str = KIND_PURE_HAAR
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    schema_version: int = SCHEMA_VERSION
    created: str = ""
    record_mean: float = 0.0
    record_std: float = 1.0
    summary: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.n_initial_states, max(self.n_traj_per_state, 1)) < 1:
            raise ValueError("counts must be positive")
        if self.state_kind not in (KIND_PURE_HAAR, KIND_MIXED_RANDOM):
            raise ValueError(f"unknown state kind {self.state_kind!r}")

    @property
    def theta_clamp(self) -> float:
        """Kick clamp keeping labels representable on the control grid."""
        return min(-self.grid.lambda_min, self.grid.lambda_max) * self.dt

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "created": self.created,
            "model": self.model.to_dict(),
            "grid": self.grid.to_dict(),
            "n_initial_states": self.n_initial_states,
            "n_traj_per_state": self.n_traj_per_state,
            "n_steps": self.n_steps,
            "dt": self.dt,
            "master_seed": self.master_seed,
            "system_target": [[z.real, z.imag] for z in self.system_target],
            "state_kind": self.state_kind,
            "split_fractions": list(self.split_fractions),
            "record_mean": self.record_mean,
            "record_std": self.record_std,
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DatasetManifest":
        target = np.array([complex(re, im) for re, im in d["system_target"]])
        return cls(
            model=SystemModel.from_dict(d["model"]),
            grid=ControlGrid.from_dict(d["grid"]),
            n_initial_states=d["n_initial_states"],
            n_traj_per_state=d["n_traj_per_state"],
            n_steps=d["n_steps"],
            dt=d["dt"],
            master_seed=d["master_seed"],
            system_target=target,
            state_kind=d.get("state_kind", KIND_PURE_HAAR),
            split_fractions=tuple(d.get("split_fractions", (0.8, 0.1, 0.1))),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
            created=d.get("created", ""),
            record_mean=d.get("record_mean", 0.0),
            record_std=d.get("record_std", 1.0),
            summary=d.get("summary", {}),
        )


def sample_initial_states(n: int, rng: np.random.Generator, kind: str) -> list[np.ndarray]:
    """Random qubit density matrices: Haar-pure or two-projector mixtures."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for _ in range(n):
        if kind == KIND_PURE_HAAR:
            out.append(pure_state_density(_haar_qubit(rng)))
        elif kind == KIND_MIXED_RANDOM:
            p = rng.uniform()
            rho = p * pure_state_density(_haar_qubit(rng))
            rho = rho + (1 - p) * pure_state_density(_haar_qubit(rng))
            out.append(rho)
        else:
            raise ValueError(f"unknown state kind {kind!r}")
    return out


def _haar_qubit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=2) + 1j * rng.normal(size=2)
    return v / np.linalg.norm(v)


def _embed_initial_state(model: SystemModel, rho_sys: np.ndarray) -> np.ndarray:
    if model.mode == "TLS":
        return rho_sys
    vac = np.zeros((model.rc_dim, model.rc_dim), dtype=np.complex128)
    vac[0, 0] = 1.0
    return np.kron(rho_sys, vac)


def _generate_one(args) -> dict[str, Any]:
    manifest, state_id, traj_id, rho_sys_re, rho_sys_im = args
    model = manifest.model
    rho_sys = rho_sys_re + 1j * rho_sys_im
    rho0 = _embed_initial_state(model, rho_sys)
    psi_t = target_state(model, manifest.system_target)
    rng = make_rng(manifest.master_seed, traj_id)
    dws = draw_wiener(rng, manifest.n_steps, manifest.dt)

    if model.mode == "TLS":
        h0 = hamiltonian(model, 0.0)
        u0_half = expm_hermitian(h0, 0.5 * manifest.dt)
        out = kernels.paqs_label_rollout(
            rho0, psi_t, u0_half, feedback_generator(model), jump_operator(model),
            float(np.sqrt(model.eta)), manifest.dt, dws,
            manifest.theta_clamp, SAT_DELTA, NEG_TOL,
        )
        lam, dr, dw = out["lambda"], out["dr"], out["dw"]
        fid, clamped = out["fidelity"], out["clamped"]
    else:
        ctrl = PaqsController(model, psi_t, rho0, manifest.dt, manifest.theta_clamp)
        traj = simulate(
            model, rho0, ctrl, manifest.n_steps, manifest.dt,
            make_rng(manifest.master_seed, traj_id), target=psi_t,
            seed=manifest.master_seed, check_positivity=True,
        )
        lam, dr, dw, fid = traj.lam, traj.dr, traj.dW, traj.fidelity
        clamped = np.array(ctrl.clamped_log, dtype=bool)

    tokens = np.array([tokenize_lambda(manifest.grid, x) for x in lam], dtype=np.int64)
    return {
        "traj_id": int(traj_id),
        "state_id": int(state_id),
        "rho0_re": rho0.real.tolist(),
        "rho0_im": rho0.imag.tolist(),
        "dr": dr.tolist(),
        "dw": dw.tolist(),
        "lambda_opt": lam.tolist(),
        "lambda_token": tokens.tolist(),
        "fidelity": fid.tolist(),
        "clamped_count": int(np.asarray(clamped).sum()),
    }


def split_state_ids(manifest: DatasetManifest) -> dict[str, np.ndarray]:
    """Deterministic partition of state ids into train/val/test."""
    rng = make_rng(manifest.master_seed, SPLIT_STREAM)
    perm = rng.permutation(manifest.n_initial_states)
    n = manifest.n_initial_states
    f_train, f_val, _ = manifest.split_fractions
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def generate_dataset(manifest: DatasetManifest, out_path, workers: int = 1) -> dict[str, Any]:
    """Run the labelled closed-loop simulations and write the dataset.

    Returns summary statistics. Aborts if more than 1% of trajectories are
    rejected for positivity violations.
    """
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    state_rng = make_rng(manifest.master_seed, STATE_STREAM)
    states = sample_initial_states(
        manifest.n_initial_states, state_rng, manifest.state_kind
    )
    jobs = []
    for sid, rho_sys in enumerate(states):
        for j in range(manifest.n_traj_per_state):
            traj_id = sid * manifest.n_traj_per_state + j
            jobs.append((manifest, sid, traj_id, rho_sys.real, rho_sys.imag))

    records: list[dict | None] = []
    n_rejected = 0
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_generate_one_safe, jobs, chunksize=8):
                records.append(rec)
                n_rejected += rec is None
    else:
        for job in jobs:
            rec = _generate_one_safe(job)
            records.append(rec)
            n_rejected += rec is None

    n_total = len(jobs)
    if n_total and n_rejected > 0.01 * n_total:
        raise RuntimeError(
            f"{n_rejected}/{n_total} trajectories rejected for positivity; "
            "reduce dt or inspect the model"
        )
    records = [r for r in records if r is not None]

    splits = split_state_ids(manifest)
    by_split = {name: [] for name in splits}
    sid_to_split = {}
    for name, ids in splits.items():
        for sid in ids:
            sid_to_split[int(sid)] = name
    for rec in records:
        by_split[sid_to_split[rec["state_id"]]].append(rec)

    # record standardization from the train split
    train_dr = np.concatenate(
        [np.asarray(r["dr"]) for r in by_split["train"]] or [np.zeros(0)]
    )
    manifest.record_mean = float(train_dr.mean()) if train_dr.size else 0.0
    manifest.record_std = (float(train_dr.std()) if train_dr.size else 0.0) or 1.0

    all_tokens = np.concatenate(
        [np.asarray(r["lambda_token"]) for r in records] or [np.zeros(0, dtype=int)]
    )
    all_lam = np.concatenate(
        [np.asarray(r["lambda_opt"]) for r in records] or [np.zeros(0)]
    )
    hist = np.bincount(all_tokens, minlength=manifest.grid.n_bins) if all_tokens.size else np.zeros(manifest.grid.n_bins)
    in_range = (
        float(np.mean((all_lam >= manifest.grid.lambda_min) & (all_lam <= manifest.grid.lambda_max)))
        if all_lam.size else 1.0
    )
    clamp_frac = (
        float(sum(r["clamped_count"] for r in records) / max(all_lam.size, 1))
    )
    mean_final_fid = float(np.mean([r["fidelity"][-1] for r in records])) if records else 0.0
    summary = {
        "n_trajectories": len(records),
        "n_rejected": int(n_rejected),
        "token_histogram": hist.astype(int).tolist(),
        "fraction_lambda_in_range": in_range,
        "fraction_clamped": clamp_frac,
        "mean_final_fidelity": mean_final_fid,
        "split_sizes": {k: len(v) for k, v in by_split.items()},
    }
    if in_range < 0.98:
        summary["warning"] = (
            f"only {100 * in_range:.1f}% of labels inside the grid range; "
            "consider widening the grid"
        )
    manifest.summary = summary
    manifest.created = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())

    for name, recs in by_split.items():
        lines = [json.dumps(r, sort_keys=True) for r in recs]
        _atomic_write(out / f"{name}.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    _atomic_write(out / "manifest.json", json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return summary


def _generate_one_safe(args):
    try:
        return _generate_one(args)
    except ValueError as e:
        # positivity/trace rejection is counted; anything else is a bug
        if "eigenvalue" in str(e) or "trace" in str(e):
            return None
        raise


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads((Path(path) / "manifest.json").read_text()))


def load_split(path, split: str) -> list[dict[str, np.ndarray]]:
    fn = Path(path) / f"{split}.jsonl"
    if not fn.exists():
        raise FileNotFoundError(f"missing split file {fn}")
    out = []
    for line in fn.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rho0 = np.asarray(d["rho0_re"], dtype=float) + 1j * np.asarray(d["rho0_im"], dtype=float)
        out.append(
            {
                "traj_id": d["traj_id"],
                "state_id": d["state_id"],
                "rho0": rho0,
                "dr": np.asarray(d["dr"], dtype=float),
                "dw": np.asarray(d["dw"], dtype=float),
                "lambda_opt": np.asarray(d["lambda_opt"], dtype=float),
                "lambda_token": np.asarray(d["lambda_token"], dtype=np.int64),
                "fidelity": np.asarray(d["fidelity"], dtype=float),
            }
        )
    return out


def _downsample_indices(n_steps: int, context_len: int) -> np.ndarray:
    """Strided subsampling of step indices until the encoder input fits."""
    stride = 1
    while n_steps // stride + 1 > context_len:
        stride *= 2
    return np.arange(0, n_steps, stride)


def sample_to_arrays(rec: dict, grid_bos: int, context_len: int):
    """Build (state_feats, enc_record, dec_tokens, dec_record, targets)."""
    n = len(rec["dr"])
    feats = state_features(rec["rho0"])
    keep = _downsample_indices(n, context_len)
    if len(keep) == 0:
        empty_f, empty_i = np.zeros(0), np.zeros(0, dtype=np.int64)
        return feats, empty_f, empty_i, empty_f, empty_i
    dr = rec["dr"][keep]
    tokens = rec["lambda_token"][keep]
    dec_tokens = np.concatenate([[grid_bos], tokens[:-1]])
    prev = keep - 1
    dec_record = np.where(prev >= 0, rec["dr"][np.maximum(prev, 0)], 0.0)
    return feats, dr, dec_tokens, dec_record, tokens


def load_batches(
    path,
    split: str,
    batch_size: int,
    context_len: int,
    rng: np.random.Generator | None = None,
) -> Iterator[dict[str, np.ndarray]]:
    """Stream shuffled teacher-forcing batches from a split.

    Yields dicts with state_feats (B, F), enc_record (B, Lr), dec_tokens
    (B, L), dec_record (B, L) and targets (B, L). All trajectories in a
    dataset share one length, so batches are rectangular.
    """
    manifest = load_manifest(path)
    records = load_split(path, split)
    if not records:
        return
    bos = manifest.grid.n_bins
    order = np.arange(len(records))
    if rng is not None:
        order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        parts = [sample_to_arrays(r, bos, context_len) for r in chunk]
        yield {
            "state_feats": np.stack([p[0] for p in parts]),
            "enc_record": np.stack([p[1] for p in parts]),
            "dec_tokens": np.stack([p[2] for p in parts]),
            "dec_record": np.stack([p[3] for p in parts]),
            "targets": np.stack([p[4] for p in parts]),
        }
