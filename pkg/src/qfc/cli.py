"""Command-line entry point.

Subcommands: gen-data, train, finetune, eval, bench, verify. All take
--config pointing at a JSON run configuration; --seed overrides the
config seeds (the QFC_SEED environment variable is a last-resort
fallback, the flag wins). Exit codes: 0 success, 1 runtime failure,
2 malformed configuration or unresolvable path.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluate as ev
from . import training as tr
from .models import ControlGrid, SystemModel

CONFIG_SECTIONS = {"system", "grid", "dataset", "train", "eval", "bench", "paths"}


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    cfg = {k: v for k, v in cfg.items() if not k.startswith("_")}
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _resolve_seed(args, fallback: int) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("QFC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"QFC_SEED={env!r} is not an integer") from e
    return fallback


def _system(cfg) -> SystemModel:
    try:
        return SystemModel.from_dict(cfg.get("system", {}))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad system section: {e}") from e


def _grid(cfg) -> ControlGrid:
    try:
        return ControlGrid.from_dict(cfg.get("grid", {}))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad grid section: {e}") from e


def _dataset_dir(cfg, args) -> Path:
    paths = cfg.get("paths", {})
    if args.out and "dataset" not in paths:
        return Path(args.out) / "dataset"
    return Path(paths.get("dataset", "out/dataset"))


def _build_manifest(cfg, args) -> ds.DatasetManifest:
    d = dict(cfg.get("dataset", {}))
    known = {
        "n_initial_states", "n_traj_per_state", "n_steps", "dt",
        "master_seed", "state_kind", "split_fractions", "target",
    }
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    target = d.get("target")
    system_target = (
        np.array([complex(re, im) for re, im in target])
        if target is not None
        else np.array([1.0, 1.0j]) / np.sqrt(2.0)
    )
    try:
        return ds.DatasetManifest(
            model=_system(cfg),
            grid=_grid(cfg),
            n_initial_states=d.get("n_initial_states", 20),
            n_traj_per_state=d.get("n_traj_per_state", 50),
            n_steps=d.get("n_steps", 100),
            dt=d.get("dt", 0.01),
            master_seed=_resolve_seed(args, d.get("master_seed", 0)),
            system_target=system_target,
            state_kind=d.get("state_kind", ds.KIND_PURE_HAAR),
            split_fractions=tuple(d.get("split_fractions", (0.8, 0.1, 0.1))),
        )
    except ValueError as e:
        raise ConfigError(f"bad dataset section: {e}") from e


def cmd_gen_data(cfg, args) -> int:
    manifest = _build_manifest(cfg, args)
    out = _dataset_dir(cfg, args)
    summary = ds.generate_dataset(manifest, out, workers=args.workers)
    print(json.dumps({"dataset": str(out), **summary}, indent=1))
    if summary.get("warning"):
        print(f"warning: {summary['warning']}", file=sys.stderr)
    return 0


def _train_cfg(cfg, args, finetune: bool) -> tuple[str, tr.TrainConfig, dict]:
    t = dict(cfg.get("train", {}))
    model_kind = t.pop("model_kind", "transformer")
    model_config = t.pop("model_config", {})
    if model_kind not in tr.MODEL_KINDS:
        raise ConfigError(f"train.model_kind must be one of {tr.MODEL_KINDS}")
    try:
        tc = tr.TrainConfig.from_dict(t)
    except ValueError as e:
        raise ConfigError(f"bad train section: {e}") from e
    tc = tr.TrainConfig(**{**t, "seed": _resolve_seed(args, tc.seed)})
    if finetune:
        if not tc.init_checkpoint:
            raise ConfigError("finetune requires train.init_checkpoint")
        if not Path(tc.init_checkpoint).exists():
            raise ConfigError(f"init_checkpoint not found: {tc.init_checkpoint}")
    return model_kind, tc, model_config


def cmd_train(cfg, args, finetune: bool = False) -> int:
    model_kind, tc, model_config = _train_cfg(cfg, args, finetune)
    data_dir = _dataset_dir(cfg, args)
    if not (data_dir / "manifest.json").exists():
        raise ConfigError(f"dataset not found at {data_dir}")
    out_root = Path(args.out or cfg.get("paths", {}).get("out", "out"))
    label = "finetune" if finetune else "train"
    summary = tr.train(
        model_kind, data_dir, tc, model_config, out_root / f"{label}_{model_kind}"
    )
    print(json.dumps(summary, indent=1))
    return 0


def _presets(cfg, args) -> list[ev.ExperimentPreset]:
    e = cfg.get("eval", {})
    unknown = set(e) - {"presets"}
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    out = []
    for d in e.get("presets", []):
        try:
            p = ev.ExperimentPreset.from_dict(d, _system(cfg), _grid(cfg))
        except (ValueError, KeyError) as e2:
            raise ConfigError(f"bad eval preset: {e2}") from e2
        if args.seed is not None or os.environ.get("QFC_SEED"):
            p = ev.ExperimentPreset(**{**p.__dict__, "seed": _resolve_seed(args, p.seed)})
        if p.controller in ("transformer", "rnn", "gru"):
            if not p.checkpoint or not Path(p.checkpoint).exists():
                raise ConfigError(
                    f"preset {p.name!r} needs a checkpoint; not found: {p.checkpoint}"
                )
        out.append(p)
    return out


def cmd_eval(cfg, args) -> int:
    presets = _presets(cfg, args)
    if not presets:
        raise ConfigError("eval.presets is empty")
    out_root = Path(args.out or cfg.get("paths", {}).get("out", "out")) / "eval"
    out_root.mkdir(parents=True, exist_ok=True)
    results = {}
    for p in presets:
        curve, _ = ev.rollout(p)
        ev.export_curve(curve, out_root / f"{p.name}.csv", out_root / f"{p.name}.svg")
        results[p.name] = {
            "mean_final_F": float(curve.mean_F[-1]),
            "stderr_final_F": float(curve.stderr_F[-1]),
            "n_trajectories": curve.n_traj,
            "csv": str(out_root / f"{p.name}.csv"),
        }
        print(f"{p.name}: final fidelity {curve.mean_F[-1]:.4f} "
              f"+- {curve.stderr_F[-1]:.4f} ({p.controller})")
    tmp = out_root / "summary.json.tmp"
    tmp.write_text(json.dumps(results, indent=1, sort_keys=True))
    tmp.replace(out_root / "summary.json")
    return 0


def cmd_bench(cfg, args) -> int:
    b = dict(cfg.get("bench", {}))
    unknown = set(b) - {"transformer_preset", "paqs_preset", "n_reps"}
    if unknown:
        raise ConfigError(f"unknown bench keys: {sorted(unknown)}")
    presets = {p.name: p for p in _presets(cfg, args)}
    try:
        tp = presets[b["transformer_preset"]]
        pp = presets[b["paqs_preset"]]
    except KeyError as e:
        raise ConfigError(f"bench preset not defined in eval.presets: {e}") from e
    report = ev.bench_inference(tp, pp, n_reps=b.get("n_reps", 20))
    out_root = Path(args.out or cfg.get("paths", {}).get("out", "out"))
    out_root.mkdir(parents=True, exist_ok=True)
    tmp = out_root / "bench.json.tmp"
    tmp.write_text(json.dumps(report, indent=1, sort_keys=True))
    tmp.replace(out_root / "bench.json")
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_verify(cfg, args) -> int:
    from .verify import run_verify

    results = run_verify()
    return 0 if all(ok for _, _, ok, _ in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qfc",
        description="Closed-loop quantum feedback control: data generation, "
        "training, evaluation, benchmarking and verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate a labelled trajectory dataset"),
        ("train", "train a controller on a dataset"),
        ("finetune", "fine-tune from train.init_checkpoint"),
        ("eval", "run closed-loop evaluation presets"),
        ("bench", "benchmark controller inference and kernel backends"),
        ("verify", "run the invariant verification suite"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--workers", type=int, default=1,
                       help="trajectory parallelism for gen-data (default 1)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "finetune":
            return cmd_train(cfg, args, finetune=True)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "bench":
            return cmd_bench(cfg, args)
        if args.command == "verify":
            return cmd_verify(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract: exit 1
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
