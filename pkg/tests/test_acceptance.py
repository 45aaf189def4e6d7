"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-7 delegate to the shared verification suite (the same checks
the `qfc verify` subcommand runs); 8-12 exercise the full data -> train ->
deploy pipeline at desk scale; 13 runs the CLI verify entry point.

Heavy artifacts (the desk dataset and the trained transformer) are built
once per session in a temporary workspace.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from qfc import dataset as ds
from qfc import evaluate as ev
from qfc import training as tr
from qfc import verify as vf
from qfc.models import ControlGrid, SystemModel

pytestmark = pytest.mark.acceptance

Y_TARGET = np.array([1.0, 1.0j]) / np.sqrt(2)
GRID = ControlGrid(-10.0, 10.0, 64)
TLS = SystemModel(mode="TLS", epsilon=0.0, kappa=1.0, eta=1.0)
RC = SystemModel(mode="TLS_RC", epsilon=0.0, kappa=1.0, eta=1.0,
                 omega=1.0, g=0.5, rc_dim=6)

DESK_MODEL = {
    "n_enc_layers": 2, "n_dec_layers": 2, "d_model": 64, "n_heads": 4,
    "d_ff": 256, "context_len": 256, "dropout_rate": 0.1,
}
RNN_MODEL = {"hidden_dim": 64, "embed_dim": 64, "truncation_len": 60}


def report(criterion: int, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def checks():
    """Criteria 1-7, computed once."""
    out = {}
    for cid, name, fn in vf.CHECKS:
        out[cid] = fn()
    return out


@pytest.fixture(scope="session")
def desk_dataset(workspace):
    path = workspace / "dataset"
    manifest = ds.DatasetManifest(
        model=TLS, grid=GRID, n_initial_states=20, n_traj_per_state=50,
        n_steps=100, dt=0.01, master_seed=12345, system_target=Y_TARGET,
    )
    summary = ds.generate_dataset(manifest, path)
    return path, summary


@pytest.fixture(scope="session")
def desk_transformer(workspace, desk_dataset):
    path, _ = desk_dataset
    tc = tr.TrainConfig(learning_rate=1e-3, n_epochs=30, batch_size=16,
                        clip_norm=1.0, early_stop_patience=10, seed=1)
    t0 = time.perf_counter()
    out = tr.train("transformer", path, tc, DESK_MODEL,
                   workspace / "train_transformer", quiet=True)
    out["wall_seconds"] = time.perf_counter() - t0
    return out


def _preset(name, controller, checkpoint=None, model=TLS, grid=GRID, **kw):
    base = dict(name=name, controller=controller, model=model, grid=grid,
                system_target=Y_TARGET, n_trajectories=200, n_steps=100,
                dt=0.01, seed=2024, checkpoint=checkpoint)
    base.update(kw)
    return ev.ExperimentPreset(**base)


class TestCriteria1to7:
    def test_criterion_1_sme_lindblad(self, checks):
        ok, detail = checks[1]
        report(1, ok, f"SME-Lindblad agreement: {detail}")

    def test_criterion_2_analytic_decay(self, checks):
        ok, detail = checks[2]
        report(2, ok, f"analytic decay: {detail}")

    def test_criterion_3_paqs_optimality(self, checks):
        ok, detail = checks[3]
        report(3, ok, f"PaQS optimality vs scan oracle: {detail}")

    def test_criterion_4_paqs_stabilization(self, checks):
        ok, detail = checks[4]
        report(4, ok, f"PaQS stabilization: {detail}")

    def test_criterion_5_gradient_checks(self, checks):
        ok, detail = checks[5]
        report(5, ok, f"gradient checks: {detail}")

    def test_criterion_6_causality(self, checks):
        ok, detail = checks[6]
        report(6, ok, f"decoder causality: {detail}")

    def test_criterion_7_attention_examples(self, checks):
        ok, detail = checks[7]
        report(7, ok, f"attention examples: {detail}")


class TestCriterion8Training:
    def test_desk_training_accuracy_and_budget(self, desk_transformer):
        acc = desk_transformer["best_val_token_accuracy"]
        epochs = desk_transformer["n_epochs_run"]
        secs = desk_transformer["wall_seconds"]
        ok = acc >= 0.15 and epochs <= 30 and secs <= 1800
        report(8, ok, (
            f"desk training: val token accuracy {acc:.3f} (gate 0.15, uniform "
            f"1/65 = 0.0154), {epochs} epochs (cap 30), {secs:.0f} s (cap 1800)"
        ))

    def test_desk_training_seed_reproducible(self, workspace, desk_dataset):
        path, _ = desk_dataset
        tc = tr.TrainConfig(learning_rate=1e-3, n_epochs=1, batch_size=16, seed=7)
        a = tr.train("transformer", path, tc, DESK_MODEL, workspace / "rep_a", quiet=True)
        b = tr.train("transformer", path, tc, DESK_MODEL, workspace / "rep_b", quiet=True)
        same = Path(a["metrics_csv"]).read_bytes() == Path(b["metrics_csv"]).read_bytes()
        report(8, same, "training metrics byte-identical across same-seed runs")


class TestCriterion9ClosedLoop:
    @pytest.fixture(scope="class")
    def finals(self, desk_transformer):
        out = {}
        for name, ctrl, ck in (
            ("transformer", "transformer", desk_transformer["checkpoint"]),
            ("random", "random", None),
            ("zero", "zero", None),
            ("paqs", "paqs", None),
        ):
            curve, _ = ev.rollout(_preset(name, ctrl, ck))
            out[name] = (float(curve.mean_F[-1]), float(curve.stderr_F[-1]))
        return out

    def test_learning_gate(self, finals):
        tf_f, _ = finals["transformer"]
        rnd_f, _ = finals["random"]
        zero_f, _ = finals["zero"]
        paqs_f, _ = finals["paqs"]
        ok = (tf_f - rnd_f) >= 0.10 and tf_f > zero_f
        report(9, ok, (
            f"closed loop at eta=1 on unseen states: transformer {tf_f:.3f}, "
            f"random {rnd_f:.3f} (gap {tf_f - rnd_f:+.3f}, gate +0.10), "
            f"zero {zero_f:.3f}; PaQS teacher {paqs_f:.3f} "
            f"(gap to teacher {paqs_f - tf_f:+.3f}, report-only)"
        ))


class TestCriterion10Robustness:
    def test_eta_07_and_eps_05(self, desk_transformer):
        ck = desk_transformer["checkpoint"]
        results = {}
        for tag, overrides in (("eta=0.7", {"eta": 0.7}), ("eps=0.5", {"epsilon": 0.5})):
            model = SystemModel.from_dict({**TLS.to_dict(), **overrides})
            tf_curve, _ = ev.rollout(_preset(f"tf_{tag}", "transformer", ck, model=model, seed=2025))
            rnd_curve, _ = ev.rollout(_preset(f"rnd_{tag}", "random", model=model, seed=2025))
            results[tag] = (float(tf_curve.mean_F[-1]), float(rnd_curve.mean_F[-1]))
        ok = all(tf > rnd for tf, rnd in results.values())
        detail = "; ".join(
            f"{tag}: transformer {tf:.3f} vs random {rnd:.3f}"
            for tag, (tf, rnd) in results.items()
        )
        report(10, ok, f"robustness presets (trained at eta=1, eps=0): {detail}")


class TestCriterion11Timing:
    def test_inference_faster_than_paqs(self, desk_transformer):
        report_d = ev.bench_inference(
            _preset("tf", "transformer", desk_transformer["checkpoint"]),
            _preset("pq", "paqs"),
            n_reps=20,
        )
        ratio = report_d["ratio_paqs_over_transformer"]
        ok = ratio > 1.0
        report(11, ok, (
            f"per-trajectory wall clock: transformer "
            f"{report_d['transformer_seconds_per_traj']:.4f} s vs PaQS-with-filter "
            f"{report_d['paqs_seconds_per_traj']:.4f} s; ratio {ratio:.3f} (gate > 1); "
            f"backends: {report_d['backend_comparison']}"
        ))


class TestCriterion12ReactionCoordinate:
    def test_rc_pipeline_end_to_end(self, workspace, desk_transformer):
        rc_data = workspace / "dataset_rc"
        manifest = ds.DatasetManifest(
            model=RC, grid=GRID, n_initial_states=8, n_traj_per_state=10,
            n_steps=200, dt=0.01, master_seed=54321, system_target=Y_TARGET,
            split_fractions=(0.75, 0.125, 0.125),
        )
        gen_summary = ds.generate_dataset(manifest, rc_data)

        ft = tr.train(
            "transformer", rc_data,
            tr.TrainConfig(n_epochs=3, batch_size=8, seed=7,
                           init_checkpoint=desk_transformer["checkpoint"]),
            DESK_MODEL, workspace / "finetune_transformer", quiet=True,
        )
        gru = tr.train("gru", rc_data, tr.TrainConfig(n_epochs=3, batch_size=8, seed=8),
                       RNN_MODEL, workspace / "train_gru", quiet=True)
        rnn = tr.train("rnn", rc_data, tr.TrainConfig(n_epochs=3, batch_size=8, seed=9),
                       RNN_MODEL, workspace / "train_rnn", quiet=True)

        finals = {}
        for name, ctrl, ck in (
            ("transformer", "transformer", ft["checkpoint"]),
            ("gru", "gru", gru["checkpoint"]),
            ("rnn", "rnn", rnn["checkpoint"]),
        ):
            curve, _ = ev.rollout(_preset(
                f"rc_{name}", ctrl, ck, model=RC,
                n_trajectories=30, n_steps=200, seed=3030,
            ))
            finals[name] = float(curve.mean_F[-1])
        order = sorted(finals, key=finals.get, reverse=True)
        ok = gen_summary["n_rejected"] == 0 and all(np.isfinite(list(finals.values())))
        report(12, ok, (
            f"RC preset (g=0.5, rc_dim=6, 200-step context) end-to-end: "
            f"dataset {gen_summary['n_trajectories']} traj "
            f"(teacher final F {gen_summary['mean_final_fidelity']:.3f}); "
            f"fine-tuned transformer {finals['transformer']:.3f}, "
            f"GRU {finals['gru']:.3f}, RNN {finals['rnn']:.3f} "
            f"(ordering {' > '.join(order)}, report-only)"
        ))


class TestCriterion13Verify:
    def test_verify_subcommand_exits_zero(self, workspace):
        from qfc.cli import main

        config = Path(__file__).resolve().parent.parent / "configs" / "desk_tls.json"
        code = main(["verify", "--config", str(config)])
        report(13, code == 0, f"`qfc verify --config configs/desk_tls.json` exit code {code} (gate 0)")
