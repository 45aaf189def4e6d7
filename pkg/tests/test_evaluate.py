import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from qfc import evaluate as ev
from qfc import dataset as ds
from qfc import training as tr
from qfc.linalg import pure_state_density
from qfc.models import ControlGrid, SystemModel

Y_TARGET = np.array([1.0, 1.0j]) / np.sqrt(2)
GRID = ControlGrid(-20.0, 20.0, 64)
TLS = SystemModel(mode="TLS", epsilon=0.0, kappa=1.0, eta=1.0)


def preset(**overrides):
    base = dict(
        name="t", controller="zero", model=TLS, grid=GRID,
        system_target=Y_TARGET, n_trajectories=5, n_steps=20, dt=0.01, seed=3,
    )
    base.update(overrides)
    return ev.ExperimentPreset(**base)


class TestFidelity:
    def test_projector(self):
        assert ev.fidelity(pure_state_density(Y_TARGET), Y_TARGET) == pytest.approx(1.0)

    def test_orthogonal(self):
        anti = np.array([1.0, -1.0j]) / np.sqrt(2)
        assert ev.fidelity(pure_state_density(anti), Y_TARGET) == pytest.approx(0.0, abs=1e-15)

    def test_maximally_mixed(self):
        assert ev.fidelity(np.eye(2, dtype=complex) / 2, Y_TARGET) == pytest.approx(0.5)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            ev.fidelity(np.eye(4, dtype=complex) / 4, Y_TARGET)


class TestRollout:
    def test_zero_controller_fixed_point(self):
        # dark state |0><0| with target |0>: fidelity pinned at one
        p = preset(
            controller="zero",
            system_target=np.array([1.0, 0.0], dtype=complex),
            initial_state={"kind": "fixed_pure", "amplitudes": [[1.0, 0.0], [0.0, 0.0]]},
            n_trajectories=4,
        )
        curve, recs = ev.rollout(p)
        assert np.abs(curve.mean_F - 1.0).max() <= 1e-9
        assert len(recs) == 4

    def test_random_controller_reproducible(self):
        p = preset(controller="random", n_trajectories=3)
        c1, r1 = ev.rollout(p)
        c2, r2 = ev.rollout(p)
        assert np.array_equal(c1.mean_F, c2.mean_F)
        for a, b in zip(r1, r2):
            assert np.array_equal(a["lam"], b["lam"])

    def test_random_lambdas_are_bin_centers(self):
        p = preset(controller="random", n_trajectories=2)
        _, recs = ev.rollout(p)
        centers = set(np.round(GRID.centers(), 12))
        for r in recs:
            assert set(np.round(r["lam"], 12)) <= centers

    def test_random_varies_across_trajectories(self):
        p = preset(controller="random", n_trajectories=2)
        _, recs = ev.rollout(p)
        assert not np.array_equal(recs[0]["lam"], recs[1]["lam"])

    def test_paqs_controller_runs(self):
        p = preset(controller="paqs", n_trajectories=3, n_steps=50)
        curve, _ = ev.rollout(p)
        assert curve.mean_F[-1] > curve.mean_F[0]

    def test_haar_initial_states_differ_by_trajectory(self):
        p = preset(n_trajectories=3)
        s0 = ev._initial_qubit_state(p, 0)
        s1 = ev._initial_qubit_state(p, 1)
        assert not np.allclose(s0, s1)

    def test_fixed_mixed_initial_state(self):
        p = preset(initial_state={
            "kind": "fixed_mixed",
            "matrix_re": [[0.7, 0.0], [0.0, 0.3]],
            "matrix_im": [[0.0, 0.0], [0.0, 0.0]],
        })
        rho = ev._initial_qubit_state(p, 0)
        assert np.allclose(rho, np.diag([0.7, 0.3]))

    def test_unknown_controller_rejected(self):
        with pytest.raises(ValueError):
            preset(controller="magic")

    def test_missing_checkpoint_rejected(self):
        p = preset(controller="transformer", checkpoint=None)
        with pytest.raises(FileNotFoundError):
            ev.make_controller(p, pure_state_density(Y_TARGET), Y_TARGET)


class TestCurveExport:
    def test_csv_roundtrip_12_digits(self, tmp_path):
        curve = ev.FidelityCurve(
            t=np.linspace(0, 1, 11),
            mean_F=np.linspace(0.5, 0.9, 11),
            stderr_F=np.full(11, 0.01),
            n_traj=10,
        )
        path = tmp_path / "c.csv"
        ev.export_curve(curve, path)
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == 11
        for i, row in enumerate(rows):
            assert float(row["t"]) == pytest.approx(curve.t[i], abs=1e-12)
            assert float(row["mean_F"]) == curve.mean_F[i]  # repr round-trips

    def test_empty_curve_header_only(self, tmp_path):
        curve = ev.FidelityCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0)
        ev.export_curve(curve, tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text() == "t,mean_F,stderr_F\n"

    def test_svg_well_formed(self, tmp_path):
        curve = ev.FidelityCurve(
            t=np.linspace(0, 1, 5),
            mean_F=np.array([0.5, 0.6, 0.7, 0.8, 0.85]),
            stderr_F=np.zeros(5),
            n_traj=3,
        )
        ev.export_curve(curve, tmp_path / "c.csv", tmp_path / "c.svg")
        root = ET.parse(tmp_path / "c.svg").getroot()
        assert root.tag.endswith("svg")

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            ev.FidelityCurve(np.zeros(2), np.array([0.5, 1.5]), np.zeros(2), 1)


@pytest.mark.slow
class TestLearnedControllerHarness:
    @pytest.fixture(scope="class")
    def checkpoint(self, tmp_path_factory):
        path = tmp_path_factory.mktemp("ck") / "ds"
        manifest = ds.DatasetManifest(
            model=TLS, grid=GRID, n_initial_states=6, n_traj_per_state=3,
            n_steps=15, dt=0.01, master_seed=5, system_target=Y_TARGET,
        )
        ds.generate_dataset(manifest, path)
        out = tr.train(
            "transformer", path,
            tr.TrainConfig(n_epochs=1, batch_size=4, seed=0),
            {"n_enc_layers": 1, "n_dec_layers": 1, "d_model": 16, "n_heads": 2,
             "d_ff": 32, "context_len": 64, "dropout_rate": 0.0},
            tmp_path_factory.mktemp("ck") / "run", quiet=True,
        )
        return out["checkpoint"]

    def test_transformer_rollout_deterministic(self, checkpoint):
        p = preset(controller="transformer", checkpoint=checkpoint,
                   n_trajectories=2, n_steps=15)
        c1, r1 = ev.rollout(p)
        c2, r2 = ev.rollout(p)
        assert np.array_equal(c1.mean_F, c2.mean_F)
        assert np.array_equal(r1[0]["lam"], r2[0]["lam"])

    def test_lambdas_live_on_grid(self, checkpoint):
        p = preset(controller="transformer", checkpoint=checkpoint,
                   n_trajectories=1, n_steps=10)
        _, recs = ev.rollout(p)
        centers = set(np.round(GRID.centers(), 12))
        assert set(np.round(recs[0]["lam"], 12)) <= centers

    def test_wrong_kind_checkpoint_rejected(self, checkpoint):
        p = preset(controller="gru", checkpoint=checkpoint, n_trajectories=1)
        with pytest.raises(ValueError, match="checkpoint is"):
            ev.make_controller(p, pure_state_density(Y_TARGET), Y_TARGET)

    def test_bench_inference_report(self, checkpoint):
        tp = preset(name="tf", controller="transformer", checkpoint=checkpoint,
                    n_steps=15)
        pp = preset(name="pq", controller="paqs", n_steps=15)
        report = ev.bench_inference(tp, pp, n_reps=3)
        assert report["transformer_seconds_per_traj"] > 0
        assert report["paqs_seconds_per_traj"] > 0
        assert report["ratio_paqs_over_transformer"] == pytest.approx(
            report["paqs_seconds_per_traj"] / report["transformer_seconds_per_traj"]
        )
        assert "python_seconds_per_traj" in report["backend_comparison"]

    def test_bench_medians_stable(self, checkpoint):
        # measurement stability: medians of repeated runs agree within 50%
        pp = preset(name="pq", controller="paqs", n_steps=20)
        tp = preset(name="tf", controller="transformer", checkpoint=checkpoint,
                    n_steps=20)
        r1 = ev.bench_inference(tp, pp, n_reps=8)
        r2 = ev.bench_inference(tp, pp, n_reps=8)
        for key in ("transformer_seconds_per_traj", "paqs_seconds_per_traj"):
            hi, lo = max(r1[key], r2[key]), min(r1[key], r2[key])
            assert hi / lo < 1.5
