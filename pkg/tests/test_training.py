import csv
import math
from pathlib import Path

import numpy as np
import pytest

from qfc import autodiff as ad
from qfc import dataset as ds
from qfc import training as tr
from qfc import transformer as tf_mod
from qfc.models import ControlGrid, SystemModel

Y_TARGET = np.array([1.0, 1.0j]) / np.sqrt(2)

TINY_MODEL = {
    "n_enc_layers": 1, "n_dec_layers": 1, "d_model": 16, "n_heads": 2,
    "d_ff": 32, "context_len": 64, "dropout_rate": 0.1,
}


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("train") / "ds"
    manifest = ds.DatasetManifest(
        model=SystemModel(mode="TLS"),
        grid=ControlGrid(-20.0, 20.0, 64),
        n_initial_states=6,
        n_traj_per_state=5,
        n_steps=20,
        dt=0.01,
        master_seed=11,
        system_target=Y_TARGET,
    )
    ds.generate_dataset(manifest, path)
    return path


class TestLossBatch:
    def test_uniform_logits_log_vocab(self):
        # a zeroed model head produces uniform logits: loss = ln(vocab)
        config = tf_mod.TransformerConfig(**TINY_MODEL, vocab=65)
        params = tf_mod.init_params(config, 0)
        params["head.w"] = ad.parameter(np.zeros_like(params["head.w"].data))
        params["head.b"] = ad.parameter(np.zeros(65))
        batch = {
            "state_feats": np.zeros((2, 8)),
            "enc_record": np.zeros((2, 4)),
            "dec_tokens": np.zeros((2, 4), dtype=int),
            "dec_record": np.zeros((2, 4)),
            "targets": np.ones((2, 4), dtype=int),
        }
        loss = tr.loss_batch("transformer", params, config, batch)
        assert loss.item() == pytest.approx(math.log(65.0), abs=1e-12)

    def test_hand_built_two_position_batch(self):
        # direct scalar check of the mean cross-entropy
        config = tf_mod.TransformerConfig(**TINY_MODEL, vocab=65)
        logits = np.zeros((1, 2, 65))
        logits[0, 0, 3] = 2.0
        logits[0, 1, 5] = -1.0
        t = ad.Tensor(logits)
        targets = np.array([[3, 7]])
        expected = -(
            (2.0 - np.log(np.exp(2.0) + 64))
            + (0.0 - np.log(np.exp(-1.0) + 64))
        ) / 2.0
        got = ad.cross_entropy(t, targets).item()
        assert got == pytest.approx(expected, abs=1e-12)


class TestRAdam:
    def test_first_step_momentum_branch(self):
        # t = 1, beta2 = 0.999: rho_1 <= 4, so the un-adapted branch runs:
        # x <- x - lr * m_hat, with m_hat = g
        p = {"x": ad.parameter(np.array([2.0]))}
        p["x"].grad = np.array([0.5])
        opt = tr.RAdam(p, lr=0.1)
        opt.step()
        assert p["x"].data[0] == pytest.approx(2.0 - 0.1 * 0.5, abs=1e-15)

    def test_rectification_kicks_in(self):
        # by t = 5 (beta2 = 0.999), rho_t > 4 and the variance branch runs
        rho_inf = 2.0 / (1.0 - 0.999) - 1.0
        t = 5
        rho_t = rho_inf - 2 * t * 0.999**t / (1 - 0.999**t)
        assert rho_t > 4.0
        p = {"x": ad.parameter(np.array([1.0]))}
        opt = tr.RAdam(p, lr=0.01)
        for _ in range(5):
            p["x"].grad = np.array([1.0])
            opt.step()
        # hand-trace the fifth update
        m = v = 0.0
        x = 1.0
        for step in range(1, 6):
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            m_hat = m / (1 - 0.9**step)
            rho_s = rho_inf - 2 * step * 0.999**step / (1 - 0.999**step)
            if rho_s > 4:
                rect = math.sqrt(
                    ((rho_s - 4) * (rho_s - 2) * rho_inf)
                    / ((rho_inf - 4) * (rho_inf - 2) * rho_s)
                )
                x -= 0.01 * rect * m_hat / (math.sqrt(v / (1 - 0.999**step)) + 1e-8)
            else:
                x -= 0.01 * m_hat
        assert p["x"].data[0] == pytest.approx(x, abs=1e-12)

    def test_zero_gradient_no_move(self):
        p = {"x": ad.parameter(np.array([3.0]))}
        opt = tr.RAdam(p, lr=0.1)
        p["x"].grad = np.array([0.0])
        for _ in range(10):
            opt.step()
        assert p["x"].data[0] == 3.0

    def test_quadratic_bowl_converges(self):
        p = {"x": ad.parameter(np.array([1.0]))}
        opt = tr.RAdam(p, lr=0.01)
        for _ in range(2000):
            p["x"].grad = 2.0 * p["x"].data
            opt.step()
        assert abs(p["x"].data[0]) < 1e-3


class TestClip:
    def test_below_threshold_untouched(self):
        p = {"x": ad.parameter(np.zeros(2))}
        p["x"].grad = np.array([0.3, 0.4])
        assert tr.clip_global_norm(p, 1.0) == 1.0
        assert np.array_equal(p["x"].grad, [0.3, 0.4])

    def test_scaling(self):
        p = {"x": ad.parameter(np.zeros(2))}
        p["x"].grad = np.array([3.0, 4.0])
        scale = tr.clip_global_norm(p, 1.0)
        assert scale == pytest.approx(0.2)
        assert np.allclose(p["x"].grad, [0.6, 0.8], atol=1e-15)
        assert np.linalg.norm(p["x"].grad) == pytest.approx(1.0, abs=1e-12)

    def test_multi_param_joint_norm(self):
        p = {"a": ad.parameter(np.zeros(1)), "b": ad.parameter(np.zeros(1))}
        p["a"].grad = np.array([2.0])
        p["b"].grad = np.array([0.0])
        tr.clip_global_norm(p, 1.0)
        assert np.linalg.norm(np.concatenate([p["a"].grad, p["b"].grad])) <= 1.0 + 1e-12


@pytest.mark.slow
class TestTrainLoop:
    def test_transformer_end_to_end(self, tiny_dataset, tmp_path):
        tc = tr.TrainConfig(learning_rate=1e-3, n_epochs=3, batch_size=8, seed=3)
        out = tr.train("transformer", tiny_dataset, tc, TINY_MODEL, tmp_path / "run")
        assert Path(out["checkpoint"]).exists()
        rows = list(csv.DictReader(open(out["metrics_csv"])))
        assert [r["epoch"] for r in rows] == ["0", "1", "2"]
        # training loss decreases from the first epoch
        assert float(rows[-1]["train_loss"]) < float(rows[0]["train_loss"])
        # saved checkpoint has the minimum validation loss
        vals = [float(r["val_loss"]) for r in rows]
        assert out["best_val_loss"] == pytest.approx(min(vals))

    def test_seed_reproducible(self, tiny_dataset, tmp_path):
        tc = tr.TrainConfig(n_epochs=2, batch_size=8, seed=9)
        tr.train("transformer", tiny_dataset, tc, TINY_MODEL, tmp_path / "a", quiet=True)
        tr.train("transformer", tiny_dataset, tc, TINY_MODEL, tmp_path / "b", quiet=True)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
            (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_gru_trains(self, tiny_dataset, tmp_path):
        tc = tr.TrainConfig(n_epochs=2, batch_size=8, seed=1)
        out = tr.train(
            "gru", tiny_dataset, tc,
            {"hidden_dim": 16, "embed_dim": 16, "truncation_len": 10},
            tmp_path / "gru", quiet=True,
        )
        rows = list(csv.DictReader(open(out["metrics_csv"])))
        assert float(rows[-1]["train_loss"]) < float(rows[0]["train_loss"])

    def test_finetune_zero_epochs_reproduces_val(self, tiny_dataset, tmp_path):
        tc = tr.TrainConfig(n_epochs=2, batch_size=8, seed=4)
        first = tr.train("transformer", tiny_dataset, tc, TINY_MODEL,
                         tmp_path / "base", quiet=True)
        tc2 = tr.TrainConfig(n_epochs=0, batch_size=8, seed=5,
                             init_checkpoint=first["checkpoint"])
        second = tr.train("transformer", tiny_dataset, tc2, TINY_MODEL,
                          tmp_path / "ft", quiet=True)
        assert second["best_val_loss"] == pytest.approx(first["best_val_loss"], abs=1e-12)

    def test_finetune_architecture_mismatch(self, tiny_dataset, tmp_path):
        tc = tr.TrainConfig(n_epochs=1, batch_size=8, seed=4)
        first = tr.train("transformer", tiny_dataset, tc, TINY_MODEL,
                         tmp_path / "base2", quiet=True)
        bad = dict(TINY_MODEL, d_model=32)
        tc2 = tr.TrainConfig(n_epochs=1, init_checkpoint=first["checkpoint"])
        with pytest.raises(ValueError, match="architecture mismatch"):
            tr.train("transformer", tiny_dataset, tc2, bad, tmp_path / "ft2", quiet=True)

    def test_patience_zero_stops_after_one_bad_epoch(self, tiny_dataset, tmp_path):
        # learning rate 0 keeps the validation loss exactly constant, so the
        # second epoch is already "no improvement" and the loop stops
        tc = tr.TrainConfig(learning_rate=1e-30, n_epochs=50, batch_size=8,
                            early_stop_patience=0, seed=6)
        out = tr.train("transformer", tiny_dataset, tc, TINY_MODEL,
                       tmp_path / "pat", quiet=True)
        assert out["n_epochs_run"] == 2  # best epoch + exactly one beyond


class TestValidation:
    def test_config_rejects_bad_lr(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(learning_rate=0.0)

    def test_config_rejects_unknown(self):
        with pytest.raises(ValueError):
            tr.TrainConfig.from_dict({"lr": 1.0})

    def test_unknown_model_kind(self, tiny_dataset, tmp_path):
        with pytest.raises(ValueError):
            tr.train("cnn", tiny_dataset, tr.TrainConfig(), {}, tmp_path)
