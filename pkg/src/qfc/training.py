"""Supervised training: cross-entropy behavior cloning of the control labels.

Teacher forcing, rectified-Adam updates with global-norm gradient
clipping, early stopping on validation loss, and fine-tuning from an
existing checkpoint (architecture must match). Per-epoch metrics go to a
CSV with columns epoch, train_loss, val_loss, val_token_accuracy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import rnn as rnn_mod
from . import transformer as tf_mod
from .autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

MODEL_KINDS = ("transformer", "rnn", "gru")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    n_epochs: int = 100
    batch_size: int = 16
    clip_norm: float = 1.0
    early_stop_patience: int = 10
    seed: int = 0
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def loss_batch(model_kind: str, params: dict, config, batch: dict,
               dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Mean token-level cross-entropy over all (sequence, position) pairs."""
    if model_kind == "transformer":
        memory = tf_mod.encode_batch(
            params, config, batch["state_feats"], batch["enc_record"], dropout_rng
        )
        logits = tf_mod.decode_batch(
            params, config, memory, batch["dec_tokens"], batch["dec_record"], dropout_rng
        )
    else:
        logits, _ = rnn_mod.forward(params, config, batch["dec_tokens"], batch["dec_record"])
    return ad.cross_entropy(logits, batch["targets"])


class RAdam:
    """Rectified Adam (variance-warmup) with the momentum fallback."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step(self):
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        rho_t = self.rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
        bias1 = 1.0 - b1**t
        if rho_t > 4.0:
            r_num = (rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
            r_den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t
            rect = math.sqrt(r_num / r_den)
        else:
            rect = None
        bias2 = 1.0 - b2**t
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bias1
            if rect is None:
                p.data -= self.lr * m_hat
            else:
                v_hat = np.sqrt(v / bias2)
                p.data -= self.lr * rect * m_hat / (v_hat + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params.values():
        if p.grad is not None:
            p.grad *= scale
    return scale


def _eval_split(model_kind, params, config, dataset_path, split, batch_size, context_len):
    """(mean loss, token accuracy) over a split, dropout disabled."""
    losses, correct, count = [], 0, 0
    with ad.no_grad():
        for batch in ds.load_batches(dataset_path, split, batch_size, context_len):
            if model_kind == "transformer":
                memory = tf_mod.encode_batch(params, config, batch["state_feats"], batch["enc_record"])
                logits = tf_mod.decode_batch(params, config, memory, batch["dec_tokens"], batch["dec_record"])
            else:
                logits, _ = rnn_mod.forward(params, config, batch["dec_tokens"], batch["dec_record"])
            losses.append(ad.cross_entropy(logits, batch["targets"]).item() * batch["targets"].size)
            pred = np.argmax(logits.data, axis=-1)
            correct += int((pred == batch["targets"]).sum())
            count += batch["targets"].size
    if count == 0:
        return float("nan"), float("nan")
    return sum(losses) / count, correct / count


def _window_batches(batch: dict, truncation_len: int, rng: np.random.Generator):
    """Clip RNN training batches to a random window of truncation_len steps."""
    l = batch["targets"].shape[1]
    if l <= truncation_len:
        return batch
    start = int(rng.integers(0, l - truncation_len + 1))
    sl = slice(start, start + truncation_len)
    return {
        "state_feats": batch["state_feats"],
        "enc_record": batch["enc_record"],
        "dec_tokens": batch["dec_tokens"][:, sl],
        "dec_record": batch["dec_record"][:, sl],
        "targets": batch["targets"][:, sl],
    }


def make_model(model_kind: str, model_config_dict: dict, seed: int):
    """(config, params) for a model kind; 'gru'/'rnn' select the cell."""
    if model_kind == "transformer":
        config = tf_mod.TransformerConfig.from_dict(model_config_dict)
        return config, tf_mod.init_params(config, seed)
    cell = rnn_mod.CELL_GRU if model_kind == "gru" else rnn_mod.CELL_VANILLA
    d = dict(model_config_dict)
    d["cell"] = cell
    config = rnn_mod.RnnConfig.from_dict(d)
    return config, rnn_mod.init_params(config, seed)


def train(
    model_kind: str,
    dataset_path,
    train_config: TrainConfig,
    model_config_dict: dict,
    out_dir,
    quiet: bool = False,
) -> dict[str, Any]:
    """Train (or fine-tune) a controller; returns summary with paths.

    The best-validation checkpoint is kept; training stops early after
    early_stop_patience epochs without validation improvement. NaN loss
    aborts with diagnostics.
    """
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ds.load_manifest(dataset_path)

    # dataset-derived fields: vocabulary and record standardization
    model_config_dict = dict(model_config_dict)
    model_config_dict.setdefault("vocab", manifest.grid.n_bins + 1)
    model_config_dict["record_mean"] = manifest.record_mean
    model_config_dict["record_std"] = manifest.record_std

    if train_config.init_checkpoint:
        ck_config, params, _meta = tf_mod.load_checkpoint(train_config.init_checkpoint)
        if ck_config["model_kind"] != model_kind:
            raise ValueError(
                f"checkpoint is a {ck_config['model_kind']}, requested {model_kind}"
            )
        config, _ = make_model(model_kind, model_config_dict, train_config.seed)
        arch = dict(ck_config["model_config"])
        req = config.to_dict()
        for volatile in ("record_mean", "record_std"):
            arch.pop(volatile, None), req.pop(volatile, None)
        if arch != req:
            raise ValueError(
                f"fine-tuning architecture mismatch: checkpoint {arch} vs requested {req}"
            )
    else:
        config, params = make_model(model_kind, model_config_dict, train_config.seed)

    context_len = getattr(config, "context_len", None) or 10**9
    opt = RAdam(params, train_config.learning_rate)
    trunc_len = getattr(config, "truncation_len", None)

    metrics_rows = []
    best_val = float("inf")
    best_epoch = -1
    epochs_since_best = 0
    ckpt_dir = out_dir / "checkpoint"
    for epoch in range(train_config.n_epochs):
        batch_rng = np.random.default_rng((train_config.seed, epoch, 0xB0))
        window_rng = np.random.default_rng((train_config.seed, epoch, 0xD1))
        train_losses, n_tok = [], 0
        for b_idx, batch in enumerate(
            ds.load_batches(dataset_path, "train", train_config.batch_size, context_len, batch_rng)
        ):
            if trunc_len is not None:
                batch = _window_batches(batch, trunc_len, window_rng)
            dropout_rng = np.random.default_rng((train_config.seed, epoch, b_idx))
            opt.zero_grad()
            loss = loss_batch(model_kind, params, config, batch, dropout_rng)
            val = loss.item()
            if not np.isfinite(val):
                raise RuntimeError(
                    f"non-finite training loss {val} at epoch {epoch}, batch {b_idx}"
                )
            loss.backward()
            clip_global_norm(params, train_config.clip_norm)
            opt.step()
            train_losses.append(val * batch["targets"].size)
            n_tok += batch["targets"].size
        train_loss = sum(train_losses) / max(n_tok, 1)
        val_loss, val_acc = _eval_split(
            model_kind, params, config, dataset_path, "val",
            train_config.batch_size, context_len,
        )
        if math.isnan(val_loss):  # empty validation split: select on train loss
            val_loss = train_loss
        metrics_rows.append((epoch, train_loss, val_loss, val_acc))
        if not quiet:
            print(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f} acc {val_acc:.3f}")
        if val_loss < best_val:
            best_val, best_epoch, epochs_since_best = val_loss, epoch, 0
            tf_mod.save_checkpoint(
                ckpt_dir,
                {"model_kind": model_kind, "model_config": config.to_dict()},
                params,
                metadata={"epoch": epoch, "best_val_loss": best_val,
                          "val_token_accuracy": val_acc,
                          "dataset": str(dataset_path), "seed": train_config.seed},
            )
        else:
            epochs_since_best += 1
            if epochs_since_best > train_config.early_stop_patience:
                break

    if not metrics_rows:
        # zero-epoch run (e.g. re-evaluating a fine-tuning checkpoint)
        val_loss, val_acc = _eval_split(
            model_kind, params, config, dataset_path, "val",
            train_config.batch_size, context_len,
        )
        best_val, best_epoch = val_loss, -1
        tf_mod.save_checkpoint(
            ckpt_dir,
            {"model_kind": model_kind, "model_config": config.to_dict()},
            params,
            metadata={"epoch": -1, "best_val_loss": best_val,
                      "val_token_accuracy": val_acc,
                      "dataset": str(dataset_path), "seed": train_config.seed},
        )

    csv_path = out_dir / "metrics.csv"
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["epoch", "train_loss", "val_loss", "val_token_accuracy"])
    for row in metrics_rows:
        w.writerow(row)
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(csv_path)

    best_acc = metrics_rows[best_epoch][3] if metrics_rows else val_acc
    return {
        "checkpoint": str(ckpt_dir),
        "metrics_csv": str(csv_path),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "best_val_token_accuracy": best_acc,
        "n_epochs_run": len(metrics_rows),
    }
