"""Recurrent baselines (vanilla tanh RNN and GRU) for the control task.

Same per-step featurization as the transformer decoder -- embedding of the
previous control token plus a linear embedding of the record value -- but
no encoder memory and no positional encodings; state is carried in the
hidden vector. Training runs on truncated windows to sidestep vanishing
gradients; deployment carries the hidden state across the whole rollout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CELL_VANILLA = "vanilla"
CELL_GRU = "gru"


@dataclass(frozen=True)
class RnnConfig:
    cell: str = CELL_GRU
    hidden_dim: int = 64
    embed_dim: int = 64
    truncation_len: int = 60
    vocab: int = 65
    record_mean: float = 0.0
    record_std: float = 1.0

    def __post_init__(self):
        if self.cell not in (CELL_VANILLA, CELL_GRU):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.truncation_len < 1:
            raise ValueError("truncation_len must be >= 1")
        if self.hidden_dim <= 0 or self.embed_dim <= 0:
            raise ValueError("dims must be positive")

    @property
    def bos_token(self) -> int:
        return self.vocab - 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RnnConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown RnnConfig keys: {sorted(unknown)}")
        return cls(**d)


def _init_linear(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-a, a, size=(fan_in, fan_out)))


def init_params(config: RnnConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    e, h = config.embed_dim, config.hidden_dim
    p: dict[str, Tensor] = {
        "tok_embed": ad.parameter(rng.normal(0.0, 0.02, size=(config.vocab, e))),
        "rec_embed": _init_linear(rng, 1, e),
        "rec_embed_b": ad.parameter(np.zeros(e)),
        "head.w": _init_linear(rng, h, config.vocab),
        "head.b": ad.parameter(np.zeros(config.vocab)),
    }
    if config.cell == CELL_VANILLA:
        p["cell.wx"] = _init_linear(rng, e, h)
        p["cell.wh"] = _init_linear(rng, h, h)
        p["cell.b"] = ad.parameter(np.zeros(h))
    else:
        for gate in ("z", "r", "h"):
            p[f"cell.w{gate}"] = _init_linear(rng, e, h)
            p[f"cell.u{gate}"] = _init_linear(rng, h, h)
            p[f"cell.b{gate}"] = ad.parameter(np.zeros(h))
    return p


def rnn_cell(x: Tensor, h: Tensor, params: dict, cell: str) -> Tensor:
    """One recurrence step: (B, E) input and (B, H) hidden -> new hidden."""
    if cell == CELL_VANILLA:
        pre = ad.add(ad.add(ad.matmul(x, params["cell.wx"]),
                            ad.matmul(h, params["cell.wh"])), params["cell.b"])
        return ad.tanh(pre)
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["cell.wz"]),
                                 ad.matmul(h, params["cell.uz"])), params["cell.bz"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["cell.wr"]),
                                 ad.matmul(h, params["cell.ur"])), params["cell.br"]))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, params["cell.wh"]),
                                 ad.matmul(ad.mul(r, h), params["cell.uh"])),
                          params["cell.bh"]))
    # h' = (1 - z) h + z h_cand: a saturated update gate hands over to the candidate
    one_minus_z = ad.add(ad.scale(z, -1.0), Tensor(np.ones(1)))
    return ad.add(ad.mul(one_minus_z, h), ad.mul(z, cand))


def _embed_inputs(params: dict, config: RnnConfig, tokens: np.ndarray,
                  rec: np.ndarray) -> Tensor:
    emb = ad.embedding_lookup(params["tok_embed"], tokens)
    r = (rec - config.record_mean) / max(config.record_std, 1e-12)
    rec_emb = ad.add(ad.matmul(Tensor(r[:, :, None]), params["rec_embed"]),
                     params["rec_embed_b"])
    return ad.add(emb, rec_emb)


def forward(
    params: dict,
    config: RnnConfig,
    tokens: np.ndarray,
    dec_record: np.ndarray,
    h0: Tensor | None = None,
):
    """Teacher-forced logits over a window; returns (logits (B, L, V), h_last)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    dec_record = np.asarray(dec_record, dtype=np.float64)
    if tokens.shape != dec_record.shape or tokens.ndim != 2:
        raise ValueError("tokens and dec_record must both be (B, L)")
    b, l = tokens.shape
    emb = _embed_inputs(params, config, tokens, dec_record)  # (B, L, E)
    h = h0 if h0 is not None else Tensor(np.zeros((b, config.hidden_dim)))
    logit_steps = []
    for k in range(l):
        h = rnn_cell(emb[:, k, :], h, params, config.cell)
        logits_k = ad.add(ad.matmul(h, params["head.w"]), params["head.b"])
        logit_steps.append(ad.reshape(logits_k, (b, 1, config.vocab)))
    return ad.concat(logit_steps, axis=1), h


def predict_next(
    params: dict,
    config: RnnConfig,
    record_so_far: np.ndarray,
    tokens_so_far: np.ndarray,
) -> int:
    """Greedy next token; the hidden state is rebuilt over the full prefix."""
    record_so_far = np.asarray(record_so_far, dtype=np.float64)
    tokens_so_far = np.asarray(tokens_so_far, dtype=np.int64)
    dec_tokens = np.concatenate([[config.bos_token], tokens_so_far])[None, :]
    dec_record = np.concatenate([[0.0], record_so_far])[None, :]
    with ad.no_grad():
        logits, _ = forward(params, config, dec_tokens, dec_record)
    # BOS is an input-only symbol, never a control value
    return int(np.argmax(logits.data[0, -1, : config.bos_token]))


class RnnRolloutState:
    """Incremental deployment: hidden state carried across the whole rollout."""

    def __init__(self, params: dict, config: RnnConfig):
        self.params = params
        self.config = config
        self.h = Tensor(np.zeros((1, config.hidden_dim)))
        self._last_token = config.bos_token
        self._last_record = 0.0

    def step(self, record_value: float | None) -> int:
        """Feed (previous token, newest record value) and emit the next token."""
        rec = 0.0 if record_value is None else float(record_value)
        tokens = np.array([[self._last_token]], dtype=np.int64)
        recs = np.array([[rec]], dtype=np.float64)
        with ad.no_grad():
            logits, self.h = forward(self.params, self.config, tokens, recs, h0=self.h)
        tok = int(np.argmax(logits.data[0, -1, : self.config.bos_token]))
        self._last_token = tok
        self._last_record = rec
        return tok
