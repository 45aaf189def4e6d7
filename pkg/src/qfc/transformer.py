"""Encoder-decoder transformer over measurement records and control tokens.

The encoder ingests a state-prefix token (linear projection of the
flattened initial qubit density matrix) followed by the embedded
measurement record with sinusoidal positional encodings. The decoder is
GPT-style: token embedding of the previous control + linear embedding of
the record value observed just before that control + positional encoding,
masked self-attention, cross-attention into the encoder memory, and a
softmax head over the control-token vocabulary (greedy argmax at
inference).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STATE_FEATURE_DIM = 8  # flattened real+imag entries of a 2x2 qubit state


@dataclass(frozen=True)
class TransformerConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    context_len: int = 256
    vocab: int = 65  # n_bins + 1 (BOS)
    dropout_rate: float = 0.1
    state_dim: int = STATE_FEATURE_DIM
    record_mean: float = 0.0
    record_std: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")

    @property
    def bos_token(self) -> int:
        return self.vocab - 1

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TransformerConfig keys: {sorted(unknown)}")
        return cls(**d)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-a, a, size=(fan_in, fan_out)))


def _init_bias(fan_out: int) -> Tensor:
    return ad.parameter(np.zeros(fan_out))


def _attn_block(rng, d_model: int, prefix: str, params: dict):
    # no key bias: a constant key offset shifts every score in a softmax row
    # equally, so it is exactly inert (and untrainable)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = _init_linear(rng, d_model, d_model)
        if name != "wk":
            params[f"{prefix}.{name}_b"] = _init_bias(d_model)


def _ln_block(d_model: int, prefix: str, params: dict):
    params[f"{prefix}.g"] = ad.parameter(np.ones(d_model))
    params[f"{prefix}.b"] = ad.parameter(np.zeros(d_model))


def _ff_block(rng, d_model: int, d_ff: int, prefix: str, params: dict):
    params[f"{prefix}.w1"] = _init_linear(rng, d_model, d_ff)
    params[f"{prefix}.b1"] = _init_bias(d_ff)
    params[f"{prefix}.w2"] = _init_linear(rng, d_ff, d_model)
    params[f"{prefix}.b2"] = _init_bias(d_model)


def init_params(config: TransformerConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    p["enc.state_proj"] = _init_linear(rng, config.state_dim, config.d_model)
    p["enc.state_proj_b"] = _init_bias(config.d_model)
    p["enc.rec_embed"] = _init_linear(rng, 1, config.d_model)
    p["enc.rec_embed_b"] = _init_bias(config.d_model)
    for i in range(config.n_enc_layers):
        _attn_block(rng, config.d_model, f"enc.{i}.attn", p)
        _ln_block(config.d_model, f"enc.{i}.ln1", p)
        _ff_block(rng, config.d_model, config.d_ff, f"enc.{i}.ff", p)
        _ln_block(config.d_model, f"enc.{i}.ln2", p)
    p["dec.tok_embed"] = ad.parameter(
        rng.normal(0.0, 0.02, size=(config.vocab, config.d_model))
    )
    p["dec.rec_embed"] = _init_linear(rng, 1, config.d_model)
    p["dec.rec_embed_b"] = _init_bias(config.d_model)
    for i in range(config.n_dec_layers):
        _attn_block(rng, config.d_model, f"dec.{i}.self_attn", p)
        _ln_block(config.d_model, f"dec.{i}.ln1", p)
        _attn_block(rng, config.d_model, f"dec.{i}.cross_attn", p)
        _ln_block(config.d_model, f"dec.{i}.ln2", p)
        _ff_block(rng, config.d_model, config.d_ff, f"dec.{i}.ff", p)
        _ln_block(config.d_model, f"dec.{i}.ln3", p)
    p["head.w"] = _init_linear(rng, config.d_model, config.vocab)
    p["head.b"] = _init_bias(config.vocab)
    return p


def positional_encoding(length: int, d_model: int, offset: int = 0) -> np.ndarray:
    """Sinusoidal encodings for positions offset .. offset+length-1."""
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.power(10000.0, i / d_model)
    out = np.zeros((length, d_model))
    out[:, 0::2] = np.sin(pos / div)
    out[:, 1::2] = np.cos(pos / div[: out[:, 1::2].shape[1]])
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with an optional boolean mask (True = attend)."""
    d_k = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask has a fully masked row")
        bias = np.where(mask, 0.0, -np.inf)
        scores = ad.add(scores, Tensor(bias))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    y = ad.matmul(x, params[name])
    bias = params.get(f"{name}_b")
    return ad.add(y, bias) if bias is not None else y


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    mask: np.ndarray | None,
    params: dict,
    prefix: str,
    n_heads: int,
) -> Tensor:
    """All heads evaluated in one batched attention; head h occupies the
    column block [h*d_head, (h+1)*d_head) exactly as in a per-head loop
    followed by concatenation."""
    q = _linear(x_q, params, f"{prefix}.wq")
    k = _linear(x_kv, params, f"{prefix}.wk")
    v = _linear(x_kv, params, f"{prefix}.wv")
    b, lq, d_model = q.shape
    lk = k.shape[-2]
    d_head = d_model // n_heads

    def split(t: Tensor, length: int) -> Tensor:
        return ad.swapaxes(ad.reshape(t, (b, length, n_heads, d_head)), 1, 2)

    out = attention(split(q, lq), split(k, lk), split(v, lk), mask)
    merged = ad.reshape(ad.swapaxes(out, 1, 2), (b, lq, d_model))
    return _linear(merged, params, f"{prefix}.wo")


def _ln(x: Tensor, params: dict, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _ff(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _standardize(record: np.ndarray, config: TransformerConfig) -> np.ndarray:
    return (record - config.record_mean) / max(config.record_std, 1e-12)


def encode_batch(
    params: dict,
    config: TransformerConfig,
    state_feats: np.ndarray,
    record: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, F) state features + (B, Lr) record -> (B, Lr + 1, d_model) memory."""
    state_feats = np.asarray(state_feats, dtype=np.float64)
    record = np.asarray(record, dtype=np.float64)
    if record.ndim != 2:
        raise ValueError("record must be (B, L)")
    b, lr = record.shape
    if lr + 1 > config.context_len:
        raise ValueError(f"record length {lr} exceeds context {config.context_len}")
    prefix = _linear(Tensor(state_feats[:, None, :]), params, "enc.state_proj")
    rec = _standardize(record, config)[:, :, None]
    emb = _linear(Tensor(rec), params, "enc.rec_embed")
    if lr > 0:
        pe = positional_encoding(lr, config.d_model, offset=1)
        emb = ad.add(emb, Tensor(pe[None, :, :]))
        x = ad.concat([prefix, emb], axis=1)
    else:
        x = prefix
    drop = config.dropout_rate
    for i in range(config.n_enc_layers):
        a = multi_head_attention(x, x, None, params, f"enc.{i}.attn", config.n_heads)
        x = _ln(ad.add(x, ad.dropout(a, drop, dropout_rng)), params, f"enc.{i}.ln1")
        f = _ff(x, params, f"enc.{i}.ff")
        x = _ln(ad.add(x, ad.dropout(f, drop, dropout_rng)), params, f"enc.{i}.ln2")
    return x


def decode_batch(
    params: dict,
    config: TransformerConfig,
    memory: Tensor,
    tokens: np.ndarray,
    dec_record: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, L) tokens + (B, L) record values -> (B, L, vocab) logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    dec_record = np.asarray(dec_record, dtype=np.float64)
    if tokens.shape != dec_record.shape or tokens.ndim != 2:
        raise ValueError("tokens and dec_record must both be (B, L)")
    b, l = tokens.shape
    if l > config.context_len:
        raise ValueError(f"decoder length {l} exceeds context {config.context_len}")
    emb = ad.embedding_lookup(params["dec.tok_embed"], tokens)
    rec = _standardize(dec_record, config)[:, :, None]
    emb = ad.add(emb, _linear(Tensor(rec), params, "dec.rec_embed"))
    emb = ad.add(emb, Tensor(positional_encoding(l, config.d_model)[None, :, :]))
    causal = np.tril(np.ones((l, l), dtype=bool))
    drop = config.dropout_rate
    x = emb
    for i in range(config.n_dec_layers):
        a = multi_head_attention(x, x, causal, params, f"dec.{i}.self_attn", config.n_heads)
        x = _ln(ad.add(x, ad.dropout(a, drop, dropout_rng)), params, f"dec.{i}.ln1")
        a = multi_head_attention(x, memory, None, params, f"dec.{i}.cross_attn", config.n_heads)
        x = _ln(ad.add(x, ad.dropout(a, drop, dropout_rng)), params, f"dec.{i}.ln2")
        f = _ff(x, params, f"dec.{i}.ff")
        x = _ln(ad.add(x, ad.dropout(f, drop, dropout_rng)), params, f"dec.{i}.ln3")
    return ad.add(ad.matmul(x, params["head.w"]), params["head.b"])


def encode(params, config, state_feats, record) -> Tensor:
    """Single-sequence wrapper; returns (L + 1, d_model)."""
    mem = encode_batch(params, config, np.asarray(state_feats)[None, :],
                       np.asarray(record, dtype=np.float64)[None, :])
    return ad.reshape(mem, mem.shape[1:])


def decode(params, config, memory: Tensor, tokens, dec_record) -> Tensor:
    """Single-sequence wrapper; returns (L, vocab) logits."""
    mem3 = ad.reshape(memory, (1, *memory.shape))
    logits = decode_batch(params, config, mem3,
                          np.asarray(tokens, dtype=np.int64)[None, :],
                          np.asarray(dec_record, dtype=np.float64)[None, :])
    return ad.reshape(logits, logits.shape[1:])


def state_features(rho0: np.ndarray) -> np.ndarray:
    """Flattened real and imaginary parts of the (reduced) qubit state."""
    rho0 = np.asarray(rho0, dtype=np.complex128)
    if rho0.shape[0] > 2:
        rho0 = reduce_to_qubit(rho0)
    return np.concatenate([rho0.real.reshape(-1), rho0.imag.reshape(-1)])


def reduce_to_qubit(rho: np.ndarray) -> np.ndarray:
    """Partial trace over the reaction-coordinate factor of a 2d x 2d state."""
    d = rho.shape[0] // 2
    r = rho.reshape(2, d, 2, d)
    return np.einsum("iaja->ij", r)


def predict_next(
    params: dict,
    config: TransformerConfig,
    state_feats: np.ndarray,
    record_so_far: np.ndarray,
    tokens_so_far: np.ndarray,
) -> int:
    """Greedy next control token; argmax breaks ties toward the lowest index."""
    record_so_far = np.asarray(record_so_far, dtype=np.float64)
    tokens_so_far = np.asarray(tokens_so_far, dtype=np.int64)
    k = len(tokens_so_far)
    if len(record_so_far) != k:
        raise ValueError("record and token prefixes must have equal length")
    dec_tokens = np.concatenate([[config.bos_token], tokens_so_far])
    dec_record = np.concatenate([[0.0], record_so_far])
    with ad.no_grad():
        mem = encode_batch(params, config, state_feats[None, :], record_so_far[None, :])
        logits = decode_batch(params, config, mem, dec_tokens[None, :], dec_record[None, :])
    # BOS is an input-only symbol, never a control value
    return int(np.argmax(logits.data[0, -1, : config.bos_token]))


# -- checkpoint format: JSON manifest + one float64 blob per parameter --


def save_checkpoint(
    path, config_dict: dict, params: dict[str, Tensor], metadata: dict | None = None
):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "params").mkdir(exist_ok=True)
    manifest = {
        "format": "qfc-checkpoint-v1",
        "config": config_dict,
        "metadata": metadata or {},
        "parameters": {},
    }
    for name in sorted(params):
        t = params[name]
        fname = name.replace("/", "_") + ".bin"
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tmp = path / "params" / (fname + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path / "params" / fname)
        manifest["parameters"][name] = {"shape": list(t.shape), "file": f"params/{fname}"}
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path / "manifest.json")


def load_checkpoint(path):
    """Returns (config_dict, params, metadata)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "qfc-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    params: dict[str, Tensor] = {}
    for name, meta in manifest["parameters"].items():
        raw = np.frombuffer((path / meta["file"]).read_bytes(), dtype="<f8")
        params[name] = ad.parameter(raw.reshape(meta["shape"]))
    return manifest["config"], params, manifest["metadata"]
