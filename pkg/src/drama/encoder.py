"""Small transformer text encoder with bi-encoder and cross-encoder modes.

The backbone can be frozen after base training; adapters (residual
bottleneck or low-rank) attach at fixed injection points. Exactly zero or
one adapter is active per forward pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .adapters import Adapter, HoulsbyAdapter, LoraAdapter, lora_effective_weight
from .autodiff import Tensor
from .corpus import PAD_ID, SEP_ID
from .errors import ConfigurationError, FormatError, InputError, ShapeError

MASK_NEG = -1e30


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 128
    mode: str = "bi"

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be >= 2")
        if self.mode not in ("bi", "cross"):
            raise ConfigurationError(f"unknown encoder mode {self.mode!r}")


@dataclass
class Embedding:
    """Pooled representation of one token sequence."""

    vector: np.ndarray
    truncated: bool = False


class EncoderModel:
    """Backbone weights plus adapter injection points."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.frozen = False
        self.tensors: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config

        def mat(name: str, rows: int, cols: int) -> None:
            self.tensors[name] = ad.init_uniform(rng, (rows, cols), rows, cols, name=name)

        # Lookup rows act as 1 -> hidden maps, so fan_in is 1, not vocab_size.
        # The positional table starts at zero: token content dominates early
        # training and order information is learned only where it pays off.
        self.tensors["tok_emb"] = ad.init_uniform(
            rng, (c.vocab_size, c.hidden_dim), 1, c.hidden_dim, name="tok_emb")
        self.tensors["pos_emb"] = ad.zeros((c.max_seq_len, c.hidden_dim), name="pos_emb")
        for i in range(c.num_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                mat(f"layer{i}.attn.{proj}", c.hidden_dim, c.hidden_dim)
                self.tensors[f"layer{i}.attn.{proj}_bias"] = ad.zeros(
                    (c.hidden_dim,), name=f"layer{i}.attn.{proj}_bias")
            self.tensors[f"layer{i}.ln1.gain"] = ad.ones((c.hidden_dim,), name=f"layer{i}.ln1.gain")
            self.tensors[f"layer{i}.ln1.bias"] = ad.zeros((c.hidden_dim,), name=f"layer{i}.ln1.bias")
            mat(f"layer{i}.ffn.w1", c.hidden_dim, c.ffn_dim)
            self.tensors[f"layer{i}.ffn.b1"] = ad.zeros((c.ffn_dim,), name=f"layer{i}.ffn.b1")
            mat(f"layer{i}.ffn.w2", c.ffn_dim, c.hidden_dim)
            self.tensors[f"layer{i}.ffn.b2"] = ad.zeros((c.hidden_dim,), name=f"layer{i}.ffn.b2")
            self.tensors[f"layer{i}.ln2.gain"] = ad.ones((c.hidden_dim,), name=f"layer{i}.ln2.gain")
            self.tensors[f"layer{i}.ln2.bias"] = ad.zeros((c.hidden_dim,), name=f"layer{i}.ln2.bias")
        if c.mode == "cross":
            mat("score.w", c.hidden_dim, 1)
            self.tensors["score.b"] = ad.zeros((1,), name="score.b")

    # -- weight management --------------------------------------------------

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def checksum(self) -> str:
        """Order-sensitive digest of every backbone tensor, bit-exact."""
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    # -- forward passes ------------------------------------------------------

    def _lora_weights(self, layer: int, adapter: LoraAdapter) -> tuple[Tensor, Tensor]:
        """Attention q/v projections with the low-rank delta folded in.

        Internally weights are stored [in, out]; the adapter's delta B @ A is
        [out, in], so it enters transposed. The base tensor is never mutated.
        """
        wq = self.tensors[f"layer{layer}.attn.wq"]
        wv = self.tensors[f"layer{layer}.attn.wv"]
        dq = ad.transpose(adapter.delta(layer, "attn_q"), (1, 0))
        dv = ad.transpose(adapter.delta(layer, "attn_v"), (1, 0))
        return ad.add(wq, dq), ad.add(wv, dv)

    def forward(self, ids: np.ndarray, adapter: Adapter | None = None) -> Tensor:
        """Mean-pooled final-layer states for a batch of padded id rows."""
        c = self.config
        if ids.ndim != 2:
            raise ShapeError(f"expected [batch, seq] ids, got shape {ids.shape}")
        B, L = ids.shape
        if L > c.max_seq_len:
            raise ShapeError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        if adapter is not None and adapter.hidden_dim != c.hidden_dim:
            raise ShapeError(f"adapter width {adapter.hidden_dim} does not match encoder "
                             f"width {c.hidden_dim}")
        mask = (ids != PAD_ID).astype(np.float64)
        attn_bias = (1.0 - mask)[:, None, None, :] * MASK_NEG

        x = ad.embedding(self.tensors["tok_emb"], ids)
        x = ad.add_broadcast(x, _rows(self.tensors["pos_emb"], L))

        H = c.num_heads
        dh = c.hidden_dim // H
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        for i in range(c.num_layers):
            if isinstance(adapter, LoraAdapter):
                wq, wv = self._lora_weights(i, adapter)
            else:
                wq = self.tensors[f"layer{i}.attn.wq"]
                wv = self.tensors[f"layer{i}.attn.wv"]
            q = ad.affine(x, wq, self.tensors[f"layer{i}.attn.wq_bias"])
            k = ad.affine(x, self.tensors[f"layer{i}.attn.wk"], self.tensors[f"layer{i}.attn.wk_bias"])
            v = ad.affine(x, wv, self.tensors[f"layer{i}.attn.wv_bias"])

            def heads(t: Tensor) -> Tensor:
                return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

            scores = ad.scale(ad.bmm(heads(q), ad.transpose(heads(k), (0, 1, 3, 2))), inv_sqrt_dh)
            weights = ad.softmax(scores, mask_add=attn_bias)
            ctx = ad.reshape(ad.transpose(ad.bmm(weights, heads(v)), (0, 2, 1, 3)), (B, L, c.hidden_dim))
            attn_out = ad.affine(ctx, self.tensors[f"layer{i}.attn.wo"],
                                 self.tensors[f"layer{i}.attn.wo_bias"])
            if isinstance(adapter, HoulsbyAdapter):
                attn_out = adapter.apply(i, 0, attn_out)
            x = ad.layer_norm(ad.add(x, attn_out),
                              self.tensors[f"layer{i}.ln1.gain"], self.tensors[f"layer{i}.ln1.bias"])

            h = ad.gelu(ad.affine(x, self.tensors[f"layer{i}.ffn.w1"], self.tensors[f"layer{i}.ffn.b1"]))
            ffn_out = ad.affine(h, self.tensors[f"layer{i}.ffn.w2"], self.tensors[f"layer{i}.ffn.b2"])
            if isinstance(adapter, HoulsbyAdapter):
                ffn_out = adapter.apply(i, 1, ffn_out)
            x = ad.layer_norm(ad.add(x, ffn_out),
                              self.tensors[f"layer{i}.ln2.gain"], self.tensors[f"layer{i}.ln2.bias"])

        return ad.masked_mean(x, mask)

    def forward_scores(self, ids: np.ndarray, adapter: Adapter | None = None) -> Tensor:
        """Cross-mode relevance scores for a batch of concatenated pairs."""
        if self.config.mode != "cross":
            raise ConfigurationError("forward_scores requires a cross-mode encoder")
        pooled = self.forward(ids, adapter)
        s = ad.affine(pooled, self.tensors["score.w"], self.tensors["score.b"])
        return ad.reshape(s, (ids.shape[0],))


def _rows(t: Tensor, n: int) -> Tensor:
    """First n rows of a matrix tensor (positional table slice)."""
    out = Tensor(t.data[:n])

    def fn(g: np.ndarray) -> None:
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad[:n] += g

    return ad._record(out, (t,), fn)


# ---------------------------------------------------------------------------
# public operations


def pad_batch(sequences: list[list[int]]) -> np.ndarray:
    """Right-pad id sequences to a common length with the pad id."""
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out


def encode(model: EncoderModel, tokens: list[int], adapter: Adapter | None = None) -> Embedding:
    """Embed one token sequence (bi mode), truncating over-length input."""
    if model.config.mode != "bi":
        raise ConfigurationError("encode requires a bi-mode encoder")
    if len(tokens) == 0:
        raise InputError("cannot encode an empty token sequence")
    truncated = len(tokens) > model.config.max_seq_len
    if truncated:
        tokens = tokens[: model.config.max_seq_len]
    pooled = model.forward(np.asarray([tokens], dtype=np.int64), adapter)
    return Embedding(vector=pooled.data[0].copy(), truncated=truncated)


def encode_batch(model: EncoderModel, sequences: list[list[int]],
                 adapter: Adapter | None = None, chunk: int = 256) -> np.ndarray:
    """Embed many sequences in fixed-size chunks; rows align with input order."""
    out = np.empty((len(sequences), model.config.hidden_dim))
    limit = model.config.max_seq_len
    clipped = [s[:limit] if len(s) > limit else s for s in sequences]
    for start in range(0, len(clipped), chunk):
        part = clipped[start: start + chunk]
        out[start: start + len(part)] = model.forward(pad_batch(part), adapter).data
    return out


def score_bi(q_emb: Embedding | np.ndarray, d_emb: Embedding | np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs score 0."""
    qv = q_emb.vector if isinstance(q_emb, Embedding) else np.asarray(q_emb, dtype=np.float64)
    dv = d_emb.vector if isinstance(d_emb, Embedding) else np.asarray(d_emb, dtype=np.float64)
    if qv.shape != dv.shape:
        raise ShapeError(f"embedding widths differ: {qv.shape} vs {dv.shape}")
    nq = float(np.linalg.norm(qv))
    nd = float(np.linalg.norm(dv))
    if nq == 0.0 or nd == 0.0:
        return 0.0
    return float(qv @ dv / (nq * nd))


def cosine_matrix(q_vec: np.ndarray, doc_mat: np.ndarray) -> np.ndarray:
    """Cosine of one query vector against rows of a document matrix."""
    nq = np.linalg.norm(q_vec)
    nd = np.linalg.norm(doc_mat, axis=1)
    denom = nq * nd
    safe = np.where(denom == 0.0, 1.0, denom)
    scores = (doc_mat @ q_vec) / safe
    return np.where(denom == 0.0, 0.0, scores)


def build_cross_input(q_tokens: list[int], d_tokens: list[int], max_seq_len: int) -> list[int]:
    """Concatenate [query, SEP, document], truncating the document side first."""
    if len(q_tokens) == 0:
        raise InputError("cross scoring requires a non-empty query")
    budget = max_seq_len - 1 - len(q_tokens)
    if budget < 0:
        q_tokens = q_tokens[: max_seq_len - 1]
        budget = 0
    return list(q_tokens) + [SEP_ID] + list(d_tokens[:budget])


def score_cross(model: EncoderModel, q_tokens: list[int], d_tokens: list[int],
                adapter: Adapter | None = None) -> float:
    """Scalar relevance of one query-document pair (cross mode)."""
    ids = build_cross_input(q_tokens, d_tokens, model.config.max_seq_len)
    return float(model.forward_scores(np.asarray([ids], dtype=np.int64), adapter).data[0])


def score_cross_batch(model: EncoderModel, q_tokens: list[int], docs: list[list[int]],
                      adapter: Adapter | None = None, chunk: int = 256) -> np.ndarray:
    """Cross-mode scores of one query against many candidate documents."""
    ids = [build_cross_input(q_tokens, d, model.config.max_seq_len) for d in docs]
    out = np.empty(len(ids))
    for start in range(0, len(ids), chunk):
        part = ids[start: start + chunk]
        out[start: start + len(part)] = model.forward_scores(pad_batch(part), adapter).data
    return out


def freeze_backbone(model: EncoderModel) -> EncoderModel:
    """Mark every backbone tensor non-trainable; idempotent."""
    for t in model.tensors.values():
        t.requires_grad = False
        t.grad = None
    model.frozen = True
    return model


# ---------------------------------------------------------------------------
# persistence

_MODE_TAGS = {"bi": 0, "cross": 1}
_MODE_NAMES = {v: k for k, v in _MODE_TAGS.items()}


def save_encoder(model: EncoderModel, path) -> None:
    c = model.config
    header = [c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads,
              c.ffn_dim, c.max_seq_len, _MODE_TAGS[c.mode], int(model.frozen)]
    records = [(name, t.data) for name, t in model.tensors.items()]
    blob = container.write_container(container.KIND_ENCODER, header, records)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_encoder(path) -> EncoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    _, header, records = container.read_container(blob, expect_kind=container.KIND_ENCODER)
    vocab, hidden, layers, heads, ffn, max_seq, mode_tag, frozen = header
    config = EncoderConfig(vocab, hidden, layers, heads, ffn, max_seq, _MODE_NAMES[mode_tag])
    model = EncoderModel(config, seed=0)
    for name, t in model.tensors.items():
        if name not in records:
            raise FormatError(f"encoder file missing tensor {name!r}")
        if records[name].shape != t.shape:
            raise FormatError(f"encoder tensor {name!r} shape mismatch")
        t.data = np.ascontiguousarray(records[name])
    if frozen:
        freeze_backbone(model)
    return model
