"""A small BERT-style encoder that exposes every quantity the distillation losses read.

A forward pass returns a :class:`ForwardTrace` holding the embedding output, each
layer's hidden states and pre-softmax attention scores, the masked-mean pooled
vector, the domain sub-network output (the "transferable knowledge" vector) and
the class/domain logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .nn import Linear, Module, Parameter, normal_init
from .tensor import (Tensor, dropout, embedding, gelu, layer_norm, softmax, tanh)

MASK_NEG = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    max_seq_len: int = 32
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    num_classes: int = 2
    num_domains: int = 3
    dropout_rate: float = 0.1
    pooling: str = "mean"           # "mean" or "sum"
    classify_from: str = "pooled"   # "pooled" or "cls"
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must leave room for [CLS] and [SEP]")
        if self.pooling not in ("mean", "sum"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.classify_from not in ("pooled", "cls"):
            raise ValueError(f"unknown classify_from {self.classify_from!r}")

    @classmethod
    def teacher(cls, vocab_size: int, **kw) -> "EncoderConfig":
        return cls(vocab_size=vocab_size, **{"num_layers": 4, "hidden_dim": 64, "num_heads": 4,
                                             "ffn_dim": 128, **kw})

    @classmethod
    def student(cls, vocab_size: int, **kw) -> "EncoderConfig":
        return cls(vocab_size=vocab_size, **{"num_layers": 2, "hidden_dim": 32, "num_heads": 4,
                                             "ffn_dim": 64, **kw})


@dataclass
class ForwardTrace:
    embedding_out: Tensor
    hidden_states: list[Tensor]
    attention_scores: list[Tensor]
    pooled: Tensor
    transfer_vec: Tensor
    class_logits: Tensor
    domain_logits: Tensor
    mask: np.ndarray = field(repr=False)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class SelfAttention(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_dim // cfg.num_heads
        self.qkv = Linear(cfg.hidden_dim, 3 * cfg.hidden_dim, rng, dtype=dtype)
        self.out = Linear(cfg.hidden_dim, cfg.hidden_dim, rng, dtype=dtype)

    def __call__(self, x: Tensor, mask_bias: np.ndarray, p_drop: float, rng, training: bool):
        B, N, H = x.shape
        A, dh = self.num_heads, self.head_dim
        qkv = self.qkv(x).reshape(B, N, 3, A, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * float(1.0 / np.sqrt(dh))
        probs = softmax(scores + mask_bias, axis=-1)
        probs = dropout(probs, p_drop, rng, training)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, H)
        return self.out(ctx), scores


class TransformerLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.attn = SelfAttention(cfg, rng, dtype)
        self.ln1 = LayerNorm(cfg.hidden_dim, dtype)
        self.ffn_in = Linear(cfg.hidden_dim, cfg.ffn_dim, rng, dtype=dtype)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.hidden_dim, rng, dtype=dtype)
        self.ln2 = LayerNorm(cfg.hidden_dim, dtype)

    def __call__(self, x, mask_bias, p_drop, rng, training):
        a, scores = self.attn(x, mask_bias, p_drop, rng, training)
        x = self.ln1(x + dropout(a, p_drop, rng, training))
        f = self.ffn_out(gelu(self.ffn_in(x)))
        x = self.ln2(x + dropout(f, p_drop, rng, training))
        return x, scores


class DomainSubnet(Module):
    """tanh((pooled + domain_embedding[d]) W + b) followed by a linear K-way domain classifier."""

    def __init__(self, hidden_dim: int, num_domains: int, rng, dtype):
        self.domain_embedding = Parameter(normal_init(rng, (num_domains, hidden_dim), dtype=dtype))
        self.proj = Linear(hidden_dim, hidden_dim, rng, dtype=dtype)
        self.classifier = Linear(hidden_dim, num_domains, rng, dtype=dtype)

    def __call__(self, pooled: Tensor, domain_labels) -> tuple[Tensor, Tensor]:
        labels = np.asarray(domain_labels, dtype=np.int64)
        K = self.domain_embedding.shape[0]
        if labels.shape != (pooled.shape[0],):
            raise ValueError(f"need one domain label per row, got {labels.shape} for {pooled.shape[0]} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise IndexError(f"domain label out of range for {K} domains: {labels.tolist()}")
        h = tanh(self.proj(pooled + embedding(self.domain_embedding, labels)))
        return h, self.classifier(h)


def pool(final_hidden: Tensor, mask, mode: str = "mean") -> Tensor:
    """Masked sum or mean over the token axis."""
    mask = np.asarray(mask, dtype=final_hidden.dtype)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cannot pool a row with no active positions")
    summed = (final_hidden * mask[:, :, None]).sum(axis=1)
    if mode == "sum":
        return summed
    return summed * (1.0 / counts)[:, None].astype(final_hidden.dtype)


def transfer_head(pooled: Tensor, domain_labels, subnet: DomainSubnet) -> tuple[Tensor, Tensor]:
    return subnet(pooled, domain_labels)


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        H = config.hidden_dim
        self.token_embedding = Parameter(normal_init(rng, (config.vocab_size, H), dtype=dtype))
        self.position_embedding = Parameter(normal_init(rng, (config.max_seq_len, H), dtype=dtype))
        self.embedding_ln = LayerNorm(H, dtype)
        self.layers = [TransformerLayer(config, rng, dtype) for _ in range(config.num_layers)]
        self.classifier = Linear(H, config.num_classes, rng, dtype=dtype)
        self.subnet = DomainSubnet(H, config.num_domains, rng, dtype)
        self.dropout_rng = np.random.default_rng([seed, 1])

    def __call__(self, token_ids, mask, domain_labels) -> ForwardTrace:
        return self.forward(token_ids, mask, domain_labels)

    def forward(self, token_ids, mask, domain_labels) -> ForwardTrace:
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[0] == 0:
            raise ValueError(f"expected a non-empty [batch, seq] id matrix, got shape {ids.shape}")
        B, N = ids.shape
        if N > cfg.max_seq_len:
            raise ValueError(f"sequence length {N} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range for vocab of {cfg.vocab_size}")
        mask = np.asarray(mask, dtype=self.token_embedding.dtype)
        p, rng, training = cfg.dropout_rate, self.dropout_rng, self.training

        x = embedding(self.token_embedding, ids) + self.position_embedding[:N]
        x = self.embedding_ln(x)
        embedding_out = x
        x = dropout(x, p, rng, training)
        mask_bias = ((1.0 - mask) * MASK_NEG)[:, None, None, :]
        hidden, scores = [], []
        for layer in self.layers:
            x, s = layer(x, mask_bias, p, rng, training)
            hidden.append(x)
            scores.append(s)
        pooled = pool(x, mask, cfg.pooling)
        transfer_vec, domain_logits = self.subnet(pooled, domain_labels)
        features = pooled if cfg.classify_from == "pooled" else x[:, 0, :]
        class_logits = self.classifier(dropout(features, p, rng, training))
        return ForwardTrace(embedding_out, hidden, scores, pooled, transfer_vec,
                            class_logits, domain_logits, mask)

    def encode(self, batch) -> ForwardTrace:
        return self.forward(batch.token_ids, batch.mask, batch.domain_labels)

    # --------------------------------------------------------------- persistence
    def save(self, path, meta: dict | None = None) -> None:
        info = {"config": asdict(self.config),
                "parameters": [n for n, _ in self.named_parameters()],
                **(meta or {})}
        checkpoint.save(path, self.state_dict(), info)

    @classmethod
    def load(cls, path) -> tuple["Encoder", dict]:
        tensors, meta = checkpoint.load(path)
        model = cls(EncoderConfig(**meta["config"]))
        model.load_state_dict(tensors)
        return model, meta

    def clone(self) -> "Encoder":
        twin = Encoder(self.config)
        twin.load_state_dict(self.state_dict())
        twin.train(self.training)
        return twin


def encode(batch, model: Encoder) -> ForwardTrace:
    return model.encode(batch)
