"""The MedEIR encoder.

Pieces that differ from a stock pre-norm transformer:
  - token embeddings pass through K parallel projections whose outputs are
    combined by a learned attention-weighted sum;
  - attention uses symmetric ALiBi distance penalties instead of position
    embeddings, so no parameter anywhere carries a sequence-length axis;
  - the MLM head is an adaptive softmax over frequency-ranked clusters with
    a layer norm applied before projection.

Forward functions operate on a single sequence (shape (S, d)); training
loops over the items of a batch.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (
    CHECKPOINT_VERSION,
    atomic_write_text,
    file_hash,
    load_arrays,
    save_arrays,
)
from .tokenizer import TokenizerModel, Vocabulary

MODEL_FORMAT_VERSION = 1


def _default_cutoffs(vocab_size: int) -> tuple[int, ...]:
    """Head = top ~20% of tokens by frequency, two tails splitting the rest."""
    c0 = max(1, round(0.2 * vocab_size))
    c1 = max(c0 + 1, round(0.6 * vocab_size))
    cuts = [c0, c1, vocab_size]
    ascending = []
    for c in cuts:
        if c >= vocab_size:
            break
        if not ascending or c > ascending[-1]:
            ascending.append(c)
    return tuple(ascending + [vocab_size])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 512
    num_projections: int = 4
    max_train_len: int = 512
    max_infer_len: int = 8192
    adaptive_cutoffs: tuple[int, ...] = ()
    tail_reduction_factor: int = 4
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.num_projections < 1:
            raise ValueError("num_projections must be >= 1")
        if self.max_infer_len < self.max_train_len:
            raise ValueError("max_infer_len must be >= max_train_len")
        cutoffs = tuple(self.adaptive_cutoffs) or _default_cutoffs(self.vocab_size)
        if list(cutoffs) != sorted(set(cutoffs)):
            raise ValueError(f"cutoffs must be strictly ascending: {cutoffs}")
        if cutoffs[-1] != self.vocab_size:
            raise ValueError(f"last cutoff {cutoffs[-1]} != vocab size {self.vocab_size}")
        object.__setattr__(self, "adaptive_cutoffs", cutoffs)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "num_projections": self.num_projections,
            "max_train_len": self.max_train_len,
            "max_infer_len": self.max_infer_len,
            "adaptive_cutoffs": list(self.adaptive_cutoffs),
            "tail_reduction_factor": self.tail_reduction_factor,
            "layer_norm_eps": self.layer_norm_eps,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelConfig":
        blob = dict(blob)
        blob["adaptive_cutoffs"] = tuple(blob.get("adaptive_cutoffs", ()))
        return cls(**blob)


# ---------------------------------------------------------------------------
# ALiBi

@dataclass(frozen=True)
class AlibiBias:
    slopes: tuple[float, ...]

    def __post_init__(self):
        if not self.slopes:
            raise ValueError("AlibiBias needs at least one slope")
        if any(s <= 0 for s in self.slopes):
            raise ValueError("slopes must be positive")
        if any(a <= b for a, b in zip(self.slopes, self.slopes[1:])):
            raise ValueError("slopes must be strictly decreasing")


def _power_of_two_slopes(n: int) -> list[float]:
    return [2.0 ** (-8.0 * i / n) for i in range(1, n + 1)]


def alibi_slopes(n_heads: int) -> AlibiBias:
    """Geometric head slopes; non-powers-of-two interleave two ladders."""
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    if math.log2(n_heads).is_integer():
        slopes = _power_of_two_slopes(n_heads)
    else:
        closest = 2 ** math.floor(math.log2(n_heads))
        slopes = _power_of_two_slopes(closest)
        slopes += _power_of_two_slopes(2 * closest)[0::2][: n_heads - closest]
        slopes.sort(reverse=True)
    return AlibiBias(tuple(slopes))


def alibi_bias_matrix(seq_len: int, slope: float) -> np.ndarray:
    """Symmetric encoder bias: entry (i, j) is -slope * |i - j|."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    idx = np.arange(seq_len)
    return (-slope * np.abs(idx[:, None] - idx[None, :])).astype(np.float64)


@functools.lru_cache(maxsize=16)
def _alibi_stack(slopes: tuple[float, ...], seq_len: int, dtype_name: str) -> np.ndarray:
    stack = np.stack([alibi_bias_matrix(seq_len, s) for s in slopes])
    return stack.astype(np.dtype(dtype_name))


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class MultiProjEmbedding:
    table: Tensor          # (V, d)
    projections: Tensor    # (K, d, d)
    scorer: Tensor         # (K, d)


@dataclass
class EncoderLayer:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w_ffn_in: Tensor
    b_ffn_in: Tensor
    w_ffn_out: Tensor
    b_ffn_out: Tensor


@dataclass
class AdaptiveSoftmaxHead:
    pre_norm_gamma: Tensor
    pre_norm_beta: Tensor
    head_projection: Tensor          # (d, cutoff0 + n_tails)
    head_bias: Tensor                # (cutoff0 + n_tails,)
    tail_down: list[Tensor]          # each (d, d_i)
    tail_out: list[Tensor]           # each (d_i, cluster_size)
    token_order: np.ndarray          # rank -> token id (frozen int buffer)
    rank_of: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rank_of = np.argsort(self.token_order).astype(np.int64)


@dataclass
class EncoderModel:
    config: ModelConfig
    embedding: MultiProjEmbedding
    layers: list[EncoderLayer]
    final_gamma: Tensor
    final_beta: Tensor
    alibi: AlibiBias
    mlm_head: AdaptiveSoftmaxHead

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            "embedding.table": self.embedding.table,
            "embedding.projections": self.embedding.projections,
            "embedding.scorer": self.embedding.scorer,
        }
        for i, layer in enumerate(self.layers):
            for name in ("ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv",
                         "bv", "wo", "bo", "ln2_gamma", "ln2_beta", "w_ffn_in",
                         "b_ffn_in", "w_ffn_out", "b_ffn_out"):
                params[f"layers.{i}.{name}"] = getattr(layer, name)
        params["final_gamma"] = self.final_gamma
        params["final_beta"] = self.final_beta
        head = self.mlm_head
        params["mlm.pre_norm_gamma"] = head.pre_norm_gamma
        params["mlm.pre_norm_beta"] = head.pre_norm_beta
        params["mlm.head_projection"] = head.head_projection
        params["mlm.head_bias"] = head.head_bias
        for i, (down, out) in enumerate(zip(head.tail_down, head.tail_out)):
            params[f"mlm.tails.{i}.down"] = down
            params[f"mlm.tails.{i}.out"] = out
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def token_frequency_order(token_counts: np.ndarray | None, vocab_size: int) -> np.ndarray:
    """Rank tokens by descending count, ties by ascending id."""
    if token_counts is None:
        return np.arange(vocab_size, dtype=np.int64)
    counts = np.asarray(token_counts, dtype=np.int64)
    if counts.shape != (vocab_size,):
        raise ValueError(f"token_counts shape {counts.shape} != ({vocab_size},)")
    order = np.lexsort((np.arange(vocab_size), -counts))
    return order.astype(np.int64)


def build_model(config: ModelConfig, seed: int = 0,
                token_counts: np.ndarray | None = None,
                dtype=np.float32) -> EncoderModel:
    rng = np.random.default_rng(seed)
    d = config.hidden
    k = config.num_projections
    scale = 0.02

    def param(*shape):
        return Tensor(rng.normal(0.0, scale, shape).astype(dtype), requires_grad=True)

    def zeros_param(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones_param(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    projections = np.broadcast_to(np.eye(d, dtype=dtype), (k, d, d)).copy()
    projections += rng.normal(0.0, scale, (k, d, d)).astype(dtype)
    embedding = MultiProjEmbedding(
        table=param(config.vocab_size, d),
        projections=Tensor(projections, requires_grad=True),
        scorer=param(k, d),
    )

    layers = []
    for _ in range(config.layers):
        layers.append(EncoderLayer(
            ln1_gamma=ones_param(d), ln1_beta=zeros_param(d),
            wq=param(d, d), bq=zeros_param(d),
            wk=param(d, d), bk=zeros_param(d),
            wv=param(d, d), bv=zeros_param(d),
            wo=param(d, d), bo=zeros_param(d),
            ln2_gamma=ones_param(d), ln2_beta=zeros_param(d),
            w_ffn_in=param(d, config.ffn_dim), b_ffn_in=zeros_param(config.ffn_dim),
            w_ffn_out=param(config.ffn_dim, d), b_ffn_out=zeros_param(d),
        ))

    cutoffs = config.adaptive_cutoffs
    n_tails = len(cutoffs) - 1
    head_width = cutoffs[0] + n_tails
    head_bias = np.zeros(head_width, dtype=dtype)
    tail_down, tail_out = [], []
    for i in range(n_tails):
        cluster = cutoffs[i + 1] - cutoffs[i]
        # gate bias log|cluster| makes an all-zero head exactly uniform over V
        head_bias[cutoffs[0] + i] = math.log(cluster)
        d_i = max(1, d // (config.tail_reduction_factor ** (i + 1)))
        tail_down.append(param(d, d_i))
        tail_out.append(param(d_i, cluster))

    mlm_head = AdaptiveSoftmaxHead(
        pre_norm_gamma=ones_param(d),
        pre_norm_beta=zeros_param(d),
        head_projection=param(d, head_width),
        head_bias=Tensor(head_bias, requires_grad=True),
        tail_down=tail_down,
        tail_out=tail_out,
        token_order=token_frequency_order(token_counts, config.vocab_size),
    )

    return EncoderModel(
        config=config,
        embedding=embedding,
        layers=layers,
        final_gamma=ones_param(d),
        final_beta=zeros_param(d),
        alibi=alibi_slopes(config.heads),
        mlm_head=mlm_head,
    )


# ---------------------------------------------------------------------------
# forward

def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x, eps), gamma), beta)


def embed_tokens(embedding: MultiProjEmbedding, ids) -> Tensor:
    """Attention-weighted sum of K projected views of each token embedding."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = embedding.table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocab of {vocab_size}")
    e = ad.index_select(embedding.table, ids)                 # (S, d)
    h = ad.matmul(e, embedding.projections)                   # (K, S, d)
    k, s, d = h.shape
    scores = ad.sum_(ad.mul(h, ad.reshape(embedding.scorer, (k, 1, d))), axis=-1)
    weights = ad.softmax(scores, axis=0)                      # (K, S)
    combined = ad.mul(h, ad.reshape(weights, (k, s, 1)))
    return ad.sum_(combined, axis=0)                          # (S, d)


def _attention(h: Tensor, layer: EncoderLayer, alibi_bias: Tensor,
               pad_mask: np.ndarray | None, config: ModelConfig) -> Tensor:
    s, d = h.shape
    n = config.heads
    dh = d // n

    def heads_view(x):
        return ad.transpose(ad.reshape(x, (s, n, dh)), (1, 0, 2))  # (n, S, dh)

    q = heads_view(ad.add(ad.matmul(h, layer.wq), layer.bq))
    key = heads_view(ad.add(ad.matmul(h, layer.wk), layer.bk))
    v = heads_view(ad.add(ad.matmul(h, layer.wv), layer.bv))

    logits = ad.mul(ad.matmul(q, ad.transpose(key, (0, 2, 1))), 1.0 / math.sqrt(dh))
    logits = ad.add(logits, alibi_bias)
    if pad_mask is not None and pad_mask.any():
        logits = ad.masked_fill(logits, pad_mask[None, None, :], -1e9)
    att = ad.softmax(logits, axis=-1)
    ctx = ad.matmul(att, v)                                    # (n, S, dh)
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (s, d))
    return ad.add(ad.matmul(merged, layer.wo), layer.bo)


def encoder_forward(model: EncoderModel, ids, attention_mask=None) -> Tensor:
    """Run the full encoder over one sequence; returns (S, d) hidden states."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("ids must be a non-empty 1-D sequence")
    if ids.size > model.config.max_infer_len:
        raise ValueError(f"sequence length {ids.size} exceeds "
                         f"max_infer_len {model.config.max_infer_len}")
    if attention_mask is None:
        attention_mask = np.ones(ids.size, dtype=np.int64)
    mask = np.asarray(attention_mask)
    if mask.shape != ids.shape:
        raise ValueError("attention_mask length must match ids")
    pad = mask == 0
    eps = model.config.layer_norm_eps

    dtype_name = model.embedding.table.dtype.name
    alibi = Tensor(_alibi_stack(model.alibi.slopes, ids.size, dtype_name))

    h = embed_tokens(model.embedding, ids)
    for layer in model.layers:
        attn_in = _affine_norm(h, layer.ln1_gamma, layer.ln1_beta, eps)
        h = ad.add(h, _attention(attn_in, layer, alibi, pad if pad.any() else None,
                                 model.config))
        ffn_in = _affine_norm(h, layer.ln2_gamma, layer.ln2_beta, eps)
        ffn = ad.matmul(ad.gelu(ad.add(ad.matmul(ffn_in, layer.w_ffn_in),
                                       layer.b_ffn_in)), layer.w_ffn_out)
        h = ad.add(h, ad.add(ffn, layer.b_ffn_out))
    return _affine_norm(h, model.final_gamma, model.final_beta, eps)


def mean_pool(hidden: Tensor, attention_mask) -> Tensor:
    mask = np.asarray(attention_mask)
    keep = np.flatnonzero(mask == 1)
    if keep.size == 0:
        raise ValueError("mean_pool with every position masked")
    return ad.mean(ad.index_select(hidden, keep), axis=0)


def embed_sequence(model: EncoderModel, ids, attention_mask=None) -> Tensor:
    """Differentiable text embedding: forward, mean-pool, unit-normalize."""
    hidden = encoder_forward(model, ids, attention_mask)
    if attention_mask is None:
        attention_mask = np.ones(len(ids), dtype=np.int64)
    return ad.l2_normalize(mean_pool(hidden, attention_mask), axis=-1)


def embed_text(model: EncoderModel, tokenizer: TokenizerModel, text: str) -> np.ndarray:
    seq = tokenizer.encode(text)
    if not seq.ids:
        raise ValueError("text produced no tokens")
    limit = model.config.max_infer_len
    ids = seq.ids[:limit]
    mask = seq.attention_mask[:limit]
    with ad.no_grad():
        return embed_sequence(model, ids, mask).data.copy()


# ---------------------------------------------------------------------------
# adaptive softmax MLM head

def adaptive_log_probs(head: AdaptiveSoftmaxHead, hidden: Tensor) -> Tensor:
    """Log-probabilities over the vocabulary in token-id order.

    hidden may be (d,) for one position or (B, d) for a batch; the result
    is (V,) or (B, V) accordingly.
    """
    single = hidden.ndim == 1
    if single:
        hidden = ad.reshape(hidden, (1, hidden.shape[0]))
    cutoff0 = head.head_projection.shape[1] - len(head.tail_down)

    head_logits = ad.add(ad.matmul(hidden, head.head_projection), head.head_bias)
    head_lp = ad.log_softmax(head_logits, axis=-1)
    parts = [ad.narrow(head_lp, 1, 0, cutoff0)]
    for i, (down, out) in enumerate(zip(head.tail_down, head.tail_out)):
        gate = ad.narrow(head_lp, 1, cutoff0 + i, cutoff0 + i + 1)   # (B, 1)
        tail_lp = ad.log_softmax(ad.matmul(ad.matmul(hidden, down), out), axis=-1)
        parts.append(ad.add(tail_lp, gate))
    rank_lp = ad.concat(parts, axis=1)                               # (B, V) by rank
    id_lp = ad.transpose(ad.index_select(ad.transpose(rank_lp), head.rank_of))
    if single:
        id_lp = ad.reshape(id_lp, (id_lp.shape[1],))
    return id_lp


def mlm_loss(model: EncoderModel, ids, mask_positions, original_ids,
             attention_mask=None) -> Tensor:
    """Mean cross-entropy at the masked positions."""
    positions = sorted(mask_positions)
    if not positions:
        raise ValueError("mlm_loss needs at least one masked position")
    hidden = encoder_forward(model, ids, attention_mask)
    selected = ad.index_select(hidden, np.asarray(positions, dtype=np.int64))
    head = model.mlm_head
    normed = _affine_norm(selected, head.pre_norm_gamma, head.pre_norm_beta,
                          model.config.layer_norm_eps)
    log_probs = adaptive_log_probs(head, normed)
    originals = np.asarray(original_ids, dtype=np.int64)
    targets = originals[np.asarray(positions)]
    return ad.neg(ad.mean(ad.pick(log_probs, targets)))


# ---------------------------------------------------------------------------
# save / load

def save_model(directory: Path, model: EncoderModel, vocab: Vocabulary) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.data for name, p in model.named_parameters().items()}
    arrays["mlm.token_order"] = model.mlm_head.token_order
    save_arrays(directory, arrays)
    vocab.save(directory / "vocab.txt")
    config_blob = model.config.to_dict()
    config_blob["format_version"] = MODEL_FORMAT_VERSION
    config_blob["vocab_sha256"] = file_hash(directory / "vocab.txt")
    atomic_write_text(directory / "config.json",
                      json.dumps(config_blob, indent=2) + "\n")


def load_model(directory: Path) -> tuple[EncoderModel, Vocabulary]:
    directory = Path(directory)
    with open(directory / "config.json", "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if "format_version" not in blob:
        raise ValueError("model config missing format_version")
    if blob.pop("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError("unsupported model format version")
    stored_hash = blob.pop("vocab_sha256", None)
    vocab_path = directory / "vocab.txt"
    if stored_hash is not None and file_hash(vocab_path) != stored_hash:
        raise ValueError("vocab.txt does not match the hash recorded in config.json")
    vocab = Vocabulary.load(vocab_path)
    config = ModelConfig.from_dict(blob)

    arrays = load_arrays(directory)
    token_order = arrays.pop("mlm.token_order").astype(np.int64)
    model = build_model(config, seed=0, dtype=np.float32)
    model.mlm_head.token_order = token_order
    model.mlm_head.rank_of = np.argsort(token_order).astype(np.int64)
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} "
                         f"extra={sorted(extra)}")
    for name, param in params.items():
        stored = arrays[name]
        if stored.shape != param.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{stored.shape} vs {param.data.shape}")
        param.data = np.ascontiguousarray(stored.astype(param.data.dtype))
    return model, vocab
