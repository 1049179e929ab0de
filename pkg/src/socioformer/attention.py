"""Agent-aware attention and the encoder/decoder stacks built from it.

Attention logits are assembled from two projection sets: one for
query/key pairs of the same agent, one for pairs of different agents,
blended by a binary identity mask. Hard masks (connectivity, causality)
force logits to the sentinel, which softmax maps to an exact zero weight.

Decoder self-attention is computed per query-timestep block against the
causal prefix of keys, with per-layer key/value caches. Each block is
therefore computed with shapes that do not depend on how much of the
sequence exists yet, so incremental decoding and a full-prefix pass
produce bit-identical rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .sequence import MultiAgentSequence, Tag
from .tensor import NEG_INF, Tensor


@dataclass
class AttnMasks:
    """Blend mask (agent identity) plus an optional hard-forbidden mask."""

    identity: np.ndarray            # (Lq, Lk) float 0/1
    forbidden: np.ndarray | None    # (Lq, Lk) bool, True = not allowed


def combine_forbidden(masks: list[np.ndarray | None]) -> np.ndarray | None:
    live = [m for m in masks if m is not None]
    if not live:
        return None
    out = live[0].copy()
    for m in live[1:]:
        out |= m
    return out if out.any() else None


class AgentAwareHeadParams:
    """Dual query/key projections plus a single value projection.

    When ``tied`` the self and other projections are the same tensors,
    which reduces the head to standard scaled dot-product attention.
    """

    def __init__(self, rng: np.random.Generator, model_dim: int, head_dim: int,
                 tied: bool = False):
        self.head_dim = head_dim
        self.tied = tied
        self.Wq_self = tc.uniform_init(rng, model_dim, (model_dim, head_dim))
        self.Wk_self = tc.uniform_init(rng, model_dim, (model_dim, head_dim))
        if tied:
            self.Wq_other = self.Wq_self
            self.Wk_other = self.Wk_self
        else:
            self.Wq_other = tc.uniform_init(rng, model_dim, (model_dim, head_dim))
            self.Wk_other = tc.uniform_init(rng, model_dim, (model_dim, head_dim))
        self.Wv = tc.uniform_init(rng, model_dim, (model_dim, head_dim))

    def parameters(self, prefix: str):
        yield f"{prefix}.Wq_self", self.Wq_self
        yield f"{prefix}.Wk_self", self.Wk_self
        if not self.tied:
            yield f"{prefix}.Wq_other", self.Wq_other
            yield f"{prefix}.Wk_other", self.Wk_other
        yield f"{prefix}.Wv", self.Wv


def _attend_projected(q_feat: Tensor, k_self: Tensor, k_other: Tensor, v_proj: Tensor,
                      identity: np.ndarray, forbidden: np.ndarray | None,
                      head: AgentAwareHeadParams) -> tuple[Tensor, np.ndarray]:
    """Attention of raw query features against already-projected keys/values."""
    q_self = tc.matmul(q_feat, head.Wq_self)
    q_other = tc.matmul(q_feat, head.Wq_other)
    same = tc.matmul(q_self, tc.transpose(k_self))
    other = tc.matmul(q_other, tc.transpose(k_other))
    blend = Tensor(identity)
    blend_inv = Tensor(1.0 - identity)
    logits = tc.add(tc.mul(same, blend), tc.mul(other, blend_inv))
    logits = tc.scale(logits, 1.0 / math.sqrt(head.head_dim))
    if forbidden is not None and forbidden.any():
        logits = tc.masked_fill(logits, forbidden.astype(np.float64), NEG_INF)
    weights = tc.softmax_last(logits)
    out = tc.matmul(weights, v_proj)
    return out, weights.data.copy()


def agent_aware_attention(Q: Tensor, K: Tensor, V: Tensor, identity: np.ndarray,
                          extra_masks: list[np.ndarray | None],
                          params: AgentAwareHeadParams) -> tuple[Tensor, np.ndarray]:
    """Single-head agent-aware attention over raw feature matrices.

    ``identity`` blends the self/other logits; each extra mask marks
    forbidden positions that receive exactly zero post-softmax weight.
    Returns the attended output and the post-softmax weight rows.
    """
    if Q.shape[0] != identity.shape[0] or K.shape[0] != identity.shape[1]:
        raise tc.ShapeError(
            f"identity mask {identity.shape} does not match Q rows {Q.shape[0]} "
            f"/ K rows {K.shape[0]}")
    if K.shape[0] != V.shape[0]:
        raise tc.ShapeError("K and V must have the same number of rows")
    k_self = tc.matmul(K, params.Wk_self)
    k_other = tc.matmul(K, params.Wk_other)
    v_proj = tc.matmul(V, params.Wv)
    forbidden = combine_forbidden(extra_masks)
    return _attend_projected(Q, k_self, k_other, v_proj, identity, forbidden, params)


def standard_attention(Q: Tensor, K: Tensor, V: Tensor,
                       extra_masks: list[np.ndarray | None],
                       Wq: Tensor, Wk: Tensor, Wv: Tensor,
                       head_dim: int) -> tuple[Tensor, np.ndarray]:
    """Plain scaled dot-product attention (the tied-projection reference)."""
    logits = tc.matmul(tc.matmul(Q, Wq), tc.transpose(tc.matmul(K, Wk)))
    logits = tc.scale(logits, 1.0 / math.sqrt(head_dim))
    forbidden = combine_forbidden(extra_masks)
    if forbidden is not None and forbidden.any():
        logits = tc.masked_fill(logits, forbidden.astype(np.float64), NEG_INF)
    weights = tc.softmax_last(logits)
    return tc.matmul(weights, tc.matmul(V, Wv)), weights.data.copy()


class AttentionParams:
    """One multi-head agent-aware attention: heads plus output projection."""

    def __init__(self, rng: np.random.Generator, model_dim: int, d_k: int,
                 n_heads: int, tied: bool = False):
        if d_k % n_heads != 0:
            raise tc.ShapeError(f"d_k={d_k} not divisible by heads={n_heads}")
        self.head_dim = d_k // n_heads
        self.heads = [AgentAwareHeadParams(rng, model_dim, self.head_dim, tied=tied)
                      for _ in range(n_heads)]
        self.Wo = tc.uniform_init(rng, d_k, (d_k, model_dim))
        self.bo = tc.zeros_param((model_dim,))

    def parameters(self, prefix: str):
        for i, head in enumerate(self.heads):
            yield from head.parameters(f"{prefix}.h{i}")
        yield f"{prefix}.Wo", self.Wo
        yield f"{prefix}.bo", self.bo


def multi_head(Q: Tensor, K: Tensor, V: Tensor, identity: np.ndarray,
               extra_masks: list[np.ndarray | None],
               attn: AttentionParams) -> tuple[Tensor, list[np.ndarray]]:
    """Concatenate per-head agent-aware attention outputs and project."""
    outs, weights = [], []
    for head in attn.heads:
        o, w = agent_aware_attention(Q, K, V, identity, extra_masks, head)
        outs.append(o)
        weights.append(w)
    joined = outs[0] if len(outs) == 1 else tc.concat_last(*outs)
    return tc.add(tc.matmul(joined, attn.Wo), attn.bo), weights


class EncoderLayerParams:
    def __init__(self, rng, model_dim: int, d_k: int, n_heads: int, ffn_dim: int,
                 tied: bool = False):
        self.attn = AttentionParams(rng, model_dim, d_k, n_heads, tied=tied)
        self.ff_W1 = tc.uniform_init(rng, model_dim, (model_dim, ffn_dim))
        self.ff_b1 = tc.zeros_param((ffn_dim,))
        self.ff_W2 = tc.uniform_init(rng, ffn_dim, (ffn_dim, model_dim))
        self.ff_b2 = tc.zeros_param((model_dim,))
        self.ln1_g = tc.ones_param((model_dim,))
        self.ln1_b = tc.zeros_param((model_dim,))
        self.ln2_g = tc.ones_param((model_dim,))
        self.ln2_b = tc.zeros_param((model_dim,))

    def parameters(self, prefix: str):
        yield from self.attn.parameters(f"{prefix}.attn")
        for name in ("ff_W1", "ff_b1", "ff_W2", "ff_b2",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{name}", getattr(self, name)


class DecoderLayerParams:
    def __init__(self, rng, model_dim: int, d_k: int, n_heads: int, ffn_dim: int,
                 tied: bool = False):
        self.self_attn = AttentionParams(rng, model_dim, d_k, n_heads, tied=tied)
        self.cross_attn = AttentionParams(rng, model_dim, d_k, n_heads, tied=tied)
        self.ff_W1 = tc.uniform_init(rng, model_dim, (model_dim, ffn_dim))
        self.ff_b1 = tc.zeros_param((ffn_dim,))
        self.ff_W2 = tc.uniform_init(rng, ffn_dim, (ffn_dim, model_dim))
        self.ff_b2 = tc.zeros_param((model_dim,))
        self.ln1_g = tc.ones_param((model_dim,))
        self.ln1_b = tc.zeros_param((model_dim,))
        self.ln2_g = tc.ones_param((model_dim,))
        self.ln2_b = tc.zeros_param((model_dim,))
        self.ln3_g = tc.ones_param((model_dim,))
        self.ln3_b = tc.zeros_param((model_dim,))

    def parameters(self, prefix: str):
        yield from self.self_attn.parameters(f"{prefix}.self")
        yield from self.cross_attn.parameters(f"{prefix}.cross")
        for name in ("ff_W1", "ff_b1", "ff_W2", "ff_b2",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b"):
            yield f"{prefix}.{name}", getattr(self, name)


def _feedforward(x: Tensor, layer) -> Tensor:
    hidden = tc.relu(tc.add(tc.matmul(x, layer.ff_W1), layer.ff_b1))
    return tc.add(tc.matmul(hidden, layer.ff_W2), layer.ff_b2)


def _sublayer(x: Tensor, out: Tensor, gain: Tensor, bias: Tensor,
              rate: float, rng) -> Tensor:
    return tc.layer_norm(tc.add(x, tc.dropout(out, rate, rng)), gain, bias)


def encoder_forward(seq: MultiAgentSequence, masks: AttnMasks,
                    layers: list[EncoderLayerParams],
                    dropout_rate: float = 0.0, rng=None) -> MultiAgentSequence:
    """Self-attention encoder stack; tags pass through unchanged.

    An empty stack is the identity map.
    """
    x = seq.features
    for layer in layers:
        attended, _ = multi_head(x, x, x, masks.identity, [masks.forbidden], layer.attn)
        x = _sublayer(x, attended, layer.ln1_g, layer.ln1_b, dropout_rate, rng)
        x = _sublayer(x, _feedforward(x, layer), layer.ln2_g, layer.ln2_b,
                      dropout_rate, rng)
    return seq.with_features(x)


@dataclass
class DecoderAttention:
    """Stitched post-softmax weights of one decoder pass, per layer/head.

    ``self_weights[layer][head]`` is (Lq, Lq) with zeros at causally or
    hard-masked positions; ``cross_weights[layer][head]`` is (Lq, Lmem).
    """

    self_weights: list[list[np.ndarray]]
    cross_weights: list[list[np.ndarray]]


class DecoderState:
    """Block-wise decoder with per-layer/head key and value caches.

    Query blocks (one per timestep) are appended in tag order; each block
    attends the causal prefix of previously appended blocks plus itself,
    and cross-attends the full memory. The full query tag list must be
    fixed up front so masks are consistent across blocks.
    """

    def __init__(self, layers: list[DecoderLayerParams], memory: MultiAgentSequence,
                 q_tags: list[Tag], self_masks: AttnMasks, cross_masks: AttnMasks,
                 dropout_rate: float = 0.0, rng=None, collect: bool = False):
        self.layers = layers
        self.q_tags = q_tags
        self.self_masks = self_masks
        self.cross_masks = cross_masks
        self.rate = dropout_rate
        self.rng = rng
        self.collect = collect
        self.rows_done = 0
        # memory projections are layer-input independent: compute once
        self.mem_proj = [
            [(tc.matmul(memory.features, h.Wk_self),
              tc.matmul(memory.features, h.Wk_other),
              tc.matmul(memory.features, h.Wv)) for h in layer.cross_attn.heads]
            for layer in layers
        ]
        self.kv_cache: list[list[list[tuple[Tensor, Tensor, Tensor]]]] = [
            [[] for _ in layer.self_attn.heads] for layer in layers
        ]
        n_mem = len(memory)
        n_q = len(q_tags)
        if collect:
            self.attn = DecoderAttention(
                self_weights=[[np.zeros((n_q, n_q)) for _ in layer.self_attn.heads]
                              for layer in layers],
                cross_weights=[[np.zeros((n_q, n_mem)) for _ in layer.cross_attn.heads]
                               for layer in layers],
            )
        else:
            self.attn = None

    def _slice_masks(self, masks: AttnMasks, r0: int, r1: int, kcols: int | None) -> AttnMasks:
        cols = slice(None) if kcols is None else slice(0, kcols)
        forb = masks.forbidden[r0:r1, cols] if masks.forbidden is not None else None
        return AttnMasks(identity=masks.identity[r0:r1, cols], forbidden=forb)

    def append_block(self, x: Tensor) -> Tensor:
        """Process the next query-timestep block; returns its output rows."""
        nb = x.shape[0]
        r0, r1 = self.rows_done, self.rows_done + nb
        if r1 > len(self.q_tags):
            raise tc.ShapeError("more query rows appended than planned tags")
        for li, layer in enumerate(self.layers):
            # self-attention against the causal prefix including this block
            self_m = self._slice_masks(self.self_masks, r0, r1, r1)
            outs, sw = [], []
            for hi, head in enumerate(layer.self_attn.heads):
                cache = self.kv_cache[li][hi]
                cache.append((tc.matmul(x, head.Wk_self),
                              tc.matmul(x, head.Wk_other),
                              tc.matmul(x, head.Wv)))
                k_self = tc.concat_rows([c[0] for c in cache])
                k_other = tc.concat_rows([c[1] for c in cache])
                v_proj = tc.concat_rows([c[2] for c in cache])
                o, w = _attend_projected(x, k_self, k_other, v_proj,
                                         self_m.identity, self_m.forbidden, head)
                outs.append(o)
                sw.append(w)
            joined = outs[0] if len(outs) == 1 else tc.concat_last(*outs)
            attended = tc.add(tc.matmul(joined, layer.self_attn.Wo), layer.self_attn.bo)
            x = _sublayer(x, attended, layer.ln1_g, layer.ln1_b, self.rate, self.rng)

            # cross-attention against the full memory
            cross_m = self._slice_masks(self.cross_masks, r0, r1, None)
            outs, cw = [], []
            for hi, head in enumerate(layer.cross_attn.heads):
                k_self, k_other, v_proj = self.mem_proj[li][hi]
                o, w = _attend_projected(x, k_self, k_other, v_proj,
                                         cross_m.identity, cross_m.forbidden, head)
                outs.append(o)
                cw.append(w)
            joined = outs[0] if len(outs) == 1 else tc.concat_last(*outs)
            attended = tc.add(tc.matmul(joined, layer.cross_attn.Wo), layer.cross_attn.bo)
            x = _sublayer(x, attended, layer.ln2_g, layer.ln2_b, self.rate, self.rng)

            x = _sublayer(x, _feedforward(x, layer), layer.ln3_g, layer.ln3_b,
                          self.rate, self.rng)

            if self.collect:
                for hi, w in enumerate(sw):
                    self.attn.self_weights[li][hi][r0:r1, :r1] = w
                for hi, w in enumerate(cw):
                    self.attn.cross_weights[li][hi][r0:r1, :] = w
        self.rows_done = r1
        return x


def split_blocks(tags: list[Tag]) -> list[tuple[int, int]]:
    """Row ranges of consecutive same-timestep blocks (tags must be sorted)."""
    blocks = []
    start = 0
    for i in range(1, len(tags) + 1):
        if i == len(tags) or tags[i].t != tags[start].t:
            blocks.append((start, i))
            start = i
    for (s0, _), (s1, _) in zip(blocks, blocks[1:]):
        if tags[s0].t > tags[s1].t:
            raise tc.ShapeError("query tags must be sorted by timestep")
    return blocks


def decoder_forward(query_seq: MultiAgentSequence, memory: MultiAgentSequence,
                    self_masks: AttnMasks, cross_masks: AttnMasks,
                    layers: list[DecoderLayerParams],
                    dropout_rate: float = 0.0, rng=None,
                    collect_attention: bool = False,
                    ) -> tuple[MultiAgentSequence, DecoderAttention | None]:
    """Masked decoder stack over an embedded query sequence.

    Per layer: block-causal self-attention over the queries, cross-attention
    to the memory, feedforward; all with residual connections and post-norm.
    Causality is structural: a query at step t only ever sees keys at
    steps <= t. An empty stack passes the embedded queries through.
    """
    if not layers:
        return query_seq, None
    state = DecoderState(layers, memory, query_seq.tags, self_masks, cross_masks,
                         dropout_rate=dropout_rate, rng=rng, collect=collect_attention)
    outs = []
    for r0, r1 in split_blocks(query_seq.tags):
        block = tc.gather_rows(query_seq.features, np.arange(r0, r1))
        outs.append(state.append_block(block))
    features = tc.concat_rows(outs)
    return query_seq.with_features(features), state.attn


def attention_triplets(weights: np.ndarray, q_tags: list[Tag],
                       k_tags: list[Tag]) -> list[tuple[Tag, Tag, float]]:
    """Flatten a weight matrix into (query tag, key tag, weight) triplets."""
    out = []
    for i, qt in enumerate(q_tags):
        for j, kt in enumerate(k_tags):
            out.append((qt, kt, float(weights[i, j])))
    return out


class Mlp:
    """Fully connected ReLU network operating on row vectors."""

    def __init__(self, rng: np.random.Generator, in_dim: int,
                 hidden: tuple[int, ...], out_dim: int):
        dims = [in_dim, *hidden, out_dim]
        self.weights = [tc.uniform_init(rng, dims[i], (dims[i], dims[i + 1]))
                        for i in range(len(dims) - 1)]
        self.biases = [tc.zeros_param((dims[i + 1],)) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = tc.add(tc.matmul(x, w), b)
            if i < len(self.weights) - 1:
                x = tc.relu(x)
        return x

    def parameters(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.W{i}", w
            yield f"{prefix}.b{i}", b
