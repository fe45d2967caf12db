"""Vision refinement over the selected frames.

A learnable video-level CLS token is prepended to the selected patch tokens;
stacked blocks then alternate text-conditioned gating with divided space-time
attention (patches attend across frames at the same spatial slot, then within
their own frame; the CLS token attends over everything in both stages).  Only
the final CLS token leaves the module.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .gating import GateParams, cross_attention_core, gate_core
from .nn import LayerNorm, Mlp, Module, SelfAttention, init_normal, merge_heads, split_heads
from .tensor import Tensor


def _divided_attention(seq: Tensor, attn: SelfAttention, k: int, p: int,
                       temporal: bool) -> Tensor:
    """Grouped attention over a (1 + K*P, D) sequence.

    Patch tokens attend within their group only: across the K frames sharing
    a spatial slot (temporal) or across the P slots of their frame (spatial).
    The CLS token at position 0 attends over the full sequence in both modes.
    """
    s, _ = seq.shape
    if s != 1 + k * p:
        raise ValueError(f"sequence length {s} does not match 1 + {k}*{p}")
    heads, hd = attn.heads, attn.head_dim
    scale = 1.0 / math.sqrt(hd)
    q = split_heads(attn.w_q(seq), heads)   # (H, S, hd)
    key = split_heads(attn.w_k(seq), heads)
    val = split_heads(attn.w_v(seq), heads)

    q_cls = T.take(q, [0], axis=1)                                   # (H, 1, hd)
    cls_scores = T.matmul(q_cls, T.transpose(key, (0, 2, 1))) * scale
    out_cls = T.matmul(T.softmax_stable(cls_scores, axis=-1), val)   # (H, 1, hd)

    body = np.arange(1, s)
    qp = T.reshape(T.take(q, body, axis=1), (heads, k, p, hd))
    kp = T.reshape(T.take(key, body, axis=1), (heads, k, p, hd))
    vp = T.reshape(T.take(val, body, axis=1), (heads, k, p, hd))
    if temporal:
        qp = T.transpose(qp, (0, 2, 1, 3))  # (H, P, K, hd)
        kp = T.transpose(kp, (0, 2, 1, 3))
        vp = T.transpose(vp, (0, 2, 1, 3))
    scores = T.matmul(qp, T.transpose(kp, (0, 1, 3, 2))) * scale
    grouped = T.matmul(T.softmax_stable(scores, axis=-1), vp)
    if temporal:
        grouped = T.transpose(grouped, (0, 2, 1, 3))
    out_body = T.reshape(grouped, (heads, k * p, hd))

    out = T.concat([out_cls, out_body], axis=1)  # (H, S, hd)
    return attn.w_o(merge_heads(out))


class VrBlock(Module):
    """Gate, temporal attention, spatial attention, MLP; all pre-norm residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 fusion: str = "la_gate", mlp_ratio: int = 4):
        self.ln_gate = LayerNorm(dim)
        self.gate = GateParams(dim, heads, rng)
        self.ln_temporal = LayerNorm(dim)
        self.attn_temporal = SelfAttention(dim, heads, rng)
        self.ln_spatial = LayerNorm(dim)
        self.attn_spatial = SelfAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)
        self.fusion = fusion

    def __call__(self, seq: Tensor, t_row: Tensor, k: int, p: int) -> Tensor:
        core = gate_core if self.fusion == "la_gate" else cross_attention_core
        seq = seq + core(self.ln_gate(seq), t_row, self.gate)
        seq = seq + _divided_attention(self.ln_temporal(seq), self.attn_temporal,
                                       k, p, temporal=True)
        seq = seq + _divided_attention(self.ln_spatial(seq), self.attn_spatial,
                                       k, p, temporal=False)
        seq = seq + self.mlp(self.ln_mlp(seq))
        return seq


class RefinerParams(Module):
    """CLS token, positional tables, and the refinement blocks."""

    def __init__(self, dim: int, heads: int, k_select: int, n_patches: int,
                 depth: int, rng: np.random.Generator, fusion: str = "la_gate"):
        if depth < 1:
            raise ValueError("refiner depth must be >= 1")
        self.cls_init = init_normal(rng, (dim,), 0.02)
        self.spatial_table = init_normal(rng, (n_patches, dim), 0.02)
        self.temporal_table_k = init_normal(rng, (k_select, dim), 0.02)
        self.blocks = [VrBlock(dim, heads, rng, fusion) for _ in range(depth)]
        self.dim = dim
        self.k_select = k_select
        self.n_patches = n_patches


def assemble_refiner_input(v_patch_k: Tensor, params: RefinerParams) -> Tensor:
    """Prepend the CLS token and add positional context to the patch tokens.

    Spatial and per-slot temporal embeddings are added once, here, at the
    input of the first block.  Output row 1 + k*P + p holds patch p of
    selected frame k.
    """
    if v_patch_k.ndim != 3 or v_patch_k.shape[1] != params.n_patches \
            or v_patch_k.shape[2] != params.dim:
        raise ValueError(f"selected patches {v_patch_k.shape} do not match refiner "
                         f"(K, {params.n_patches}, {params.dim})")
    k = v_patch_k.shape[0]
    if k != params.k_select:
        raise ValueError(f"selected frame count {k} != refiner K {params.k_select}")
    spatial = T.reshape(params.spatial_table, (1, params.n_patches, params.dim))
    temporal = T.reshape(params.temporal_table_k, (k, 1, params.dim))
    body = T.reshape(v_patch_k + spatial + temporal, (k * params.n_patches, params.dim))
    cls_row = T.reshape(params.cls_init, (1, params.dim))
    return T.concat([cls_row, body], axis=0)


def vr_block(seq: Tensor, t_cls: Tensor, block_params: VrBlock, k: int, p: int) -> Tensor:
    """Apply one refinement block; ``t_cls`` may be (D,) or (1, D)."""
    t_row = T.reshape(t_cls, (1, seq.shape[1])) if t_cls.ndim == 1 else t_cls
    return block_params(seq, t_row, k, p)


def refine(v_patch_k: Tensor, t_cls: Tensor, params: RefinerParams) -> Tensor:
    """Run the full refinement stack and emit only the final CLS token, (D,)."""
    t_row = T.reshape(t_cls, (1, params.dim)) if t_cls.ndim == 1 else t_cls
    seq = assemble_refiner_input(v_patch_k, params)
    for block in params.blocks:
        seq = block(seq, t_row, params.k_select, params.n_patches)
    return T.reshape(T.take(seq, [0], axis=0), (params.dim,))
