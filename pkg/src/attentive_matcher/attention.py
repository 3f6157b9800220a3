"""Attention blocks and the two-sided self/cross relational stack.

A block computes ``x + LayerNorm(MLP(concat(MHA(x -> context), x)))``: the
attention output is concatenated with the block input before the
feed-forward MLP, the norm follows the MLP, and the residual comes last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .params import ModelParams
from .tensor import Tensor

DIRECTIONS = ("self-A", "self-B", "cross-A->B", "cross-B->A")


@dataclass
class AttentionMap:
    weights: np.ndarray  # (B, H, n_query, n_key)
    round: int
    direction: str


def _batched(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"tokens must be (n, d) or (B, n, d), got {x.shape}")
    return x, False


def multi_head_attention(xq: Tensor, xkv: Tensor, params: ModelParams, prefix: str, heads: int):
    """Scaled dot-product attention of ``xq`` tokens over ``xkv`` tokens.

    Returns the output-projected result and the ``(B, H, nq, nk)`` weights.
    """
    xq, squeeze = _batched(xq)
    xkv, _ = _batched(xkv)
    b, nq, d = xq.shape
    if xkv.shape[0] != b or xkv.shape[2] != d:
        raise DimensionError(f"query tokens {xq.shape} and key tokens {xkv.shape} disagree")
    if d % heads:
        raise DimensionError(f"{heads} heads do not divide width {d}")
    nk = xkv.shape[1]
    dh = d // heads

    def split(x, name, n):
        y = T.linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])
        return T.transpose(T.reshape(y, (b, n, heads, dh)), (0, 2, 1, 3))  # B,H,n,dh

    q = split(xq, "q", nq)
    k = split(xkv, "k", nk)
    v = split(xkv, "v", nk)
    logits = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    att = T.softmax(logits, axis=-1)
    out = T.matmul(att, v)  # B,H,nq,dh
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, nq, d))
    out = T.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])
    if squeeze:
        out = T.reshape(out, (nq, d))
    return out, att.data


def attention_block(x: Tensor, context: Tensor, params: ModelParams, prefix: str, heads: int):
    """One modified attention block; returns (output, attention weights)."""
    att, weights = multi_head_attention(x, context, params, prefix, heads)
    h = T.concat([att, x], axis=-1)
    h = T.relu(T.linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"]))
    h = T.linear(h, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
    h = T.layer_norm(h, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    return T.add(x, h), weights


def relational_stack(a: Tensor, b: Tensor, params: ModelParams, collect_maps: bool = True):
    """Rounds of self-attention on each side followed by symmetric cross-attention.

    Within a round both cross steps read the post-self tokens of both sides,
    so swapping ``a`` and ``b`` swaps the outputs.  The same block weights
    serve both sides; rounds have their own weights.
    """
    cfg = params.config
    maps = []
    for r in range(cfg.rounds):
        sp, cp = f"stack.r{r}.self", f"stack.r{r}.cross"
        a_s, wa = attention_block(a, a, params, sp, cfg.heads)
        b_s, wb = attention_block(b, b, params, sp, cfg.heads)
        a, wab = attention_block(a_s, b_s, params, cp, cfg.heads)
        b, wba = attention_block(b_s, a_s, params, cp, cfg.heads)
        if collect_maps:
            maps += [
                AttentionMap(wa, r, "self-A"),
                AttentionMap(wb, r, "self-B"),
                AttentionMap(wab, r, "cross-A->B"),
                AttentionMap(wba, r, "cross-B->A"),
            ]
    return a, b, maps


def extract_cross_attention(maps, round: int, direction: str, item: int = 0) -> np.ndarray:
    """Head-averaged ``(n_query, n_key)`` attention for one round and direction."""
    for m in maps:
        if m.round == round and m.direction == direction:
            w = m.weights
            if w.ndim == 4:
                w = w[item]
            return w.astype(np.float64).mean(axis=0)
    raise KeyError(f"no attention map for round {round}, direction {direction!r}")


def grid_view(attention: np.ndarray, query_cell: int, side: int) -> np.ndarray:
    """One query row of a token-to-token map reshaped to the ``side x side`` key grid."""
    return attention[query_cell].reshape(side, side)
