"""Pool the transformed tokens of both inputs into one match probability.

For the joint token set ``z_1..z_n`` (both inputs together)::

    alpha_i[k] = exp g_k(z_i) / sum_j exp g_k(z_j)
    s = sigmoid(h(sum_i alpha_i * f(z_i)))
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .params import ModelParams
from .tensor import Tensor

LOGIT_CLAMP = 30.0


def mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = T.relu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def _as_batch(z: Tensor) -> Tensor:
    return T.reshape(z, (1,) + z.shape) if z.ndim == 2 else z


def attention_weights(z: Tensor, params: ModelParams) -> Tensor:
    """Per-feature softmax gates over the token axis: ``(B, n, K)``, columns sum to 1."""
    z = _as_batch(z)
    if z.shape[1] == 0:
        raise ContractError("aggregation needs at least one token")
    return T.softmax(mlp(z, params, "agg.g"), axis=1)


def pooled_features(z: Tensor, params: ModelParams) -> Tensor:
    z = _as_batch(z)
    alpha = attention_weights(z, params)
    return T.reduce_sum(T.mul(alpha, mlp(z, params, "agg.f")), axis=1)  # B,K


def aggregate_logits(a: Tensor, b: Tensor, params: ModelParams) -> Tensor:
    """Pre-sigmoid match values ``(B,)`` for token sets ``a`` and ``b``."""
    a, b = _as_batch(a), _as_batch(b)
    z = T.concat([a, b], axis=1)
    logits = mlp(pooled_features(z, params), params, "agg.h")
    return T.reshape(logits, (logits.shape[0],))


def to_probability(logits) -> np.ndarray:
    """Sigmoid in float64 with logits clamped so the result stays inside (0, 1)."""
    z = np.clip(np.asarray(logits, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def aggregate_score(a: Tensor, b: Tensor, params: ModelParams) -> np.ndarray:
    with T.no_grad():
        return to_probability(aggregate_logits(a, b, params).data)
