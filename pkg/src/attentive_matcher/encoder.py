"""Instance encoders: a four-layer CNN for images, a point MLP for trajectories.

Both produce a token sequence with the sinusoidal positional encoding added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import CharacterImage, StrokeSequence, normalize_points
from .errors import ContractError, DimensionError
from .params import ModelParams
from .tensor import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor  # (n, d)
    source: str  # "images" | "points"

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]


def positional_encoding(n: int, d: int) -> np.ndarray:
    """``PE[p, 2i] = sin(p / 10000^(2i/d))``, ``PE[p, 2i+1] = cos(...)``."""
    if d % 2:
        raise DimensionError(f"positional encoding width must be even, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def add_positions(x: Tensor) -> Tensor:
    """Add the positional table to ``(B, n, d)`` or ``(n, d)`` tokens."""
    n, d = x.shape[-2:]
    pe = positional_encoding(n, d).astype(x.dtype)
    pe = np.broadcast_to(pe, x.shape).copy()
    return T.add(x, Tensor(pe, dtype=x.dtype))


def conv_features(params: ModelParams, pixels) -> Tensor:
    """``(B, S, S)`` pixels -> ``(B, d, S/4, S/4)`` feature grid (no positions)."""
    cfg = params.config
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels), dtype=params["enc.conv0.w"].dtype)
    if x.ndim != 3 or x.shape[1:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected (B, {cfg.image_size}, {cfg.image_size}) images, got {x.shape}")
    b, s, _ = x.shape
    h = T.reshape(x, (b, 1, s, s))
    for i in range(len(cfg.channels)):
        h = T.relu(T.conv2d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"]))
        if i < 2:
            h = T.maxpool2d(h)
    return h


def embed_images(params: ModelParams, pixels, positions: bool = True) -> Tensor:
    """Batch of images -> ``(B, (S/4)^2, d)`` tokens, grid flattened row-major."""
    h = conv_features(params, pixels)
    b, d, gh, gw = h.shape
    tokens = T.reshape(T.transpose(h, (0, 2, 3, 1)), (b, gh * gw, d))
    return add_positions(tokens) if positions else tokens


def embed_image(image: CharacterImage, params: ModelParams) -> TokenSequence:
    pixels = np.asarray(image.pixels if isinstance(image, CharacterImage) else image)
    if pixels.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got {pixels.shape}")
    tokens = embed_images(params, pixels[None])
    return TokenSequence(T.reshape(tokens, tokens.shape[1:]), "images")


def embed_point_array(params: ModelParams, points, train: bool = False, seed: int = 0, step: int = 0,
                      positions: bool = True) -> Tensor:
    """``(P, 2)`` normalised coordinates -> ``(P, d)`` tokens."""
    cfg = params.config
    x = points if isinstance(points, Tensor) else Tensor(np.asarray(points), dtype=params["enc.pt.fc1.w"].dtype)
    if x.ndim != 2 or x.shape[1] != 2:
        raise DimensionError(f"expected (P, 2) points, got {x.shape}")
    if x.shape[0] == 0:
        raise ContractError("cannot embed an empty point sequence")
    h = T.relu(T.linear(x, params["enc.pt.fc1.w"], params["enc.pt.fc1.b"]))
    h = T.linear(h, params["enc.pt.fc2.w"], params["enc.pt.fc2.b"])
    h = T.dropout(h, cfg.point_dropout, train, seed, step)
    return add_positions(h) if positions else h


def embed_points(seq: StrokeSequence, params: ModelParams, train: bool = False, seed: int = 0,
                 step: int = 0) -> TokenSequence:
    if len(seq.points) == 0:
        raise ContractError("cannot embed an empty point sequence")
    return TokenSequence(embed_point_array(params, normalize_points(seq.points), train, seed, step), "points")
