"""The full pair matcher: encoder -> relational stack -> aggregation."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .aggregation import aggregate_logits, to_probability
from .attention import relational_stack
from .config import ModelConfig
from .data import CharacterImage, StrokeSequence, normalize_points
from .encoder import embed_images, embed_point_array
from .errors import ContractError
from .params import ModelParams, init_params
from .tensor import Tensor


def _pixels(item):
    return item.pixels if isinstance(item, CharacterImage) else np.asarray(item)


def _points(item):
    if isinstance(item, StrokeSequence):
        return normalize_points(item.points)
    return np.asarray(item, dtype=np.float32)


class AttentiveMatcher:
    """Scores whether two instances show the same character class."""

    kind = "attentive_matcher"

    def __init__(self, params: ModelParams):
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0):
        return cls(init_params(config, seed))

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def modality(self):
        return self.config.modality

    def check_items(self, items):
        want = CharacterImage if self.modality == "images" else StrokeSequence
        for it in items:
            if isinstance(it, (CharacterImage, StrokeSequence)) and not isinstance(it, want):
                raise ContractError(f"{type(it).__name__} given to a {self.modality} model")

    # -- encoding -----------------------------------------------------------

    def encode(self, items, train=False, seed=0, step=0):
        """Images -> one ``(B, n, d)`` tensor; points -> list of ``(1, P, d)`` tensors."""
        self.check_items(items)
        if self.modality == "images":
            dtype = self.params["enc.conv0.w"].dtype
            pix = np.stack([_pixels(it) for it in items]).astype(dtype)
            return embed_images(self.params, pix)
        out = []
        for i, it in enumerate(items):
            tok = embed_point_array(self.params, _points(it), train, seed, step * 100003 + i)
            out.append(T.reshape(tok, (1,) + tok.shape))
        return out

    # -- pair scoring -------------------------------------------------------

    def logits_from_tokens(self, tok_a, tok_b, ia, ib):
        """Logits for pairs ``(tok_a[ia[k]], tok_b[ib[k]])``."""
        if self.modality == "images":
            a = T.take(tok_a, np.asarray(ia))
            b = T.take(tok_b, np.asarray(ib))
            a, b, _ = relational_stack(a, b, self.params, collect_maps=False)
            return aggregate_logits(a, b, self.params)
        parts = []
        for i, j in zip(ia, ib):
            a, b, _ = relational_stack(tok_a[i], tok_b[j], self.params, collect_maps=False)
            parts.append(aggregate_logits(a, b, self.params))
        return T.concat(parts, axis=0)

    def pair_logits(self, xs, ys, train=False, seed=0, step=0) -> Tensor:
        """Differentiable logits for the pairs ``zip(xs, ys)``; each item is encoded once."""
        if len(xs) != len(ys):
            raise ContractError("pair lists differ in length")
        n = len(xs)
        tokens = self.encode(list(xs) + list(ys), train, seed, step)
        if self.modality == "images":
            return self.logits_from_tokens(tokens, tokens, np.arange(n), np.arange(n, 2 * n))
        return self.logits_from_tokens(tokens, tokens, range(n), range(n, 2 * n))

    def score_pairs(self, xs, ys) -> np.ndarray:
        with T.no_grad():
            return to_probability(self.pair_logits(xs, ys).data)

    def score_matrix(self, queries, supports, chunk: int = 64) -> np.ndarray:
        """``s[q, p]`` for every query/support pair, encoding each item once."""
        nq, ns = len(queries), len(supports)
        out = np.empty((nq, ns))
        with T.no_grad():
            tq = self.encode(queries)
            ts = self.encode(supports)
            qi, si = np.divmod(np.arange(nq * ns), ns)
            for lo in range(0, nq * ns, chunk):
                hi = min(lo + chunk, nq * ns)
                z = self.logits_from_tokens(tq, ts, qi[lo:hi], si[lo:hi]).data
                out.reshape(-1)[lo:hi] = to_probability(z)
        return out

    def attention_maps(self, x, y):
        """All attention maps for a single pair."""
        with T.no_grad():
            toks = self.encode([x, y])
            if self.modality == "images":
                a, b = T.take(toks, slice(0, 1)), T.take(toks, slice(1, 2))
            else:
                a, b = toks
            _, _, maps = relational_stack(a, b, self.params)
        return maps


class TemplateMatcher:
    """Parameter-free pixel-overlap scorer, used as a reference baseline.

    ``s = sigmoid(scale * (iou - 0.5))`` where ``iou`` is the soft
    intersection-over-union of the two ink maps.  Identical images score
    highest.
    """

    kind = "template"
    modality = "images"

    def __init__(self, scale: float = 20.0):
        self.scale = float(scale)

    def score_matrix(self, queries, supports):
        q = np.stack([_pixels(x) for x in queries]).reshape(len(queries), -1).astype(np.float64)
        s = np.stack([_pixels(x) for x in supports]).reshape(len(supports), -1).astype(np.float64)
        inter = np.minimum(q[:, None, :], s[None, :, :]).sum(-1)
        union = np.maximum(q[:, None, :], s[None, :, :]).sum(-1)
        iou = inter / np.maximum(union, 1e-12)
        return to_probability(self.scale * (iou - 0.5))

    def score_pairs(self, xs, ys):
        return np.array([self.score_matrix([x], [y])[0, 0] for x, y in zip(xs, ys)])
