"""Pair-based training: balanced batches, BCE, global-norm clipping, Adam, early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import DatasetSplit
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "train_pair_acc", "val_acc")


@dataclass
class PairBatch:
    xs: list
    ys: list
    labels: np.ndarray  # 1 = same class

    def __len__(self):
        return len(self.labels)


def sample_pair_batch(split: DatasetSplit, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Half same-class pairs, half different-class pairs.

    Classes are drawn uniformly, then instances uniformly within a class.
    A positive pair always uses two distinct instances.
    """
    if batch_size % 2:
        raise ContractError("batch size must be even")
    groups = split.by_class()
    classes = [c for c, members in groups.items() if len(members) >= 2]
    if len(groups) < 2 or not classes:
        raise ContractError(f"pair sampling needs at least 2 classes, split {split.name!r} has {len(groups)}")
    all_classes = list(groups)
    half = batch_size // 2
    xs, ys = [], []
    for _ in range(half):
        members = groups[classes[rng.integers(len(classes))]]
        i, j = rng.choice(len(members), size=2, replace=False)
        xs.append(members[i])
        ys.append(members[j])
    for _ in range(half):
        ca, cb = rng.choice(len(all_classes), size=2, replace=False)
        ga, gb = groups[all_classes[ca]], groups[all_classes[cb]]
        xs.append(ga[rng.integers(len(ga))])
        ys.append(gb[rng.integers(len(gb))])
    labels = np.concatenate([np.ones(half), np.zeros(half)])
    return PairBatch(xs, ys, labels)


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy of probabilities (non-fused reference path)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if np.any(s <= 0.0) or np.any(s >= 1.0) or not np.all(np.isfinite(s)):
        raise NumericError("scores must lie strictly inside (0, 1); use the fused logit loss")
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log1p(-s))))


def bce_from_logits(logits: Tensor, labels) -> Tensor:
    return T.bce_with_logits(logits, labels)


def learning_rate(epoch: int, base: float = 1e-4, decay: float = 0.1, every: int = 100) -> float:
    return base * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# clipping and Adam


@dataclass
class ClipReport:
    norm: float
    scale: float

    @property
    def clipped(self):
        return self.scale < 1.0


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))


def clip_gradients(params, threshold: float = 2.5) -> ClipReport:
    """Rescale all gradients together so their global L2 norm is at most ``threshold``."""
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    grads = [t.grad for t in tensors]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm; step aborted")
    scale = 1.0
    if norm > threshold:
        scale = threshold / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype)
    return ClipReport(norm, scale)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` arrays."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = p.data if isinstance(p, Tensor) else p
        if g.shape != arr.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {arr.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr, dtype=np.float64)
            state.v[name] = np.zeros_like(arr, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g, dtype=np.float64)
        arr -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(arr.dtype)


# ---------------------------------------------------------------------------
# validation


def sample_episode(split: DatasetSplit, way: int, rng, alphabet=None):
    """Within-alphabet episode: ``(supports, queries, truth, n)`` with n <= way."""
    by_alpha = split.classes_by_alphabet()
    groups = split.by_class()
    eligible = [a for a, cls in by_alpha.items() if len(cls) >= 2 and all(len(groups[c]) >= 2 for c in cls)]
    if not eligible:
        raise ContractError("no alphabet with at least two classes available for episodes")
    if alphabet is None:
        alphabet = eligible[rng.integers(len(eligible))]
    cls = by_alpha[alphabet]
    n = min(way, len(cls))
    chosen = rng.choice(cls, size=n, replace=False)
    supports, queries = [], []
    for c in chosen:
        i, j = rng.choice(len(groups[c]), size=2, replace=False)
        supports.append(groups[c][i])
        queries.append(groups[c][j])
    perm = rng.permutation(n)
    queries = [queries[k] for k in perm]
    truth = [int(k) for k in perm]
    return supports, queries, truth, n


def validate(model, split: DatasetSplit, episodes: int, way: int, rng) -> float:
    """Mean argmax accuracy over random within-alphabet episodes."""
    if split is None or not split.instances:
        raise ContractError("validation needs at least one alphabet")
    accs, reduced = [], 0
    for _ in range(episodes):
        sup, qry, truth, n = sample_episode(split, way, rng)
        reduced += n < way
        s = model.score_matrix(qry, sup)
        accs.append(float(np.mean(np.argmax(s, axis=1) == np.asarray(truth))))
    if reduced:
        log.info("%d of %d validation episodes used fewer than %d classes", reduced, episodes, way)
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# main loop


@dataclass
class TrainResult:
    history: list
    best_val: float
    best_epoch: int
    steps: int
    best_state: dict
    stopped_early: bool


def _format_row(row):
    return "\t".join(
        f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in LOG_FIELDS
    )


def train_step(model, batch: PairBatch, opt: AdamState, cfg: TrainConfig, step: int):
    """Forward, backward, clip and update on one batch; returns (loss, pair accuracy, clip report)."""
    params = model.params.tensors
    model.params.zero_grad()
    logits = model.pair_logits(batch.xs, batch.ys, train=True, seed=cfg.seed, step=step)
    loss = T.bce_with_logits(logits, batch.labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")
    T.backward(loss)
    report = clip_gradients(params, cfg.clip)
    adam_step(params, {k: t.grad for k, t in params.items()}, opt)
    acc = float(np.mean((logits.data > 0) == (batch.labels > 0.5)))
    return value, acc, report


def run_training(model, train_split: DatasetSplit, val_split: DatasetSplit | None, cfg: TrainConfig, *,
                 out_dir=None, stop_at_train_accuracy=None, on_epoch=None) -> TrainResult:
    """Train with the stepped schedule until validation stops improving.

    Validation runs once per epoch.  Training stops once ``patience``
    consecutive validations fail to improve, when ``max_epochs`` or
    ``max_steps`` is reached, or, if given, when an epoch's mean training
    pair accuracy reaches ``stop_at_train_accuracy``.  With ``out_dir`` the
    per-epoch log and the best checkpoint are written there.
    """
    from .checkpoint import save_checkpoint

    if val_split is not None:
        overlap = set(train_split.alphabets) & set(val_split.alphabets)
        if overlap:
            raise ContractError(f"training and validation share alphabets: {sorted(overlap)}")
    rng = np.random.default_rng(cfg.seed)
    val_rng_seed = cfg.seed + 1
    opt = AdamState(lr=cfg.lr)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.tsv").write_text("\t".join(LOG_FIELDS) + "\n")
    history, best_val, best_epoch, bad, step = [], -1.0, -1, 0, 0
    best_state = model.params.state()
    stopped_early = False
    for epoch in range(cfg.max_epochs):
        opt.lr = learning_rate(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every)
        losses, accs = [], []
        for _ in range(cfg.batches_per_epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = sample_pair_batch(train_split, cfg.batch_size, rng)
            try:
                loss, acc, _ = train_step(model, batch, opt, cfg, step)
            except NumericError:
                if out:
                    save_checkpoint(out / "diagnostic.amck", model, cfg, {"epoch": epoch, "step": step})
                raise
            losses.append(loss)
            accs.append(acc)
            step += 1
        if not losses:
            break
        val = float("nan")
        if val_split is not None:
            val = validate(model, val_split, cfg.val_episodes, cfg.val_way, np.random.default_rng(val_rng_seed))
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": float(np.mean(losses)),
               "train_pair_acc": float(np.mean(accs)), "val_acc": val}
        history.append(row)
        log.info(_format_row(row))
        if out:
            with open(out / "train_log.tsv", "a") as fh:
                fh.write(_format_row(row) + "\n")
        if on_epoch:
            on_epoch(row)
        score = val if val_split is not None else -row["train_loss"]
        if score > best_val:
            best_val, best_epoch, bad = score, epoch, 0
            best_state = model.params.state()
            if out:
                save_checkpoint(out / "best.amck", model, cfg, {"epoch": epoch, "val_acc": val})
        else:
            bad += 1
            if val_split is not None and bad > cfg.patience:
                stopped_early = True
                break
        if stop_at_train_accuracy is not None and row["train_pair_acc"] >= stop_at_train_accuracy:
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(history, best_val, best_epoch, step, best_state, stopped_early)
