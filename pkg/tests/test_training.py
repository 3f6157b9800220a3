import math

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from attentive_matcher.config import TrainConfig
from attentive_matcher.data import CharacterImage, DatasetSplit
from attentive_matcher.errors import ContractError, DimensionError, NumericError
from attentive_matcher.model import AttentiveMatcher
from attentive_matcher.tensor import Tensor
from attentive_matcher.training import (
    AdamState,
    adam_step,
    bce_loss,
    clip_gradients,
    global_norm,
    learning_rate,
    run_training,
    sample_episode,
    sample_pair_batch,
    validate,
)


def toy_split(name="training", n_alpha=2, n_cls=4, per=3, size=8, alpha_offset=0, seed=0):
    """Classes are distinct fixed patterns; instances add a little noise."""
    rng = np.random.default_rng(seed)
    items, names, alphas = [], [], []
    cid = 0
    for a in range(n_alpha):
        alphas.append(f"A{a + alpha_offset}")
        for _ in range(n_cls):
            base = (rng.random((size, size)) > 0.6).astype(np.float32)
            for i in range(per):
                noisy = np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1).astype(np.float32)
                items.append(CharacterImage(noisy, cid, a + alpha_offset, i, alphas[-1], f"c{cid}"))
            names.append(f"{alphas[-1]}/c{cid}")
            cid += 1
    return DatasetSplit(name, items, alphas, names)


# -- pair batches ------------------------------------------------------------


def test_pair_batch_is_balanced_and_labelled_correctly(rng):
    split = toy_split()
    batch = sample_pair_batch(split, 32, rng)
    assert len(batch) == 32 and batch.labels.sum() == 16
    for x, y, lab in zip(batch.xs, batch.ys, batch.labels):
        assert (x.class_id == y.class_id) == bool(lab)
        if lab:
            assert x.instance_id != y.instance_id


def test_pair_batch_contracts(rng):
    with pytest.raises(ContractError):
        sample_pair_batch(toy_split(), 3, rng)
    with pytest.raises(ContractError):
        sample_pair_batch(toy_split(n_alpha=1, n_cls=1), 4, rng)


def test_pair_batches_repeat_under_a_seed():
    split = toy_split()
    a = sample_pair_batch(split, 8, np.random.default_rng(5))
    b = sample_pair_batch(split, 8, np.random.default_rng(5))
    assert [x.class_id for x in a.xs] == [x.class_id for x in b.xs]


# -- loss --------------------------------------------------------------------


def test_bce_known_values():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2))
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)


@pytest.mark.parametrize("s", [0.0, 1.0, float("nan")])
def test_bce_rejects_saturated_scores(s):
    with pytest.raises(NumericError):
        bce_loss([s], [1])


# -- clipping ----------------------------------------------------------------


def _grads(rng, scale):
    ts = [Tensor(np.zeros(s), requires_grad=True) for s in [(3, 4), (5,), (2, 2, 2)]]
    for t in ts:
        t.grad = rng.standard_normal(t.shape) * scale
    return ts


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e4), st.integers(0, 1000))
def test_clip_bounds_global_norm(scale, seed):
    ts = _grads(np.random.default_rng(seed), scale)
    before = [t.grad.copy() for t in ts]
    report = clip_gradients(ts, 2.5)
    after = global_norm([t.grad for t in ts])
    assert after <= 2.5 + 1e-6
    if report.norm <= 2.5:
        assert not report.clipped
        for b, t in zip(before, ts):
            np.testing.assert_array_equal(b, t.grad)
    else:
        # direction is preserved
        for b, t in zip(before, ts):
            np.testing.assert_allclose(t.grad, b * report.scale)


def test_clip_rejects_non_finite(rng):
    ts = _grads(rng, 1.0)
    ts[0].grad[0, 0] = np.inf
    with pytest.raises(NumericError):
        clip_gradients(ts)


# -- Adam --------------------------------------------------------------------


def scalar_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_matches_scalar_reference_over_100_steps(rng):
    grads = rng.standard_normal((100, 3))
    p = {"w": np.array([0.5, -1.0, 2.0])}
    state = AdamState(lr=1e-3)
    for g in grads:
        adam_step(p, {"w": g}, state)
    for j in range(3):
        assert p["w"][j] == pytest.approx(scalar_adam([0.5, -1.0, 2.0][j], grads[:, j]), rel=1e-12, abs=1e-14)


def test_adam_first_step_moves_by_lr(rng):
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": np.array([3.0, -0.1, 1e-3, 50.0])}, AdamState(lr=0.01))
    np.testing.assert_allclose(np.abs(p["w"]), 0.01, rtol=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())


# -- schedule ----------------------------------------------------------------


def test_stepped_schedule_exact_values():
    got = [learning_rate(e) for e in (0, 99, 100, 250)]
    assert got == [1e-4, 1e-4, 1e-4 * 0.1, 1e-4 * 0.1 * 0.1]
    assert got[2] == pytest.approx(1e-5, rel=1e-15) and got[3] == pytest.approx(1e-6, rel=1e-15)


# -- validation episodes -----------------------------------------------------


def test_episode_is_within_one_alphabet(rng):
    split = toy_split(n_alpha=3)
    sup, qry, truth, n = sample_episode(split, 20, rng)
    assert n == 4 and len({x.alphabet_id for x in sup + qry}) == 1
    for q, t in enumerate(truth):
        assert qry[q].class_id == sup[t].class_id
        assert qry[q].instance_id != sup[t].instance_id


class _PerfectScorer:
    def score_matrix(self, queries, supports):
        return np.array([[float(q.class_id == s.class_id) for s in supports] for q in queries])


def test_validate_with_perfect_scorer(rng):
    assert validate(_PerfectScorer(), toy_split(), 10, 20, rng) == 1.0


def test_validate_needs_data(rng):
    with pytest.raises(ContractError):
        validate(_PerfectScorer(), DatasetSplit("validation", [], []), 1, 20, rng)


# -- main loop ---------------------------------------------------------------


def _tiny_run(**kw):
    base = dict(batch_size=8, batches_per_epoch=3, max_epochs=4, val_episodes=3, val_way=4, lr=1e-3, patience=20)
    base.update(kw)
    return TrainConfig(**base)


def test_training_writes_log_and_checkpoint(tmp_path):
    model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
    res = run_training(model, toy_split(), toy_split("validation", 1, alpha_offset=5, seed=1), _tiny_run(),
                       out_dir=tmp_path)
    assert res.steps == 12 and len(res.history) == 4
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "lr", "train_loss", "train_pair_acc", "val_acc"]
    assert len(lines) == 5
    assert (tmp_path / "best.amck").is_file()


def test_training_is_reproducible():
    runs = []
    for _ in range(2):
        model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
        run_training(model, toy_split(), None, _tiny_run(max_epochs=2))
        runs.append(model.params.state())
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_zero_patience_stops_after_first_non_improvement():
    model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
    # a perfect score in epoch 0 cannot be beaten
    val = toy_split("validation", 1, alpha_offset=5, seed=1)
    seen = []
    res = run_training(model, toy_split(), val, _tiny_run(patience=0, max_epochs=50), on_epoch=seen.append)
    accs = [row["val_acc"] for row in seen]
    assert res.stopped_early
    assert accs[-1] <= max(accs[:-1])
    assert all(b > a for a, b in zip(accs[:-2], accs[1:-1]))


def test_training_refuses_shared_alphabets():
    model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
    with pytest.raises(ContractError):
        run_training(model, toy_split(), toy_split("validation"), _tiny_run())


def test_max_steps_caps_training():
    model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
    res = run_training(model, toy_split(), None, _tiny_run(max_steps=5))
    assert res.steps == 5


def test_loss_decreases_on_toy_problem():
    model = AttentiveMatcher.create(tiny_config(rounds=1), seed=0)
    res = run_training(model, toy_split(), None, _tiny_run(max_epochs=15, batches_per_epoch=5, batch_size=16))
    losses = [r["train_loss"] for r in res.history]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_train_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=7)
    with pytest.raises(ContractError):
        TrainConfig(patience=-1)


# -- closed-form cases -------------------------------------------------------


def test_full_batch_is_half_positive(rng):
    batch = sample_pair_batch(toy_split(n_alpha=3, n_cls=5), 256, rng)
    assert int(batch.labels.sum()) == 128 and len(batch) - int(batch.labels.sum()) == 128


def test_fused_loss_cases(rng):
    from attentive_matcher.training import bce_from_logits

    y = (rng.random(64) > 0.5).astype(float)
    margin = np.where(y == 1, 10.0, -10.0)
    assert float(bce_from_logits(Tensor(margin), y).data) < 1e-4
    z = rng.standard_normal(64) * 3
    ref = np.mean([-(yi * math.log(1 / (1 + math.exp(-zi))) + (1 - yi) * math.log(1 - 1 / (1 + math.exp(-zi))))
                   for zi, yi in zip(z, y)])
    assert abs(float(bce_from_logits(Tensor(z), y).data) - ref) <= 1e-6
    assert float(bce_from_logits(Tensor(np.zeros(4)), [1, 0, 1, 0]).data) == pytest.approx(math.log(2))


@pytest.mark.parametrize("norm", [1.0, 5.0])
def test_clip_at_two_norms(rng, norm):
    ts = _grads(rng, 1.0)
    scale = norm / global_norm([t.grad for t in ts])
    for t in ts:
        t.grad *= scale
    before = np.concatenate([t.grad.ravel() for t in ts])
    clip_gradients(ts, 2.5)
    after = np.concatenate([t.grad.ravel() for t in ts])
    if norm <= 2.5:
        np.testing.assert_array_equal(after, before)
    else:
        assert abs(np.linalg.norm(after) - 2.5) <= 1e-6
    cosine = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
    assert abs(cosine - 1) <= 1e-6


def test_adam_zero_gradient_leaves_parameters(rng):
    p = {"w": rng.standard_normal(5)}
    before = p["w"].copy()
    state = AdamState(lr=1e-2)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(5)}, state)
    np.testing.assert_array_equal(p["w"], before)


def test_schedule_at_epoch_150():
    assert learning_rate(150) == pytest.approx(1e-5, rel=1e-15)


def test_episodes_repeat_under_a_seed():
    split = toy_split(n_alpha=2, n_cls=6)
    a = sample_episode(split, 5, np.random.default_rng(8))
    b = sample_episode(split, 5, np.random.default_rng(8))
    assert [x.class_id for x in a[0]] == [x.class_id for x in b[0]]
    assert [x.instance_id for x in a[1]] == [x.instance_id for x in b[1]]
    assert list(a[2]) == list(b[2])
