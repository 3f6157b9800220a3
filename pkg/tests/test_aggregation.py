import numpy as np
import pytest
from conftest import param_arrays, tiny_params, with_params
from hypothesis import given, settings
from hypothesis import strategies as st

from attentive_matcher import tensor as T
from attentive_matcher.aggregation import (
    aggregate_logits,
    aggregate_score,
    attention_weights,
    pooled_features,
    to_probability,
)
from attentive_matcher.errors import ContractError
from attentive_matcher.params import ModelParams
from attentive_matcher.tensor import Tensor, check_gradients


def relu(x):
    return np.maximum(x, 0)


def mlp_np(x, p, prefix):
    h = relu(x @ p[f"{prefix}.fc1.w"].data + p[f"{prefix}.fc1.b"].data)
    return h @ p[f"{prefix}.fc2.w"].data + p[f"{prefix}.fc2.b"].data


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_gates_sum_to_one_per_feature(n, seed):
    params = tiny_params("points", seed=seed % 7)
    z = np.random.default_rng(seed).standard_normal((n, 8)) * 5
    alpha = attention_weights(Tensor(z), params).data[0]
    assert alpha.shape == (n, 6)
    assert np.abs(alpha.sum(axis=0) - 1).max() <= 1e-12


def test_empty_token_set_refused():
    with pytest.raises(ContractError):
        attention_weights(Tensor(np.zeros((0, 8))), tiny_params("points"))


def test_two_tokens_two_features_by_hand():
    params = tiny_params("points", agg_dim=2, agg_hidden=3)
    z = np.array([[1.0, -1.0, 0, 0, 0, 0, 0, 0], [0.5, 2.0, 0, 0, 0, 0, 0, 0]])
    g = mlp_np(z, params, "agg.g")
    f = mlp_np(z, params, "agg.f")
    alpha = np.exp(g) / np.exp(g).sum(axis=0)
    pooled = (alpha * f).sum(axis=0)
    logit = mlp_np(pooled[None], params, "agg.h")[0, 0]
    np.testing.assert_allclose(pooled_features(Tensor(z), params).data[0], pooled, rtol=1e-12)
    got = aggregate_score(Tensor(z[:1]), Tensor(z[1:]), params)
    np.testing.assert_allclose(got, [1 / (1 + np.exp(-logit))], rtol=1e-12)


def test_pool_ignores_token_order_and_side(rng):
    params = tiny_params("points")
    z = rng.standard_normal((7, 8))
    ref = aggregate_logits(Tensor(z[:3]), Tensor(z[3:]), params).data
    for _ in range(20):
        p = z[rng.permutation(7)]
        cut = int(rng.integers(1, 7))
        np.testing.assert_allclose(aggregate_logits(Tensor(p[:cut]), Tensor(p[cut:]), params).data, ref,
                                   atol=1e-12)


def test_batch_of_pairs(rng):
    params = tiny_params("points")
    a, b = rng.standard_normal((3, 4, 8)), rng.standard_normal((3, 5, 8))
    batched = aggregate_logits(Tensor(a), Tensor(b), params).data
    single = [aggregate_logits(Tensor(a[i]), Tensor(b[i]), params).data[0] for i in range(3)]
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_probability_stays_inside_open_interval():
    p = to_probability([-1e6, 0.0, 1e6])
    assert 0 < p[0] < 1e-12 and p[1] == 0.5 and 1 - 1e-12 < p[2] < 1


@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
@pytest.mark.parametrize("seed", range(5))
def test_aggregation_gradients(seed, dtype, tol):
    params = tiny_params("points", seed=seed, agg_dim=4)
    names = ["agg.g.fc1.w", "agg.g.fc2.w", "agg.f.fc2.w", "agg.h.fc1.w", "agg.h.fc2.b"]
    rng = np.random.default_rng(seed)
    fn = with_params(params, names, lambda p, a, b: aggregate_logits(a, b, p))
    arrays = [rng.standard_normal((3, 8)), rng.standard_normal((4, 8))] + param_arrays(params, names)
    report = check_gradients(fn, arrays, dtype=dtype, seed=seed, max_entries=12)
    assert report.max_rel_error <= tol, str(report)


def test_params_container_roundtrip():
    params = tiny_params("points")
    state = params.state()
    clone = ModelParams(params.config, {k: Tensor(np.zeros_like(v.data), True) for k, v in params.items()})
    clone.load_state(state)
    for k in params.names():
        np.testing.assert_array_equal(clone[k].data, params[k].data.astype(clone[k].dtype))
    assert params.count() == sum(v.size for v in state.values())


def test_score_is_detached(rng):
    params = tiny_params("points")
    s = aggregate_score(Tensor(rng.standard_normal((2, 8)), requires_grad=True), Tensor(rng.standard_normal((2, 8))),
                        params)
    assert isinstance(s, np.ndarray) and s.dtype == np.float64
    assert T.grad_enabled()


def test_gates_of_one_token_are_ones(rng):
    alpha = attention_weights(Tensor(rng.standard_normal((1, 8))), tiny_params("points")).data[0]
    np.testing.assert_array_equal(alpha, 1.0)


def test_gates_of_identical_tokens_are_equal(rng):
    z = np.repeat(rng.standard_normal((1, 8)), 4, axis=0)
    alpha = attention_weights(Tensor(z), tiny_params("points")).data[0]
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)


def test_gates_match_scalar_softmax(rng):
    params = tiny_params("points", agg_dim=3)
    z = rng.standard_normal((5, 8))
    g = mlp_np(z, params, "agg.g")
    alpha = attention_weights(Tensor(z), params).data[0]
    for k in range(3):
        for i in range(5):
            ref = np.exp(g[i, k]) / sum(np.exp(g[j, k]) for j in range(5))
            assert abs(alpha[i, k] - ref) <= 1e-6
