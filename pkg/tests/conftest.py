import numpy as np
import pytest

from attentive_matcher.config import ModelConfig
from attentive_matcher.params import init_params
from attentive_matcher.synthetic import write_corpus


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Small Omniglot-layout corpus: 5 background alphabets, 2 evaluation alphabets of 22 classes."""
    root = tmp_path_factory.mktemp("corpus")
    return write_corpus(root, background=[6, 6, 6, 6, 6], evaluation=[22, 22], seed=3)


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """Image-only corpus with the standard Omniglot alphabet and class counts (takes most of a minute)."""
    return write_corpus(tmp_path_factory.mktemp("full"), seed=5, strokes=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(modality="images", **kw):
    base = dict(modality=modality, image_size=8, channels=(4, 4, 8, 8), d_model=8, heads=2, rounds=2,
                block_hidden=12, agg_dim=6, agg_hidden=10, point_hidden=6)
    base.update(kw)
    return ModelConfig(**base)


def tiny_params(modality="images", seed=0, dtype=np.float64, **kw):
    return init_params(tiny_config(modality, **kw), seed, dtype)


def with_params(params, names, body):
    """Wrap ``body(params, *inputs)`` so the named parameters become extra differentiable inputs.

    The remaining parameters are cast to the dtype of the first input, so the
    same wrapper serves the float32 analytic path and the float64 shadow path.
    """
    from attentive_matcher.params import ModelParams
    from attentive_matcher.tensor import Tensor

    def fn(*ts):
        k = len(ts) - len(names)
        dtype = ts[0].dtype
        tensors = {n: Tensor(t.data.astype(dtype), dtype=dtype) for n, t in params.items()}
        tensors.update(zip(names, ts[k:]))
        return body(ModelParams(params.config, tensors), *ts[:k])

    return fn


def relu_margin(fn, arrays):
    """Smallest ``|input|`` seen by any ReLU while evaluating ``fn`` once in double precision.

    Central differences are only meaningful away from the kink at zero.
    """
    from attentive_matcher import tensor as T

    seen, relu = [], T.relu

    def spy(x):
        seen.append(float(np.abs(x.data).min()))
        return relu(x)

    T.relu = spy
    try:
        fn(*[T.Tensor(a) for a in arrays])
    finally:
        T.relu = relu
    return min(seen, default=np.inf)


def param_arrays(params, names):
    return [params[n].data.astype(np.float64) for n in names]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
