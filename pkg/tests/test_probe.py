import hashlib

import numpy as np
import pytest

from avfuse.data.checkpoint import encode, model_tensors
from avfuse.errors import ContractError
from avfuse.fusion.probe import linear_probe
from avfuse.models import Encoder, ModelConfig
from avfuse.numerics.nn import Module


class Identity(Module):
    def forward(self, x):
        return x


class Constant(Module):
    def forward(self, x):
        from avfuse.numerics import Tensor
        return Tensor(np.ones((x.shape[0], 3)))


def _separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    w = np.array([1.0, -2.0, 0.5, 0.0])
    y = (x @ w > 0).astype(int)
    keep = np.abs(x @ w) > 1.0       # margin
    return x[keep], y[keep]


def test_identity_on_separable_data():
    x, y = _separable()
    # brute-force witness that the set is separable
    w = np.array([1.0, -2.0, 0.5, 0.0])
    assert np.all((x @ w > 0) == y)
    half = len(x) // 2
    assert linear_probe(Identity(), x[:half], y[:half], x[half:], y[half:]) == 1.0


def test_constant_features_are_chance():
    rng = np.random.default_rng(1)
    k = 4
    y = np.repeat(np.arange(k), 50)
    x = rng.standard_normal((len(y), 2))
    acc = linear_probe(Constant(), x, y, x, y)
    assert abs(acc - 1 / k) <= 0.05


def test_probe_does_not_mutate_encoder():
    enc = Encoder(ModelConfig(input_shape=(1, 8, 8), channels=[4, 8]), np.random.default_rng(0))
    enc.train()
    before = hashlib.sha256(encode(*model_tensors(enc))).hexdigest()
    x = np.random.default_rng(1).standard_normal((40, 1, 8, 8))
    y = np.arange(40) % 3
    linear_probe(enc, x, y, x, y, epochs=20)
    assert hashlib.sha256(encode(*model_tensors(enc))).hexdigest() == before
    assert enc.training


def test_feature_dim_mismatch():
    x, y = _separable()
    with pytest.raises(ContractError):
        linear_probe(Identity(), x, y, x, y, feature_dim=5)


def test_empty_sets_rejected():
    with pytest.raises(ContractError):
        linear_probe(Identity(), np.zeros((0, 2)), np.zeros(0, int), np.zeros((2, 2)), np.zeros(2, int))
