"""Linear probing of frozen encoders."""
from __future__ import annotations

import numpy as np

from avfuse.errors import ContractError
from avfuse.numerics.functional import softmax
from avfuse.numerics.nn import Module
from avfuse.numerics.tensor import Tensor, no_grad


def extract_features(encoder: Module, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode features; restores the encoder's train/eval flag afterwards."""
    was_training = encoder.training
    encoder.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(encoder(Tensor(x[i:i + batch_size])).data)
    encoder.train(was_training)
    return np.concatenate(out)


def fit_softmax_regression(feats: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 300,
                           lr: float = 0.5, weight_decay: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy; deterministic."""
    n, d = feats.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]
    for _ in range(epochs):
        p = softmax(feats @ w + b)
        g = (p - onehot) / n
        w -= lr * (feats.T @ g + weight_decay * w)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(encoder: Module | None, train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray, epochs: int = 300,
                 feature_dim: int | None = None) -> float:
    """Test accuracy of a fresh linear classifier on frozen (standardised) features.

    ``encoder=None`` probes the flattened raw inputs.
    """
    if len(train_x) == 0 or len(test_x) == 0:
        raise ContractError("probe needs non-empty train and test sets")
    if encoder is None:
        f_train = train_x.reshape(len(train_x), -1)
        f_test = test_x.reshape(len(test_x), -1)
    else:
        f_train = extract_features(encoder, train_x)
        f_test = extract_features(encoder, test_x)
    if f_train.ndim != 2 or f_train.shape[1] != f_test.shape[1]:
        raise ContractError(f"feature shapes disagree: {f_train.shape} vs {f_test.shape}")
    if feature_dim is not None and f_train.shape[1] != feature_dim:
        raise ContractError(f"encoder emits {f_train.shape[1]} features, expected {feature_dim}")
    mu = f_train.mean(axis=0)
    sd = f_train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    f_train = (f_train - mu) / sd
    f_test = (f_test - mu) / sd
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    w, b = fit_softmax_regression(f_train, train_y, n_classes, epochs)
    pred = np.argmax(f_test @ w + b, axis=1)
    return float(np.mean(pred == test_y))
