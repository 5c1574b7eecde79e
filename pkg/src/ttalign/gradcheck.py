"""Finite-difference verification of every reverse-mode gradient path.

Each check builds a deterministic scalar loss, computes analytic gradients on
the tape, then re-evaluates the loss under central differences for every
component of every parameter (and of the input, where the input path is the
interesting one).  Agreement is summarized per tensor as an L2 relative error.

Stochastic pieces (dropout) are made repeatable by reseeding the mask
generator inside the loss closure, so the analytic pass and all 2N numeric
evaluations see the same mask.  Batch-norm forwards run in train mode with
``update_stats=False``: the batch-statistics gradient path is exercised while
the closure stays side-effect free.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm, Linear, Model, ModelConfig, dropout
from .training import cross_entropy

EPS = 1e-5
TOLERANCE = 1e-5


def central_difference(tensor: Tensor, value_fn, eps: float = EPS) -> np.ndarray:
    """Numeric gradient of ``value_fn()`` w.r.t. every component of ``tensor``."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value_fn()
        flat[i] = orig - eps
        lo = value_fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(tensor.data.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom


def _check(tensors: dict[str, Tensor], loss_fn) -> dict[str, float]:
    """Compare tape gradients with central differences for each named tensor."""
    for t in tensors.values():
        t.zero_grad()
    with ad.fresh_tape():
        ad.backward(loss_fn())
    analytic = {name: t.grad.copy() for name, t in tensors.items()}

    def value() -> float:
        with ad.no_grad(), ad.fresh_tape():
            return float(loss_fn().data)

    return {
        name: relative_error(analytic[name], central_difference(t, value))
        for name, t in tensors.items()
    }


# ---------------------------------------------------------------------------
# individual layer types
# ---------------------------------------------------------------------------

def _check_linear() -> dict[str, float]:
    rng = np.random.default_rng(11)
    layer = Linear(7, 5, rng)
    x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
    labels = np.array([0, 1, 2, 4])
    tensors = {name: t for name, t in layer.named_parameters("linear")}
    tensors["linear.input"] = x
    return _check(tensors, lambda: cross_entropy(layer(x), labels))


def _check_linear_no_bias() -> dict[str, float]:
    rng = np.random.default_rng(12)
    layer = Linear(6, 3, rng, bias=False)
    x = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    labels = np.array([0, 1, 2, 0, 1])
    tensors = {name: t for name, t in layer.named_parameters("linear_nb")}
    tensors["linear_nb.input"] = x
    return _check(tensors, lambda: cross_entropy(layer(x), labels))


def _check_batchnorm(train: bool) -> dict[str, float]:
    rng = np.random.default_rng(13)
    bn = BatchNorm(6)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 6)
    bn.beta.data[:] = rng.standard_normal(6)
    bn.running_mean[:] = rng.standard_normal(6)
    bn.running_var[:] = rng.uniform(0.5, 2.0, 6)
    x = Tensor(rng.standard_normal((8, 6)), requires_grad=True)
    labels = rng.integers(0, 6, 8)
    prefix = "bn_train" if train else "bn_eval"
    tensors = {f"{prefix}.gamma": bn.gamma, f"{prefix}.beta": bn.beta, f"{prefix}.input": x}
    return _check(
        tensors,
        lambda: cross_entropy(bn(x, train=train, update_stats=False), labels),
    )


def _check_dropout() -> dict[str, float]:
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((6, 9)), requires_grad=True)
    labels = rng.integers(0, 9, 6)

    def loss():
        mask_rng = np.random.default_rng(99)
        return cross_entropy(dropout(x, 0.4, mask_rng), labels)

    return _check({"dropout.input": x}, loss)


def _check_relu() -> dict[str, float]:
    rng = np.random.default_rng(15)
    # keep values away from the kink so central differences stay valid
    data = rng.standard_normal((5, 8))
    data[np.abs(data) < 0.05] = 0.1
    x = Tensor(data, requires_grad=True)
    labels = rng.integers(0, 8, 5)
    return _check({"relu.input": x}, lambda: cross_entropy(ad.relu(x), labels))


# ---------------------------------------------------------------------------
# full backbone + heads
# ---------------------------------------------------------------------------

def _check_full_stack() -> dict[str, float]:
    cfg = ModelConfig(
        channels=3,
        samples=50,
        window=25,
        stride=25,
        hidden=4,
        features=6,
        n_main=3,
        ssl_dims=(4, 3),
        head_layers=2,
        dropout=0.3,
        init_seed=21,
    )
    model = Model(cfg)
    rng = np.random.default_rng(22)
    x = Tensor(rng.standard_normal((4, 3, 50)), requires_grad=True)
    y_main = np.array([0, 1, 2, 1])
    y_ssl = [np.array([0, 3, 1, 2]), np.array([2, 0, 1, 2])]
    weights = (0.6, 0.4)

    def loss():
        mask_rng = np.random.default_rng(77)
        feats = model.features(x, train=True, dropout_rng=mask_rng, update_stats=False)
        total = cross_entropy(model.main_logits(feats), y_main)
        for j, w in enumerate(weights):
            total = ad.add(total, ad.scale(cross_entropy(model.ssl_logits(j, feats), y_ssl[j]), w))
        return total

    tensors = {f"stack.{name}": t for name, t in model.named_parameters()}
    tensors["stack.input"] = x
    return _check(tensors, loss)


def run_gradcheck() -> dict[str, float]:
    """Relative error per checked tensor, covering every layer type and the stack."""
    results: dict[str, float] = {}
    results.update(_check_linear())
    results.update(_check_linear_no_bias())
    results.update(_check_batchnorm(train=True))
    results.update(_check_batchnorm(train=False))
    results.update(_check_dropout())
    results.update(_check_relu())
    results.update(_check_full_stack())
    return results


def max_relative_error(results: dict[str, float]) -> float:
    return max(results.values())
