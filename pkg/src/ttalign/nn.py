"""Model components: linear layers, batch norm, dropout, and the shared-backbone
classifier with one main head and a list of pretext heads.

The backbone is a per-channel temporal convolution realized as unfold + matmul,
followed by batch norm, ReLU, a channel-mixing linear layer, a second norm/ReLU,
and a temporal mean-pool down to one feature vector per input window sequence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

MAGIC = b"TTA1"
CHECKPOINT_VERSION = 1


class Linear:
    """y = x @ W + b with W of shape (fan_in, fan_out).

    Layers feeding straight into a batch norm are built without a bias: the batch
    mean subtraction cancels any constant row shift, so such a bias would carry an
    identically-zero gradient.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Tensor(rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.matmul(x, self.w)
        return ad.add(h, self.b) if self.b is not None else h

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        return out


class BatchNorm:
    """Per-feature batch normalization over 2-D (batch, features) inputs.

    Train mode normalizes by the batch mean and biased batch variance and, unless
    suppressed, folds them into the running statistics with
    ``new = (1 - momentum) * old + momentum * batch``. Eval mode normalizes by the
    stored running statistics and never mutates them.
    """

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ConfigError(f"batch norm eps must be positive, got {eps}")
        if not 0 < momentum < 1:
            raise ConfigError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        if train:
            mu = ad.mean(x, axis=0)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.mul(centered, centered), axis=0)
            xhat = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
            if update_stats:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
                self.running_var = (1.0 - m) * self.running_var + m * var.data
        else:
            sigma = np.sqrt(self.running_var + self.eps)
            xhat = ad.div(ad.sub(x, Tensor(self.running_mean)), Tensor(sigma))
        return ad.add(ad.mul(xhat, self.gamma), self.beta)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when no generator is supplied or p == 0."""
    if rng is None or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(mask))


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    samples: int = 200
    window: int = 25
    stride: int = 25
    hidden: int = 32
    features: int = 64
    n_main: int = 4
    ssl_dims: tuple[int, ...] = ()
    head_layers: int = 1
    dropout: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_seed: int = 0

    def __post_init__(self):
        if self.head_layers not in (1, 2, 3):
            raise ConfigError(f"head_layers must be 1, 2, or 3, got {self.head_layers}")
        if self.samples < self.window or (self.samples - self.window) % self.stride != 0:
            raise ConfigError(
                f"window {self.window} / stride {self.stride} do not tile {self.samples} samples"
            )


class Model:
    """Shared backbone + main head + pretext heads.

    All heads read the same feature vector, so updating a pretext head never moves
    the main head's logits for a fixed backbone.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.conv = Linear(cfg.window, cfg.hidden, rng, bias=False)
        self.bn1 = BatchNorm(cfg.hidden, cfg.bn_momentum, cfg.bn_eps)
        self.mix = Linear(cfg.channels * cfg.hidden, cfg.features, rng, bias=False)
        # learned window-position term; zero-initialized so a fresh model's
        # features are position-uniform until training moves it
        k = (cfg.samples - cfg.window) // cfg.stride + 1
        self.pos = Tensor(np.zeros((k, cfg.features)), requires_grad=True)
        self.bn2 = BatchNorm(cfg.features, cfg.bn_momentum, cfg.bn_eps)
        self.head: list[Linear] = []
        for i in range(cfg.head_layers):
            fan_out = cfg.n_main if i == cfg.head_layers - 1 else cfg.features
            self.head.append(Linear(cfg.features, fan_out, rng))
        self.ssl_heads = [Linear(cfg.features, d, rng) for d in cfg.ssl_dims]

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.conv.named_parameters("conv")
        out += [("bn1.gamma", self.bn1.gamma), ("bn1.beta", self.bn1.beta)]
        out += self.mix.named_parameters("mix")
        out += [("pos", self.pos)]
        out += [("bn2.gamma", self.bn2.gamma), ("bn2.beta", self.bn2.beta)]
        for i, layer in enumerate(self.head):
            out += layer.named_parameters(f"head.{i}")
        for i, layer in enumerate(self.ssl_heads):
            out += layer.named_parameters(f"ssl.{i}")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("bn1.running_mean", self.bn1.running_mean),
            ("bn1.running_var", self.bn1.running_var),
            ("bn2.running_mean", self.bn2.running_mean),
            ("bn2.running_var", self.bn2.running_var),
        ]

    def param_groups(self) -> dict[str, list[str]]:
        """Partition of parameter names into BN affine params and everything else."""
        bn = {"bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta"}
        names = [n for n, _ in self.named_parameters()]
        return {
            "bn_affine": [n for n in names if n in bn],
            "other": [n for n in names if n not in bn],
        }

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward passes --------------------------------------------------------

    def features(
        self,
        x: Tensor,
        train: bool,
        dropout_rng: np.random.Generator | None = None,
        update_stats: bool = True,
    ) -> Tensor:
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.channels or x.shape[2] != cfg.samples:
            raise ContractError(
                f"expected input (B, {cfg.channels}, {cfg.samples}), got {x.shape}"
            )
        b = x.shape[0]
        k = (cfg.samples - cfg.window) // cfg.stride + 1
        win = ad.unfold(x, cfg.window, cfg.stride)                  # (B, C, K, W)
        h = self.conv(ad.reshape(win, (b * cfg.channels * k, cfg.window)))
        h = ad.relu(self.bn1(h, train, update_stats))               # (B*C*K, H)
        h = ad.reshape(h, (b, cfg.channels, k, cfg.hidden))
        h = ad.transpose(h, (0, 2, 1, 3))                           # (B, K, C, H)
        h = self.mix(ad.reshape(h, (b * k, cfg.channels * cfg.hidden)))
        h = ad.add(ad.reshape(h, (b, k, cfg.features)), self.pos)   # window-position term
        h = ad.relu(self.bn2(ad.reshape(h, (b * k, cfg.features)), train, update_stats))
        h = ad.mean(ad.reshape(h, (b, k, cfg.features)), axis=1)    # (B, D)
        if train:
            h = dropout(h, cfg.dropout, dropout_rng)
        return h

    def main_logits(self, feats: Tensor) -> Tensor:
        h = feats
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = ad.relu(h)
        return h

    def ssl_logits(self, index: int, feats: Tensor) -> Tensor:
        if not 0 <= index < len(self.ssl_heads):
            raise ContractError(f"no pretext head at index {index}")
        return self.ssl_heads[index](feats)

    def forward_main(
        self,
        x: Tensor,
        train: bool,
        dropout_rng: np.random.Generator | None = None,
        update_stats: bool = True,
    ) -> Tensor:
        return self.main_logits(self.features(x, train, dropout_rng, update_stats))

    def predict_proba(self, data: np.ndarray) -> np.ndarray:
        """Eval-mode class probabilities for a (B, C, T) array; no state is touched."""
        with ad.no_grad(), ad.fresh_tape():
            return ad.softmax(self.forward_main(Tensor(data), train=False), axis=1).data


# ---------------------------------------------------------------------------
# snapshot / restore
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt_state: dict | None = None


def snapshot(model: Model, optimizer=None) -> Snapshot:
    return Snapshot(
        params={n: t.data.copy() for n, t in model.named_parameters()},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        opt_state=optimizer.state_dict() if optimizer is not None else None,
    )


def restore(model: Model, snap: Snapshot, optimizer=None) -> None:
    names = {n for n, _ in model.named_parameters()}
    if names != set(snap.params):
        raise ContractError("snapshot parameter set does not match the model")
    for n, t in model.named_parameters():
        np.copyto(t.data, snap.params[n])
    for n, b in model.named_buffers():
        np.copyto(b, snap.buffers[n])
    if optimizer is not None and snap.opt_state is not None:
        optimizer.load_state_dict(snap.opt_state)


def clone_model(model: Model) -> Model:
    fresh = Model(model.cfg)
    restore(fresh, snapshot(model))
    return fresh


def collect_bn_params(model: Model, include_stats: bool = False):
    """BN affine parameters (the Tent-adaptable set), optionally with stat buffers."""
    params = [(n, t) for n, t in model.named_parameters() if n in set(model.param_groups()["bn_affine"])]
    if include_stats:
        return params, model.named_buffers()
    return params


# ---------------------------------------------------------------------------
# checkpoint file format: magic, version, JSON header, float64 little-endian blobs
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    header = {
        "config": asdict(model.cfg),
        "params": [[n, list(t.shape)] for n, t in model.named_parameters()],
        "buffers": [[n, list(b.shape)] for n, b in model.named_buffers()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in model.named_parameters():
            fh.write(t.data.astype("<f8").tobytes())
        for _, b in model.named_buffers():
            fh.write(b.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ContractError(f"{path}: not a model checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        cfg_dict = dict(header["config"])
        cfg_dict["ssl_dims"] = tuple(cfg_dict["ssl_dims"])
        model = Model(ModelConfig(**cfg_dict))
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            target = dict(model.named_parameters())[name]
            np.copyto(target.data, raw)
        for name, shape in header["buffers"]:
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            np.copyto(dict(model.named_buffers())[name], raw)
    return model
