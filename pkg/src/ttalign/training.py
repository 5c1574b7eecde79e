"""Stage-0 masked pretraining and Stage-I supervised + self-supervised fine-tuning.

The fine-tuning objective is the main cross-entropy plus a weighted sum of pretext
cross-entropies, all heads reading one shared backbone:

    L = CE(main) + sum_j w_j * CE(pretext_j)

Zero-weight pretext branches are skipped entirely (no view generation, no forward,
no RNG draws), so a run with all weights zero is bit-for-bit a supervised-only run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .metrics import auroc, cohens_kappa, monitoring_metric
from .nn import Linear, Model, restore, snapshot
from .optim import make_optimizer
from .pretext import TaskSpec, make_view


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy with mean reduction over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    return ad.scale(
        ad.sum_(ad.take_per_row(ad.log_softmax(logits, axis=1), labels)),
        -1.0 / labels.shape[0],
    )


def combined_loss(
    main_logits: Tensor,
    y,
    ssl_logits: list[Tensor],
    ssl_labels: list,
    weights,
) -> Tensor:
    """CE(main) + sum_j weights[j] * CE(ssl_j). Branch lists must align."""
    if not (len(ssl_logits) == len(ssl_labels) == len(weights)):
        raise ContractError(
            f"misaligned pretext branches: {len(ssl_logits)} logits, "
            f"{len(ssl_labels)} label sets, {len(weights)} weights"
        )
    loss = cross_entropy(main_logits, y)
    for w, logits, labels in zip(weights, ssl_logits, ssl_labels):
        loss = ad.add(loss, ad.scale(cross_entropy(logits, labels), float(w)))
    return loss


# ---------------------------------------------------------------------------
# stage 0: masked reconstruction pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.5
    patch: int = 25
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


def masked_pretrain(model: Model, X: np.ndarray, cfg: PretrainConfig) -> tuple[Model, list[dict]]:
    """Reconstruct zero-masked contiguous temporal patches; MSE on masked positions only.

    A linear decoder maps the pooled feature back to the full epoch; it is local to
    this function and discarded afterwards. Returns the model plus per-epoch history.
    """
    c, t = model.cfg.channels, model.cfg.samples
    if X.ndim != 3 or X.shape[1:] != (c, t):
        raise ContractError(f"expected (n, {c}, {t}) epochs, got {X.shape}")
    if t % cfg.patch != 0:
        raise ConfigError(f"patch {cfg.patch} does not divide {t} samples")
    n_patches = t // cfg.patch
    n_masked = int(round(cfg.mask_ratio * n_patches))
    n_masked = min(max(n_masked, 1), n_patches - 1)

    rng = np.random.default_rng([cfg.seed, 0xA5])
    decoder = Linear(model.cfg.features, c * t, np.random.default_rng([cfg.seed, 0xDE]))
    opt = make_optimizer(
        cfg.optimizer,
        model.named_parameters() + decoder.named_parameters("decoder"),
        cfg.lr,
    )

    history = []
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            batch = X[idx]
            b = batch.shape[0]
            mask = np.zeros((b, 1, t))
            masked_input = batch.copy()
            for i in range(b):
                patches = rng.choice(n_patches, size=n_masked, replace=False)
                for p in patches:
                    mask[i, 0, p * cfg.patch: (p + 1) * cfg.patch] = 1.0
                    masked_input[i, :, p * cfg.patch: (p + 1) * cfg.patch] = 0.0
            with ad.fresh_tape():
                feats = model.features(Tensor(masked_input), train=True)
                recon = ad.reshape(decoder(feats), (b, c, t))
                diff = ad.mul(ad.sub(recon, Tensor(batch)), Tensor(mask))
                denom = float(mask.sum() * c)
                loss = ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / denom)
                if not np.isfinite(loss.item()):
                    raise ContractError(f"non-finite pretraining loss at epoch {epoch}")
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "recon_loss": float(np.mean(losses))})
    return model, history


# ---------------------------------------------------------------------------
# stage I: joint fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    optimizer: str = "adam"
    weights: tuple[float, float] | None = None  # None -> the task's default pairing
    monitor: str | None = None  # None -> kappa (multiclass) or auroc (binary)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


def _validation_score(model: Model, X_val, y_val, monitor: str) -> float:
    probs = model.predict_proba(X_val)
    if monitor == "auroc":
        return auroc(y_val, probs[:, 1])
    if monitor == "cohens_kappa":
        return cohens_kappa(y_val, probs.argmax(axis=1))
    raise ConfigError(f"unknown monitoring metric '{monitor}'")


def finetune_stage1(
    model: Model,
    spec: TaskSpec,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    cfg: FinetuneConfig,
) -> tuple[Model, list[dict]]:
    """Joint supervised + pretext fine-tuning with best-checkpoint selection.

    Pretext views are drawn fresh for every batch. After the last epoch the model is
    restored to the snapshot with the best validation monitoring metric (earliest on
    ties). History records per-epoch losses, the validation score, and wall time.
    """
    if X_train.shape[0] != y_train.shape[0] or X_train.shape[0] == 0:
        raise ContractError("training inputs empty or misaligned")
    if X_val.shape[0] == 0:
        raise ContractError("validation split must be non-empty (checkpoint selection)")
    weights = spec.weights if cfg.weights is None else cfg.weights
    if len(weights) != len(spec.ssl_tasks):
        raise ConfigError("one weight per pretext task required")
    active = [(j, name, float(w)) for j, (name, w) in enumerate(zip(spec.ssl_tasks, weights)) if w != 0.0]
    monitor = cfg.monitor or monitoring_metric(spec.n_main)

    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    pretext_rng = np.random.default_rng([cfg.seed, 2])
    dropout_rng = np.random.default_rng([cfg.seed, 3])
    opt = make_optimizer(cfg.optimizer, model.named_parameters(), cfg.lr)

    history: list[dict] = []
    best_score = -np.inf
    best_snap = None
    n = X_train.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        main_losses, ssl_sums = [], {name: [] for _, name, _ in active}
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            xb, yb = X_train[idx], y_train[idx]
            with ad.fresh_tape():
                main_logits = model.forward_main(Tensor(xb), train=True, dropout_rng=dropout_rng)
                ssl_logits, ssl_labels, ssl_w = [], [], []
                for j, name, w in active:
                    samples = [make_view(name, xb[i], pretext_rng, spec) for i in range(xb.shape[0])]
                    views = np.stack([s.view for s in samples])
                    labels = np.array([s.label for s in samples], dtype=np.int64)
                    # views normalize with their own batch statistics, but only
                    # main-branch forwards feed the running estimates used at eval
                    feats = model.features(
                        Tensor(views), train=True, dropout_rng=dropout_rng, update_stats=False
                    )
                    ssl_logits.append(model.ssl_logits(j, feats))
                    ssl_labels.append(labels)
                    ssl_w.append(w)
                loss = combined_loss(main_logits, yb, ssl_logits, ssl_labels, ssl_w)
                if not np.isfinite(loss.item()):
                    raise ContractError(f"non-finite fine-tuning loss at epoch {epoch}")
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
            main_losses.append(cross_entropy_value(main_logits, yb))
            for (j, name, w), logits, labels in zip(active, ssl_logits, ssl_labels):
                ssl_sums[name].append(cross_entropy_value(logits, labels))
        score = _validation_score(model, X_val, y_val, monitor)
        if score > best_score:
            best_score = score
            best_snap = snapshot(model)
        history.append(
            {
                "epoch": epoch,
                "main_loss": float(np.mean(main_losses)),
                "ssl_losses": {name: float(np.mean(v)) for name, v in ssl_sums.items()},
                "monitor": monitor,
                "val_score": float(score),
                "wall_time": time.perf_counter() - t0,
            }
        )
    restore(model, best_snap)
    return model, history


def cross_entropy_value(logits: Tensor, labels) -> float:
    """Plain-number CE of already-computed logits (no recording)."""
    z = logits.data
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), np.asarray(labels)].mean())
