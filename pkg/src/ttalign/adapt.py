"""Stage-II test-time adaptation.

Two adaptation routes over a fine-tuned model, plus a no-op baseline:

* ``ttt_ssl`` — per-sample self-supervised test-time training: for each test epoch,
  take one or more gradient steps on the pretext loss built from that epoch alone
  (a single plain-gradient-descent step is exactly ``theta' = theta - lr * g``),
  then predict. Episodic by default: the driver restores the model between samples,
  so predictions are independent of test-set order. Pretext randomness is seeded
  from a content hash of the sample, so the same epoch always gets the same views.

* ``tent`` — entropy minimisation on batches: forward in batch-statistics mode,
  minimise the mean prediction entropy (nats) by plain gradient descent on the
  batch-norm affine parameters only. Everything else is frozen bit-for-bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .nn import Model, clone_model, restore, snapshot
from .optim import SGD, make_optimizer
from .pretext import TaskSpec, make_view
from .training import cross_entropy

ADAPT_METHODS = ("none", "ttt_ssl", "tent")


def entropy(p, axis: int = -1):
    """Shannon entropy in nats of probability vectors; 0 * log 0 == 0.

    Validates that ``p`` is non-negative and sums to one along ``axis``.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12):
        raise ContractError("entropy: negative probabilities")
    sums = p.sum(axis=axis)
    if not np.allclose(sums, 1.0, rtol=0, atol=1e-6):
        raise ContractError("entropy: rows do not sum to 1")
    safe = np.where(p > 0.0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=axis)


def _mean_entropy_graph(logits: Tensor) -> Tensor:
    """Differentiable mean entropy (nats) of softmax(logits) over the batch."""
    lsm = ad.log_softmax(logits, axis=1)
    return ad.scale(ad.sum_(ad.mul(ad.exp(lsm), lsm)), -1.0 / logits.shape[0])


def content_rng(x: np.ndarray, seed: int) -> np.random.Generator:
    """RNG keyed by the sample's bytes: identical epochs get identical views,
    and per-sample adaptation commutes with any reordering of the test set."""
    digest = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:16], "little")])


def _param_delta(model: Model, before: dict[str, np.ndarray]) -> float:
    """L2 norm of the full parameter change since ``before`` (a name->array dict)."""
    total = 0.0
    for name, p in model.named_parameters():
        d = p.data - before[name]
        total += float(np.dot(d.ravel(), d.ravel()))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# per-sample self-supervised test-time training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TttConfig:
    steps: int = 1
    lr: float = 1e-5
    optimizer: str = "sgd"        # plain GD is the single-step update rule
    online: bool = False          # carry adapted weights across samples
    ssl_mode: str = "both_weighted"  # or "first_only"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.ssl_mode not in ("both_weighted", "first_only"):
            raise ConfigError(f"unknown ssl_mode '{self.ssl_mode}'")


def _ttt_branches(spec: TaskSpec, cfg: TttConfig) -> list[tuple[int, str, float]]:
    if cfg.ssl_mode == "first_only":
        return [(0, spec.ssl_tasks[0], 1.0)]
    return [
        (j, name, float(w))
        for j, (name, w) in enumerate(zip(spec.ssl_tasks, spec.weights))
        if w != 0.0
    ]


def ttt_ssl_adapt_predict(
    model: Model, x: np.ndarray, spec: TaskSpec, cfg: TttConfig
) -> tuple[np.ndarray, dict]:
    """Adapt ``model`` in place on one test epoch's pretext loss, then predict it.

    Returns the class-probability row and a record holding the pretext loss at every
    step (before that step's update) plus the L2 norm of the parameter change. The
    model is left in its adapted state — the handle for inspection or reuse; drivers
    that want episodic behaviour snapshot/restore around this call (see
    :func:`run_adaptation`).
    """
    if x.ndim != 2 or x.shape != (model.cfg.channels, model.cfg.samples):
        raise ContractError(
            f"expected one ({model.cfg.channels}, {model.cfg.samples}) epoch, got {x.shape}"
        )
    branches = _ttt_branches(spec, cfg)
    if not branches:
        raise ConfigError("no active pretext branch to adapt on (all weights zero)")
    rng = content_rng(x, cfg.seed)
    samples = [make_view(name, x, rng, spec) for _, name, _ in branches]
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    opt = make_optimizer(cfg.optimizer, model.named_parameters(), cfg.lr)
    losses = []
    for _ in range(cfg.steps):
        with ad.fresh_tape():
            loss = None
            for (j, _, w), s in zip(branches, samples):
                feats = model.features(Tensor(s.view[None]), train=False)
                term = ad.scale(cross_entropy(model.ssl_logits(j, feats), [s.label]), w)
                loss = term if loss is None else ad.add(loss, term)
            if not np.isfinite(loss.item()):
                raise ContractError("non-finite pretext loss during adaptation")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        losses.append(loss.item())
    probs = model.predict_proba(x[None])[0]
    return probs, {"ssl_loss": losses, "param_delta": _param_delta(model, before)}


# ---------------------------------------------------------------------------
# entropy minimisation on batch-norm affine parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TentConfig:
    lr: float = 1e-4
    steps_per_batch: int = 3
    batch_size: int = 32
    update_running_stats: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps_per_batch < 1:
            raise ConfigError(f"steps_per_batch must be >= 1, got {self.steps_per_batch}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (batch statistics), got {self.batch_size}"
            )


def _tent_batches(n: int, batch_size: int) -> list[np.ndarray]:
    """Contiguous index batches; a trailing singleton is merged into the batch
    before it so batch statistics are always over at least two samples."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def tent_adapt_predict(
    model: Model, X: np.ndarray, cfg: TentConfig
) -> tuple[np.ndarray, list[dict]]:
    """Minimise mean prediction entropy over batch-norm affine parameters.

    Each batch gets ``steps_per_batch`` plain gradient-descent updates of the BN
    gamma/beta only, with forwards in batch-statistics mode; a final read-out
    forward (no stats update) produces the predictions. Adaptation carries across
    batches and mutates ``model`` in place (gamma/beta, plus running stats when
    ``update_running_stats``); every other parameter is left bit-for-bit intact.
    Use :func:`run_adaptation` to keep the caller's model untouched.
    """
    if X.ndim != 3:
        raise ContractError(f"expected (n, C, T) test epochs, got {X.shape}")
    if X.shape[0] < 2:
        raise ConfigError(
            f"entropy adaptation needs at least 2 test epochs, got {X.shape[0]}"
        )
    affine = set(model.param_groups()["bn_affine"])
    named_affine = [(n, p) for n, p in model.named_parameters() if n in affine]
    opt = SGD(named_affine, cfg.lr)

    probs = np.empty((X.shape[0], model.cfg.n_main))
    records: list[dict] = []
    for k, idx in enumerate(_tent_batches(X.shape[0], cfg.batch_size)):
        batch = Tensor(X[idx])
        before = {n: p.data.copy() for n, p in named_affine}
        step_entropies = []
        for _ in range(cfg.steps_per_batch):
            with ad.fresh_tape():
                logits = model.forward_main(
                    batch, train=True, update_stats=cfg.update_running_stats
                )
                objective = _mean_entropy_graph(logits)
                if not np.isfinite(objective.item()):
                    raise ContractError(f"non-finite entropy objective on batch {k}")
                model.zero_grad()
                ad.backward(objective)
                opt.step()
            step_entropies.append(objective.item())
        with ad.no_grad(), ad.fresh_tape():
            logits = model.forward_main(batch, train=True, update_stats=False)
            p = ad.softmax(logits, axis=1).data
        probs[idx] = p
        delta = float(np.sqrt(sum(
            float(np.dot((p_.data - before[n]).ravel(), (p_.data - before[n]).ravel()))
            for n, p_ in named_affine
        )))
        records.append(
            {
                "batch": k,
                "size": int(idx.size),
                "entropy": step_entropies,
                "entropy_after": float(entropy(p, axis=1).mean()),
                "param_delta": delta,
            }
        )
    return probs, records


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def run_adaptation(
    strategy: str,
    model: Model,
    spec: TaskSpec,
    X: np.ndarray,
    ttt: TttConfig | None = None,
    tent: TentConfig | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Predict the test epochs under the chosen adaptation strategy.

    Adaptation runs on an internal clone, so the caller's model is never mutated.
    ``ttt_ssl`` is episodic unless ``ttt.online``: the clone is snapshotted once and
    restored around every sample. Returns per-sample probabilities plus a log with
    one record per sample (ttt_ssl) or per batch (tent).
    """
    if strategy == "none":
        return model.predict_proba(X), []
    if strategy == "ttt_ssl":
        cfg = ttt or TttConfig()
        if X.ndim != 3:
            raise ContractError(f"expected (n, C, T) test epochs, got {X.shape}")
        work = clone_model(model)
        base = snapshot(work)
        probs = np.empty((X.shape[0], model.cfg.n_main))
        records = []
        for i in range(X.shape[0]):
            probs[i], rec = ttt_ssl_adapt_predict(work, X[i], spec, cfg)
            rec["index"] = i
            records.append(rec)
            if not cfg.online:
                restore(work, base)
        return probs, records
    if strategy == "tent":
        return tent_adapt_predict(clone_model(model), X, tent or TentConfig())
    raise ConfigError(f"unknown strategy '{strategy}' (expected one of {ADAPT_METHODS})")
