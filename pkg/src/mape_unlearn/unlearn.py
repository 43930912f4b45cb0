"""Unlearning updates: closed-form second order and fine-tuning based.

Second-order (SO) removal adds ``eta * (F_r + lambda)^-1 * sum_f grad``
to the weights, where ``F_r`` is the diagonal empirical Fisher on the
retain split and the sum runs over per-sample gradients on the forget
split.  The masked variant routes the same delta through
:func:`apply_masked_delta`, so only head/filter slices of active modules
move.

Fine-tuning unlearners (GA, GD, NPO, DPO) take plain gradient steps on
their losses, optionally confined to a module mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import fisher as fim
from .tinyformer import (
    Batch,
    DivergenceError,
    ModelState,
    Params,
    TrainHParams,
    TrainResult,
    apply_masked_delta,
    backward,
    forward,
    log_softmax,
    module_param_mask,
    train,
)

METHODS = ("SO", "MAPE-SO", "GA", "GD", "NPO", "DPO", "SA", "RT")
MASK_SOURCES = ("none", "MLR", "MLF", "SURE", "premask", "file")


@dataclass
class UnlearnHParams:
    method: str = "GA"
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    beta: float = 0.1
    gamma: float = 5e-5
    damping: float = fim.DEFAULT_DAMPING
    clip: float = 0.0
    seed: int = 0
    mask_source: str = "none"
    mask_path: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {self.mask_source!r}")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class ReferenceModel:
    """Read-only snapshot of a model taken before unlearning starts."""

    def __init__(self, state: ModelState):
        snap = state.copy()
        for v in snap.params.values():
            v.flags.writeable = False
        self._state = snap

    @property
    def state(self) -> ModelState:
        return self._state

    def log_probs(self, batch: Batch) -> np.ndarray:
        logits, _ = forward(self._state, None, batch)
        return log_softmax(logits)


def make_idk_batch(batch: Batch, reject_class: int) -> Batch:
    """Forget samples paired with the REJECT answer (labels keep the original class)."""
    if np.any(batch.labels == reject_class):
        raise ValueError("an original label already equals the REJECT class")
    return batch


# ---------------------------------------------------------------------------
# second-order updates


def so_delta(state: ModelState, forget: Batch, retain: Batch, hp: UnlearnHParams,
             fisher_diag: Optional[Params] = None,
             forget_grad: Optional[Params] = None) -> Params:
    """``eta * sum_f grad / (F_r + lambda)`` for every parameter.

    ``fisher_diag``/``forget_grad`` may be supplied to reuse precomputed
    statistics (or to inject a known curvature).
    """
    if len(forget) == 0 or len(retain) == 0:
        raise ValueError("second-order update needs nonempty forget and retain splits")
    if fisher_diag is None:
        fisher_diag = fim.diag_fim_params(state, retain)
    if forget_grad is None:
        forget_grad = fim.forget_param_gradient(state, forget)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = {k: hp.lr * (forget_grad[k] / (fisher_diag[k] + hp.damping))
                 for k in state.params}
    if not all(np.all(np.isfinite(d)) for d in delta.values()):
        raise DivergenceError("non-finite second-order step; increase damping")
    return delta


def so_update(state: ModelState, forget: Batch, retain: Batch, hp: UnlearnHParams,
              **stats) -> ModelState:
    """Closed-form second-order removal applied to all parameters."""
    delta = so_delta(state, forget, retain, hp, **stats)
    return ModelState(state.config, {k: v + delta[k] for k, v in state.params.items()})


def mape_so_update(state: ModelState, mask, forget: Batch, retain: Batch,
                   hp: UnlearnHParams, **stats) -> ModelState:
    """Second-order removal confined to the parameters of active modules."""
    if hasattr(mask, "check_config"):
        mask.check_config(state.config)
    delta = so_delta(state, forget, retain, hp, **stats)
    return apply_masked_delta(state, mask, delta)


# ---------------------------------------------------------------------------
# fine-tuning losses; each returns (loss, param_grads)


def _ce_terms(state: ModelState, batch: Batch):
    logits, cache = forward(state, None, batch)
    lp = log_softmax(logits)
    return lp, cache


def _finish(state, cache, dlogits, loss) -> Tuple[float, Params]:
    loss = float(loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite unlearning loss {loss}")
    grads, _ = backward(state, cache, dlogits)
    return loss, grads


def ga_loss(state: ModelState, batch: Batch) -> Tuple[float, Params]:
    """Negated mean cross-entropy on the forget batch."""
    lp, cache = _ce_terms(state, batch)
    B = len(batch)
    rows = np.arange(B)
    ce = -lp[rows, batch.labels]
    dlogits = np.exp(lp)
    dlogits[rows, batch.labels] -= 1.0
    return _finish(state, cache, -dlogits / B, -ce.mean())


def gd_loss(state: ModelState, forget_batch: Batch,
            retain_batch: Optional[Batch] = None) -> Tuple[float, Params]:
    loss, grads = ga_loss(state, forget_batch)
    if retain_batch is None or len(retain_batch) == 0:
        return loss, grads
    lp, cache = _ce_terms(state, retain_batch)
    B = len(retain_batch)
    rows = np.arange(B)
    dlogits = np.exp(lp)
    dlogits[rows, retain_batch.labels] -= 1.0
    rloss, rgrads = _finish(state, cache, dlogits / B, -lp[rows, retain_batch.labels].mean())
    return loss + rloss, {k: grads[k] + rgrads[k] for k in grads}


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _sigmoid(t):
    return np.exp(_log_sigmoid(t))


def npo_loss(state: ModelState, ref: ReferenceModel, batch: Batch,
             beta: float) -> Tuple[float, Params]:
    """``-(2/beta) E log sigmoid(-beta * log(pi / pi_ref))`` over the batch."""
    lp, cache = _ce_terms(state, batch)
    lref = ref.log_probs(batch)
    B = len(batch)
    rows = np.arange(B)
    y = batch.labels
    r = lp[rows, y] - lref[rows, y]
    loss = -(2.0 / beta) * _log_sigmoid(-beta * r).mean()
    # d/dr of the per-sample term is 2 * sigmoid(beta * r)
    coef = 2.0 * _sigmoid(beta * r) / B
    dlogits = -np.exp(lp) * coef[:, None]
    dlogits[rows, y] += coef
    return _finish(state, cache, dlogits, loss)


def dpo_loss(state: ModelState, ref: ReferenceModel, batch: Batch, beta: float,
             reject_class: Optional[int] = None) -> Tuple[float, Params]:
    """DPO preferring the REJECT answer over each sample's original label."""
    if reject_class is None:
        reject_class = state.config.reject_class
    make_idk_batch(batch, reject_class)
    lp, cache = _ce_terms(state, batch)
    lref = ref.log_probs(batch)
    B = len(batch)
    rows = np.arange(B)
    y = batch.labels
    r_idk = lp[:, reject_class] - lref[:, reject_class]
    r_y = lp[rows, y] - lref[rows, y]
    u = beta * (r_idk - r_y)
    loss = -(1.0 / beta) * _log_sigmoid(u).mean()
    # softmax terms cancel between the two log-ratios
    coef = _sigmoid(-u) / B
    dlogits = np.zeros_like(lp)
    dlogits[:, reject_class] -= coef
    dlogits[rows, y] += coef
    return _finish(state, cache, dlogits, loss)


# ---------------------------------------------------------------------------
# fine-tuning drivers


def _clipped(grads: Params, clip: float, pmask=None) -> Params:
    if clip <= 0:
        return grads
    if pmask is None:
        sq = sum(float(np.sum(g * g)) for g in grads.values())
    else:
        sq = sum(float(np.sum(g[pmask[k]] ** 2)) for k, g in grads.items())
    norm = np.sqrt(sq)
    if norm <= clip:
        return grads
    s = clip / norm
    return {k: g * s for k, g in grads.items()}


def _step(state: ModelState, grads: Params, hp: UnlearnHParams, mask, pmask) -> ModelState:
    grads = _clipped(grads, hp.clip, pmask)
    delta = {k: -hp.lr * g for k, g in grads.items()}
    if mask is None:
        new = ModelState(state.config, {k: v + delta[k] for k, v in state.params.items()})
    else:
        new = apply_masked_delta(state, mask, delta)
    if not new.is_finite():
        raise DivergenceError("parameters became non-finite during unlearning")
    return new


def method_loss(state: ModelState, method: str, forget_batch: Batch,
                retain_batch: Optional[Batch], ref: ReferenceModel, hp: UnlearnHParams):
    if method == "GA":
        return ga_loss(state, forget_batch)
    if method == "GD":
        return gd_loss(state, forget_batch, retain_batch)
    if method == "NPO":
        return npo_loss(state, ref, forget_batch, hp.beta)
    if method == "DPO":
        return dpo_loss(state, ref, forget_batch, hp.beta)
    raise ValueError(f"{method} is not a fine-tuning unlearner")


def finetune_unlearn(state: ModelState, mask, forget: Batch, retain: Optional[Batch],
                     hp: UnlearnHParams, ref: Optional[ReferenceModel] = None,
                     callback=None) -> ModelState:
    """Run ``hp.epochs`` epochs of GA/GD/NPO/DPO steps over the forget split.

    With a mask, every step goes through :func:`apply_masked_delta`.  GD pairs
    each forget batch with the next batch of a shuffled, cycled retain split.
    ``callback(step, state)`` is invoked after every step when given.
    """
    method = hp.method
    if method not in ("GA", "GD", "NPO", "DPO"):
        raise ValueError(f"{method} is not a fine-tuning unlearner")
    if hp.epochs == 0:
        return state.copy()
    if len(forget) == 0:
        raise ValueError("forget split is empty")
    if mask is not None and hasattr(mask, "check_config"):
        mask.check_config(state.config)
    if ref is None and method in ("NPO", "DPO"):
        ref = ReferenceModel(state)
    pmask = None
    if mask is not None:
        active = mask.vector() if hasattr(mask, "vector") else np.asarray(mask)
        pmask = module_param_mask(state.config, active)
    rng = np.random.default_rng(hp.seed)
    retain_order = None
    rpos = 0
    if method == "GD":
        if retain is None or len(retain) == 0:
            raise ValueError("GD needs a retain split")
        retain_order = rng.permutation(len(retain))
    cur = state.copy()
    step = 0
    for _ in range(hp.epochs):
        order = rng.permutation(len(forget))
        for i in range(0, len(order), hp.batch_size):
            fb = forget.subset(order[i:i + hp.batch_size])
            rb = None
            if retain_order is not None:
                take = []
                while len(take) < len(fb):
                    if rpos == len(retain_order):
                        retain_order = rng.permutation(len(retain))
                        rpos = 0
                    n = min(len(fb) - len(take), len(retain_order) - rpos)
                    take.extend(retain_order[rpos:rpos + n])
                    rpos += n
                rb = retain.subset(take)
            _, grads = method_loss(cur, method, fb, rb, ref, hp)
            cur = _step(cur, grads, hp, mask, pmask)
            step += 1
            if callback is not None:
                callback(step, cur)
    return cur


def sa_unlearn(state: ModelState, retain: Batch, hp: UnlearnHParams,
               callback=None) -> ModelState:
    """Fine-tune on retain with an L1 penalty ``gamma * sum |theta|`` on all weights."""
    if len(retain) == 0:
        raise ValueError("retain split is empty")
    from .tinyformer import loss_and_grads

    rng = np.random.default_rng(hp.seed)
    cur = state.copy()
    for epoch in range(hp.epochs):
        order = rng.permutation(len(retain))
        for i in range(0, len(order), hp.batch_size):
            mb = retain.subset(order[i:i + hp.batch_size])
            _, g, _ = loss_and_grads(cur, None, mb)
            if hp.gamma:
                g = {k: g[k] + hp.gamma * np.sign(cur.params[k]) for k in g}
            cur = _step(cur, g, hp, None, None)
        if callback is not None:
            callback(epoch + 1, cur)
    return cur


def rt_retrain(config, retain: Batch, hparams: TrainHParams,
               test: Optional[Batch] = None) -> TrainResult:
    """Retrain from scratch on the retain split only."""
    return train(config, retain, hparams, test=test)
