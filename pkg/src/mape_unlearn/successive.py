"""Streams of removal requests.

Three ways to serve them:

* iterative: each request is a fresh (masked) second-order step applied to
  the previous output, with statistics recomputed on the current splits;
* stored-info: every output is a single step away from the original model,
  built from gradient sums and a retain Fisher that are kept in memory and
  downdated one sample at a time;
* batch: all requests removed together in one step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import fisher as fim
from .maskselect import (
    MLF,
    MLR,
    MaskPair,
    greedy_swap,
    problem_from_stats,
    select_mask,
    successive_premask,
    sure_select,
)
from .tinyformer import Batch, DivergenceError, ModelState, Params, apply_masked_delta
from .unlearn import ReferenceModel, UnlearnHParams, mape_so_update, so_update

MODES = ("iterative", "stored-info", "batch")
MASK_MODES = ("none", MLR, MLF, "SURE")


@dataclass
class SuccessiveState:
    t: int
    grad_sum: Params
    fisher_diag: Params
    retain_count: int
    removed: List[int] = field(default_factory=list)
    mode: str = "stored-info"
    # gate statistics, kept so the mask can be refined per request
    mask_grad_sum: Optional[np.ndarray] = None
    mask_fisher: Optional[fim.FisherStats] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown successive mode {self.mode!r}")
        if len(set(self.removed)) != len(self.removed):
            raise ValueError("removed ids contain duplicates")


@dataclass
class Step:
    t: int
    request: int
    state: ModelState
    mask: Optional[MaskPair]
    metrics: object = None


def _check_requests(requests: Sequence[int], train: Batch) -> List[int]:
    reqs = [int(r) for r in requests]
    if len(set(reqs)) != len(reqs):
        raise ValueError("duplicate request id")
    known = set(train.sample_ids.tolist())
    missing = [r for r in reqs if r not in known]
    if missing:
        raise ValueError(f"request ids not in the training set: {missing[:5]}")
    return reqs


def _without(train: Batch, removed) -> Batch:
    keep = ~np.isin(train.sample_ids, np.asarray(list(removed), dtype=np.int64))
    return train.subset(np.flatnonzero(keep))


def _choose_mask(state: ModelState, mask_mode: str, forget: Batch, retain: Batch,
                 sparsity: float) -> Optional[MaskPair]:
    if mask_mode == "none":
        return None
    if mask_mode == "SURE":
        return sure_select(state, forget, sparsity)
    cfg = state.config
    if mask_mode == MLR:
        grad_data, curv_data = forget, retain
    elif mask_mode == MLF:
        grad_data, curv_data = retain, forget
    else:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    grad = fim.forget_mask_gradient(state, grad_data)
    stats = fim.fisher_stats(state, curv_data, params=False, masks=True, blocks=True)
    return select_mask(problem_from_stats(mask_mode, cfg, grad, stats, sparsity))


def _so_step(state, mask, forget, retain, hp):
    if mask is None:
        return so_update(state, forget, retain, hp)
    return mape_so_update(state, mask, forget, retain, hp)


def run_iterative(state0: ModelState, train: Batch, requests: Sequence[int],
                  mask_mode: str, hp: UnlearnHParams, sparsity: float = 0.9,
                  evaluate: Optional[Callable] = None) -> List[Step]:
    """Serve requests one at a time, compounding on the previous output.

    Request ``t`` removes sample ``requests[t-1]`` with the current retain
    split (train minus everything removed so far).  With a mask mode the
    mask is re-selected for every request.  ``evaluate(state, removed_ids)``
    produces the per-step metrics.
    """
    reqs = _check_requests(requests, train)
    cur = state0
    removed: List[int] = []
    out = []
    for t, r in enumerate(reqs, start=1):
        removed.append(r)
        forget = train.by_ids([r])
        retain = _without(train, removed)
        mask = _choose_mask(cur, mask_mode, forget, retain, sparsity)
        cur = _so_step(cur, mask, forget, retain, hp)
        step = Step(t, r, cur, mask)
        if evaluate is not None:
            step.metrics = evaluate(cur, list(removed))
        out.append(step)
    return out


def run_batch(state0: ModelState, train: Batch, request_ids: Sequence[int],
              mask_mode: str, hp: UnlearnHParams, sparsity: float = 0.9,
              evaluate: Optional[Callable] = None) -> Step:
    """Remove all requests together in a single (masked) second-order step."""
    reqs = _check_requests(request_ids, train)
    if not reqs:
        raise ValueError("empty request set")
    forget = train.by_ids(reqs)
    retain = _without(train, reqs)
    mask = _choose_mask(state0, mask_mode, forget, retain, sparsity)
    out = _so_step(state0, mask, forget, retain, hp)
    step = Step(len(reqs), reqs[-1], out, mask)
    if evaluate is not None:
        step.metrics = evaluate(out, reqs)
    return step


# ---------------------------------------------------------------------------
# stored-information mode


def init_stored_info(state_star: ModelState, train: Batch,
                     gate_stats: bool = True) -> SuccessiveState:
    """Fisher over the whole training set at the original weights, no removals yet."""
    stats = fim.fisher_stats(state_star, train, params=True, masks=gate_stats,
                             blocks=gate_stats)
    zero = {k: np.zeros_like(v) for k, v in state_star.params.items()}
    return SuccessiveState(
        t=0,
        grad_sum=zero,
        fisher_diag=stats.param_diag,
        retain_count=stats.sample_count,
        mode="stored-info",
        mask_grad_sum=np.zeros(state_star.config.module_count) if gate_stats else None,
        mask_fisher=stats if gate_stats else None,
    )


def _downdate(mean: np.ndarray, sq: np.ndarray, n: int) -> np.ndarray:
    return (n * mean - sq) / (n - 1)


def _downdate_diag(mean, sq, n):
    # rounding can leave -1e-20 where a single sample owned all the mass
    return np.maximum(_downdate(mean, sq, n), 0.0)


def remove_point(succ: SuccessiveState, sample_id: int, state_star: ModelState,
                 train: Batch) -> SuccessiveState:
    """Downdate the stored statistics by one training sample (no model update)."""
    sample_id = int(sample_id)
    if sample_id in succ.removed:
        raise ValueError(f"sample {sample_id} already removed")
    n = succ.retain_count
    if n <= 1:
        raise ValueError("cannot remove from a retain set of size <= 1")
    _, pg, mg = next(fim.per_sample_grads(state_star, train.by_ids([sample_id])))
    g = {k: v[0] for k, v in pg.items()}
    fisher = {k: _downdate_diag(succ.fisher_diag[k], g[k] * g[k], n) for k in g}
    grad_sum = {k: succ.grad_sum[k] + g[k] for k in g}
    mask_grad_sum = mask_fisher = None
    if succ.mask_fisher is not None:
        gm = mg[0]
        mf = succ.mask_fisher
        layout = mf.block_layout(state_star.config)
        mask_fisher = fim.FisherStats(
            param_diag=None,
            mask_diag=_downdate_diag(mf.mask_diag, gm * gm, n),
            mask_blocks=[_downdate(b, np.outer(gm[ix], gm[ix]), n)
                         for b, ix in zip(mf.mask_blocks, layout)],
            sample_count=n - 1,
        )
        mask_grad_sum = succ.mask_grad_sum + gm
    return SuccessiveState(
        t=succ.t + 1,
        grad_sum=grad_sum,
        fisher_diag=fisher,
        retain_count=n - 1,
        removed=succ.removed + [sample_id],
        mode=succ.mode,
        mask_grad_sum=mask_grad_sum,
        mask_fisher=mask_fisher,
    )


def stored_delta(succ: SuccessiveState, hp: UnlearnHParams) -> Params:
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = {k: hp.lr * succ.grad_sum[k] / (succ.fisher_diag[k] + hp.damping)
                 for k in succ.grad_sum}
    if not all(np.all(np.isfinite(d)) for d in delta.values()):
        raise DivergenceError("non-finite second-order step; increase damping")
    return delta


def refine_mask(succ: SuccessiveState, start: MaskPair, state_star: ModelState) -> MaskPair:
    """One greedy-swap pass of ``start`` against the stored gate statistics."""
    if succ.mask_fisher is None:
        raise ValueError("stored state carries no gate statistics")
    problem = problem_from_stats(MLR, state_star.config, succ.mask_grad_sum,
                                 succ.mask_fisher, start.sparsity)
    return greedy_swap(problem, start)


def step_stored_info(succ: SuccessiveState, x_t: int, mask: Optional[MaskPair],
                     state_star, hp: UnlearnHParams, train: Batch):
    """Remove ``x_t`` and return ``(theta_t, new_state)``.

    ``theta_t`` is always one masked step from ``state_star``; earlier
    outputs are never reused.
    """
    star = state_star.state if isinstance(state_star, ReferenceModel) else state_star
    nxt = remove_point(succ, x_t, star, train)
    delta = stored_delta(nxt, hp)
    if mask is None:
        out = ModelState(star.config, {k: v + delta[k] for k, v in star.params.items()})
    else:
        mask.check_config(star.config)
        out = apply_masked_delta(star, mask, delta)
    return out, nxt


def run_stored_info(state_star: ModelState, train: Batch, requests: Sequence[int],
                    hp: UnlearnHParams, sparsity: Optional[float] = 0.9,
                    refine: bool = False,
                    evaluate: Optional[Callable] = None) -> List[Step]:
    """Serve requests from stored aggregates.

    With ``sparsity`` set, the mask is the full-data premask, optionally
    refined by one greedy-swap pass per request; ``sparsity=None`` gives
    unmasked updates.
    """
    reqs = _check_requests(requests, train)
    ref = ReferenceModel(state_star)
    succ = init_stored_info(state_star, train, gate_stats=sparsity is not None)
    premask = None
    if sparsity is not None:
        premask = successive_premask(succ.mask_fisher.mask_diag, sparsity,
                                     state_star.config.num_layers * state_star.config.num_heads)
    out = []
    for r in reqs:
        mask = premask
        if refine and premask is not None:
            # refine against the statistics after this request is removed
            mask = refine_mask(remove_point(succ, r, state_star, train), premask, state_star)
        theta, succ = step_stored_info(succ, r, mask, ref, hp, train)
        step = Step(succ.t, r, theta, mask)
        if evaluate is not None:
            step.metrics = evaluate(theta, list(succ.removed))
        out.append(step)
    return out
