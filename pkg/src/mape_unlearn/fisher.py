"""Empirical Fisher information over parameters and over module gates.

All reductions walk the data in ascending ``sample_id`` order in fixed-size
chunks, so results do not depend on how the caller ordered the samples.
Per-sample gradients are extracted from a batched forward/backward with
the batch axis kept; each row equals a batch-of-one pass up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .tinyformer import (
    Batch,
    ModelState,
    Params,
    backward,
    cross_entropy,
    forward,
    layer_module_indices,
    ones_gates,
    param_shapes,
)

CHUNK = 64
DEFAULT_DAMPING = 1e-4


@dataclass
class FisherStats:
    param_diag: Optional[Params]
    mask_diag: Optional[np.ndarray]
    mask_blocks: Optional[List[np.ndarray]]
    sample_count: int

    def block_layout(self, config) -> List[np.ndarray]:
        """Global module indices of each block's rows (heads then filters)."""
        return [layer_module_indices(config, l) for l in range(config.num_layers)]


def _require(data: Batch) -> Batch:
    if data is None or len(data) == 0:
        raise ValueError("Fisher statistics need a nonempty dataset")
    return data.sorted()


def per_sample_grads(
    state: ModelState,
    data: Batch,
    chunk: int = CHUNK,
    loss_scale: float = 1.0,
) -> Iterator[Tuple[np.ndarray, Params, np.ndarray]]:
    """Yield ``(sample_ids, param_grads, mask_grads)`` chunk by chunk.

    ``param_grads[name]`` has shape ``(b, *param_shape)`` and ``mask_grads``
    ``(b, module_count)``; row ``i`` is the gradient of sample ``i``'s own
    cross-entropy (times ``loss_scale``) at gates = 1.
    """
    data = _require(data)
    gates = ones_gates(state.config)
    for i in range(0, len(data), chunk):
        mb = data.subset(np.arange(i, min(i + chunk, len(data))))
        logits, cache = forward(state, gates, mb)
        _, probs = cross_entropy(logits, mb.labels)
        dlogits = probs
        dlogits[np.arange(len(mb)), mb.labels] -= 1.0
        if loss_scale != 1.0:
            dlogits *= loss_scale
        pg, mg = backward(state, cache, dlogits, per_sample=True)
        yield mb.sample_ids, pg, mg


def fisher_stats(
    state: ModelState,
    data: Batch,
    params: bool = True,
    masks: bool = True,
    blocks: bool = True,
    loss_scale: float = 1.0,
) -> FisherStats:
    """Compute any subset of the Fisher quantities in a single data pass."""
    cfg = state.config
    n = 0
    pacc = {k: np.zeros(s) for k, s in param_shapes(cfg).items()} if params else None
    macc = np.zeros(cfg.module_count) if masks else None
    layout = [layer_module_indices(cfg, l) for l in range(cfg.num_layers)]
    bacc = [np.zeros((len(ix), len(ix))) for ix in layout] if blocks else None
    for _, pg, mg in per_sample_grads(state, data, loss_scale=loss_scale):
        n += len(mg)
        if params:
            for k, g in pg.items():
                pacc[k] += (g * g).sum(axis=0)
        if masks:
            macc += (mg * mg).sum(axis=0)
        if blocks:
            for acc, ix in zip(bacc, layout):
                gl = mg[:, ix]
                acc += gl.T @ gl
    return FisherStats(
        param_diag={k: v / n for k, v in pacc.items()} if params else None,
        mask_diag=macc / n if masks else None,
        mask_blocks=[0.5 * (b + b.T) / n for b in bacc] if blocks else None,
        sample_count=n,
    )


def diag_fim_params(state: ModelState, data: Batch) -> Params:
    """Mean of squared per-sample parameter gradients."""
    return fisher_stats(state, data, params=True, masks=False, blocks=False).param_diag


def diag_fim_masks(state: ModelState, data: Batch) -> np.ndarray:
    """Mean of squared per-sample gate gradients at gates = 1."""
    return fisher_stats(state, data, params=False, masks=True, blocks=False).mask_diag


def block_fim_masks(state: ModelState, data: Batch) -> List[np.ndarray]:
    """Per-layer mean outer product of gate gradients, heads then filters."""
    return fisher_stats(state, data, params=False, masks=False, blocks=True).mask_blocks


def grad_sums(state: ModelState, data: Batch, params: bool = True, masks: bool = True):
    """Summed (not averaged) per-sample gradients: ``(param_sum, mask_sum)``."""
    cfg = state.config
    psum = {k: np.zeros(s) for k, s in param_shapes(cfg).items()} if params else None
    msum = np.zeros(cfg.module_count) if masks else None
    for _, pg, mg in per_sample_grads(state, data):
        if params:
            for k, g in pg.items():
                psum[k] += g.sum(axis=0)
        if masks:
            msum += mg.sum(axis=0)
    return psum, msum


def forget_mask_gradient(state: ModelState, forget: Batch) -> np.ndarray:
    """Sum over the forget split of gate gradients at gates = 1."""
    return grad_sums(state, forget, params=False, masks=True)[1]


def forget_param_gradient(state: ModelState, forget: Batch) -> Params:
    """Sum over the forget split of per-sample parameter gradients."""
    return grad_sums(state, forget, params=True, masks=False)[0]
