"""Module mask selection under a sparsity budget.

Freezing module ``i`` (``m_i = 0``) costs ``(1 - m)^T g + 1/2 (1 - m)^T B (1 - m)``
in the quadratic surrogate of the loss change, where ``g`` is a summed gate
gradient and ``B`` a Fisher matrix over gates.  With a diagonal ``B`` the
cost separates into per-module importance scores ``g_i + B_ii / 2``; the
warm start keeps the highest-scoring modules active.  A single round of
within-layer swaps then re-optimizes each layer against its dense Fisher
block.

Module indices follow the gate layout of :mod:`mape_unlearn.tinyformer`;
ties are always broken toward the lower index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import fisher as fim
from .tinyformer import (
    Batch,
    ModelConfig,
    ModelState,
    module_layers,
    module_slices,
)

MLR = "MLR"  # minimize loss on retain
MLF = "MLF"  # maximize loss on forget
SWAP_TOL = 1e-12
MAX_ENUM_MODULES = 20


def active_budget(n: int, sparsity: float) -> int:
    """Number of active modules, ``floor((1 - S) * n)``.

    The small slack absorbs binary rounding, e.g. ``(1 - 0.9) * 10``.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    return int(math.floor((1.0 - sparsity) * n + 1e-9))


@dataclass
class MaskPair:
    head_mask: np.ndarray
    filter_mask: np.ndarray
    sparsity: float = 0.0
    sense: str = ""

    def __post_init__(self):
        self.head_mask = np.asarray(self.head_mask, dtype=np.int8)
        self.filter_mask = np.asarray(self.filter_mask, dtype=np.int8)
        bad = ~np.isin(self.vector(), (0, 1))
        if bad.any():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def module_count(self) -> int:
        return len(self.head_mask) + len(self.filter_mask)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.head_mask, self.filter_mask])

    def active_count(self) -> int:
        return int(self.vector().sum())

    def satisfies_budget(self) -> bool:
        return self.active_count() <= active_budget(self.module_count, self.sparsity)

    @classmethod
    def from_vector(cls, v, head_count: int, sparsity: float = 0.0, sense: str = "") -> "MaskPair":
        v = np.asarray(v)
        return cls(v[:head_count], v[head_count:], sparsity, sense)

    @classmethod
    def full(cls, config: ModelConfig) -> "MaskPair":
        return cls.from_vector(np.ones(config.module_count, dtype=np.int8),
                               config.num_layers * config.num_heads)

    @classmethod
    def empty(cls, config: ModelConfig) -> "MaskPair":
        return cls.from_vector(np.zeros(config.module_count, dtype=np.int8),
                               config.num_layers * config.num_heads)

    def check_config(self, config: ModelConfig) -> None:
        if (len(self.head_mask) != config.num_layers * config.num_heads
                or len(self.filter_mask) != config.num_layers * config.d_ff):
            raise ValueError("mask does not match the model configuration")


@dataclass
class SelectionProblem:
    sense: str
    grad_vector: np.ndarray
    fim: fim.FisherStats
    sparsity: float
    layer_layout: np.ndarray
    head_count: int = 0
    config: Optional[ModelConfig] = field(default=None, repr=False)

    def __post_init__(self):
        if self.sense not in (MLR, MLF):
            raise ValueError(f"unknown objective sense {self.sense!r}")
        self.grad_vector = np.asarray(self.grad_vector, dtype=np.float64)
        self.layer_layout = np.asarray(self.layer_layout, dtype=np.int64)
        n = len(self.grad_vector)
        if len(self.fim.mask_diag) != n or len(self.layer_layout) != n:
            raise ValueError("gradient, Fisher and layout dimensions disagree")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.fim.mask_blocks is not None:
            for l, b in enumerate(self.fim.mask_blocks):
                m = len(self.layer_indices(l))
                if b.shape != (m, m):
                    raise ValueError(f"block {l} has shape {b.shape}, expected {(m, m)}")

    @property
    def n(self) -> int:
        return len(self.grad_vector)

    @property
    def num_layers(self) -> int:
        return int(self.layer_layout.max()) + 1 if self.n else 0

    def layer_indices(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.layer_layout == layer)

    def block(self, layer: int) -> np.ndarray:
        if self.fim.mask_blocks is None:
            return np.diag(self.fim.mask_diag[self.layer_indices(layer)])
        return self.fim.mask_blocks[layer]

    def to_mask(self, v) -> MaskPair:
        return MaskPair.from_vector(np.asarray(v, dtype=np.int8), self.head_count,
                                    self.sparsity, self.sense)


def importance_scores(problem: SelectionProblem) -> np.ndarray:
    """Per-module score: summed gate gradient plus half the diagonal Fisher."""
    return problem.grad_vector + 0.5 * problem.fim.mask_diag


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 vector marking the ``k`` largest scores (lower index wins ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    v = np.zeros(len(scores), dtype=np.int8)
    v[order[:k]] = 1
    return v


def warm_start(problem: SelectionProblem) -> MaskPair:
    """Activate the ``floor((1-S) n)`` highest importance scores."""
    k = active_budget(problem.n, problem.sparsity)
    return problem.to_mask(top_k(importance_scores(problem), k))


def layer_objective(mask_l, grad_l, block_l) -> float:
    """``(1-m)^T g + 1/2 (1-m)^T B (1-m)`` for one layer."""
    z = 1.0 - np.asarray(mask_l, dtype=np.float64)
    grad_l = np.asarray(grad_l, dtype=np.float64)
    block_l = np.asarray(block_l, dtype=np.float64)
    if grad_l.shape != z.shape or block_l.shape != (len(z), len(z)):
        raise ValueError("layer dimensions disagree")
    return float(z @ grad_l + 0.5 * (z @ block_l @ z))


def layer_objectives(problem: SelectionProblem, mask) -> np.ndarray:
    v = mask.vector() if isinstance(mask, MaskPair) else np.asarray(mask)
    out = []
    for l in range(problem.num_layers):
        ix = problem.layer_indices(l)
        out.append(layer_objective(v[ix], problem.grad_vector[ix], problem.block(l)))
    return np.asarray(out)


def total_objective(problem: SelectionProblem, mask) -> float:
    return float(layer_objectives(problem, mask).sum())


def _better(new: float, cur: float, sense: str) -> bool:
    if sense == MLR:
        return new < cur - SWAP_TOL
    return new > cur + SWAP_TOL


def greedy_swap(problem: SelectionProblem, start: MaskPair) -> MaskPair:
    """One round of best-improvement swaps inside every layer.

    Frozen modules are visited in descending importance; each may trade
    places with whichever active module of its layer gives the best layer
    objective, provided the improvement exceeds ``SWAP_TOL``.  Per-layer
    active counts never change.
    """
    v = start.vector().astype(np.int8).copy()
    if len(v) != problem.n:
        raise ValueError("start mask does not match the problem size")
    if v.sum() > active_budget(problem.n, problem.sparsity):
        raise ValueError("start mask violates the sparsity budget")
    scores = importance_scores(problem)
    for l in range(problem.num_layers):
        ix = problem.layer_indices(l)
        g, B = problem.grad_vector[ix], problem.block(l)
        m = v[ix].copy()
        if m.all() or not m.any():
            continue
        cur = layer_objective(m, g, B)
        frozen = [j for j in np.lexsort((ix, -scores[ix])) if m[j] == 0]
        for j in frozen:
            best_i, best_val = -1, cur
            for i in np.flatnonzero(m):
                m[i], m[j] = 0, 1
                val = layer_objective(m, g, B)
                m[i], m[j] = 1, 0
                if _better(val, best_val, problem.sense):
                    best_i, best_val = i, val
            if best_i >= 0 and _better(best_val, cur, problem.sense):
                m[best_i], m[j] = 0, 1
                cur = best_val
        v[ix] = m
    return problem.to_mask(v)


def select_mask(problem: SelectionProblem, refine: bool = True) -> MaskPair:
    start = warm_start(problem)
    return greedy_swap(problem, start) if refine else start


def enumerate_optimum(problem: SelectionProblem, layer: int,
                      k: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """Exhaustive layer optimum over masks with exactly ``k`` active modules.

    ``k`` defaults to the layer's active count in the warm start.
    """
    ix = problem.layer_indices(layer)
    m = len(ix)
    if m > MAX_ENUM_MODULES:
        raise ValueError(f"layer has {m} modules; enumeration limited to {MAX_ENUM_MODULES}")
    if k is None:
        k = int(warm_start(problem).vector()[ix].sum())
    g, B = problem.grad_vector[ix], problem.block(layer)
    combos = list(itertools.combinations(range(m), k))
    combos = np.array(combos, dtype=np.int64).reshape(len(combos), k)
    masks = np.zeros((len(combos), m))
    masks[np.repeat(np.arange(len(combos)), k), combos.ravel()] = 1.0
    z = 1.0 - masks
    vals = z @ g + 0.5 * np.einsum("ci,ij,cj->c", z, B, z)
    pick = int(np.argmin(vals)) if problem.sense == MLR else int(np.argmax(vals))
    best = masks[pick].astype(np.int8)
    return best, layer_objective(best, g, B)


# ---------------------------------------------------------------------------
# problems built from a model


def problem_from_stats(sense: str, cfg: ModelConfig, grad: np.ndarray,
                       stats: fim.FisherStats, sparsity: float) -> SelectionProblem:
    """Wrap precomputed gate statistics as a selection problem."""
    return SelectionProblem(
        sense=sense,
        grad_vector=grad,
        fim=stats,
        sparsity=sparsity,
        layer_layout=module_layers(cfg),
        head_count=cfg.num_layers * cfg.num_heads,
        config=cfg,
    )


def _problem_from(sense, state, grad_data, curv_data, sparsity) -> SelectionProblem:
    if len(grad_data) == 0 or len(curv_data) == 0:
        raise ValueError("both splits must be nonempty")
    grad = fim.forget_mask_gradient(state, grad_data)
    stats = fim.fisher_stats(state, curv_data, params=False, masks=True, blocks=True)
    return problem_from_stats(sense, state.config, grad, stats, sparsity)


def build_mlr_problem(state: ModelState, forget: Batch, retain: Batch,
                      sparsity: float = 0.9) -> SelectionProblem:
    """Gate gradient summed over forget; Fisher over retain; minimize."""
    return _problem_from(MLR, state, forget, retain, sparsity)


def build_mlf_problem(state: ModelState, forget: Batch, retain: Batch,
                      sparsity: float = 0.9) -> SelectionProblem:
    """Gate gradient summed over retain; Fisher over forget; maximize."""
    return _problem_from(MLF, state, retain, forget, sparsity)


def successive_premask(fim_full: np.ndarray, sparsity: float, head_count: int = 0) -> MaskPair:
    """Keep the modules whose full-data gate Fisher is largest."""
    fim_full = np.asarray(fim_full, dtype=np.float64)
    k = active_budget(len(fim_full), sparsity)
    return MaskPair.from_vector(top_k(fim_full, k), head_count, sparsity, MLR)


def sure_scores(state: ModelState, forget: Batch) -> np.ndarray:
    """L2 norm of each module's slice of the summed forget-set gradient."""
    if len(forget) == 0:
        raise ValueError("forget split is empty")
    cfg = state.config
    g = fim.forget_param_gradient(state, forget)
    out = np.zeros(cfg.module_count)
    for i in range(cfg.module_count):
        sq = 0.0
        for name, sl in module_slices(cfg, i):
            part = g[name][sl]
            sq += float(np.sum(part * part))
        out[i] = math.sqrt(sq)
    return out


def sure_select(state: ModelState, forget: Batch, sparsity: float) -> MaskPair:
    cfg = state.config
    k = active_budget(cfg.module_count, sparsity)
    return MaskPair.from_vector(top_k(sure_scores(state, forget), k),
                                cfg.num_layers * cfg.num_heads, sparsity, "SURE")


# ---------------------------------------------------------------------------
# text format


def format_mask(mask: MaskPair, config: ModelConfig) -> str:
    """``# mask n=<n> S=<S> sense=<sense> ...`` then ``L<l> H:<bits> F:<bits>`` per layer."""
    mask.check_config(config)
    H, F = config.num_heads, config.d_ff
    lines = [
        f"# mask n={mask.module_count} S={mask.sparsity!r} sense={mask.sense or '-'} "
        f"layers={config.num_layers} heads={H} filters={F}"
    ]
    for l in range(config.num_layers):
        hb = "".join(str(int(b)) for b in mask.head_mask[l * H:(l + 1) * H])
        fb = "".join(str(int(b)) for b in mask.filter_mask[l * F:(l + 1) * F])
        lines.append(f"L{l} H:{hb} F:{fb}")
    return "\n".join(lines) + "\n"


def parse_mask(text: str) -> MaskPair:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# mask"):
        raise ValueError("missing mask header")
    meta = dict(tok.split("=", 1) for tok in lines[0][len("# mask"):].split())
    heads: List[int] = []
    filters: List[int] = []
    for i, ln in enumerate(lines[1:]):
        tag, h, f = ln.split()
        if tag != f"L{i}" or not h.startswith("H:") or not f.startswith("F:"):
            raise ValueError(f"malformed mask line: {ln!r}")
        heads += [int(c) for c in h[2:]]
        filters += [int(c) for c in f[2:]]
    sense = "" if meta.get("sense", "-") == "-" else meta["sense"]
    mask = MaskPair(np.array(heads), np.array(filters), float(meta["S"]), sense)
    if mask.module_count != int(meta["n"]):
        raise ValueError("module count in header does not match body")
    return mask


def save_mask(mask: MaskPair, config: ModelConfig, path) -> None:
    Path(path).write_text(format_mask(mask, config), encoding="utf-8")


def load_mask(path) -> MaskPair:
    return parse_mask(Path(path).read_text(encoding="utf-8"))
