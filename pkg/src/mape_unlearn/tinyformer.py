"""Gated toy transformer encoder classifier with hand-written backprop.

Every attention head and every FFN filter (hidden unit) carries a
multiplicative gate.  Gates are real-valued so one forward/backward pair
serves both binary masking and derivatives of the loss with respect to the
mask variables.

Gate vector layout (shared with masks, mask gradients and Fisher stats):
all head gates layer-major (``num_layers * num_heads``), followed by all
filter gates layer-major (``num_layers * d_ff``).

Parameter layout.  Attention projections act as ``x @ W`` with ``W`` of
shape ``(d_model, d_model)``: head ``h`` owns column block
``[h*dh:(h+1)*dh]`` of ``wq``/``wk``/``wv`` and the same row block of
``wo``.  FFN weights are stored filter-major: ``w1`` is ``(d_ff, d_model)``
(filter ``f`` owns row ``f`` and ``b1[f]``) and ``w2`` is
``(d_model, d_ff)`` (filter ``f`` owns column ``f``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

Params = Dict[str, np.ndarray]

LN_EPS = 1e-5
MAGIC = b"MAPE"
FORMAT_VERSION = 1
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYER_FIELDS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "w1", "b1", "w2", "b2",
)


class DivergenceError(RuntimeError):
    """Raised when a loss or an update becomes non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 32
    num_classes: int = 5
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if self.num_classes < 3:
            raise ValueError("num_classes must be >= 3 (two content classes plus REJECT)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def module_count(self) -> int:
        return self.num_layers * (self.num_heads + self.d_ff)

    @property
    def reject_class(self) -> int:
        """The last class index is reserved for the REJECT ("I don't know") label."""
        return self.num_classes - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Parameter names and shapes in the fixed serialization order."""
    D, F = cfg.d_model, cfg.d_ff
    shapes = {
        "tok_emb": (cfg.vocab_size, D),
        "pos_emb": (cfg.max_seq_len, D),
    }
    for l in range(cfg.num_layers):
        per = {
            "ln1_g": (D,), "ln1_b": (D,),
            "wq": (D, D), "bq": (D,),
            "wk": (D, D), "bk": (D,),
            "wv": (D, D), "bv": (D,),
            "wo": (D, D), "bo": (D,),
            "ln2_g": (D,), "ln2_b": (D,),
            "w1": (F, D), "b1": (F,),
            "w2": (D, F), "b2": (D,),
        }
        for name in LAYER_FIELDS:
            shapes[f"layers.{l}.{name}"] = per[name]
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    shapes["w_cls"] = (D, cfg.num_classes)
    shapes["b_cls"] = (cfg.num_classes,)
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: Params

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in param_shapes(self.config)])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def bit_equal(self, other: "ModelState") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


@dataclass
class Batch:
    tokens: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        self.sample_ids = np.atleast_1d(np.asarray(self.sample_ids, dtype=np.int64))
        if not (len(self.tokens) == len(self.labels) == len(self.sample_ids)):
            raise ValueError("tokens, labels and sample_ids disagree on batch size")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.tokens[idx], self.labels[idx], self.sample_ids[idx])

    def by_ids(self, ids) -> "Batch":
        pos = {int(s): i for i, s in enumerate(self.sample_ids)}
        return self.subset([pos[int(s)] for s in ids])

    def sorted(self) -> "Batch":
        return self.subset(np.argsort(self.sample_ids, kind="stable"))

    def validate(self, cfg: ModelConfig) -> None:
        if self.tokens.shape[1] > cfg.max_seq_len:
            raise ValueError("sequence longer than max_seq_len")
        if self.tokens.min(initial=0) < 0 or self.tokens.max(initial=0) >= cfg.vocab_size:
            raise ValueError("token id out of range")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= cfg.num_classes:
            raise ValueError("label out of range")

    @staticmethod
    def concat(*batches: "Batch") -> "Batch":
        return Batch(
            np.concatenate([b.tokens for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.sample_ids for b in batches]),
        )


def init_model(config: ModelConfig) -> ModelState:
    """Deterministic initialization from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    D, F = config.d_model, config.d_ff
    params: Params = {}
    for name, shape in param_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            params[name] = np.ones(shape)
        elif base in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 0.5, size=shape)
        elif base in ("wq", "wk", "wv", "wo"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(D), size=shape)
        elif base == "w1":
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(D), size=shape)
        elif base == "w2":
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(F), size=shape)
        elif base == "w_cls":
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(D), size=shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(config, params)


def zeros_like(state: ModelState) -> Params:
    return {k: np.zeros_like(v) for k, v in state.params.items()}


# ---------------------------------------------------------------------------
# gate / module layout helpers


def ones_gates(cfg: ModelConfig) -> np.ndarray:
    return np.ones(cfg.module_count)


def split_gates(cfg: ModelConfig, gates: np.ndarray):
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (cfg.module_count,):
        raise ValueError(f"gates must have shape ({cfg.module_count},), got {gates.shape}")
    nh = cfg.num_layers * cfg.num_heads
    return gates[:nh].reshape(cfg.num_layers, cfg.num_heads), gates[nh:].reshape(
        cfg.num_layers, cfg.d_ff
    )


def head_index(cfg: ModelConfig, layer: int, head: int) -> int:
    return layer * cfg.num_heads + head


def filter_index(cfg: ModelConfig, layer: int, f: int) -> int:
    return cfg.num_layers * cfg.num_heads + layer * cfg.d_ff + f


def module_layers(cfg: ModelConfig) -> np.ndarray:
    """Layer index of every module in gate layout."""
    return np.concatenate([
        np.repeat(np.arange(cfg.num_layers), cfg.num_heads),
        np.repeat(np.arange(cfg.num_layers), cfg.d_ff),
    ])


def layer_module_indices(cfg: ModelConfig, layer: int) -> np.ndarray:
    """Global gate indices of one layer's modules, heads first then filters."""
    heads = layer * cfg.num_heads + np.arange(cfg.num_heads)
    filters = cfg.num_layers * cfg.num_heads + layer * cfg.d_ff + np.arange(cfg.d_ff)
    return np.concatenate([heads, filters])


def module_slices(cfg: ModelConfig, module: int):
    """(param name, index expression) pairs for one module's correlated parameters.

    Attention biases are not part of any head; the filter bias entry is.
    """
    nh = cfg.num_layers * cfg.num_heads
    if module < 0 or module >= cfg.module_count:
        raise IndexError(module)
    if module < nh:
        l, h = divmod(module, cfg.num_heads)
        cols = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
        p = f"layers.{l}."
        return [
            (p + "wq", (slice(None), cols)),
            (p + "wk", (slice(None), cols)),
            (p + "wv", (slice(None), cols)),
            (p + "wo", (cols, slice(None))),
        ]
    l, f = divmod(module - nh, cfg.d_ff)
    p = f"layers.{l}."
    return [
        (p + "w1", (f, slice(None))),
        (p + "b1", (f,)),
        (p + "w2", (slice(None), f)),
    ]


def module_param_mask(cfg: ModelConfig, active: np.ndarray) -> Dict[str, np.ndarray]:
    """Boolean parameter-shaped masks marking entries owned by active modules."""
    active = np.asarray(active)
    if active.shape != (cfg.module_count,):
        raise ValueError("mask length does not match module count")
    out = {k: np.zeros(s, dtype=bool) for k, s in param_shapes(cfg).items()}
    hm, fm = split_gates(cfg, active != 0)
    dh = cfg.head_dim
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        cols = np.repeat(hm[l].astype(bool), dh)
        out[p + "wq"][:, cols] = True
        out[p + "wk"][:, cols] = True
        out[p + "wv"][:, cols] = True
        out[p + "wo"][cols, :] = True
        rows = fm[l].astype(bool)
        out[p + "w1"][rows, :] = True
        out[p + "b1"][rows] = True
        out[p + "w2"][:, rows] = True
    return out


def apply_masked_delta(state: ModelState, mask, delta: Params) -> ModelState:
    """Add ``delta`` only to parameters owned by active modules.

    ``mask`` may be a MaskPair or a flat 0/1 module vector.  Embeddings,
    norms and the classifier never move; untouched entries are the very
    same bits as the input.
    """
    active = mask.vector() if hasattr(mask, "vector") else np.asarray(mask)
    pmask = module_param_mask(state.config, active)
    out = {}
    for k, v in state.params.items():
        d = delta[k]
        if d.shape != v.shape:
            raise ValueError(f"delta shape mismatch for {k}: {d.shape} vs {v.shape}")
        m = pmask[k]
        if m.any():
            nv = v.copy()
            nv[m] = v[m] + d[m]
            out[k] = nv
        else:
            out[k] = v.copy()
    return ModelState(state.config, out)


# ---------------------------------------------------------------------------
# forward / backward


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache, per_sample):
    xhat, rstd, g = cache
    dg = _sum_bt(dy * xhat, per_sample)
    db = _sum_bt(dy, per_sample)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _sum_bt(x, per_sample):
    # (B, T, K) -> (K,) or (B, K)
    return x.sum(axis=1) if per_sample else x.reshape(-1, x.shape[-1]).sum(axis=0)


def _outer_bt(a, b, per_sample):
    # sum_t a[b,t,:]^T b[b,t,:] -> (I, J) or (B, I, J)
    if per_sample:
        return a.transpose(0, 2, 1) @ b
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# tanh form of GELU
_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(state: ModelState, gates: Optional[np.ndarray], batch):
    """Logits for a batch plus the cache needed by :func:`backward`.

    ``gates=None`` runs the plain ungated network.
    """
    cfg = state.config
    p = state.params
    tokens = batch.tokens if isinstance(batch, Batch) else np.atleast_2d(batch)
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError("sequence longer than max_seq_len")
    H, D, dh = cfg.num_heads, cfg.d_model, cfg.head_dim
    if gates is None:
        hg = fg = None
    else:
        hg, fg = split_gates(cfg, gates)

    x = p["tok_emb"][tokens] + p["pos_emb"][:T]
    layers = []
    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        h, ln1 = _ln_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = (h @ p[pre + "wq"] + p[pre + "bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ p[pre + "wk"] + p[pre + "bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ p[pre + "wv"] + p[pre + "bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        a = _softmax((q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh))
        c = a @ v
        cg = c if hg is None else c * hg[l][None, :, None, None]
        cat = cg.transpose(0, 2, 1, 3).reshape(B, T, D)
        x = x + (cat @ p[pre + "wo"] + p[pre + "bo"])
        h2, ln2 = _ln_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        z1 = h2 @ p[pre + "w1"].T + p[pre + "b1"]
        u, tz = _gelu(z1)
        ug = u if fg is None else u * fg[l]
        x = x + (ug @ p[pre + "w2"].T + p[pre + "b2"])
        layers.append((h, ln1, q, k, v, a, c, cat, h2, ln2, z1, tz, u, ug))
    hf, lnf = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
    pooled = hf.mean(axis=1)
    logits = pooled @ p["w_cls"] + p["b_cls"]
    cache = {"tokens": tokens, "hg": hg, "fg": fg, "layers": layers, "lnf": lnf, "pooled": pooled}
    return logits, cache


def backward(state: ModelState, cache: dict, dlogits: np.ndarray, per_sample: bool = False):
    """Backpropagate ``dlogits`` to parameter and gate gradients.

    Gate gradients are always computed (gates read as 1 when the forward
    pass was ungated).  With ``per_sample`` every gradient keeps a leading
    batch axis: row ``b`` is the gradient of the loss term fed in through
    ``dlogits[b]`` alone.
    """
    cfg = state.config
    p = state.params
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, D, dh = cfg.num_heads, cfg.d_model, cfg.head_dim
    L = cfg.num_layers
    hg, fg = cache["hg"], cache["fg"]
    ps = per_sample
    grads: Params = {}
    dhg = np.zeros((B, L, H))
    dfg = np.zeros((B, L, cfg.d_ff))

    pooled = cache["pooled"]
    if ps:
        grads["w_cls"] = pooled[:, :, None] * dlogits[:, None, :]
        grads["b_cls"] = dlogits.copy()
    else:
        grads["w_cls"] = pooled.T @ dlogits
        grads["b_cls"] = dlogits.sum(axis=0)
    dpooled = dlogits @ p["w_cls"].T
    dhf = np.broadcast_to(dpooled[:, None, :] / T, (B, T, D))
    dx, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dhf, cache["lnf"], ps)

    for l in reversed(range(L)):
        pre = f"layers.{l}."
        h, ln1, q, k, v, a, c, cat, h2, ln2, z1, tz, u, ug = cache["layers"][l]
        # feed-forward block
        grads[pre + "w2"] = _outer_bt(dx, ug, ps)
        grads[pre + "b2"] = _sum_bt(dx, ps)
        dug = dx @ p[pre + "w2"]
        dfg[:, l, :] = (dug * u).sum(axis=1)
        du = dug if fg is None else dug * fg[l]
        dz1 = du * _gelu_grad(z1, tz)
        grads[pre + "w1"] = _outer_bt(dz1, h2, ps)
        grads[pre + "b1"] = _sum_bt(dz1, ps)
        dh2 = dz1 @ p[pre + "w1"]
        dxa, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _ln_bwd(dh2, ln2, ps)
        dx = dx + dxa
        # attention block
        grads[pre + "wo"] = _outer_bt(cat, dx, ps)
        grads[pre + "bo"] = _sum_bt(dx, ps)
        dcg = (dx @ p[pre + "wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dhg[:, l, :] = (dcg * c).sum(axis=(2, 3))
        dc = dcg if hg is None else dcg * hg[l][None, :, None, None]
        da = dc @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dc
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqm = dq.transpose(0, 2, 1, 3).reshape(B, T, D)
        dkm = dk.transpose(0, 2, 1, 3).reshape(B, T, D)
        dvm = dv.transpose(0, 2, 1, 3).reshape(B, T, D)
        grads[pre + "wq"] = _outer_bt(h, dqm, ps)
        grads[pre + "wk"] = _outer_bt(h, dkm, ps)
        grads[pre + "wv"] = _outer_bt(h, dvm, ps)
        grads[pre + "bq"] = _sum_bt(dqm, ps)
        grads[pre + "bk"] = _sum_bt(dkm, ps)
        grads[pre + "bv"] = _sum_bt(dvm, ps)
        dh_in = dqm @ p[pre + "wq"].T + dkm @ p[pre + "wk"].T + dvm @ p[pre + "wv"].T
        dxa, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _ln_bwd(dh_in, ln1, ps)
        dx = dx + dxa

    V = cfg.vocab_size
    if ps:
        demb = np.zeros((B, V, D))
        rows = np.repeat(np.arange(B), T)
        np.add.at(demb, (rows, tokens.ravel()), dx.reshape(-1, D))
        dpos = np.zeros((B, cfg.max_seq_len, D))
        dpos[:, :T] = dx
    else:
        demb = np.zeros((V, D))
        np.add.at(demb, tokens.ravel(), dx.reshape(-1, D))
        dpos = np.zeros((cfg.max_seq_len, D))
        dpos[:T] = dx.sum(axis=0)
    grads["tok_emb"] = demb
    grads["pos_emb"] = dpos

    mask_grads = np.concatenate([dhg.reshape(B, -1), dfg.reshape(B, -1)], axis=1)
    if not ps:
        mask_grads = mask_grads.sum(axis=0)
    ordered = {k: grads[k] for k in param_shapes(cfg)}
    return ordered, mask_grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy and the softmax probabilities."""
    lp = log_softmax(logits)
    return -lp[np.arange(len(labels)), labels], np.exp(lp)


def loss_and_grads(state: ModelState, gates: Optional[np.ndarray], batch: Batch):
    """Mean cross-entropy, exact parameter gradients and mask gradients.

    Mask gradients are taken at the supplied gate values; pass all-ones
    to get the derivative at the unmasked model.
    """
    if gates is None:
        gates = ones_gates(state.config)
    logits, cache = forward(state, gates, batch)
    losses, probs = cross_entropy(logits, batch.labels)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    B = len(batch)
    dlogits = probs.copy()
    dlogits[np.arange(B), batch.labels] -= 1.0
    dlogits /= B
    pg, mg = backward(state, cache, dlogits)
    return loss, pg, mg


def predict_logits(state: ModelState, batch: Batch, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(batch), chunk):
        logits, _ = forward(state, None, batch.tokens[i:i + chunk])
        out.append(logits)
    if not out:
        return np.zeros((0, state.config.num_classes))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHParams:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0


@dataclass
class TrainResult:
    state: ModelState
    train_acc: float
    test_acc: Optional[float]
    losses: list


def _accuracy(state: ModelState, data: Batch) -> float:
    logits = predict_logits(state, data)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def train(config: ModelConfig, data: Batch, hparams: TrainHParams,
          test: Optional[Batch] = None, init: Optional[ModelState] = None,
          callback=None) -> TrainResult:
    """Minibatch SGD with heavy-ball momentum from ``init_model(config)``
    (or from a copy of ``init``).

    Deterministic given ``config.seed`` (init) and ``hparams.seed`` (shuffle).
    ``callback(epoch, state)`` runs after every epoch when given.
    """
    state = init.copy() if init is not None else init_model(config)
    data.validate(config)
    rng = np.random.default_rng(hparams.seed)
    vel = zeros_like(state)
    losses = []
    n = len(data)
    for _ in range(hparams.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, hparams.batch_size):
            mb = data.subset(order[i:i + hparams.batch_size])
            loss, g, _ = loss_and_grads(state, None, mb)
            epoch_loss += loss * len(mb)
            for k, v in state.params.items():
                vel[k] = hparams.momentum * vel[k] - hparams.lr * g[k]
                v += vel[k]
        losses.append(epoch_loss / n)
        if not state.is_finite():
            raise DivergenceError("parameters became non-finite during training")
        if callback is not None:
            callback(len(losses), state)
    test_acc = _accuracy(state, test) if test is not None else None
    return TrainResult(state, _accuracy(state, data), test_acc, losses)


# ---------------------------------------------------------------------------
# serialization


def save_state(state: ModelState, path) -> None:
    """Binary layout: ``MAPE`` | uint32 version | 8 x int64 config fields
    (num_layers, num_heads, d_model, d_ff, vocab_size, num_classes,
    max_seq_len, seed) | float64 LE arrays, row-major, in
    :func:`param_shapes` order."""
    cfg = state.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<8q", cfg.num_layers, cfg.num_heads, cfg.d_model, cfg.d_ff,
                          cfg.vocab_size, cfg.num_classes, cfg.max_seq_len, cfg.seed))
    for name in param_shapes(cfg):
        buf.write(np.ascontiguousarray(state.params[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_state(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    fields = struct.unpack_from("<8q", raw, 8)
    cfg = ModelConfig(*fields)
    off = 8 + 64
    params = {}
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ValueError("trailing bytes in model file")
    return ModelState(cfg, params)


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
