"""Split accuracies, a confidence-threshold membership attack, and relearning.

The membership score is the best balanced accuracy any single threshold on
the max-softmax confidence achieves when separating forget samples
(members) from held-out samples (non-members).  Both orientations of the
threshold are allowed, so 0.5 means the two groups are indistinguishable.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .tinyformer import Batch, ModelState, TrainHParams, _softmax, predict_logits, train

RELEARN_FRACTION = 0.2
RECOVERY_MARGIN = 0.05

METRIC_FIELDS = ("forget_acc", "retain_acc", "test_acc", "mia_score", "params_changed_fraction")


@dataclass
class MetricsReport:
    forget_acc: float
    retain_acc: float
    test_acc: float
    mia_score: float
    params_changed_fraction: float
    wall_time: float = 0.0

    def __post_init__(self):
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def metrics(self) -> dict:
        """The deterministic metric values (wall time excluded)."""
        return {k: getattr(self, k) for k in METRIC_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


def _nonempty(split: Batch, what: str) -> None:
    if split is None or len(split) == 0:
        raise ValueError(f"{what} split is empty")


def predictions(state: ModelState, split: Batch) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(predict_logits(state, split), axis=1)


def accuracy(state: ModelState, split: Batch) -> float:
    _nonempty(split, "evaluation")
    return float(np.mean(predictions(state, split) == split.labels))


def confidences(state: ModelState, split: Batch) -> np.ndarray:
    return _softmax(predict_logits(state, split)).max(axis=1)


def threshold_attack_score(member: np.ndarray, nonmember: np.ndarray) -> float:
    """Best balanced accuracy of ``feature >= t`` (or its complement) over all ``t``."""
    member = np.asarray(member, dtype=np.float64)
    nonmember = np.asarray(nonmember, dtype=np.float64)
    if member.size == 0 or nonmember.size == 0:
        raise ValueError("both groups must be nonempty")
    cuts = np.append(np.unique(np.concatenate([member, nonmember])), np.inf)
    nm, nn = member.size, nonmember.size
    # integer counts keep both orientations of one partition bit-identical
    tp = nm - np.searchsorted(np.sort(member), cuts, side="left")
    tn = np.searchsorted(np.sort(nonmember), cuts, side="left")
    up = tp * nn + tn * nm
    down = (nm - tp) * nn + (nn - tn) * nm
    return float(np.maximum(up, down).max() / (2 * nm * nn))


def mia_confidence(state: ModelState, forget: Batch, heldout: Batch) -> float:
    _nonempty(forget, "forget")
    _nonempty(heldout, "held-out")
    return threshold_attack_score(confidences(state, forget), confidences(state, heldout))


def params_changed_fraction(before: ModelState, after: ModelState) -> float:
    """Fraction of parameter entries whose float64 bit pattern changed."""
    changed = total = 0
    for k, a in before.params.items():
        b = after.params[k]
        changed += int(np.count_nonzero(a.view(np.uint64) != b.view(np.uint64)))
        total += a.size
    return changed / total


def evaluate(state: ModelState, forget: Batch, retain: Batch, test: Batch,
             reference: Optional[ModelState] = None) -> MetricsReport:
    t0 = time.perf_counter()
    rep = MetricsReport(
        forget_acc=accuracy(state, forget),
        retain_acc=accuracy(state, retain),
        test_acc=accuracy(state, test),
        mia_score=mia_confidence(state, forget, test),
        params_changed_fraction=(
            params_changed_fraction(reference, state) if reference is not None else 0.0
        ),
    )
    rep.wall_time = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# relearning attack


@dataclass
class RelearnTrajectory:
    forget_acc: List[float] = field(default_factory=list)
    mia: List[float] = field(default_factory=list)
    threshold: float = 0.0
    epochs_to_recover: Optional[int] = None

    def __len__(self) -> int:
        return len(self.forget_acc)

    def rows(self):
        for i, (a, m) in enumerate(zip(self.forget_acc, self.mia), start=1):
            yield i, a, m


def relearn_split(retain: Batch, fraction: float = RELEARN_FRACTION, seed: int = 0) -> Batch:
    """A uniformly drawn ``fraction`` of the retain split, in id order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("relearn fraction must lie in (0, 1]")
    k = max(1, int(round(fraction * len(retain))))
    idx = np.sort(np.random.default_rng(seed).choice(len(retain), size=k, replace=False))
    return retain.subset(idx)


def recovery_epoch(forget_acc, threshold: float) -> Optional[int]:
    for i, a in enumerate(forget_acc, start=1):
        if a >= threshold:
            return i
    return None


def relearn_attack(state: ModelState, relearn_set: Batch, forget: Batch, epochs: int,
                   hp: TrainHParams, heldout: Batch, threshold: float) -> RelearnTrajectory:
    """Fine-tune on ``relearn_set`` and track forget accuracy after each epoch.

    ``threshold`` is normally the pre-unlearning forget accuracy minus
    :data:`RECOVERY_MARGIN`.
    """
    overlap = np.intersect1d(relearn_set.sample_ids, forget.sample_ids)
    if overlap.size:
        raise ValueError(f"relearn set contains {overlap.size} forget samples")
    traj = RelearnTrajectory(threshold=threshold)
    if epochs == 0:
        return traj

    def record(_epoch, cur):
        traj.forget_acc.append(accuracy(cur, forget))
        traj.mia.append(mia_confidence(cur, forget, heldout))

    run = TrainHParams(epochs=epochs, batch_size=hp.batch_size, lr=hp.lr,
                       momentum=hp.momentum, seed=hp.seed)
    train(state.config, relearn_set, run, init=state, callback=record)
    traj.epochs_to_recover = recovery_epoch(traj.forget_acc, threshold)
    return traj
