"""Synthetic motif-classification task and forget/retain/test splits.

A sequence belongs to class ``c`` when class ``c``'s motif (a short ordered
token pattern drawn from a small shared alphabet) occurs in it.  The
background is filled with non-alphabet tokens plus "distractor" alphabet
tokens placed so that no other motif is ever formed, so the label is a
deterministic function of the planted motif while bag-of-token features
alone are not sufficient.  The last class index is reserved for REJECT and
receives no samples.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .tinyformer import Batch


@dataclass(frozen=True)
class TaskParams:
    num_train: int = 2000
    num_test: int = 500
    num_forget: int = 64
    seq_len: int = 16
    vocab_size: int = 32
    num_content_classes: int = 4
    alphabet_size: int = 3
    motif_len: int = 2
    distractors: int = 3

    @property
    def num_classes(self) -> int:
        return self.num_content_classes + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetBundle:
    train: Batch
    forget: Batch
    retain: Batch
    test: Batch
    seed: int
    task: TaskParams
    motifs: tuple

    def check_splits(self) -> None:
        """Raise if the forget/retain/test hygiene invariants are broken."""
        f = set(self.forget.sample_ids.tolist())
        r = set(self.retain.sample_ids.tolist())
        tr = set(self.train.sample_ids.tolist())
        te = set(self.test.sample_ids.tolist())
        if f & r:
            raise ValueError("forget and retain overlap")
        if f | r != tr:
            raise ValueError("forget and retain do not cover train")
        if tr & te:
            raise ValueError("test overlaps train")
        train_rows = {row.tobytes() for row in self.train.tokens}
        if any(row.tobytes() in train_rows for row in self.test.tokens):
            raise ValueError("a test sequence also appears in train")


def make_motifs(task: TaskParams) -> tuple:
    alphabet = range(task.alphabet_size)
    pool = list(itertools.permutations(alphabet, task.motif_len))
    if len(pool) < task.num_content_classes:
        raise ValueError("alphabet too small for the requested number of classes")
    return tuple(pool[: task.num_content_classes])


def find_motifs(tokens: np.ndarray, motifs) -> list:
    """Classes whose motif occurs in ``tokens`` (the rule-based oracle)."""
    row = tokens.tolist()
    k = len(motifs[0])
    found = []
    for c, m in enumerate(motifs):
        mt = list(m)
        if any(row[i:i + k] == mt for i in range(len(row) - k + 1)):
            found.append(c)
    return found


def rule_classify(tokens: np.ndarray, motifs) -> np.ndarray:
    """Label every row by the single motif it contains (-1 if not exactly one)."""
    out = []
    for row in np.atleast_2d(tokens):
        hits = find_motifs(row, motifs)
        out.append(hits[0] if len(hits) == 1 else -1)
    return np.asarray(out, dtype=np.int64)


def _sample_sequence(rng, task: TaskParams, motifs, label: int) -> np.ndarray:
    L, k = task.seq_len, task.motif_len
    while True:
        seq = rng.integers(task.alphabet_size, task.vocab_size, size=L)
        start = int(rng.integers(0, L - k + 1))
        seq[start:start + k] = motifs[label]
        free = [i for i in range(L) if i < start or i >= start + k]
        pos = rng.choice(free, size=min(task.distractors, len(free)), replace=False)
        seq[pos] = rng.integers(0, task.alphabet_size, size=len(pos))
        if find_motifs(seq, motifs) == [label]:
            return seq


def gen_synthetic(task: TaskParams, seed: int) -> DatasetBundle:
    """Class-balanced train/test sets with a uniformly drawn forget split."""
    if task.num_content_classes < 2:
        raise ValueError("need at least two content classes")
    if task.num_forget > task.num_train or task.num_forget < 0:
        raise ValueError("num_forget must lie in [0, num_train]")
    if task.motif_len > task.seq_len or task.alphabet_size >= task.vocab_size:
        raise ValueError("inconsistent sequence/vocabulary sizes")
    rng = np.random.default_rng(seed)
    motifs = make_motifs(task)
    C = task.num_content_classes
    total = task.num_train + task.num_test
    labels = []
    for size in (task.num_train, task.num_test):
        part = np.arange(size) % C
        rng.shuffle(part)
        labels.append(part)
    labels = np.concatenate(labels)
    seen = set()
    rows = []
    for y in labels:
        while True:
            s = _sample_sequence(rng, task, motifs, int(y))
            key = s.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(s)
                break
    tokens = np.stack(rows).astype(np.int64)
    ids = np.arange(total, dtype=np.int64)
    train = Batch(tokens[: task.num_train], labels[: task.num_train], ids[: task.num_train])
    test = Batch(tokens[task.num_train:], labels[task.num_train:], ids[task.num_train:])
    forget_ids = np.sort(rng.choice(task.num_train, size=task.num_forget, replace=False))
    keep = np.ones(task.num_train, dtype=bool)
    keep[forget_ids] = False
    bundle = DatasetBundle(
        train=train,
        forget=train.subset(forget_ids),
        retain=train.subset(np.flatnonzero(keep)),
        test=test,
        seed=seed,
        task=task,
        motifs=motifs,
    )
    bundle.check_splits()
    return bundle
