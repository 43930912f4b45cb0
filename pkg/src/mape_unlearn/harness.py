"""End-to-end experiment runs: train, select a mask, unlearn, evaluate, attack.

Every run writes into ``<out_dir>/<config-hash>-s<seed>/``:

* ``config.json``: the full experiment document;
* ``metrics.csv``: one row per evaluated model (no timings);
* ``trajectory.csv``: per-request rows for successive/batch scenarios;
* ``relearn.csv``: per-epoch rows of the relearning attack;
* ``record.json``: the run record (paths, timings, errors, source version);
* model (``.bin``) and mask (``.txt``) files.

Trained original models are cached under ``<out_dir>/_cache`` keyed by
everything that determines them, so scenarios sharing a seed reuse one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import __version__
from . import fisher as fim
from .config import ExperimentConfig, sub_seed
from .data import DatasetBundle, gen_synthetic
from .evalattack import (
    METRIC_FIELDS,
    evaluate,
    relearn_attack,
    relearn_split,
)
from .maskselect import (
    MLF,
    MLR,
    MaskPair,
    build_mlf_problem,
    build_mlr_problem,
    load_mask,
    save_mask,
    select_mask,
    successive_premask,
    sure_select,
)
from .successive import run_batch, run_iterative, run_stored_info
from .tinyformer import Batch, ModelState, TrainHParams, load_state, save_state, train
from .unlearn import (
    UnlearnHParams,
    finetune_unlearn,
    mape_so_update,
    rt_retrain,
    sa_unlearn,
    so_update,
)

ROW_KEYS = ("scenario", "phase", "method", "sparsity", "step", "seed") + METRIC_FIELDS
TRAJECTORY_KEYS = ("t", "method", "sparsity", "forget_acc", "retain_acc", "test_acc", "mia",
                   "params_changed_fraction")
RELEARN_KEYS = ("method", "sparsity", "epoch", "forget_acc", "mia")
PLOT_KEYS = ("scenario", "phase", "method", "sparsity", "step", "seed", "metric", "value",
             "median")

FINETUNE = ("GA", "GD", "NPO", "DPO")
MASKABLE = FINETUNE + ("MAPE-SO",)


class ExperimentError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


def fmt(v) -> str:
    """CSV cell text; floats carry 17 significant digits so they parse back exactly."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, keys, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([fmt(r[k]) for k in keys])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def source_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    scenario: str
    version: str
    run_dir: str
    metrics: List[dict] = field(default_factory=list)
    trajectory: List[dict] = field(default_factory=list)
    relearn: List[dict] = field(default_factory=list)
    recovery: List[dict] = field(default_factory=list)
    mask_paths: Dict[str, str] = field(default_factory=dict)
    model_paths: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    error: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunRecord":
        p = Path(path)
        if p.is_dir():
            p = p / "record.json"
        return cls(**json.loads(p.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# phases


def make_data(cfg: ExperimentConfig) -> DatasetBundle:
    bundle = gen_synthetic(cfg.task, sub_seed(cfg.seed, "data"))
    bundle.check_splits()
    return bundle


def _star_key(cfg: ExperimentConfig) -> str:
    d = {"model": cfg.model_config().to_dict(), "task": cfg.task.to_dict(),
         "train": asdict(cfg.train_hparams()), "data_seed": sub_seed(cfg.seed, "data")}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def train_original(cfg: ExperimentConfig, bundle: DatasetBundle,
                   out_dir: Optional[Path] = None) -> ModelState:
    """Train (or load from the cache) the model that unlearning starts from."""
    cache = None
    if out_dir is not None:
        cache = Path(out_dir) / "_cache" / f"star-{_star_key(cfg)}.bin"
        if cache.exists():
            return load_state(cache)
    res = train(cfg.model_config(), bundle.train, cfg.train_hparams())
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_suffix(".tmp")
        save_state(res.state, tmp)
        tmp.replace(cache)
    return res.state


def make_mask(source: str, state: ModelState, bundle: DatasetBundle, sparsity: float,
              mask_path: str = "") -> Optional[MaskPair]:
    if source == "none":
        return None
    if source == MLR:
        return select_mask(build_mlr_problem(state, bundle.forget, bundle.retain, sparsity))
    if source == MLF:
        return select_mask(build_mlf_problem(state, bundle.forget, bundle.retain, sparsity))
    if source == "SURE":
        return sure_select(state, bundle.forget, sparsity)
    if source == "premask":
        diag = fim.diag_fim_masks(state, bundle.train)
        cfg = state.config
        return successive_premask(diag, sparsity, cfg.num_layers * cfg.num_heads)
    if source == "file":
        mask = load_mask(mask_path)
        mask.check_config(state.config)
        return mask
    raise ValueError(f"unknown mask source {source!r}")


def method_label(method: str, masked: bool) -> str:
    if method == "MAPE-SO" or not masked:
        return method
    return f"MAPE-{method}"


def apply_method(cfg: ExperimentConfig, state: ModelState, bundle: DatasetBundle,
                 hp: UnlearnHParams, mask: Optional[MaskPair]) -> ModelState:
    m = hp.method
    if m == "SO":
        return so_update(state, bundle.forget, bundle.retain, hp)
    if m == "MAPE-SO":
        if mask is None:
            raise ValueError("MAPE-SO needs a mask source")
        return mape_so_update(state, mask, bundle.forget, bundle.retain, hp)
    if m in FINETUNE:
        return finetune_unlearn(state, mask, bundle.forget, bundle.retain, hp)
    if m == "SA":
        return sa_unlearn(state, bundle.retain, hp)
    if m == "RT":
        return rt_retrain(cfg.model_config(), bundle.retain, cfg.train_hparams()).state
    raise ValueError(f"unknown method {m!r}")


def fresh_samples(cfg: ExperimentConfig, count: int) -> Batch:
    """``count`` new sequences from the task generator under the attack seed.

    Ids start after the original train and test ids, so they never collide.
    """
    task = replace(cfg.task, num_forget=0, num_train=count, num_test=0)
    draw = gen_synthetic(task, sub_seed(cfg.seed, "attack")).train
    offset = cfg.task.num_train + cfg.task.num_test
    return Batch(draw.tokens, draw.labels, draw.sample_ids + offset)


def _row(cfg, phase, method, sparsity, step, rep) -> dict:
    row = {"scenario": cfg.scenario, "phase": phase, "method": method,
           "sparsity": float(sparsity), "step": int(step), "seed": int(cfg.seed)}
    row.update(rep.metrics())
    return row


# ---------------------------------------------------------------------------
# scenarios


class _Run:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out_root = out_dir
        self.dir = cfg.run_dir(str(out_dir))
        self.dir.mkdir(parents=True, exist_ok=True)
        self.rec = RunRecord(cfg.config_hash(), cfg.seed, cfg.scenario, source_version(),
                             str(self.dir))
        self.phase = "setup"

    def timed(self, phase, fn, *a, **kw):
        self.phase = phase
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.rec.timings[phase] = self.rec.timings.get(phase, 0.0) + time.perf_counter() - t0
        return out

    def save_model(self, key: str, state: ModelState) -> None:
        path = self.dir / f"{key}.bin"
        save_state(state, path)
        self.rec.model_paths[key] = path.name

    def save_mask(self, key: str, mask: Optional[MaskPair], state: ModelState) -> None:
        if mask is None:
            return
        path = self.dir / f"mask_{key}.txt"
        save_mask(mask, state.config, path)
        self.rec.mask_paths[key] = path.name

    def eval(self, state, star, forget=None):
        b = self.bundle
        return evaluate(state, b.forget if forget is None else forget, b.retain, b.test,
                        reference=star)

    # -- drivers ----------------------------------------------------------
    def run(self) -> RunRecord:
        cfg = self.cfg
        self.cfg.save(self.dir / "config.json")
        self.bundle = self.timed("data", make_data, cfg)
        star = self.timed("train", train_original, cfg, self.bundle, self.out_root)
        self.save_model("theta_star", star)
        self.phase = "evaluate"
        self.rec.metrics.append(_row(cfg, "original", "none", 0.0, 0, self.eval(star, star)))
        getattr(self, "_" + cfg.scenario)(star)
        self.phase = "write"
        write_csv(self.dir / "metrics.csv", ROW_KEYS, self.rec.metrics)
        if self.rec.trajectory:
            write_csv(self.dir / "trajectory.csv", TRAJECTORY_KEYS, self.rec.trajectory)
        if self.rec.relearn:
            write_csv(self.dir / "relearn.csv", RELEARN_KEYS, self.rec.relearn)
        return self.rec

    def _unlearn_once(self, star, sparsity, source=None, phase="unlearned"):
        cfg = self.cfg
        hp = cfg.unlearn_hparams()
        source = hp.mask_source if source is None else source
        masked = hp.method in MASKABLE and source != "none"
        mask = None
        if masked:
            mask = self.timed("select-mask", make_mask, source, star, self.bundle, sparsity,
                              hp.mask_path)
        out = self.timed("unlearn", apply_method, cfg, star, self.bundle, hp, mask)
        label = method_label(hp.method, masked)
        s = sparsity if masked else 0.0
        key = f"{label}_S{s!r}"
        self.save_mask(key, mask, star)
        self.save_model(key, out)
        self.phase = "evaluate"
        self.rec.metrics.append(_row(cfg, phase, label, s, 0, self.eval(out, star)))
        return out, label, s

    def _single(self, star):
        self._unlearn_once(star, self.cfg.sparsities[0])

    def _sweep(self, star):
        for s in self.cfg.sparsities:
            self._unlearn_once(star, s)

    def _successive_variants(self):
        s = self.cfg.sparsities[0]
        return [("SO", "none", None), ("MAPE-SO", MLR, s)]

    def _requests(self):
        k = self.cfg.successive.num_requests
        ids = self.bundle.forget.sample_ids
        if k > len(ids):
            raise ValueError("more requests than forget samples")
        return ids[:k].tolist()

    def _record_step(self, star, label, sparsity, t, state, removed):
        b = self.bundle
        rep = self.eval(state, star, forget=b.train.by_ids(removed))
        self.rec.metrics.append(_row(self.cfg, self.cfg.scenario, label, sparsity, t, rep))
        m = rep.metrics()
        self.rec.trajectory.append({
            "t": t, "method": label, "sparsity": sparsity,
            "forget_acc": m["forget_acc"], "retain_acc": m["retain_acc"],
            "test_acc": m["test_acc"], "mia": m["mia_score"],
            "params_changed_fraction": m["params_changed_fraction"],
        })

    def _successive(self, star):
        cfg = self.cfg
        reqs = self._requests()
        for label, mode, s in self._successive_variants():
            hp = cfg.unlearn_hparams(method=label)
            if cfg.successive.mode == "iterative":
                steps = self.timed("unlearn", run_iterative, star, self.bundle.train, reqs, mode,
                                   hp, s if s is not None else 0.0)
            else:
                steps = self.timed("unlearn", run_stored_info, star, self.bundle.train, reqs,
                                   hp, s, cfg.successive.refine)
            self.phase = "evaluate"
            for st in steps:
                self._record_step(star, label, s or 0.0, st.t, st.state, reqs[:st.t])
                # the final model may carry every step's mask, so keep them all
                self.save_mask(f"{label}_t{st.t:02d}", st.mask, star)
            self.save_model(f"{label}_final", steps[-1].state)

    def _batch(self, star):
        cfg = self.cfg
        reqs = self._requests()
        for label, mode, s in self._successive_variants():
            hp = cfg.unlearn_hparams(method=label)
            st = self.timed("unlearn", run_batch, star, self.bundle.train, reqs, mode, hp,
                            s if s is not None else 0.0)
            self.phase = "evaluate"
            self._record_step(star, label, s or 0.0, st.t, st.state, reqs)
            self.save_model(f"{label}_batch", st.state)
            self.save_mask(f"{label}_batch", st.mask, star)

    def _relearn(self, star):
        cfg = self.cfg
        rp = cfg.relearn
        b = self.bundle
        base = cfg.unlearn_hparams().mask_source
        base = MLF if base == "none" else base
        threshold = self.rec.metrics[0]["forget_acc"] - rp.margin
        rset = relearn_split(b.retain, rp.fraction, sub_seed(cfg.seed, "attack"))
        if rp.source == "fresh":
            rset = fresh_samples(cfg, len(rset))
        attack = TrainHParams(epochs=rp.epochs, batch_size=rp.batch_size, lr=rp.lr,
                              momentum=rp.momentum, seed=sub_seed(cfg.seed, "attack"))
        for source in ("none", base):
            out, label, s = self._unlearn_once(star, cfg.sparsities[0], source=source)
            traj = self.timed("attack", relearn_attack, out, rset, b.forget, rp.epochs, attack,
                              b.test, threshold)
            for epoch, acc, mia in traj.rows():
                self.rec.relearn.append({"method": label, "sparsity": s, "epoch": epoch,
                                         "forget_acc": acc, "mia": mia})
            self.rec.recovery.append({"method": label, "sparsity": s,
                                      "threshold": threshold,
                                      "epochs_to_recover": traj.epochs_to_recover,
                                      "epochs": rp.epochs})


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunRecord:
    """Execute ``cfg.scenario`` end to end and write every artifact.

    A failure is written to ``record.json`` with the phase it happened in,
    then re-raised as :class:`ExperimentError`.
    """
    run = _Run(cfg, Path(out_dir or cfg.out_dir))
    try:
        rec = run.run()
    except Exception as exc:  # noqa: BLE001 - recorded, then re-raised
        run.rec.error = {"phase": run.phase, "type": type(exc).__name__, "message": str(exc),
                         "traceback": traceback.format_exc()}
        (run.dir / "record.json").write_text(run.rec.to_json(), encoding="utf-8")
        raise ExperimentError(run.phase, f"{type(exc).__name__}: {exc}") from exc
    (run.dir / "record.json").write_text(rec.to_json(), encoding="utf-8")
    return rec


def _run_one(args):
    cfg_json, out_dir = args
    return run_experiment(ExperimentConfig.from_json(cfg_json), out_dir)


def run_many(configs: Iterable[ExperimentConfig], out_dir=None, jobs: int = 1) -> List[RunRecord]:
    """Run independent cells, optionally in worker processes; sorted by cell key."""
    configs = sorted(configs, key=lambda c: (c.config_hash(), c.seed))
    args = [(c.to_json(), out_dir) for c in configs]
    if jobs <= 1:
        return [_run_one(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, args))


# ---------------------------------------------------------------------------
# plot data


def _plot_rows(rec: RunRecord) -> List[dict]:
    rows = []
    for m in rec.metrics:
        if set(m) != set(ROW_KEYS):
            raise ValueError(f"run {rec.run_dir}: metric row schema {sorted(m)} unexpected")
        for metric in METRIC_FIELDS:
            rows.append({k: m[k] for k in PLOT_KEYS[:6]} | {"metric": metric,
                                                            "value": m[metric]})
    for r in rec.relearn:
        for metric in ("forget_acc", "mia"):
            rows.append({"scenario": rec.scenario, "phase": "relearn", "method": r["method"],
                         "sparsity": r["sparsity"], "step": r["epoch"], "seed": rec.seed,
                         "metric": metric, "value": r[metric]})
    for r in rec.recovery:
        e = r["epochs_to_recover"]
        # never recovering within the attack counts as one epoch past its end
        value = float(e) if e is not None else float(r["epochs"] + 1)
        rows.append({"scenario": rec.scenario, "phase": "relearn", "method": r["method"],
                     "sparsity": r["sparsity"], "step": 0, "seed": rec.seed,
                     "metric": "epochs_to_recover", "value": value})
    return rows


def export_plotdata(records: List[RunRecord], path) -> List[dict]:
    """Long-format CSV with a per-group median over seeds."""
    if not records:
        raise ValueError("no records to export")
    rows = [row for rec in records for row in _plot_rows(rec)]
    groups: Dict[tuple, List[float]] = {}
    for r in rows:
        groups.setdefault(_group(r), []).append(r["value"])
    for r in rows:
        r["median"] = statistics.median(groups[_group(r)])
    rows.sort(key=lambda r: (_group(r), r["seed"]))
    write_csv(path, PLOT_KEYS, rows)
    return rows


def _group(r) -> tuple:
    return (r["scenario"], r["phase"], r["method"], float(r["sparsity"]), int(r["step"]),
            r["metric"])


def read_plotdata(path) -> List[dict]:
    out = []
    for r in read_csv(path):
        out.append({"scenario": r["scenario"], "phase": r["phase"], "method": r["method"],
                    "sparsity": float(r["sparsity"]), "step": int(r["step"]),
                    "seed": int(r["seed"]), "metric": r["metric"],
                    "value": float(r["value"]), "median": float(r["median"])})
    return out


def read_metrics(path) -> List[dict]:
    out = []
    for r in read_csv(path):
        row = {k: r[k] for k in ("scenario", "phase", "method")}
        row["sparsity"] = float(r["sparsity"])
        row["step"] = int(r["step"])
        row["seed"] = int(r["seed"])
        row.update({k: float(r[k]) for k in METRIC_FIELDS})
        out.append(row)
    return out
