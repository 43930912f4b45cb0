"""
A stream of removal requests
============================

Requests arrive one at a time. The iterative mode compounds a fresh step
on the previous output. The stored-information mode keeps a running
Fisher and gradient sum, downdating them one sample at a time, and always
steps from the original model.
"""

import numpy as np

from mape_unlearn import fisher as fim
from mape_unlearn.data import TaskParams, gen_synthetic
from mape_unlearn.evalattack import accuracy
from mape_unlearn.successive import init_stored_info, run_iterative, step_stored_info
from mape_unlearn.tinyformer import ModelConfig, TrainHParams, train
from mape_unlearn.unlearn import UnlearnHParams

bundle = gen_synthetic(TaskParams(num_train=300, num_test=100, num_forget=10), seed=11)
cfg = ModelConfig(num_layers=2, num_heads=2, d_model=16, d_ff=16, seed=4)
star = train(cfg, bundle.train, TrainHParams(epochs=40, lr=0.02)).state
requests = bundle.forget.sample_ids[:6]
hp = UnlearnHParams(method="SO", lr=5e-4)

# iterative: full step versus a mask re-selected for every request
for mode in ("none", "MLR"):
    steps = run_iterative(star, bundle.train, requests, mode, hp, sparsity=0.9)
    print(mode.ljust(5), [round(accuracy(s.state, bundle.retain), 3) for s in steps])

# stored information: the running Fisher matches a recomputation
succ = init_stored_info(star, bundle.train, gate_stats=False)
for r in requests:
    theta, succ = step_stored_info(succ, r, None, star, hp, bundle.train)
keep = bundle.train.subset(np.flatnonzero(~np.isin(bundle.train.sample_ids, requests)))
scratch = fim.diag_fim_params(star, keep)
gap = max(float(np.abs(succ.fisher_diag[k] - scratch[k]).max()) for k in scratch)
print(f"after {succ.t} removals: retain acc {accuracy(theta, bundle.retain):.3f}, "
      f"Fisher gap to recomputation {gap:.1e}")
