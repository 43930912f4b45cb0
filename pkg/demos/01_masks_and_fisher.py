"""
Module gates, their gradients, and mask selection
==================================================

Every attention head and every feed-forward filter of the classifier sits
behind a scalar gate. At gates = 1 the network is the ordinary model, and the
derivative of the loss with respect to a gate says how much that module
matters for the data at hand.
"""

import numpy as np

from mape_unlearn import fisher as fim
from mape_unlearn.data import TaskParams, gen_synthetic
from mape_unlearn.maskselect import build_mlr_problem, format_mask, select_mask, warm_start
from mape_unlearn.tinyformer import ModelConfig, TrainHParams, loss_and_grads, ones_gates, train

task = TaskParams(num_train=400, num_test=100, num_forget=16)
bundle = gen_synthetic(task, seed=7)
cfg = ModelConfig(num_layers=2, num_heads=4, d_model=16, d_ff=16, seed=1)
print("modules:", cfg.module_count, "(heads first, then filters)")

# a quick model is enough to look at the statistics
result = train(cfg, bundle.train, TrainHParams(epochs=40, lr=0.02), test=bundle.test)
state = result.state
print(f"train acc {result.train_acc:.3f}  test acc {result.test_acc:.3f}")

# gate gradients on the forget split
_, _, gate_grad = loss_and_grads(state, ones_gates(cfg), bundle.forget)
print("largest |d loss / d gate|:", np.round(np.sort(np.abs(gate_grad))[-5:], 4))

# diagonal and per-layer block Fisher of the gates over the retain split
stats = fim.fisher_stats(state, bundle.retain, params=False)
for l, block in enumerate(stats.mask_blocks):
    eig = np.linalg.eigvalsh(block)
    print(f"layer {l}: block {block.shape}, eigenvalues in [{eig.min():.2e}, {eig.max():.2e}]")

# warm start keeps the highest importance scores; one swap pass refines it
problem = build_mlr_problem(state, bundle.forget, bundle.retain, sparsity=0.75)
start, mask = warm_start(problem), select_mask(problem)
print("active modules:", mask.active_count(), "of", mask.module_count)
print("swaps made:", int(np.sum(start.vector() != mask.vector()) // 2))
print(format_mask(mask, cfg))
