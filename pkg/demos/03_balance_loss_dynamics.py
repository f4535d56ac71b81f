"""Routing collapse without the balance loss, and the repair with it.

On a task whose downstream loss cannot prefer any scale, a plain selector
settles on a single down-sampling branch and never leaves it. Adding the
auxiliary balance loss (alpha * sum_i f_i * P_i) pushes the selection
frequencies back toward uniform. Per-branch penalty weights tilt the
equilibrium instead of equalizing it.
"""

import numpy as np

from vtcompress import (
    SCALE_INDIFFERENT_LEARNING_RATE,
    TrainConfig,
    make_scale_indifferent_task,
    train_selector,
)

STEPS = 500
dataset, downstream = make_scale_indifferent_task(seed=0)
print(f"task: 36 constant-valued regions, any kernel emits the region value\n")


def show(label, run):
    marks = (0, 100, 250, 499)
    print(f"{label}")
    for step in marks:
        print(f"  step {step:>3}: f = {np.round(run.f_history[step], 2)} "
              f"P = {np.round(run.p_history[step], 2)} loss = {run.losses[step]:.4f}")
    print(f"  collapsed: {run.collapsed}\n")


run = train_selector(
    dataset,
    TrainConfig(steps=STEPS, learning_rate=SCALE_INDIFFERENT_LEARNING_RATE, alpha=0.0, seed=0),
    downstream=downstream,
)
show("alpha = 0 (no balance term): the initial winner is never abandoned", run)

run = train_selector(
    dataset,
    TrainConfig(steps=STEPS, learning_rate=SCALE_INDIFFERENT_LEARNING_RATE, alpha=0.1, seed=0),
    downstream=downstream,
)
show("alpha = 0.1: regions spread across all three scales", run)

run = train_selector(
    dataset,
    TrainConfig(steps=STEPS, learning_rate=SCALE_INDIFFERENT_LEARNING_RATE, alpha=0.1,
                seed=0, imbalance_weights=(0.5, 1.0, 1.5)),
    downstream=downstream,
)
show("alpha = 0.1, penalties (0.5, 1.0, 1.5): the low-penalty coarse branch wins more often", run)

for alpha in (0.01, 0.5):
    run = train_selector(
        dataset,
        TrainConfig(steps=STEPS, learning_rate=SCALE_INDIFFERENT_LEARNING_RATE,
                    alpha=alpha, seed=0),
        downstream=downstream,
    )
    print(f"alpha = {alpha}: final f = {np.round(run.final_f, 2)} collapsed={run.collapsed}")
