#!/usr/bin/env python3
"""Run a small region-contrastive pretraining loop and watch the loss and
the positive cosine similarity move. Uses a reduced budget so it finishes
in about a minute; the full desk configuration lives in the acceptance
suite.

Run: python demos/03_pretrain_small.py
"""

import numpy as np

from insloc.trainer import TrainConfig, TrainState

config = TrainConfig(
    mode="insloc-c4",
    steps=300,
    batch_size=16,
    gallery_k=64,
    queue_capacity=256,
)
state = TrainState(config)
print(f"mode {config.mode}, {config.steps} steps, batch {config.batch_size}, "
      f"{config.gallery_k} instances")
print(f"encoder parameters: {state.pair.query.param_count():,}")

for i in range(config.steps):
    loss, lr, pos_sim = state.train_step()
    if i % 30 == 0 or i == config.steps - 1:
        print(f"step {i:4d}  loss {loss:6.4f}  lr {lr:.5f}  pos_sim {pos_sim:+.4f}")

loss = np.array(state.trace.loss)
sim = np.array(state.trace.pos_sim)
print(f"\nloss    first 50 steps {loss[:50].mean():.4f} -> last 50 {loss[-50:].mean():.4f}")
print(f"pos_sim first 50 steps {sim[:50].mean():.4f} -> last 50 {sim[-50:].mean():.4f}")
print("(the first steps look deceptively easy: an untrained encoder maps "
      "everything near one direction, and the queue is still random)")
