"""
Training a small model end to end
=================================

A few epochs on a reduced benchmark, enough to watch the losses fall and
alpha move. The full-size numbers come from ``--preset benchmark``
(see README); this takes about a minute.
"""
import logging

import numpy as np

from refseg.data import build_benchmark
from refseg.model import predict_grid
from refseg.training import TrainConfig, TrainData, evaluate_model, train_full

logging.basicConfig(level=logging.INFO, format="%(message)s")

bench = build_benchmark(1, n_train=150, n_test=40, n_vision=80)
data = TrainData(bench.catalog, bench.train, bench.vision, bench.test[:20], bench.vectors)

cfg = TrainConfig(lr=0.1, epochs=12, pretrain_epochs=8, mix_ratio=0.25, clip_norm=5.0,
                  hidden=32, mlp_hidden=32, head_hidden=32, conv1=12, conv2=12)
model, history = train_full(cfg, data)
print(history.json_lines())

report = evaluate_model(model, bench.test)
print(report.to_json())

# one prediction, both paths shown side by side on the grid
s = bench.test[0]
g = predict_grid(model, s.image, s.expression)
np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(repr(s.expression), "alpha", round(model.alpha, 3))
print("baseline path rows 6..9:\n", g["p1"][6:10])
print("category path rows 6..9:\n", g["p2"][6:10])
