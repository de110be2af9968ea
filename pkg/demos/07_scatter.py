"""
True vs predicted gaze scatter
==============================

Writes ``scatter.csv`` and ``scatter.svg`` for the test split of a short
training run.
"""
from pathlib import Path

from eegmtl import ModelConfig, MTLTransformer
from eegmtl.cli import scatter_csv, scatter_svg
from eegmtl.data import generate_synthetic, split
from eegmtl.training import TrainConfig, predict, train

cfg = ModelConfig.desk()
tr, va, te = split(generate_synthetic(1000, cfg.channels, cfg.timesteps, seed=1), seed=1)
model = MTLTransformer(cfg, seed=1)
train(model, tr, va, TrainConfig(epochs=8, base_lr=1e-3, seed=1))
pred = predict(model, te)
Path("scatter.csv").write_text(scatter_csv(te.gaze, pred))
Path("scatter.svg").write_text(scatter_svg(te.gaze, pred))
print("wrote scatter.csv and scatter.svg with", len(te), "points")
