"""
Training the small model
========================

The desk preset (8 channels, 64 samples, 2 blocks) trains in seconds.
The learning rate is raised from the full-size default because the
small model has far fewer steps to work with.
"""
from eegmtl import ModelConfig, MTLTransformer
from eegmtl.data import generate_synthetic, split
from eegmtl.training import TrainConfig, train

cfg = ModelConfig.desk()
tr, va, te = split(generate_synthetic(2000, cfg.channels, cfg.timesteps, seed=0), seed=0)
model = MTLTransformer(cfg, seed=0)
report = train(model, tr, va, TrainConfig(base_lr=1e-3, seed=0), te)
print(report.to_table())
