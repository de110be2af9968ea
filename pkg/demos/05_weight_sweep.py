"""
Sweeping the reconstruction weight
==================================

Paired seeds: each seed fixes the data, split and initial weights, and
only the weight changes between runs. Kept short here (2 seeds, 3
weights); the CLI ``sweep`` command runs the full grid.
"""
from eegmtl import ModelConfig, MTLTransformer
from eegmtl.data import generate_synthetic, split
from eegmtl.training import TrainConfig, run_sweep, sweep_csv, sweep_summary

cfg = ModelConfig.desk()


def data(seed):
    return split(generate_synthetic(2000, cfg.channels, cfg.timesteps, seed), seed=seed)


rows = run_sweep([0.0, 140.0, 560.0], [0, 1],
                 lambda seed, **w: MTLTransformer(cfg.replace(**w), seed),
                 data, TrainConfig(base_lr=1e-3))
print(sweep_csv(rows))
for w, (mean, std, n) in sweep_summary(rows).items():
    print(f"weight {w:>5g}: {mean:.3f} +- {std:.3f} mm over {n} seeds")
