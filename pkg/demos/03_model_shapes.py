"""
Walking one window through the full-size model
==============================================

Random weights, inference mode. Prints the shape after each stage.
"""
import time

import numpy as np

from eegmtl import ModelConfig, MTLTransformer
from eegmtl.rng import RngStream

cfg = ModelConfig.paper()
t0 = time.perf_counter()
model = MTLTransformer(cfg, seed=0).eval()
print(f"{model.num_parameters():,} parameters, built in {time.perf_counter() - t0:.1f}s")

x = RngStream(0).normal((1, 128, 500), dtype=np.float32)
stem = model.encoder.stem(x)
deep = model.encoder.depthwise(stem)
seq = model.represent(x)
print("input     ", x.shape)
print("stem      ", stem.shape)
print("depthwise ", deep.shape)
print("tokens    ", seq.shape)
print("gaze      ", model.predict_gaze(seq).shape)
print("recon     ", model.reconstruct(seq).shape)
