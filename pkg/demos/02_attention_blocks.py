"""
Dense blocks and the two attention views
========================================

A dense block appends 32 new channels to its input.  Inside it, coarse
attention mixes patches (a 196 x 196 map) and fine attention mixes channels
within each patch (a 32 x 32 map).
"""
import numpy as np

from courtnet import blocks
from courtnet.config import ProsecutionConfig
from courtnet.tensor import Tensor

rng = np.random.default_rng(1)
cfg = ProsecutionConfig()
params = {}
for i in range(cfg.n_blocks):
    blocks.init_denseblock(params, f"b{i}", cfg.width_after(i), cfg.growth, rng)

feat = Tensor(rng.standard_normal((1, cfg.embed.num_patches, cfg.embed.embed_dim)))
for i in range(cfg.n_blocks):
    trace = {}
    before = feat.data
    feat = blocks.denseblock(feat, params, f"b{i}", cfg.heads, cfg.groups, trace)
    kept = np.array_equal(feat.data[..., : before.shape[-1]], before)
    print(f"block {i}: width {before.shape[-1]} -> {feat.shape[-1]}, "
          f"coarse map {trace['coarse'].shape[-2:]}, fine map {trace['fine'].shape[-2:]}, input kept: {kept}")

# every attention row is a probability distribution
rows = trace["coarse"].sum(-1)
print("coarse row sums within", rows.min(), rows.max())
