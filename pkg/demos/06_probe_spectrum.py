"""
Attention maps and feature periodicity on the probe set
=======================================================

Dump one frame's attention, then run the DFT analyzer on a synthetic series
with a nine-frame cycle and on features from an untrained model.
"""
import numpy as np

from courtnet import analysis as A
from courtnet import CourtNet, RunConfig
from courtnet.data import ProbeSpec, generate_probe_set

net = CourtNet.initialize(RunConfig().replace(pros_blocks=1, def_blocks=1), seed=0)
probe = generate_probe_set(ProbeSpec())

dump = A.dump_attention(net, probe[100])
summary = dump.summary()
print("coarse summary grid", summary.shape, "most attended patch", int(summary.argmax()),
      "target patch", probe[100].metadata["patch_index"])

t = np.arange(1764)
cyclic = np.stack([np.cos(2 * np.pi * t / 9 + p) for p in np.linspace(0, 2, 16)], 1)
spec = A.dft_power(cyclic)
print("synthetic series: dominant period", A.format_period(spec.dominant_period),
      "Parseval gap", A.parseval_gap(cyclic))

series = A.collect_feature_series(net, probe)
spec = A.dft_power(series)
print("untrained features: dominant period", A.format_period(spec.dominant_period),
      f"false-alarm probability {spec.false_alarm:.3g}")
