"""
Training a reduced detector for a few epochs
============================================

Each batch updates the jury first, then the prosecution and defendant
networks.  A one-block model on 32 scenes shows the loop in about a minute.
"""
from courtnet import RunConfig, TrainState, evaluate, fit
from courtnet.data import SceneSpec, generate_random_scenes

cfg = RunConfig().replace(pros_blocks=1, def_blocks=1, lr_max=1e-3, warmup_steps=20)
train = generate_random_scenes(SceneSpec(seed=1), 32)
held_out = generate_random_scenes(SceneSpec(seed=2), 16)

state = TrainState.fresh(cfg)
for stats in fit(state, train, 6):
    m = stats.means()
    print(f"epoch {m['epoch']}: L_P {m['loss_P']:.3f}  L_D {m['loss_D']:.3f}  L_J {m['loss_J']:.3f}  "
          f"soft Pr {m['soft_pr']:.3f}  soft Re {m['soft_re']:.3f}")

report = evaluate(state.net, held_out)
print(f"held-out precision {report.mean_precision:.3f} recall {report.mean_recall:.3f} F1 {report.mean_f1:.3f}")
