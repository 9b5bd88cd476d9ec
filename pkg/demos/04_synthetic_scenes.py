"""
Synthetic infrared scenes and the probe set
===========================================

Random scenes put one to three faint Gaussian targets on a cluttered
background.  The probe set walks a single target through nine slots of every
patch, 1764 frames in all.
"""
import numpy as np

from courtnet.data import ProbeSpec, SceneSpec, generate_probe_set, generate_random_scenes, satisfies_small_target_rule

scenes = generate_random_scenes(SceneSpec(seed=0), 5)
for s in scenes:
    print("targets", len(s.metadata["centers"]), "target pixels", int(s.mask.sum()),
          "small-target rule", satisfies_small_target_rule(s.mask))

probe = generate_probe_set(ProbeSpec())
print("probe frames:", len(probe))
for t in (0, 1, 8, 9, 10):
    r, c = np.argwhere(probe[t].mask)[0]
    print(f"frame {t}: patch {probe[t].metadata['patch_index']}, slot {probe[t].metadata['slot']}, pixel ({r}, {c})")
