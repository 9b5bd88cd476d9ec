"""
Balance loss and pixel metrics
==============================

The adaptive balance loss down-weights whichever of precision or recall is
already high.  Hard metrics count pixels on binary masks.
"""
import numpy as np

from courtnet.losses import adaptive_balance_loss, dataset_metrics, hard_metrics, soft_pr, soft_re

for pr, re in [(0.9, 0.1), (0.5, 0.5), (0.1, 0.9), (0.99, 0.99)]:
    l3 = adaptive_balance_loss(pr, re, 3).item()
    l0 = adaptive_balance_loss(pr, re, 0).item()
    print(f"Pr={pr:.2f} Re={re:.2f}  gamma=3: {l3:7.4f}  gamma=0: {l0:7.4f}")

print("at (0.5, 0.5), gamma=3:", adaptive_balance_loss(0.5, 0.5, 3).item(), "=", 0.25 * np.log(2))

gt = np.zeros((8, 8))
gt[2:4, 2:4] = 1
pred = np.zeros((8, 8))
pred[3:5, 3:5] = 1
print("hard precision/recall/F1:", hard_metrics(pred, gt))

soft = np.clip(gt * 0.8 + 0.05, 0, 1)
print("soft Pr", soft_pr(gt, soft).item(), "soft Re", soft_re(gt, soft).item())

report = dataset_metrics([(pred, gt), (gt, gt)])
print("dataset mean F1:", report.mean_f1)
