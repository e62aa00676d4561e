"""Rankings from routing statistics move around with the calibration sample size.
Weight-only rankings cannot, since they never see a token."""
import numpy as np

from moeprune.analysis import stability_study
from moeprune.calib import ToyDims, gen_toy_model

model = gen_toy_model(42, ToyDims(4, 8, 2, 64, 32))
sizes = [64, 256, 1024, 4096]

for crit in ("aimer", "magnitude", "reap", "frequency"):
    m = stability_study(model, crit, sizes)
    off = m.tau[~np.eye(len(sizes), dtype=bool)]
    print(f"{crit:>9}: mean pairwise tau {off.mean():+.3f}, worst {off.min():+.3f}, "
          f"mean prune-set overlap {m.overlap.mean():.3f}")
