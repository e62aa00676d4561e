"""Per-layer hidden-state variance for the full model and for pruned variants,
plus CSV/SVG export of the curves."""
import sys
import tempfile
from pathlib import Path

from moeprune.analysis import export, layer_variance
from moeprune.calib import ToyDims, gen_toy_model, make_batch, model_layout, score_model
from moeprune.pruning import make_plan, prune_model

model = gen_toy_model(3, ToyDims(6, 16, 2, 64, 32))
layout = model_layout(model)
variants = {}
for crit in ("aimer", "magnitude"):
    for ratio in (0.25, 0.5):
        plan = make_plan(score_model(model, crit), ratio, layout)
        variants[f"{crit}-{ratio}"] = prune_model(model, plan)

curves = layer_variance(model, make_batch(1024, 64, seed=0), variants)
for c in curves:
    print(f"{c.variant:>15}", " ".join(f"{v:7.3f}" for v in c.values))

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "variance"
print("wrote", [str(p) for p in export(curves, out)])
