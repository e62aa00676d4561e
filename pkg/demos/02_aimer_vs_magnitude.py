"""How spread out are the scores inside a layer?  A criterion whose normalized
ranks bunch together gives the pruning step little to go on."""
from moeprune.analysis import rank_profile, separation_report
from moeprune.calib import ToyDims, gen_toy_model, score_model

model = gen_toy_model(0, ToyDims(6, 32, 4, 64, 32))
tables = [score_model(model, c) for c in ("aimer", "magnitude", "hoyer")]

for t in tables:
    prof = rank_profile(t)
    mid = prof.rows[:, prof.rows.shape[1] // 2]
    print(f"{t.criterion.id:>9}: median rescaled score per layer", " ".join(f"{x:.2f}" for x in mid))

rep = separation_report(tables)
print("\nlayer  criterion  IQR")
for layer, crit, v in rep.rows:
    print(f"{layer:>5}  {crit:<9}  {v:.3f}")
