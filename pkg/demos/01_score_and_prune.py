"""Walkthrough: generate a toy MoE checkpoint, score its experts from weights alone,
cut a quarter of them out, and check the result still loads and runs."""
import tempfile
from pathlib import Path

import numpy as np

from moeprune.calib import ToyDims, gen_toy_model, load_toy_model, make_batch
from moeprune.checkpoint import Checkpoint, open_model
from moeprune.pruning import apply_plan, make_plan, verify_pruned
from moeprune.scoring import score_checkpoint

work = Path(tempfile.mkdtemp(prefix="moeprune-demo-"))
src = work / "toy"
gen_toy_model(42, ToyDims(4, 16, 2, 64, 32), src)
ck, layout, cfg = open_model(src, "qwen3-like")
print(f"checkpoint: {len(ck)} tensors in {len(ck.shards)} shard(s)")

# no tokens needed, every expert tensor is read once
table = score_checkpoint(ck, layout, "aimer")
for l, row in enumerate(table.layers):
    print(f"layer {l}: scores in [{min(row):.4f}, {max(row):.4f}]")

plan = make_plan(table, 0.25, layout)
print("experts removed per layer:", [lp.pruned for lp in plan.layers])

out = apply_plan(ck, layout, plan, work / "pruned")
rep = verify_pruned(ck, Checkpoint(out), plan, layout)
print(f"verified={rep.ok}  expert params {rep.original_expert_params} -> {rep.pruned_expert_params}")

small = load_toy_model(*open_model(out, "qwen3-like"))
y = small.forward_batch(make_batch(8, 64).vectors)
print("pruned model output", y.shape, "finite:", bool(np.isfinite(y).all()))
print("artifacts in", work)
