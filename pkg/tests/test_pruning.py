import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DOCS
from moeprune.calib import ToyDims, gen_toy_model, load_toy_model, make_batch, moe_forward_batch
from moeprune.checkpoint import INDEX_FILE, PRESETS, Checkpoint, open_model, write_checkpoint
from moeprune.errors import ConfigurationError, InvalidPlanError, ProvenanceError
from moeprune.pruning import (
    LayerPlan,
    PruningPlan,
    apply_plan,
    make_plan,
    prune_count,
    prune_model,
    verify_pruned,
)
from moeprune.scoring import ScoreTable, score_checkpoint


def table_for(layout, scores_per_layer=None, crit="aimer"):
    n = layout.num_experts
    rows = scores_per_layer or [np.linspace(0.9, 0.1, n) for _ in range(layout.num_layers)]
    return ScoreTable(crit, rows, layout_hash=layout.hash())


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


# -- plans -------------------------------------------------------------------


@pytest.mark.parametrize("ratio,n,p", [(0.25, 64, 16), (0.5, 64, 32), (0.9, 8, 7),
                                       (0.5, 5, 3), (0.25, 6, 2), (0.125, 4, 1), (0.0, 8, 0)])
def test_prune_count_round_half_up(ratio, n, p):
    assert prune_count(ratio, n) == p


def test_make_plan_examples(toy):
    _, lay, _ = toy
    big = lay.with_experts(64)
    for ratio, p in ((0.25, 16), (0.5, 32)):
        plan = make_plan(table_for(big), ratio, big)
        assert plan.prune_count == p
        assert all(len(lp.retained) == 64 - p for lp in plan.layers)


def test_infeasible_ratio_names_max(toy):
    _, lay, _ = toy
    n8 = lay.with_experts(8)
    with pytest.raises(InvalidPlanError, match="maximum feasible ratio is 0.75"):
        make_plan(table_for(n8), 0.9, n8)
    with pytest.raises(InvalidPlanError):
        make_plan(table_for(n8), 1.0, n8)


def test_plan_takes_rank_prefix(toy):
    _, lay, _ = toy
    t = table_for(lay, [[0.1, 0.9, 0.5, 0.7], [0.9, 0.1, 0.5, 0.7]])
    plan = make_plan(t, 0.5, lay)
    assert plan.layers[0].pruned == (1, 3) and plan.layers[0].retained == (0, 2)
    assert plan.layers[1].pruned == (0, 3)
    assert plan.layers[0].index_map == {0: 0, 2: 1}
    m = make_plan(ScoreTable("magnitude", t.layers), 0.5, lay)
    assert m.layers[0].pruned == (0, 2)


def test_plan_table_mismatch(toy):
    _, lay, _ = toy
    with pytest.raises(InvalidPlanError):
        make_plan(ScoreTable("aimer", [[0.5] * 5] * 2), 0.25, lay)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.floats(0, 0.99), st.integers(0, 10_000))
def test_plan_invariants(n, L, ratio, seed):
    k = 1
    p = prune_count(ratio, n)
    if n - p < k:
        return
    lay = PRESETS["qwen3-like"].with_experts(n)
    lay = type(lay).from_dict({**lay.to_dict(), "num_layers": L, "top_k": k})
    rng = np.random.default_rng(seed)
    t = ScoreTable("aimer", [rng.random(n) for _ in range(L)])
    plan = make_plan(t, ratio, lay)
    assert plan.problems(n, k) == []
    for lp in plan.layers:
        assert len(lp.pruned) == p
        news = [lp.index_map[o] for o in lp.retained]
        assert news == list(range(len(lp.retained)))
    assert make_plan(t, ratio, lay).to_dict() == plan.to_dict()


def test_plan_json_and_schema(toy, tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    ck, lay, _ = toy
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    plan.save(tmp_path / "plan.json")
    doc = json.loads((tmp_path / "plan.json").read_text())
    jsonschema.validate(doc, json.loads((DOCS / "schemas" / "pruning_plan.schema.json").read_text()))
    assert PruningPlan.load(tmp_path / "plan.json") == plan


def test_problems_detects_broken_plans():
    bad = PruningPlan(0.5, "aimer", [LayerPlan(0, (1,), (0, 2, 3)), LayerPlan(1, (0, 1), (2, 3))])
    assert any("different counts" in p for p in bad.problems(4, 2))
    overlap = PruningPlan(0.5, "aimer", [LayerPlan(0, (1, 2), (0, 2))])
    msgs = overlap.problems(4, 2)
    assert any("overlap" in m for m in msgs) and any("cover" in m for m in msgs)


# -- surgery -----------------------------------------------------------------


def test_four_experts_prune_1_and_3(toy, tmp_path):
    ck, lay, _ = toy
    t = score_checkpoint(ck, lay)
    plan = make_plan(t, 0.5, lay)
    plan.layers = [LayerPlan(l, (1, 3), (0, 2)) for l in range(lay.num_layers)]
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pruned = Checkpoint(out)
    for l in range(lay.num_layers):
        for src, dst in ((0, 0), (2, 1)):
            for a, b in zip(lay.expert_names(l, src), lay.expert_names(l, dst)):
                assert pruned.read_raw(b) == ck.read_raw(a)
        assert f"model.layers.{l}.mlp.experts.2.gate_proj.weight" not in pruned
        router = ck.read(lay.router_name(l))
        np.testing.assert_array_equal(pruned.read(lay.router_name(l)), router[[0, 2]])
    assert pruned.config().data["num_experts"] == 2
    assert verify_pruned(ck, pruned, plan, lay).ok


@pytest.mark.parametrize("ratio", [0.25, 0.5])
def test_apply_verify_and_accounting(medium_dir, tmp_path, ratio):
    ck, lay, _ = open_model(medium_dir, "qwen3-like")
    plan = make_plan(score_checkpoint(ck, lay), ratio, lay)
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pruned = Checkpoint(out)
    rep = verify_pruned(ck, pruned, plan, lay)
    assert rep.ok, rep.failures
    p = plan.prune_count
    assert rep.original_expert_params - rep.pruned_expert_params == lay.num_layers * p * 3 * 64 * 32
    if ratio == 0.5:
        assert 2 * rep.pruned_expert_params == rep.original_expert_params
    # multi-shard input stays multi-shard, and passthrough is untouched
    assert (out / INDEX_FILE).exists() and len(pruned.shards) > 1
    assert pruned.read_raw("model.norm.weight") == ck.read_raw("model.norm.weight")
    # input directory untouched
    assert Checkpoint(medium_dir).fingerprint(lay) == ck.fingerprint(lay)


def test_pruned_model_reloads_and_is_routed_equivalent(medium_dir, tmp_path):
    ck, lay, cfg = open_model(medium_dir, "qwen3-like")
    plan = make_plan(score_checkpoint(ck, lay), 0.25, lay)
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pck, play, pcfg = open_model(out, "qwen3-like")
    assert play.num_experts == 6
    full = load_toy_model(ck, lay, cfg)
    small = load_toy_model(pck, play, pcfg)

    H = make_batch(2000, 64, seed=3).vectors
    keep = np.ones(len(H), dtype=bool)
    X = H
    for layer, lp in zip(full.layers, plan.layers):
        tr = moe_forward_batch(layer, X)
        keep &= ~np.isin(tr.selected, lp.pruned).any(axis=1)
        X = tr.output
    assert keep.sum() > 10
    a = full.forward_batch(H[keep])
    b = small.forward_batch(H[keep])
    np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-9)
    # and the in-memory surgery agrees with the on-disk one
    np.testing.assert_array_equal(prune_model(full, plan).forward_batch(H[:50]),
                                  small.forward_batch(H[:50]))


def test_router_bias_is_sliced(tmp_path):
    gen_toy_model(3, ToyDims(2, 4, 2, 8, 4), tmp_path / "m", layout="ernie-like")
    ck, lay, _ = open_model(tmp_path / "m", "ernie-like")
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pruned = Checkpoint(out)
    for l, lp in enumerate(plan.layers):
        bias = ck.read(lay.router_bias_name(l))
        np.testing.assert_array_equal(pruned.read(lay.router_bias_name(l)), bias[list(lp.retained)])
        # shared experts are passthrough
        name = f"model.layers.{l}.mlp.shared_experts.up_proj.weight"
        assert pruned.read_raw(name) == ck.read_raw(name)
    assert pruned.config().data["moe_num_experts"] == 2
    assert verify_pruned(ck, pruned, plan, lay).ok


@pytest.mark.parametrize("fixture", ["toy_dir", "medium_dir"])
def test_empty_plan_is_byte_identical(request, tmp_path, fixture):
    src = request.getfixturevalue(fixture)
    ck, lay, _ = open_model(src, "qwen3-like")
    plan = make_plan(score_checkpoint(ck, lay), 0.0, lay)
    assert plan.prune_count == 0
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    assert files(out) == files(src)


def test_tampered_checkpoint_names_extra_tensor(toy, tmp_path):
    ck, lay, _ = toy
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pruned = Checkpoint(out)
    tensors = {n: pruned.read(n) for n in pruned.names}
    rogue = "model.layers.0.mlp.experts.3.gate_proj.weight"
    tensors[rogue] = np.zeros((4, 8), dtype=np.float32)
    bad = tmp_path / "bad"
    write_checkpoint(bad, tensors)
    (bad / "config.json").write_text((out / "config.json").read_text())
    rep = verify_pruned(ck, Checkpoint(bad), plan, lay)
    assert not rep.ok
    assert any(rogue in f for f in rep.failures)


def test_altered_payload_is_caught(toy, tmp_path):
    ck, lay, _ = toy
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    out = apply_plan(ck, lay, plan, tmp_path / "out")
    pruned = Checkpoint(out)
    tensors = {n: pruned.read(n) for n in pruned.names}
    name = lay.expert_names(1, 0)[2]
    tensors[name] = tensors[name] + 1
    bad = tmp_path / "bad"
    write_checkpoint(bad, tensors)
    (bad / "config.json").write_text((out / "config.json").read_text())
    rep = verify_pruned(ck, Checkpoint(bad), plan, lay)
    assert any(name in f for f in rep.failures)


def test_stale_scores_are_refused(toy, tmp_path):
    ck, lay, _ = toy
    other = tmp_path / "other"
    gen_toy_model(8, ToyDims(2, 4, 2, 8, 4), other)
    ock, olay, _ = open_model(other, "qwen3-like")
    plan = make_plan(score_checkpoint(ock, olay), 0.5, olay)
    with pytest.raises(ProvenanceError):
        apply_plan(ck, lay, plan, tmp_path / "out")
    no_prov = make_plan(ScoreTable("aimer", score_checkpoint(ck, lay).layers), 0.5, lay)
    with pytest.raises(ProvenanceError):
        apply_plan(ck, lay, no_prov, tmp_path / "out2")


def test_surgery_is_out_of_place(toy_dir, toy, tmp_path):
    ck, lay, _ = toy
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    with pytest.raises(ConfigurationError):
        apply_plan(ck, lay, plan, toy_dir)
    busy = tmp_path / "busy"
    busy.mkdir()
    (busy / "x").write_text("x")
    with pytest.raises(ConfigurationError):
        apply_plan(ck, lay, plan, busy)


def test_invalid_plan_refused(toy, tmp_path):
    ck, lay, _ = toy
    plan = make_plan(score_checkpoint(ck, lay), 0.5, lay)
    plan.layers = [LayerPlan(l, (0, 1, 2), (3,)) for l in range(lay.num_layers)]
    with pytest.raises(InvalidPlanError):
        apply_plan(ck, lay, plan, tmp_path / "out")
