import json
import logging
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import DATA, DOCS
from moeprune.checkpoint import Checkpoint, open_model, write_checkpoint
from moeprune.errors import DomainError, FormatError
from moeprune.scoring import (
    CRITERIA,
    ScoreTable,
    aimer_score,
    aimer_score_vec,
    hoyer_score,
    magnitude_score,
    random_scores,
    rank_layer,
    score_checkpoint,
)
from moeprune.tensor import ExpertTensors

jsonschema = pytest.importorskip("jsonschema")


def tiny(values) -> ExpertTensors:
    """Spread a flat vector of length 3*m*d over gate/up/down with d=m=... minimal shapes."""
    w = np.asarray(values, dtype=np.float64)
    # d=1, m=len/3 keeps every entry
    m = w.size // 3
    return ExpertTensors.from_flat(w, d=1, m=m)


def oracle_aimer(w) -> float:
    w = [float(x) for x in np.ravel(w)]
    peak = max(abs(x) for x in w)
    w = [x / peak for x in w]     # the ratio is scale free; avoid underflow in q
    p = math.fsum(abs(x) for x in w)
    q = math.fsum(x * x for x in w)
    return p / math.sqrt(len(w) * q)


# -- examples ----------------------------------------------------------------


def test_aimer_examples_on_vectors():
    assert aimer_score_vec([1, 1, 1, 1]) == 1.0
    assert aimer_score_vec([3, 0, 0, 0]) == 0.5
    assert aimer_score_vec([1, 2, 3, 4]) == pytest.approx(10 / math.sqrt(120), rel=1e-15)
    assert aimer_score_vec([1, 2, 3, 4]) == pytest.approx(0.91287, abs=1e-5)
    assert aimer_score_vec([1, 1]) == 1.0
    assert aimer_score_vec([5, 0, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(1 / 3, rel=1e-15)


def test_aimer_examples_on_experts():
    # N=6 here; the spread over three projections must not matter
    assert aimer_score(tiny([1, 1, 1, 1, 1, 1])) == 1.0
    assert aimer_score(tiny([3, 0, 0, 0, 0, 0])) == pytest.approx(1 / math.sqrt(6), rel=1e-15)
    e = tiny([1, 2, 3, 4, 5, 6])
    assert aimer_score(e) == pytest.approx(oracle_aimer(range(1, 7)), rel=1e-15)


def test_zero_expert_scores_one_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert aimer_score(tiny(np.zeros(6))) == 1.0
        assert aimer_score_vec(np.zeros(4)) == 1.0
    assert "all-zero" in caplog.text


def test_magnitude_examples():
    assert magnitude_score(tiny([1, -1, 1, -1, 1, -1])) == 1.0
    assert magnitude_score(tiny(np.zeros(6))) == 0.0
    assert magnitude_score(tiny([1, 2, 3, 4, 5, 6])) == 3.5


def test_hoyer_examples():
    assert hoyer_score([2, -2, 2, 2]) == pytest.approx(0.0, abs=1e-15)
    assert hoyer_score([0, 0, 7, 0]) == pytest.approx(1.0, rel=1e-15)
    a = 10 / math.sqrt(120)
    assert hoyer_score([1, 2, 3, 4]) == pytest.approx(2 * (1 - a), rel=1e-12)
    assert hoyer_score([1, 2, 3, 4]) == pytest.approx(0.17426, abs=1e-5)
    with pytest.raises(DomainError):
        hoyer_score([3.0])
    with pytest.raises(DomainError):
        hoyer_score([0.0, 0.0])


def test_criterion_table():
    assert CRITERIA["aimer"].prune_end == "highest"
    for c in ("magnitude", "hoyer", "random", "frequency", "seer", "ean", "reap"):
        assert CRITERIA[c].prune_end == "lowest"
    assert {c for c, v in CRITERIA.items() if v.requires_calibration} == {
        "frequency", "seer", "ean", "reap"}


def test_rank_layer_examples():
    assert rank_layer([0.9, 0.5, 0.7], "aimer").order == (0, 2, 1)
    assert rank_layer([0.9, 0.5, 0.7], "magnitude").order == (1, 2, 0)
    assert rank_layer([0.6, 0.6, 0.3], "aimer").order == (0, 1, 2)
    assert rank_layer([0.6, 0.6, 0.3], "magnitude").order == (2, 0, 1)
    with pytest.raises(DomainError):
        rank_layer([], "aimer")
    with pytest.raises(DomainError):
        rank_layer([0.1, math.nan], "aimer")


def test_random_scores_determinism_and_golden():
    golden = json.loads((DATA / "random_scores.json").read_text())
    for layer, want in golden["layers"].items():
        got = random_scores(golden["n"], int(layer), golden["seed"])
        assert got.tolist() == want
    assert random_scores(8, 0).tolist() == random_scores(8, 0, 42).tolist()
    assert random_scores(8, 0).tolist() != random_scores(8, 1).tolist()
    one = random_scores(1, 0)
    assert one.shape == (1,) and rank_layer(one, "random").order == (0,)


# -- properties --------------------------------------------------------------

vectors = arrays(np.float64, st.integers(2, 64),
                 elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False))


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_aimer_bounds_and_oracle(w):
    assume(np.any(w != 0))
    a = aimer_score_vec(w)
    assert 1 / math.sqrt(w.size) <= a <= 1.0
    assert a == pytest.approx(min(1.0, oracle_aimer(w)), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(vectors, st.sampled_from([1e-3, 0.5, 3.7, 1e3, -2.0]))
def test_aimer_scale_invariant_magnitude_not(w, c):
    assume(np.abs(w).max() > 1e-3)
    assert aimer_score_vec(c * w) == pytest.approx(aimer_score_vec(w), rel=1e-6)
    e = ExpertTensors.from_flat(np.resize(w, 6), d=1, m=2)
    doubled = ExpertTensors(2 * e.gate, 2 * e.up, 2 * e.down)
    assert magnitude_score(doubled) == 2 * magnitude_score(e)


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_hoyer_identity(w):
    assume(np.any(w != 0))
    n = w.size
    a = aimer_score_vec(w)
    assert hoyer_score(w) == pytest.approx(math.sqrt(n) * (1 - a) / (math.sqrt(n) - 1), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_expert_and_flat_forms_agree(d, m, seed):
    e = ExpertTensors.from_flat(np.random.default_rng(seed).standard_normal(3 * d * m), d, m)
    assert aimer_score(e) == pytest.approx(aimer_score_vec(e.flatten()), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30),
       st.sampled_from(sorted(CRITERIA)))
def test_rank_layer_is_stable_permutation(scores, crit):
    r = rank_layer(scores, crit)
    assert sorted(r.order) == list(range(len(scores)))
    s = [scores[i] for i in r.order]
    sign = -1 if CRITERIA[crit].prune_end == "highest" else 1
    for i in range(len(s) - 1):
        a, b = sign * s[i], sign * s[i + 1]
        assert a <= b
        if a == b:
            assert r.order[i] < r.order[i + 1]
    assert r == rank_layer(list(scores), crit)


# -- checkpoint scoring -----------------------------------------------------


def test_score_toy_checkpoint(toy):
    ck, lay, _ = toy
    table = score_checkpoint(ck, lay, "aimer")
    assert table.num_layers == 2 and all(s.size == 4 for s in table.layers)
    n = lay.expert_numel
    assert all(1 / math.sqrt(n) <= x <= 1 for s in table.layers for x in s)
    again = score_checkpoint(ck, lay, "aimer")
    assert table.hash() == again.hash()
    assert table.seed is None and table.timing_seconds >= 0


def test_thread_count_does_not_change_scores(toy):
    ck, lay, _ = toy
    for crit in ("aimer", "magnitude", "hoyer"):
        a = score_checkpoint(ck, lay, crit, threads=1)
        b = score_checkpoint(ck, lay, crit, threads=4)
        assert a.hash() == b.hash()


def test_random_criterion_default_seed(toy):
    ck, lay, _ = toy
    t = score_checkpoint(ck, lay, "random")
    assert t.seed == 42
    assert t.layers[1].tolist() == random_scores(4, 1, 42).tolist()


def test_calibrated_criterion_refused(toy):
    ck, lay, _ = toy
    with pytest.raises(DomainError):
        score_checkpoint(ck, lay, "reap")


def test_scaled_copy_scores_equal(toy, tmp_path):
    ck, lay, _ = toy
    tensors = {name: ck.read(name) for name in ck.names}
    for src, dst in zip(lay.expert_names(0, 1), lay.expert_names(0, 2)):
        tensors[dst] = (3.7 * tensors[src].astype(np.float64)).astype(np.float32)
    write_checkpoint(tmp_path, tensors)
    (tmp_path / "config.json").write_text(ck.config().text)
    ck2, lay2, _ = open_model(tmp_path, "qwen3-like")
    s = score_checkpoint(ck2, lay2, "aimer").layers[0]
    assert s[2] == pytest.approx(s[1], rel=1e-6)
    m = score_checkpoint(ck2, lay2, "magnitude").layers[0]
    assert m[2] == pytest.approx(3.7 * m[1], rel=1e-6)


def test_score_table_json_roundtrip_and_schema(toy, tmp_path):
    ck, lay, _ = toy
    schema = json.loads((DOCS / "schemas" / "score_table.schema.json").read_text())
    for crit in ("aimer", "random"):
        t = score_checkpoint(ck, lay, crit)
        t.save(tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        jsonschema.validate(doc, schema)
        back = ScoreTable.load(tmp_path / "s.json")
        assert back.hash() == t.hash() == doc["score_table_hash"]
        assert doc["prune_end"] == t.criterion.prune_end


def test_score_table_rejects_bad_input(tmp_path):
    with pytest.raises(DomainError):
        ScoreTable("aimer", [[0.5, math.inf]])
    bad = {"criterion": "aimer", "prune_end": "lowest", "layers": [{"layer": 0, "scores": [0.5]}]}
    with pytest.raises(FormatError):
        ScoreTable.from_dict(bad)
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(FormatError):
        ScoreTable.load(tmp_path / "x.json")


def test_streaming_reads_only_expert_ranges(toy, monkeypatch):
    """Scoring reads each expert tensor once, never a whole shard."""
    ck, lay, _ = toy
    seen = []
    orig = Checkpoint.read_raw

    def spy(self, name):
        seen.append(name)
        return orig(self, name)

    monkeypatch.setattr(Checkpoint, "read_raw", spy)
    score_checkpoint(ck, lay, "aimer")
    expert = [n for n in seen if ".experts." in n]
    assert len(expert) == len(set(expert)) == 3 * lay.num_layers * lay.num_experts


def test_extreme_scales_do_not_underflow():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    base = aimer_score_vec(w)
    for c in (1e-250, 1e250):
        assert aimer_score_vec(c * w) == pytest.approx(base, rel=1e-12)
        assert hoyer_score(c * w) == pytest.approx(hoyer_score(w), rel=1e-12)
