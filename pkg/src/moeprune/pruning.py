"""Layer-wise uniform pruning plans and out-of-place checkpoint surgery.

Every layer drops the same number of experts, ``round_half_up(ratio * n)``,
taken from the front of that layer's ranking. Surgery deletes the dropped
experts' tensors, renumbers survivors in their original order and keeps the
matching router rows (and bias entries). Router rows are sliced only; the
remaining logits are not re-centred and top-k is unchanged.
"""
from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .calib import MoeLayer, ToyMoeModel
from .checkpoint import (
    CONFIG_FILE,
    INDEX_FILE,
    Checkpoint,
    ModelLayout,
    PendingTensor,
    patch_config,
    write_checkpoint,
)
from .errors import ConfigurationError, FormatError, InvalidPlanError, ProvenanceError
from .scoring import ScoreTable

PLAN_FILE = "pruning_plan.json"
REPORT_FILE = "verification_report.json"


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    pruned: tuple[int, ...]
    retained: tuple[int, ...]

    @property
    def index_map(self) -> dict[int, int]:
        """old expert id -> new expert id for survivors"""
        return {old: new for new, old in enumerate(self.retained)}


@dataclass
class PruningPlan:
    ratio: float
    criterion: str
    layers: list[LayerPlan]
    score_table_hash: str = ""
    layout_hash: str = ""
    checkpoint_fingerprint: str = ""

    @property
    def prune_count(self) -> int:
        return len(self.layers[0].pruned) if self.layers else 0

    def problems(self, num_experts: int, top_k: int) -> list[str]:
        out = []
        counts = {len(lp.pruned) for lp in self.layers}
        if len(counts) > 1:
            out.append(f"layers prune different counts: {sorted(counts)}")
        for lp in self.layers:
            if list(lp.pruned) != sorted(set(lp.pruned)) or list(lp.retained) != sorted(set(lp.retained)):
                out.append(f"layer {lp.layer}: id lists must be sorted and unique")
            if set(lp.pruned) & set(lp.retained):
                out.append(f"layer {lp.layer}: pruned and retained overlap")
            if set(lp.pruned) | set(lp.retained) != set(range(num_experts)):
                out.append(f"layer {lp.layer}: ids do not cover 0..{num_experts - 1}")
            if len(lp.retained) < top_k:
                out.append(f"layer {lp.layer}: {len(lp.retained)} experts left for top-{top_k}")
        return out

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "criterion": self.criterion,
            "score_table_hash": self.score_table_hash,
            "layout_hash": self.layout_hash,
            "checkpoint_fingerprint": self.checkpoint_fingerprint,
            "layers": [{"layer": lp.layer, "pruned": list(lp.pruned),
                        "retained": list(lp.retained)} for lp in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PruningPlan":
        try:
            return cls(float(doc["ratio"]), doc["criterion"],
                       [LayerPlan(int(r["layer"]), tuple(r["pruned"]), tuple(r["retained"]))
                        for r in doc["layers"]],
                       doc.get("score_table_hash", ""), doc.get("layout_hash", ""),
                       doc.get("checkpoint_fingerprint", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed pruning plan ({exc})") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def prune_count(ratio: float, n: int) -> int:
    """round_half_up(ratio * n), computed exactly on the decimal value of ``ratio``."""
    return math.floor(Fraction(repr(float(ratio))) * n + Fraction(1, 2))


def make_plan(table: ScoreTable, ratio: float, layout: ModelLayout) -> PruningPlan:
    """Plan from a score table; ``ratio == 0`` gives the empty diagnostic plan."""
    if not 0 <= ratio < 1:
        raise InvalidPlanError(f"ratio must lie in [0, 1), got {ratio}")
    n, k = layout.num_experts, layout.top_k
    sizes = {s.size for s in table.layers}
    if sizes != {n} or table.num_layers != layout.num_layers:
        raise InvalidPlanError(
            f"score table is {table.num_layers} x {sorted(sizes)}, layout is "
            f"{layout.num_layers} x {n}"
        )
    p = prune_count(ratio, n)
    if n - p < k:
        raise InvalidPlanError(
            f"ratio {ratio} prunes {p} of {n} experts, leaving {n - p} < top_k={k}; "
            f"maximum feasible ratio is {(n - k) / n:g}"
        )
    layers = []
    for ranked in table.ranked():
        pruned = tuple(sorted(ranked.order[:p]))
        retained = tuple(sorted(ranked.order[p:]))
        layers.append(LayerPlan(ranked.layer, pruned, retained))
    return PruningPlan(ratio, table.criterion.id, layers, table.hash(), table.layout_hash,
                       table.checkpoint_fingerprint)


# --------------------------------------------------------------------------
# surgery


def classify(checkpoint: Checkpoint, layout: ModelLayout) -> dict[str, tuple]:
    """Map routed-expert and router tensor names to their role.

    Values are ``("expert", layer, expert, template)``, ``("router", layer)``
    or ``("bias", layer)``. Names absent from the map are passthrough.
    """
    roles: dict[str, tuple] = {}
    templates = (layout.gate_template, layout.up_template, layout.down_template,
                 *layout.extra_expert_templates)
    for l in range(layout.num_layers):
        roles[layout.router_name(l)] = ("router", l)
        if layout.router_bias_template:
            roles[layout.router_bias_name(l)] = ("bias", l)
        for e in range(layout.num_experts):
            for t in templates:
                roles[t.format(layer=l, expert=e)] = ("expert", l, e, t)
    return {name: role for name, role in roles.items() if name in checkpoint}


def _slice_rows(raw: bytes, row_bytes: int, rows) -> bytes:
    return b"".join(raw[r * row_bytes:(r + 1) * row_bytes] for r in rows)


def _check_provenance(checkpoint: Checkpoint, layout: ModelLayout, plan: PruningPlan):
    if plan.layout_hash != layout.hash():
        raise ProvenanceError("plan was built for a different layout (layout hash mismatch)")
    if plan.checkpoint_fingerprint != checkpoint.fingerprint(layout):
        raise ProvenanceError("plan was built from scores of a different checkpoint")


def pruned_tensors(checkpoint: Checkpoint, layout: ModelLayout, plan: PruningPlan) -> dict:
    """Ordered lazy tensors of the pruned checkpoint (input order, survivors renamed)."""
    by_layer = {lp.layer: lp for lp in plan.layers}
    roles = classify(checkpoint, layout)
    out = {}
    for name in checkpoint.names:
        meta = checkpoint.meta(name)
        role = roles.get(name)
        if role is None:
            out[name] = _copy(checkpoint, name)
        elif role[0] == "expert":
            _, l, e, template = role
            new = by_layer[l].index_map.get(e)
            if new is not None:
                out[template.format(layer=l, expert=new)] = _copy(checkpoint, name)
        else:
            keep = by_layer[role[1]].retained
            row_bytes = meta.nbytes // meta.shape[0]
            shape = (len(keep), *meta.shape[1:])
            out[name] = _sliced(checkpoint, name, meta.dtype, shape, row_bytes, keep)
    return out


def _copy(checkpoint, name):
    m = checkpoint.meta(name)
    return PendingTensor(m.dtype, m.shape, lambda: checkpoint.read_raw(name))


def _sliced(checkpoint, name, dtype, shape, row_bytes, keep):
    return PendingTensor(dtype, shape,
                         lambda: _slice_rows(checkpoint.read_raw(name), row_bytes, keep))


def apply_plan(checkpoint: Checkpoint, layout: ModelLayout, plan: PruningPlan,
               out_dir: str | os.PathLike, check_provenance: bool = True) -> Path:
    """Write the pruned checkpoint, patched config and plan into a new directory."""
    out_dir = Path(out_dir)
    if out_dir.resolve() == checkpoint.root.resolve():
        raise ConfigurationError("surgery is out-of-place: output must differ from the input")
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigurationError(f"{out_dir} is not empty")
    problems = plan.problems(layout.num_experts, layout.top_k)
    if problems or len(plan.layers) != layout.num_layers:
        raise InvalidPlanError("; ".join(problems) or "plan layer count differs from layout")
    if check_provenance:
        _check_provenance(checkpoint, layout, plan)

    shard_limit = None
    if len(checkpoint.shards) > 1:
        per_shard: dict = {}
        for m in checkpoint.tensors.values():
            per_shard[m.path] = per_shard.get(m.path, 0) + m.nbytes
        shard_limit = max(per_shard.values())
    write_checkpoint(out_dir, pruned_tensors(checkpoint, layout, plan),
                     shard_limit=shard_limit, metadata=checkpoint.metadata or None)

    new_n = layout.num_experts - plan.prune_count
    config = patch_config(checkpoint.config(), layout, new_n)
    (out_dir / CONFIG_FILE).write_text(config.text)
    skip = {CONFIG_FILE, INDEX_FILE, *(p.name for p in checkpoint.shards)}
    for item in checkpoint.root.iterdir():
        if item.is_file() and item.name not in skip and not (out_dir / item.name).exists():
            shutil.copyfile(item, out_dir / item.name)
    return out_dir


# --------------------------------------------------------------------------
# verification


@dataclass
class VerifyReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    original_expert_params: int = 0
    pruned_expert_params: int = 0

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    @property
    def failures(self) -> list[str]:
        return [f"{name}: {detail}" for name, ok, detail in self.checks if not ok]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "original_expert_params": self.original_expert_params,
            "pruned_expert_params": self.pruned_expert_params,
            "expert_param_ratio": (self.pruned_expert_params / self.original_expert_params
                                   if self.original_expert_params else None),
            "checks": [{"check": n, "ok": ok, "detail": d} for n, ok, d in self.checks],
        }


def verify_pruned(original: Checkpoint, pruned: Checkpoint, plan: PruningPlan,
                  layout: ModelLayout) -> VerifyReport:
    rep = VerifyReport()
    n, k, L = layout.num_experts, layout.top_k, layout.num_layers
    problems = plan.problems(n, k)
    rep.add("plan invariants", not problems, "; ".join(problems))
    if problems:
        return rep

    expected = pruned_tensors(original, layout, plan)
    extra = sorted(set(pruned.names) - set(expected))
    missing = sorted(set(expected) - set(pruned.names))
    rep.add("no unexpected tensors", not extra, ", ".join(extra))
    rep.add("no missing tensors", not missing, ", ".join(missing))

    p = plan.prune_count
    roles = classify(original, layout)
    n_expert_orig = sum(1 for r in roles.values() if r[0] == "expert")
    per_expert = 3 + len([t for t in layout.extra_expert_templates
                          if t.format(layer=0, expert=0) in original])
    want = n_expert_orig - per_expert * p * L
    new_layout = layout.with_experts(n - p)
    got = sum(1 for r in classify(pruned, new_layout).values() if r[0] == "expert")
    rep.add("expert tensor count", got == want, f"expected {want}, found {got}")

    bad_shape, bad_bytes = [], []
    for name, t in expected.items():
        if name not in pruned:
            continue
        meta = pruned.meta(name)
        if tuple(meta.shape) != tuple(t.shape) or meta.dtype != t.dtype:
            bad_shape.append(name)
        elif pruned.read_raw(name) != t.produce():
            bad_bytes.append(name)
    rep.add("shapes and dtypes", not bad_shape, ", ".join(bad_shape))
    rep.add("payload bytes match source", not bad_bytes, ", ".join(bad_bytes))

    router_shapes = [tuple(pruned.meta(layout.router_name(l)).shape)
                     for l in range(L) if layout.router_name(l) in pruned]
    rep.add("router shapes", router_shapes == [(n - p, layout.hidden_dim)] * L,
            f"{router_shapes[:3]}...")

    try:
        cfg = pruned.config().data.get(layout.num_experts_key)
        rep.add("config expert count", cfg == n - p, f"config says {cfg}, expected {n - p}")
    except FormatError as exc:
        rep.add("config expert count", False, str(exc))

    rep.original_expert_params = L * n * layout.expert_numel
    rep.pruned_expert_params = sum(
        pruned.meta(name).numel for name, r in classify(pruned, new_layout).items()
        if r[0] == "expert" and r[3] in (layout.gate_template, layout.up_template,
                                         layout.down_template)
    )
    reduction = rep.original_expert_params - rep.pruned_expert_params
    rep.add("expert parameter accounting", reduction == L * p * layout.expert_numel,
            f"removed {reduction}, expected {L * p * layout.expert_numel}")
    return rep


def prune_model(model: ToyMoeModel, plan: PruningPlan) -> ToyMoeModel:
    """In-memory counterpart of :func:`apply_plan` for a toy model."""
    layers = []
    for layer, lp in zip(model.layers, plan.layers):
        keep = list(lp.retained)
        bias = None if layer.router_bias is None else layer.router_bias[keep]
        layers.append(MoeLayer(layer.router[keep], [layer.experts[i] for i in keep],
                               layer.top_k, bias, layer.normalize_topk, layer.residual,
                               layer.rms_norm, layer.eps))
    return ToyMoeModel(layers)
