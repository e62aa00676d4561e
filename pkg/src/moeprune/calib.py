"""Toy MoE model, its forward pass and the calibration-based baselines.

Experts are SwiGLU blocks ``down @ (silu(gate @ x) * (up @ x))``. The router
picks the top-k logits (ties to the lower index) and softmaxes over just
those. Attention is omitted: scoring and pruning only touch routers and
expert FFNs.

The four baselines are accumulated from routing statistics:

* frequency: tokens routed to the expert
* seer: sum of its gate weights
* ean: sum of its activation L2 norms
* reap: mean over routed tokens of gate weight times activation norm
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .checkpoint import (
    CONFIG_FILE,
    Checkpoint,
    ModelConfig,
    ModelLayout,
    PendingTensor,
    load_expert,
    load_layout,
    write_checkpoint,
)
from .errors import DomainError, FormatError, ShapeError
from .scoring import EXPERT_SCORERS, ScoreTable, criterion, random_scores
from .tensor import ExpertTensors

log = logging.getLogger(__name__)


@dataclass
class MoeLayer:
    router: np.ndarray
    experts: list[ExpertTensors]
    top_k: int
    router_bias: np.ndarray | None = None
    normalize_topk: bool = True
    residual: bool = True
    rms_norm: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        n, d = self.router.shape
        if len(self.experts) != n:
            raise ShapeError(f"router has {n} rows for {len(self.experts)} experts")
        if not 1 <= self.top_k <= n:
            raise DomainError(f"top_k={self.top_k} outside [1, {n}]")
        if any(e.dims[0] != d for e in self.experts):
            raise ShapeError("expert input dim differs from router")
        if self.router_bias is not None and self.router_bias.shape != (n,):
            raise ShapeError(f"router bias must have shape ({n},)")

    @property
    def num_experts(self) -> int:
        return self.router.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.router.shape[1]


@dataclass
class ToyMoeModel:
    layers: list[MoeLayer]

    def __post_init__(self):
        if not self.layers:
            raise DomainError("model needs at least one layer")
        first = self.layers[0]
        for layer in self.layers[1:]:
            if (layer.hidden_dim, layer.num_experts) != (first.hidden_dim, first.num_experts):
                raise ShapeError("layers must share hidden dim and expert count")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_experts(self) -> int:
        return self.layers[0].num_experts

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden_dim

    @property
    def expert_dim(self) -> int:
        return self.layers[0].experts[0].dims[1]

    @property
    def top_k(self) -> int:
        return self.layers[0].top_k

    @property
    def num_params(self) -> int:
        return sum(layer.router.size + sum(e.numel for e in layer.experts)
                   for layer in self.layers)

    def forward(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        for layer in self.layers:
            h, _ = moe_forward(layer, h)
        return h

    def forward_batch(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        for layer in self.layers:
            H = moe_forward_batch(layer, H).output
        return H


# --------------------------------------------------------------------------
# single-token path


def route(h, router: np.ndarray, bias=None, k: int = 1, normalize: bool = True):
    """Top-k selection and gate weights for one token.

    Returns ``(selected, gates)`` with ``selected`` ascending. With
    ``normalize`` the gates are a softmax over the selected logits only;
    without it they are the full-softmax probabilities of the selected experts.
    """
    n = router.shape[0]
    if not 1 <= k <= n:
        raise DomainError(f"top_k={k} outside [1, {n}]")
    z = tc.matvec(router, h)
    if bias is not None:
        z = z + np.asarray(bias, dtype=np.float64)
    picked = np.lexsort((np.arange(n), -z))[:k]
    selected = np.sort(picked)
    if normalize:
        gates = tc.softmax(z[selected])
    else:
        gates = tc.softmax(z)[selected]
    return selected, gates


def expert_forward(e: ExpertTensors, h) -> np.ndarray:
    return tc.matvec(e.down, tc.hadamard(tc.silu(tc.matvec(e.gate, h)), tc.matvec(e.up, h)))


@dataclass(frozen=True)
class RouteTrace:
    selected: np.ndarray
    gates: np.ndarray
    act_norms: np.ndarray


def moe_forward(layer: MoeLayer, h) -> tuple[np.ndarray, RouteTrace]:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (layer.hidden_dim,):
        raise ShapeError(f"token has shape {h.shape}, layer expects ({layer.hidden_dim},)")
    x = tc.rms_normalize(h, layer.eps) if layer.rms_norm else h
    selected, gates = route(x, layer.router, layer.router_bias, layer.top_k, layer.normalize_topk)
    y = np.zeros_like(x)
    norms = np.empty(len(selected))
    for j, (i, g) in enumerate(zip(selected, gates)):
        a = expert_forward(layer.experts[i], x)
        norms[j] = np.linalg.norm(a)
        y = y + g * a
    if layer.residual:
        y = y + h
    return y, RouteTrace(selected, gates, norms)


# --------------------------------------------------------------------------
# batched path


@dataclass(frozen=True)
class BatchTrace:
    output: np.ndarray      # (T, d)
    selected: np.ndarray    # (T, k), ascending per row
    gates: np.ndarray       # (T, k)
    act_norms: np.ndarray   # (T, k)


def _stacked(layer: MoeLayer):
    cache = layer.__dict__.get("_stack")
    if cache is None:
        cache = tuple(np.stack([getattr(e, p) for e in layer.experts]).astype(np.float64)
                      for p in ("gate", "up", "down"))
        layer.__dict__["_stack"] = cache
    return cache


def moe_forward_batch(layer: MoeLayer, H) -> BatchTrace:
    """Same computation as :func:`moe_forward` for a (T, d) block of tokens.

    Each token's expert outputs are summed in ascending expert order, matching
    the single-token path.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != layer.hidden_dim:
        raise ShapeError(f"token block has shape {H.shape}, expected (T, {layer.hidden_dim})")
    T, k, n = H.shape[0], layer.top_k, layer.num_experts
    X = tc.rms_normalize(H, layer.eps) if layer.rms_norm else H
    Z = X @ layer.router.astype(np.float64).T
    if layer.router_bias is not None:
        Z = Z + layer.router_bias.astype(np.float64)
    picked = np.argsort(-Z, axis=1, kind="stable")[:, :k]
    selected = np.sort(picked, axis=1)
    zs = np.take_along_axis(Z, selected, axis=1)
    if layer.normalize_topk:
        e = np.exp(zs - zs.max(axis=1, keepdims=True))
        gates = e / e.sum(axis=1, keepdims=True)
    else:
        e = np.exp(Z - Z.max(axis=1, keepdims=True))
        gates = np.take_along_axis(e / e.sum(axis=1, keepdims=True), selected, axis=1)

    Y = np.zeros_like(X)
    norms = np.zeros((T, k))
    gate_w, up_w, down_w = _stacked(layer)
    for i in range(n):
        rows, slot = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        Xi = X[rows]
        A = (tc.silu(Xi @ gate_w[i].T) * (Xi @ up_w[i].T)) @ down_w[i].T
        norms[rows, slot] = np.linalg.norm(A, axis=1)
        Y[rows] += gates[rows, slot][:, None] * A
    if layer.residual:
        Y = Y + H
    return BatchTrace(Y, selected, gates, norms)


# --------------------------------------------------------------------------
# calibration statistics


@dataclass(frozen=True)
class TokenBatch:
    vectors: np.ndarray
    seed: int | None = None

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def make_batch(count: int, dim: int, seed: int = 42, scale: float = 1.0) -> TokenBatch:
    """``count`` i.i.d. N(0, scale^2) tokens from Philox keyed by ``(seed, count)``."""
    if count < 0:
        raise DomainError("token count must be non-negative")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, count], dtype=np.uint64)))
    return TokenBatch(scale * rng.standard_normal((count, dim)), seed)


@dataclass
class RoutingStats:
    counts: np.ndarray       # (L, n) int64
    sum_g: np.ndarray        # (L, n)
    sum_anorm: np.ndarray    # (L, n)
    sum_g_anorm: np.ndarray  # (L, n)
    tokens: int = 0

    @classmethod
    def zeros(cls, num_layers: int, num_experts: int) -> "RoutingStats":
        shape = (num_layers, num_experts)
        return cls(np.zeros(shape, np.int64), np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "layers": [
                {"layer": l, "n_i": [int(x) for x in self.counts[l]],
                 "sum_g": self.sum_g[l].tolist(), "sum_anorm": self.sum_anorm[l].tolist(),
                 "sum_g_anorm": self.sum_g_anorm[l].tolist()}
                for l in range(self.counts.shape[0])
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RoutingStats":
        try:
            rows = sorted(doc["layers"], key=lambda r: r["layer"])
            return cls(np.array([r["n_i"] for r in rows], dtype=np.int64),
                       np.array([r["sum_g"] for r in rows], dtype=np.float64),
                       np.array([r["sum_anorm"] for r in rows], dtype=np.float64),
                       np.array([r["sum_g_anorm"] for r in rows], dtype=np.float64),
                       int(doc["tokens"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed routing stats ({exc})") from None

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RoutingStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_stats(model: ToyMoeModel, batch: TokenBatch | np.ndarray) -> RoutingStats:
    """Run the batch through all layers, accumulating per-expert statistics.

    Per-expert sums reduce over tokens in token order, so results are
    bit-identical for identical inputs.
    """
    H = batch.vectors if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != model.hidden_dim:
        raise ShapeError(f"batch has shape {H.shape}, model hidden dim is {model.hidden_dim}")
    stats = RoutingStats.zeros(model.num_layers, model.num_experts)
    stats.tokens = H.shape[0]
    if H.shape[0] == 0:
        return stats
    for l, layer in enumerate(model.layers):
        tr = moe_forward_batch(layer, H)
        for i in range(layer.num_experts):
            mask = tr.selected == i           # at most one hit per row
            rows = mask.any(axis=1)
            g = np.where(mask, tr.gates, 0.0).sum(axis=1)[rows]
            a = np.where(mask, tr.act_norms, 0.0).sum(axis=1)[rows]
            stats.counts[l, i] = int(rows.sum())
            stats.sum_g[l, i] = np.add.reduce(g)
            stats.sum_anorm[l, i] = np.add.reduce(a)
            stats.sum_g_anorm[l, i] = np.add.reduce(g * a)
        H = tr.output
    return stats


def frequency_score(stats: RoutingStats, layer: int, i: int) -> float:
    return float(stats.counts[layer, i])


def seer_score(stats: RoutingStats, layer: int, i: int) -> float:
    return float(stats.sum_g[layer, i])


def ean_score(stats: RoutingStats, layer: int, i: int) -> float:
    return float(stats.sum_anorm[layer, i])


def reap_score(stats: RoutingStats, layer: int, i: int) -> float:
    """Token-averaged gate-weighted activation norm; 0.0 for a never-routed expert."""
    n = stats.counts[layer, i]
    if n == 0:
        return 0.0
    return float(stats.sum_g_anorm[layer, i] / n)


def never_routed(stats: RoutingStats) -> list[tuple[int, int]]:
    return [(int(l), int(i)) for l, i in zip(*np.nonzero(stats.counts == 0))]


CALIBRATION_SCORERS = {
    "frequency": frequency_score,
    "seer": seer_score,
    "ean": ean_score,
    "reap": reap_score,
}


def calibration_table(stats: RoutingStats, crit: str, layout_hash: str = "",
                      fingerprint: str = "", seed: int | None = None,
                      timing_seconds: float = 0.0) -> ScoreTable:
    c = criterion(crit)
    fn = CALIBRATION_SCORERS.get(c.id)
    if fn is None:
        raise DomainError(f"{c.id} is not a calibration criterion")
    L, n = stats.counts.shape
    layers = [np.array([fn(stats, l, i) for i in range(n)]) for l in range(L)]
    table = ScoreTable(c, layers, layout_hash=layout_hash, checkpoint_fingerprint=fingerprint,
                       seed=seed, calibration_tokens=stats.tokens,
                       timing_seconds=timing_seconds)
    if c.id == "reap":
        table.never_routed = never_routed(stats)
    return table


# --------------------------------------------------------------------------
# toy model generation and loading


@dataclass(frozen=True)
class ToyDims:
    layers: int = 4
    experts: int = 8
    top_k: int = 2
    hidden: int = 64
    expert_hidden: int = 32

    def __post_init__(self):
        if min(self.layers, self.experts, self.top_k, self.hidden, self.expert_hidden) < 1:
            raise DomainError("all toy dimensions must be positive")
        if self.top_k > self.experts:
            raise DomainError(f"top_k={self.top_k} exceeds experts={self.experts}")


def _gaussian(seed: int, stream: int, shape, scale: float, dtype: str) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))
    w = (scale * rng.standard_normal(shape)).astype(np.float32)
    return tc.round_to(w, dtype)


def toy_layout(preset: str | ModelLayout, dims: ToyDims, normalize_topk: bool | None = None) -> ModelLayout:
    base = load_layout(preset)
    doc = base.to_dict()
    doc.update(num_layers=dims.layers, num_experts=dims.experts, top_k=dims.top_k,
               hidden_dim=dims.hidden, expert_dim=dims.expert_hidden)
    if normalize_topk is not None:
        doc["normalize_topk"] = normalize_topk
    return ModelLayout.from_dict(doc)


def toy_tensors(layout: ModelLayout, seed: int, dtype: str = "F32") -> dict[str, PendingTensor]:
    """Ordered lazy tensors of a toy checkpoint; each draws from its own Philox stream.

    Weights are N(0, 1/d). Streams are numbered per layer so any tensor can
    be regenerated without generating the others.
    """
    L, n, d, m = layout.num_layers, layout.num_experts, layout.hidden_dim, layout.expert_dim
    scale = 1.0 / math.sqrt(d)
    tag = tc.dtype_of(dtype).tag
    out: dict[str, PendingTensor] = {}

    def lazy(stream, shape, s=scale):
        return PendingTensor(tag, shape, lambda: tc.encode(_gaussian(seed, stream, shape, s, tag), tag))

    per_layer = 3 * n + 8
    for l in range(L):
        base = l * per_layer
        out[layout.router_name(l)] = lazy(base, (n, d))
        if layout.router_bias_template:
            out[layout.router_bias_name(l)] = lazy(base + 1, (n,), 0.1)
        for e in range(n):
            for j, (name, shape) in enumerate(zip(layout.expert_names(l, e), ((m, d), (m, d), (d, m)))):
                out[name] = lazy(base + 8 + 3 * e + j, shape)
        if any("shared_experts" in p for p in layout.passthrough_prefixes):
            for j, proj in enumerate(("gate_proj", "up_proj")):
                out[f"model.layers.{l}.mlp.shared_experts.{proj}.weight"] = lazy(base + 2 + j, (m, d))
            out[f"model.layers.{l}.mlp.shared_experts.down_proj.weight"] = lazy(base + 4, (d, m))
    ones = np.ones(d, dtype=np.float32)
    out["model.norm.weight"] = PendingTensor(tag, (d,), lambda: tc.encode(ones, tag))
    return out


def toy_config(layout: ModelLayout, seed: int, residual: bool = True, rms_norm: bool = True,
               eps: float = 1e-6) -> dict:
    doc = {"model_type": "toy-moe", "layout_preset": layout.name}
    doc.update(layout.config_dict())
    doc.update(residual=residual, rms_norm=rms_norm, rms_norm_eps=eps, toy_seed=seed)
    return doc


def gen_toy_model(seed: int = 42, dims: ToyDims | None = None, out_dir=None,
                  layout: str | ModelLayout = "qwen3-like", dtype: str = "F32",
                  shard_limit: int | None = None, normalize_topk: bool | None = None,
                  residual: bool = True, rms_norm: bool = True,
                  materialize: bool = True) -> ToyMoeModel | None:
    """Generate a seeded toy MoE; optionally write it as a checkpoint directory.

    The returned model holds exactly the values stored in the checkpoint
    (rounded to ``dtype``). ``materialize=False`` streams straight to disk
    without building the in-memory model, for large synthetic checkpoints.
    """
    dims = dims or ToyDims()
    lay = toy_layout(layout, dims, normalize_topk)
    tensors = toy_tensors(lay, seed, dtype)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_checkpoint(out_dir, tensors, shard_limit=shard_limit)
        cfg = toy_config(lay, seed, residual, rms_norm)
        (out_dir / CONFIG_FILE).write_text(json.dumps(cfg, indent=2) + "\n")
    if not materialize:
        return None

    def arr(name):
        t = tensors[name]
        return tc.decode(t.produce(), t.dtype, math.prod(t.shape)).reshape(t.shape)

    layers = []
    for l in range(lay.num_layers):
        experts = [ExpertTensors(*(arr(nm) for nm in lay.expert_names(l, e)))
                   for e in range(lay.num_experts)]
        bias = arr(lay.router_bias_name(l)) if lay.router_bias_template else None
        layers.append(MoeLayer(arr(lay.router_name(l)), experts, lay.top_k, bias,
                               lay.normalize_topk, residual, rms_norm))
    return ToyMoeModel(layers)


def load_toy_model(checkpoint: Checkpoint, layout: ModelLayout,
                   config: ModelConfig | None = None) -> ToyMoeModel:
    data = config.data if config is not None else {}
    layers = []
    for l in range(layout.num_layers):
        experts = [load_expert(checkpoint, layout, l, e) for e in range(layout.num_experts)]
        bias_name = layout.router_bias_name(l)
        bias = checkpoint.read(bias_name) if bias_name else None
        layers.append(MoeLayer(checkpoint.read(layout.router_name(l)), experts, layout.top_k,
                               bias, layout.normalize_topk, bool(data.get("residual", True)),
                               bool(data.get("rms_norm", True)),
                               float(data.get("rms_norm_eps", 1e-6))))
    return ToyMoeModel(layers)


def model_layout(model: ToyMoeModel, preset: str = "qwen3-like") -> ModelLayout:
    dims = ToyDims(model.num_layers, model.num_experts, model.top_k, model.hidden_dim,
                   model.expert_dim)
    return toy_layout(preset, dims, model.layers[0].normalize_topk)


def calibrate(model: ToyMoeModel, crit: str, tokens: int, seed: int = 42,
              layout_hash: str = "", fingerprint: str = "") -> tuple[ScoreTable, RoutingStats]:
    start = time.perf_counter()
    stats = collect_stats(model, make_batch(tokens, model.hidden_dim, seed))
    table = calibration_table(stats, crit, layout_hash, fingerprint, seed,
                              time.perf_counter() - start)
    return table, stats


def score_model(model: ToyMoeModel, crit: str, seed: int = 42) -> ScoreTable:
    """Weight-only scores of an in-memory model (no checkpoint round trip)."""
    c = criterion(crit)
    if c.requires_calibration:
        raise DomainError(f"{c.id} needs calibration statistics")
    if c.id == "random":
        return ScoreTable(c, [random_scores(model.num_experts, l, seed)
                              for l in range(model.num_layers)], seed=seed)
    fn = EXPERT_SCORERS[c.id]
    return ScoreTable(c, [np.array([fn(e) for e in layer.experts]) for layer in model.layers])
