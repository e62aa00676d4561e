"""Diagnostics over score tables and toy models.

* rank profiles: within-layer scores sorted high to low, min-max rescaled
* separation: interquartile range of the rescaled scores per layer
* stability: Kendall tau between rankings from different calibration sizes
* layer variance: per-token variance across hidden dims, averaged over tokens

Every artifact exports to CSV plus a static SVG.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import svg
from .calib import TokenBatch, ToyMoeModel, calibrate, moe_forward_batch, score_model
from .errors import DomainError, ShapeError
from .pruning import prune_count
from .scoring import ScoreTable, criterion


@dataclass
class RankProfile:
    criterion: str
    rows: np.ndarray                 # (L, n), each row non-increasing in [0, 1]
    degenerate: list[bool]

    @property
    def num_layers(self) -> int:
        return self.rows.shape[0]

    @property
    def num_experts(self) -> int:
        return self.rows.shape[1]


def rescale(scores) -> tuple[np.ndarray, bool]:
    """Min-max rescale to [0, 1]; a constant vector maps to 0.5 and is flagged."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return np.full_like(s, 0.5), True
    return (s - lo) / (hi - lo), False


def rank_profile(table: ScoreTable) -> RankProfile:
    rows, flags = [], []
    for s in table.layers:
        r, flat = rescale(np.sort(s)[::-1])
        rows.append(r)
        flags.append(flat)
    return RankProfile(table.criterion.id, np.array(rows), flags)


def iqr(values) -> float:
    """Interquartile range with linear interpolation between order statistics."""
    q1, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 75], method="linear")
    return float(q3 - q1)


def separation_metric(table: ScoreTable) -> list[float | None]:
    """IQR of rescaled scores per layer; ``None`` for layers with fewer than 4 experts."""
    return [iqr(rescale(s)[0]) if s.size >= 4 else None for s in table.layers]


@dataclass
class SeparationReport:
    rows: list[tuple[int, str, float | None]]


def separation_report(tables: Sequence[ScoreTable]) -> SeparationReport:
    rows = []
    for t in tables:
        rows.extend((l, t.criterion.id, v) for l, v in enumerate(separation_metric(t)))
    return SeparationReport(sorted(rows, key=lambda r: (r[0], r[1])))


def kendall_tau(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Tau-a between two rankings (orderings of the same ids)."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ShapeError(f"rankings differ in length ({len(a)} vs {len(b)})")
    n = len(a)
    if n < 2:
        raise DomainError("Kendall tau needs at least two items")
    pos_b = {item: i for i, item in enumerate(b)}
    if len(pos_b) != n or set(a) != set(pos_b):
        raise DomainError("rankings must be permutations of the same ids")
    x = np.arange(n)
    y = np.array([pos_b[item] for item in a])
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    s = int(np.triu(sx * sy, k=1).sum())
    return s / (n * (n - 1) / 2)


# --------------------------------------------------------------------------
# calibration-size stability


@dataclass
class StabilityMatrix:
    criterion: str
    sizes: list[int]
    tau: np.ndarray         # (S, S, L)
    overlap: np.ndarray     # (S, L) pruned-set overlap with the largest size
    ratio: float
    seed: int

    def mean_tau(self) -> np.ndarray:
        return self.tau.mean(axis=2)


def stability_study(model: ToyMoeModel, crit: str, sizes: Sequence[int], seed: int = 42,
                    ratio: float = 0.5) -> StabilityMatrix:
    """Rank experts from calibration batches of each size and compare rankings.

    Weight-only criteria go through the same harness; their scores ignore the
    batch, so every tau is exactly 1.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or sizes != sorted(sizes):
        raise DomainError("sizes must be a nonempty ascending list")
    c = criterion(crit)
    orders = []
    for size in sizes:
        if c.requires_calibration:
            table, _ = calibrate(model, c.id, size, seed)
        else:
            table = score_model(model, c.id, seed)
        orders.append([r.order for r in table.ranked()])

    S, L, n = len(sizes), model.num_layers, model.num_experts
    tau = np.ones((S, S, L))
    for i in range(S):
        for j in range(i + 1, S):
            for l in range(L):
                tau[i, j, l] = tau[j, i, l] = kendall_tau(orders[i][l], orders[j][l])
    p = prune_count(ratio, n)
    overlap = np.ones((S, L))
    if p:
        for i in range(S):
            for l in range(L):
                ref = set(orders[-1][l][:p])
                overlap[i, l] = len(ref & set(orders[i][l][:p])) / p
    return StabilityMatrix(c.id, sizes, tau, overlap, ratio, seed)


# --------------------------------------------------------------------------
# hidden-state variance


@dataclass
class VarianceCurve:
    variant: str
    values: np.ndarray      # (L + 1,), index 0 is the input
    tokens: int
    seed: int | None
    estimator: str = "sample variance across hidden dims (ddof=1), mean over tokens"


def _token_variance(H: np.ndarray) -> float:
    return float(np.var(H, axis=1, ddof=1).mean())


def layer_variance(model: ToyMoeModel, batch: TokenBatch,
                   variants: Mapping[str, ToyMoeModel] | None = None) -> list[VarianceCurve]:
    """Curves for the full model followed by each named variant."""
    models = {"full": model, **(variants or {})}
    H0 = np.asarray(batch.vectors, dtype=np.float64)
    if H0.ndim != 2 or H0.shape[1] != model.hidden_dim:
        raise ShapeError(f"batch has shape {H0.shape}, model hidden dim is {model.hidden_dim}")
    if H0.shape[0] == 0:
        raise DomainError("variance needs at least one token")
    curves = []
    for name, m in models.items():
        H, vals = H0, [_token_variance(H0)]
        for layer in m.layers:
            H = moe_forward_batch(layer, H).output
            vals.append(_token_variance(H))
        curves.append(VarianceCurve(name, np.array(vals), H0.shape[0], batch.seed))
    return curves


# --------------------------------------------------------------------------
# export


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _csv(rows: list[list], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _render(artifact) -> tuple[str, str, dict[str, str]]:
    """-> (csv text, svg text, extra csv files keyed by suffix)"""
    if isinstance(artifact, RankProfile):
        if artifact.rows.size == 0:
            raise DomainError("rank profile has no layers or experts")
        n = artifact.num_experts
        rows = [["layer", *(f"rank_{r}" for r in range(n))]]
        rows += [[l, *map(_fmt, row)] for l, row in enumerate(artifact.rows)]
        fig = svg.heatmap(artifact.rows, f"{artifact.criterion} rank profile",
                          "within-layer rank", "layer", 0.0, 1.0)
        return _csv(rows), fig, {}
    if isinstance(artifact, ScoreTable):
        if artifact.num_layers == 0:
            raise DomainError("score table has no layers")
        rows = [["layer", "expert", "score"]]
        rows += [[l, e, _fmt(v)] for l, s in enumerate(artifact.layers) for e, v in enumerate(s)]
        fig = svg.heatmap(np.array(artifact.layers), f"{artifact.criterion.id} scores",
                          "expert", "layer")
        return _csv(rows), fig, {}
    if isinstance(artifact, StabilityMatrix):
        if artifact.tau.size == 0:
            raise DomainError("stability matrix is empty")
        rows = [["size_a", "size_b", "layer", "tau"]]
        S, _, L = artifact.tau.shape
        for i in range(S):
            for j in range(S):
                for l in range(L):
                    rows.append([artifact.sizes[i], artifact.sizes[j], l, _fmt(artifact.tau[i, j, l])])
        ov = [["size", "layer", "overlap"]]
        ov += [[artifact.sizes[i], l, _fmt(artifact.overlap[i, l])]
               for i in range(S) for l in range(L)]
        fig = svg.heatmap(artifact.mean_tau(), f"{artifact.criterion} Kendall tau "
                          f"(mean over layers), sizes {artifact.sizes}",
                          "calibration size index", "calibration size index", -1.0, 1.0)
        return _csv(rows), fig, {"overlap": _csv(ov, [f"ratio={artifact.ratio}"])}
    if isinstance(artifact, (list, tuple)) and artifact and all(
            isinstance(c, VarianceCurve) for c in artifact):
        rows = [["layer", "variant", "value"]]
        for c in artifact:
            rows += [[l, c.variant, _fmt(v)] for l, v in enumerate(c.values)]
        c0 = artifact[0]
        comments = [f"estimator={c0.estimator}", f"tokens={c0.tokens}", f"seed={c0.seed}"]
        fig = svg.lineplot({c.variant: c.values for c in artifact},
                           "hidden-state variance by layer", "layer (0 = input)", "variance")
        return _csv(rows, comments), fig, {}
    if isinstance(artifact, SeparationReport):
        if not artifact.rows:
            raise DomainError("separation report is empty")
        rows = [["layer", "criterion", "iqr"]] + [[l, c, _fmt(v)] for l, c, v in artifact.rows]
        crits = sorted({c for _, c, _ in artifact.rows})
        series = {c: np.array([v if v is not None else np.nan
                               for _, cc, v in artifact.rows if cc == c]) for c in crits}
        fig = svg.lineplot({c: np.nan_to_num(v) for c, v in series.items()},
                           "within-layer separation (IQR)", "layer", "IQR")
        return _csv(rows), fig, {}
    raise DomainError(f"cannot export {type(artifact).__name__} (or it is empty)")


def export(artifact, prefix: str | os.PathLike) -> list[Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.svg`` (plus any companion CSVs)."""
    text, fig, extra = _render(artifact)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    out = [prefix.with_name(prefix.name + ".csv"), prefix.with_name(prefix.name + ".svg")]
    out[0].write_text(text)
    out[1].write_text(fig)
    for suffix, body in extra.items():
        p = prefix.with_name(f"{prefix.name}_{suffix}.csv")
        p.write_text(body)
        out.append(p)
    return out
