"""Weight-only expert criteria and within-layer ranking.

AIMER is the mean absolute weight of an expert divided by its root mean
square weight, ``||w||_1 / (sqrt(N) ||w||_2)`` over all gate/up/down entries.
It lies in ``[1/sqrt(N), 1]`` and experts with the *largest* values are
pruned first. Magnitude (mean absolute weight) prunes the smallest.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, ModelLayout, load_expert
from .errors import DomainError, FormatError
from .tensor import ExpertTensors, l1_norm, sum_squares

log = logging.getLogger(__name__)

DEFAULT_SEED = 42


@dataclass(frozen=True)
class Criterion:
    id: str
    prune_end: str
    requires_calibration: bool


CRITERIA = {
    "aimer": Criterion("aimer", "highest", False),
    "magnitude": Criterion("magnitude", "lowest", False),
    "hoyer": Criterion("hoyer", "lowest", False),
    "random": Criterion("random", "lowest", False),
    "frequency": Criterion("frequency", "lowest", True),
    "seer": Criterion("seer", "lowest", True),
    "ean": Criterion("ean", "lowest", True),
    "reap": Criterion("reap", "lowest", True),
}
WEIGHT_ONLY = tuple(k for k, c in CRITERIA.items() if not c.requires_calibration)
CALIBRATED = tuple(k for k, c in CRITERIA.items() if c.requires_calibration)


def criterion(name: str | Criterion) -> Criterion:
    if isinstance(name, Criterion):
        return name
    try:
        return CRITERIA[name]
    except KeyError:
        raise DomainError(f"unknown criterion {name!r}; choose from {sorted(CRITERIA)}") from None


def _ratio(p: float, q: float, n: int) -> float:
    if q == 0.0:
        log.warning("all-zero expert: AIMER is 0/0, scoring it 1.0 so it is pruned first")
        return 1.0
    # clamp away rounding excursions outside the proven [1/sqrt(N), 1] band
    return min(1.0, max(1.0 / math.sqrt(n), p / math.sqrt(n * q)))


def _norms(*parts) -> tuple[float, float]:
    """(sum |w|, sum w^2) over ``parts``, rescaled when squares would under/overflow.

    Both the ratio and Hoyer only use P/sqrt(Q), which is invariant to a common
    scale, so the rescaled sums can be used directly.
    """
    peak = max(float(max(np.max(a), -np.min(a))) for a in parts)
    if peak != 0.0 and not 1e-150 < peak < 1e150:
        parts = [np.asarray(a, dtype=np.float64) / peak for a in parts]
    return (sum(l1_norm(a) for a in parts), sum(sum_squares(a) for a in parts))


def aimer_score(e: ExpertTensors) -> float:
    p, q = _norms(e.gate, e.up, e.down)
    return _ratio(p, q, e.numel)


def aimer_score_vec(w) -> float:
    w = np.asarray(w)
    if w.size == 0:
        raise DomainError("AIMER of an empty vector")
    return _ratio(*_norms(w), w.size)


def magnitude_score(e: ExpertTensors) -> float:
    p = l1_norm(e.gate) + l1_norm(e.up) + l1_norm(e.down)
    return p / e.numel


def hoyer_score(w) -> float:
    """Hoyer sparsity ``(sqrt(N) - l1/l2) / (sqrt(N) - 1)``; 0 is dense, 1 is one-hot."""
    w = np.asarray(w)
    n = w.size
    if n < 2:
        raise DomainError("Hoyer sparsity needs at least two entries")
    p, q = _norms(w)
    if q == 0.0:
        raise DomainError("Hoyer sparsity of the zero vector is undefined")
    r = p / math.sqrt(q)
    return (math.sqrt(n) - r) / (math.sqrt(n) - 1.0)


def random_scores(n: int, layer: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Uniform [0, 1) scores from Philox-4x64 keyed by ``(seed, layer)``.

    Philox is counter based, so the stream depends only on the key and the
    values are identical on every platform numpy supports.
    """
    if n < 1:
        raise DomainError("need at least one expert")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, layer], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).random(n)


@dataclass(frozen=True)
class RankedLayer:
    layer: int
    order: tuple[int, ...]

    def pruned(self, p: int) -> list[int]:
        return sorted(self.order[:p])


def rank_layer(scores: Sequence[float], crit: str | Criterion, layer: int = 0) -> RankedLayer:
    """Order experts from most to least prunable; ties go to the lower index."""
    crit = criterion(crit)
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DomainError("cannot rank an empty layer")
    if not np.isfinite(s).all():
        raise DomainError("scores must be finite")
    key = -s if crit.prune_end == "highest" else s
    # lexsort: last key is primary, index breaks ties
    order = np.lexsort((np.arange(s.size), key))
    return RankedLayer(layer, tuple(int(i) for i in order))


@dataclass
class ScoreTable:
    criterion: Criterion
    layers: list[np.ndarray]
    layout_hash: str = ""
    checkpoint_fingerprint: str = ""
    seed: int | None = None
    calibration_tokens: int | None = None
    timing_seconds: float = 0.0
    extra_expert_tensors: list[str] = field(default_factory=list)
    never_routed: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.criterion = criterion(self.criterion)
        self.layers = [np.asarray(s, dtype=np.float64) for s in self.layers]
        for i, s in enumerate(self.layers):
            if s.ndim != 1 or s.size == 0 or not np.isfinite(s).all():
                raise DomainError(f"layer {i} scores must be a nonempty finite vector")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def ranked(self) -> list[RankedLayer]:
        return [rank_layer(s, self.criterion, i) for i, s in enumerate(self.layers)]

    def hash(self) -> str:
        """Content hash over criterion, provenance and exact score bits (timing excluded)."""
        h = hashlib.sha256()
        h.update(f"{self.criterion.id}|{self.layout_hash}|{self.checkpoint_fingerprint}|"
                 f"{self.seed}|{self.calibration_tokens}".encode())
        for s in self.layers:
            h.update(s.astype("<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        doc = {"criterion": self.criterion.id, "prune_end": self.criterion.prune_end}
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.calibration_tokens is not None:
            doc["calibration_tokens"] = self.calibration_tokens
        doc.update(timing_seconds=self.timing_seconds, layout_hash=self.layout_hash,
                   checkpoint_fingerprint=self.checkpoint_fingerprint,
                   score_table_hash=self.hash())
        if self.extra_expert_tensors:
            doc["extra_expert_tensors"] = self.extra_expert_tensors
        if self.never_routed:
            doc["never_routed"] = [list(p) for p in self.never_routed]
        doc["layers"] = [{"layer": i, "scores": [float(x) for x in s]}
                         for i, s in enumerate(self.layers)]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreTable":
        try:
            layers = sorted(doc["layers"], key=lambda r: r["layer"])
            if [r["layer"] for r in layers] != list(range(len(layers))):
                raise FormatError("score table layers must be numbered 0..L-1")
            table = cls(criterion=doc["criterion"], layers=[r["scores"] for r in layers],
                        layout_hash=doc.get("layout_hash", ""),
                        checkpoint_fingerprint=doc.get("checkpoint_fingerprint", ""),
                        seed=doc.get("seed"), calibration_tokens=doc.get("calibration_tokens"),
                        timing_seconds=float(doc.get("timing_seconds", 0.0)),
                        extra_expert_tensors=list(doc.get("extra_expert_tensors", [])),
                        never_routed=[tuple(p) for p in doc.get("never_routed", [])])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed score table ({exc})") from None
        if doc.get("prune_end", table.criterion.prune_end) != table.criterion.prune_end:
            raise FormatError("prune_end disagrees with the criterion")
        return table

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScoreTable":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None


EXPERT_SCORERS = {
    "aimer": aimer_score,
    "magnitude": magnitude_score,
    "hoyer": lambda e: hoyer_score(e.flatten()),
}


def score_checkpoint(checkpoint: Checkpoint, layout: ModelLayout, crit: str | Criterion = "aimer",
                     seed: int | None = None, threads: int = 1) -> ScoreTable:
    """Score every routed expert, streaming one expert at a time per worker.

    Each score lands in a pre-sized slot, so the table is identical for any
    ``threads``.
    """
    crit = criterion(crit)
    if crit.requires_calibration:
        raise DomainError(f"{crit.id} needs calibration statistics, not weights alone")
    start = time.perf_counter()
    L, n = layout.num_layers, layout.num_experts
    if crit.id == "random":
        seed = DEFAULT_SEED if seed is None else seed
        layers = [random_scores(n, layer, seed) for layer in range(L)]
    else:
        seed = None
        scorer = EXPERT_SCORERS[crit.id]
        out = np.empty((L, n), dtype=np.float64)

        def job(idx: int):
            layer, expert = divmod(idx, n)
            out[layer, expert] = scorer(load_expert(checkpoint, layout, layer, expert))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(job, range(L * n)))
        else:
            for idx in range(L * n):
                job(idx)
        layers = list(out)

    extras = [name for layer in range(L) for e in range(n)
              for name in layout.extra_expert_names(layer, e) if name in checkpoint]
    return ScoreTable(crit, layers, layout_hash=layout.hash(),
                      checkpoint_fingerprint=checkpoint.fingerprint(layout), seed=seed,
                      timing_seconds=time.perf_counter() - start,
                      extra_expert_tensors=extras)
