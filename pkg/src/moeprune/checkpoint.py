"""safetensors checkpoints, MoE naming layouts and model-config patching.

A checkpoint directory holds either ``model.safetensors`` or a set of shards
listed by ``model.safetensors.index.json``, plus ``config.json``. Tensors are
read one byte range at a time so nothing is ever loaded whole-file.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import re
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as tc
from .errors import (
    ConfigurationError,
    FormatError,
    InvalidPlanError,
    LayoutMismatchError,
    MalformedHeaderError,
    OverlappingRangesError,
    TruncatedFileError,
)
from .tensor import ExpertTensors

SINGLE_FILE = "model.safetensors"
INDEX_FILE = "model.safetensors.index.json"
CONFIG_FILE = "config.json"


# --------------------------------------------------------------------------
# container format


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int
    path: Path | None = None
    data_offset: int = 0

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.end - self.begin


def read_header(path: str | os.PathLike) -> tuple[dict[str, TensorMeta], int, dict]:
    """Parse one safetensors file.

    Returns ``(tensors, data_offset, metadata)`` where ``data_offset`` is the
    absolute file position of the packed data block.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise TruncatedFileError(f"{path}: shorter than the 8-byte header length")
        (n,) = struct.unpack("<Q", head)
        if 8 + n > size:
            raise TruncatedFileError(f"{path}: header claims {n} bytes, file has {size - 8}")
        raw = f.read(n)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")

    data_offset = 8 + n
    data_size = size - data_offset
    metadata = doc.pop("__metadata__", None) or {}
    out: dict[str, TensorMeta] = {}
    for name, entry in doc.items():
        try:
            tag = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            begin, end = (int(o) for o in entry["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise MalformedHeaderError(f"{path}: bad header entry for {name!r}") from None
        dt = tc.dtype_of(tag)
        if any(s < 0 for s in shape) or begin < 0 or end < begin:
            raise MalformedHeaderError(f"{path}: invalid shape or offsets for {name!r}")
        if end - begin != dt.width * math.prod(shape):
            raise MalformedHeaderError(
                f"{path}: {name!r} spans {end - begin} bytes, shape {list(shape)} "
                f"of {dt.tag} needs {dt.width * math.prod(shape)}"
            )
        if end > data_size:
            raise TruncatedFileError(
                f"{path}: {name!r} ends at {end}, data block has {data_size} bytes"
            )
        out[name] = TensorMeta(name, dt.tag, shape, begin, end, path, data_offset)

    spans = sorted((m.begin, m.end, m.name) for m in out.values() if m.end > m.begin)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OverlappingRangesError(f"{path}: {n0!r} and {n1!r} overlap")
    return out, data_offset, metadata


class Checkpoint:
    """Read-only view of a checkpoint directory (or a lone ``.safetensors`` file)."""

    def __init__(self, root: str | os.PathLike):
        root = Path(root)
        self.root = root if root.is_dir() else root.parent
        self.tensors: dict[str, TensorMeta] = {}
        self.shards: list[Path] = []
        self.metadata: dict = {}
        if root.is_file():
            self._add_shard(root)
        elif (root / INDEX_FILE).exists():
            try:
                index = json.loads((root / INDEX_FILE).read_text())
                weight_map = index["weight_map"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedHeaderError(f"{root / INDEX_FILE}: invalid index ({exc})") from None
            for shard in dict.fromkeys(weight_map.values()):
                self._add_shard(root / shard)
            for name, shard in weight_map.items():
                meta = self.tensors.get(name)
                if meta is None or meta.path.name != shard:
                    raise FormatError(f"index maps {name!r} to {shard}, which does not hold it")
            missing = set(self.tensors) - set(weight_map)
            if missing:
                raise FormatError(f"tensors absent from index: {sorted(missing)[:5]}")
        elif (root / SINGLE_FILE).exists():
            self._add_shard(root / SINGLE_FILE)
        else:
            raise FormatError(f"{root}: no {SINGLE_FILE} or {INDEX_FILE}")

    def _add_shard(self, path: Path):
        if not path.exists():
            raise FormatError(f"missing shard {path}")
        metas, _, metadata = read_header(path)
        if not self.shards:
            self.metadata = metadata
        for name, meta in metas.items():
            if name in self.tensors:
                raise FormatError(f"tensor {name!r} appears in more than one shard")
            self.tensors[name] = meta
        self.shards.append(path)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.tensors[name]
        except KeyError:
            raise LayoutMismatchError(f"tensor {name!r} not found in checkpoint") from None

    def read_raw(self, name: str) -> bytes:
        m = self.meta(name)
        with open(m.path, "rb") as f:
            f.seek(m.data_offset + m.begin)
            raw = f.read(m.nbytes)
        if len(raw) != m.nbytes:
            raise TruncatedFileError(f"short read for {name!r}")
        return raw

    def read(self, name: str) -> np.ndarray:
        m = self.meta(name)
        return tc.decode(self.read_raw(name), m.dtype, m.numel).reshape(m.shape)

    def config(self) -> "ModelConfig":
        path = self.root / CONFIG_FILE
        if not path.exists():
            raise FormatError(f"{path} not found")
        return ModelConfig(path.read_text())

    def fingerprint(self, layout: "ModelLayout") -> str:
        """Identity of this checkpoint under ``layout``.

        Hashes the layout, every header entry and the router payloads. Router
        weights differ between any two distinct models, and reading them is
        cheap, so stale score files are caught without hashing expert data.
        """
        h = hashlib.sha256(layout.hash().encode())
        for name, m in self.tensors.items():
            h.update(f"{name}|{m.dtype}|{list(m.shape)};".encode())
        for layer in range(layout.num_layers):
            h.update(self.read_raw(layout.router_name(layer)))
        return h.hexdigest()


# --------------------------------------------------------------------------
# writing


@dataclass(frozen=True)
class PendingTensor:
    """A tensor whose payload is produced on demand while writing."""

    dtype: str
    shape: tuple[int, ...]
    produce: Callable[[], bytes]

    @property
    def nbytes(self) -> int:
        return tc.dtype_of(self.dtype).width * math.prod(self.shape)


def raw_tensor(dtype: str, shape, raw: bytes) -> PendingTensor:
    return PendingTensor(dtype, tuple(shape), lambda: raw)


def _pending(value, dtype: str) -> PendingTensor:
    if isinstance(value, PendingTensor):
        return value
    arr = np.asarray(value, dtype=np.float32)
    return PendingTensor(tc.dtype_of(dtype).tag, arr.shape, lambda: tc.encode(arr, dtype))


def _header_bytes(entries: list[tuple[str, PendingTensor]], metadata: Mapping | None) -> bytes:
    doc: dict = {}
    if metadata:
        doc["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for name, t in entries:
        doc[name] = {"dtype": t.dtype, "shape": list(t.shape),
                     "data_offsets": [offset, offset + t.nbytes]}
        offset += t.nbytes
    raw = json.dumps(doc, separators=(",", ":")).encode()
    # pad so the data block starts 8-byte aligned
    return raw + b" " * (-len(raw) % 8)


def write_safetensors(path: str | os.PathLike, tensors: Mapping, dtype: str = "F32",
                      metadata: Mapping | None = None) -> int:
    """Write one file; values are arrays or :class:`PendingTensor`. Returns data bytes."""
    entries = [(name, _pending(v, dtype)) for name, v in tensors.items()]
    header = _header_bytes(entries, metadata)
    total = 0
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name, t in entries:
            raw = t.produce()
            if len(raw) != t.nbytes:
                raise FormatError(f"{name!r}: produced {len(raw)} bytes, declared {t.nbytes}")
            f.write(raw)
            total += len(raw)
    return total


def plan_shards(sizes: Iterable[tuple[str, int]], limit: int | None) -> list[list[str]]:
    """Greedy in-order packing of tensors into shards of at most ``limit`` bytes."""
    shards: list[list[str]] = [[]]
    used = 0
    for name, nbytes in sizes:
        if limit is not None and nbytes > limit:
            raise ConfigurationError(f"{name!r} ({nbytes} bytes) exceeds shard limit {limit}")
        if limit is not None and shards[-1] and used + nbytes > limit:
            shards.append([])
            used = 0
        shards[-1].append(name)
        used += nbytes
    return shards


def write_checkpoint(out_dir: str | os.PathLike, tensors: Mapping, shard_limit: int | None = None,
                     dtype: str = "F32", metadata: Mapping | None = None) -> list[Path]:
    """Write ``tensors`` (ordered) under ``out_dir``; returns the written paths.

    One shard is written as ``model.safetensors`` with no index; more shards
    get ``model-0000i-of-0000n.safetensors`` names plus the index file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pending = {name: _pending(v, dtype) for name, v in tensors.items()}
    groups = plan_shards(((n, t.nbytes) for n, t in pending.items()), shard_limit)
    if len(groups) == 1:
        path = out_dir / SINGLE_FILE
        write_safetensors(path, pending, metadata=metadata)
        return [path]

    paths, weight_map, total = [], {}, 0
    for i, group in enumerate(groups, start=1):
        path = out_dir / f"model-{i:05d}-of-{len(groups):05d}.safetensors"
        total += write_safetensors(path, {n: pending[n] for n in group}, metadata=metadata)
        weight_map.update({n: path.name for n in group})
        paths.append(path)
    index = {"metadata": {"total_size": total}, "weight_map": weight_map}
    (out_dir / INDEX_FILE).write_text(json.dumps(index, indent=2) + "\n")
    return paths + [out_dir / INDEX_FILE]


# --------------------------------------------------------------------------
# layouts


@dataclass(frozen=True)
class ModelLayout:
    """Tensor-name templates and dimensions of one MoE checkpoint family.

    Templates use ``{layer}`` and ``{expert}`` placeholders. Tensors matching
    neither the expert, extra-expert nor router templates are passthrough.
    """

    name: str
    gate_template: str
    up_template: str
    down_template: str
    router_template: str
    router_bias_template: str | None = None
    extra_expert_templates: tuple[str, ...] = ()
    passthrough_prefixes: tuple[str, ...] = ()
    num_layers: int = 0
    num_experts: int = 0
    top_k: int = 1
    hidden_dim: int = 0
    expert_dim: int = 0
    normalize_topk: bool = True
    num_experts_key: str = "num_experts"
    top_k_key: str = "num_experts_per_tok"
    num_layers_key: str = "num_hidden_layers"
    hidden_dim_key: str = "hidden_size"
    expert_dim_key: str = "moe_intermediate_size"
    normalize_topk_key: str | None = "norm_topk_prob"

    def __post_init__(self):
        if self.num_experts and not (self.num_experts >= self.top_k >= 1):
            raise ConfigurationError(
                f"layout needs experts ({self.num_experts}) >= top_k ({self.top_k}) >= 1"
            )

    # names
    def expert_names(self, layer: int, expert: int) -> tuple[str, str, str]:
        self._check_index(layer, expert)
        kw = {"layer": layer, "expert": expert}
        return (self.gate_template.format(**kw), self.up_template.format(**kw),
                self.down_template.format(**kw))

    def extra_expert_names(self, layer: int, expert: int) -> list[str]:
        return [t.format(layer=layer, expert=expert) for t in self.extra_expert_templates]

    def router_name(self, layer: int) -> str:
        self._check_index(layer, 0)
        return self.router_template.format(layer=layer)

    def router_bias_name(self, layer: int) -> str | None:
        if self.router_bias_template is None:
            return None
        return self.router_bias_template.format(layer=layer)

    def _check_index(self, layer: int, expert: int):
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.num_layers})")
        if not 0 <= expert < self.num_experts:
            raise IndexError(f"expert {expert} out of range [0, {self.num_experts})")

    @property
    def expert_numel(self) -> int:
        return 3 * self.hidden_dim * self.expert_dim

    def with_experts(self, n: int) -> "ModelLayout":
        return ModelLayout(**{**self.to_dict(), "num_experts": n})

    # serialization
    def to_dict(self) -> dict:
        d = asdict(self)
        d["extra_expert_templates"] = list(self.extra_expert_templates)
        d["passthrough_prefixes"] = list(self.passthrough_prefixes)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelLayout":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown layout fields: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("extra_expert_templates", "passthrough_prefixes"):
            if key in doc:
                doc[key] = tuple(doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"invalid layout: {exc}") from None

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_config(self, config: "ModelConfig | Mapping") -> "ModelLayout":
        """Fill dimensions from a model config using this layout's key names."""
        data = config.data if isinstance(config, ModelConfig) else config
        doc = self.to_dict()
        for attr, key in (("num_experts", self.num_experts_key), ("top_k", self.top_k_key),
                          ("num_layers", self.num_layers_key), ("hidden_dim", self.hidden_dim_key),
                          ("expert_dim", self.expert_dim_key),
                          ("normalize_topk", self.normalize_topk_key)):
            if key is not None and key in data:
                doc[attr] = data[key] if attr == "normalize_topk" else int(data[key])
        return ModelLayout.from_dict(doc)

    def config_dict(self) -> dict:
        doc = {self.num_layers_key: self.num_layers, self.num_experts_key: self.num_experts,
               self.top_k_key: self.top_k, self.hidden_dim_key: self.hidden_dim,
               self.expert_dim_key: self.expert_dim}
        if self.normalize_topk_key:
            doc[self.normalize_topk_key] = self.normalize_topk
        return doc


_MLP = "model.layers.{layer}.mlp"

PRESETS: dict[str, ModelLayout] = {
    "qwen3-like": ModelLayout(
        name="qwen3-like",
        gate_template=_MLP + ".experts.{expert}.gate_proj.weight",
        up_template=_MLP + ".experts.{expert}.up_proj.weight",
        down_template=_MLP + ".experts.{expert}.down_proj.weight",
        router_template=_MLP + ".gate.weight",
        passthrough_prefixes=("model.embed_tokens.", "model.norm.", "lm_head.",
                              "model.layers.{layer}.self_attn.",
                              "model.layers.{layer}.input_layernorm.",
                              "model.layers.{layer}.post_attention_layernorm."),
    ),
    "olmoe-like": ModelLayout(
        name="olmoe-like",
        gate_template=_MLP + ".experts.{expert}.gate_proj.weight",
        up_template=_MLP + ".experts.{expert}.up_proj.weight",
        down_template=_MLP + ".experts.{expert}.down_proj.weight",
        router_template=_MLP + ".gate.weight",
        normalize_topk=False,
        expert_dim_key="intermediate_size",
        passthrough_prefixes=("model.embed_tokens.", "model.norm.", "lm_head.",
                              "model.layers.{layer}.self_attn.",
                              "model.layers.{layer}.input_layernorm.",
                              "model.layers.{layer}.post_attention_layernorm."),
    ),
    "ernie-like": ModelLayout(
        name="ernie-like",
        gate_template=_MLP + ".experts.{expert}.gate_proj.weight",
        up_template=_MLP + ".experts.{expert}.up_proj.weight",
        down_template=_MLP + ".experts.{expert}.down_proj.weight",
        router_template=_MLP + ".gate.weight",
        router_bias_template=_MLP + ".moe_statics.e_score_correction_bias",
        num_experts_key="moe_num_experts",
        top_k_key="moe_k",
        normalize_topk_key=None,
        passthrough_prefixes=("model.embed_tokens.", "model.norm.", "lm_head.",
                              _MLP + ".shared_experts.",
                              "model.layers.{layer}.self_attn.",
                              "model.layers.{layer}.input_layernorm.",
                              "model.layers.{layer}.post_attention_layernorm."),
    ),
}


def load_layout(spec: str | os.PathLike | ModelLayout,
                config: "ModelConfig | Mapping | None" = None) -> ModelLayout:
    """Resolve a preset name or layout-JSON path, then fill dims from ``config``."""
    if isinstance(spec, ModelLayout):
        layout = spec
    elif str(spec) in PRESETS:
        layout = PRESETS[str(spec)]
    else:
        path = Path(spec)
        if not path.exists():
            raise ConfigurationError(
                f"unknown layout {str(spec)!r}; presets are {sorted(PRESETS)} or a JSON path"
            )
        try:
            layout = ModelLayout.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid layout JSON ({exc})") from None
    if config is not None:
        layout = layout.with_config(config)
    return layout


def resolve_expert(layout: ModelLayout, layer: int, expert: int,
                   checkpoint: Checkpoint | None = None) -> tuple[str, str, str, str]:
    """(gate, up, down, router) tensor names; checked for presence if a checkpoint is given."""
    names = (*layout.expert_names(layer, expert), layout.router_name(layer))
    if checkpoint is not None:
        for name in names:
            if name not in checkpoint:
                raise LayoutMismatchError(
                    f"layout {layout.name!r} expects tensor {name!r}, not in checkpoint"
                )
    return names


def load_expert(checkpoint: Checkpoint, layout: ModelLayout, layer: int,
                expert: int) -> ExpertTensors:
    gate_n, up_n, down_n, _ = resolve_expert(layout, layer, expert, checkpoint)
    m, d = layout.expert_dim, layout.hidden_dim
    out = []
    for name, shape in ((gate_n, (m, d)), (up_n, (m, d)), (down_n, (d, m))):
        meta = checkpoint.meta(name)
        if tuple(meta.shape) != shape:
            raise LayoutMismatchError(
                f"{name!r} has shape {list(meta.shape)}, layout expects {list(shape)}"
            )
        out.append(checkpoint.read(name))
    return ExpertTensors(*out)


def validate_layout(checkpoint: Checkpoint, layout: ModelLayout) -> None:
    """Every templated name must exist with the declared shape."""
    d, m, n = layout.hidden_dim, layout.expert_dim, layout.num_experts
    for layer in range(layout.num_layers):
        for expert in range(n):
            names = resolve_expert(layout, layer, expert, checkpoint)
            for name, shape in zip(names[:3], ((m, d), (m, d), (d, m))):
                if checkpoint.meta(name).shape != shape:
                    raise LayoutMismatchError(
                        f"{name!r} has shape {list(checkpoint.meta(name).shape)}, "
                        f"layout expects {list(shape)}"
                    )
        router = checkpoint.meta(layout.router_name(layer))
        if router.shape != (n, d):
            raise LayoutMismatchError(
                f"router {router.name!r} has shape {list(router.shape)}, expected {[n, d]}"
            )
        bias = layout.router_bias_name(layer)
        if bias is not None and checkpoint.meta(bias).shape != (n,):
            raise LayoutMismatchError(f"router bias {bias!r} must have shape [{n}]")


def open_model(model_dir: str | os.PathLike, layout_spec) -> tuple[Checkpoint, ModelLayout, "ModelConfig"]:
    ckpt = Checkpoint(model_dir)
    config = ckpt.config()
    layout = load_layout(layout_spec, config)
    if layout.num_layers <= 0 or layout.num_experts <= 0:
        raise LayoutMismatchError("config does not declare layer and expert counts for this layout")
    config.check(layout)
    validate_layout(ckpt, layout)
    return ckpt, layout, config


# --------------------------------------------------------------------------
# model config


@dataclass
class ModelConfig:
    """A model ``config.json`` kept as raw text so untouched bytes survive patching."""

    text: str
    data: dict = field(init=False)

    def __post_init__(self):
        try:
            self.data = json.loads(self.text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON ({exc})") from None
        if not isinstance(self.data, dict):
            raise FormatError("config must be a JSON object")

    def check(self, layout: ModelLayout) -> None:
        for key, want in ((layout.num_experts_key, layout.num_experts),
                          (layout.top_k_key, layout.top_k),
                          (layout.num_layers_key, layout.num_layers)):
            if key in self.data and int(self.data[key]) != want:
                raise LayoutMismatchError(f"config {key}={self.data[key]} but layout says {want}")


def patch_config(config: ModelConfig, layout: ModelLayout, new_count: int) -> ModelConfig:
    """Return ``config`` with the expert-count key set to ``new_count``.

    The number is substituted in the raw text so key order, spacing and every
    other byte are preserved; if the key cannot be located textually the
    document is re-serialized instead.
    """
    key = layout.num_experts_key
    old = int(config.data.get(key, layout.num_experts))
    if new_count < layout.top_k:
        raise InvalidPlanError(f"{new_count} experts cannot serve top-{layout.top_k} routing")
    if new_count > old:
        raise InvalidPlanError(f"pruning cannot grow the expert pool ({old} -> {new_count})")
    if key not in config.data:
        raise LayoutMismatchError(f"config has no expert-count key {key!r}")

    pattern = re.compile(r'("' + re.escape(key) + r'"\s*:\s*)(-?\d+)')
    matches = list(pattern.finditer(config.text))
    if len(matches) == 1:
        m = matches[0]
        text = config.text[:m.start(2)] + str(new_count) + config.text[m.end(2):]
        patched = ModelConfig(text)
        if patched.data == {**config.data, key: new_count}:
            return patched
    return ModelConfig(json.dumps({**config.data, key: new_count}, indent=2) + "\n")
