"""
Weight Snapshots
Binary .xgw codec: magic, version, canonical JSON metadata, per-layer records
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.config import KIND_TAGS, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, get_kind_name
from src.errors import ConfigError, SnapshotError
from src.nn import BatchNorm2d, Model, build_arch_spec, build_model, set_norm_mode
from src.utils.io import atomic_write, sha256_bytes

logger = logging.getLogger(__name__)


@dataclass
class SnapshotEntry:
    name: str
    kind: str
    values: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class WeightSnapshot:
    metadata: dict
    entries: List[SnapshotEntry] = field(default_factory=list)

    def by_name(self) -> Dict[str, SnapshotEntry]:
        return {e.name: e for e in self.entries}

    @property
    def norm_mode(self) -> str:
        return self.metadata.get('norm_mode', '')

    @property
    def tags(self) -> Dict[str, str]:
        return dict(self.metadata.get('tags', {}))


def canonical_json(data: dict) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')


def snapshot_of(model: Model, tags: Optional[dict] = None) -> WeightSnapshot:
    """Plain-data copy of a model's weights, running statistics and metadata"""
    metadata = {
        'arch_spec': model.arch_spec.canonical(),
        'norm_mode': model.norm_mode.value,
        'seed': int(model.seed),
    }
    if tags:
        metadata['tags'] = {str(k): str(v) for k, v in tags.items()}
    entries = [SnapshotEntry(name, kind, np.array(t.data, dtype=np.float64)) for name, kind, t in model.entries()]
    return WeightSnapshot(metadata, entries)


def encode_snapshot(snapshot: WeightSnapshot) -> bytes:
    meta = canonical_json(snapshot.metadata)
    parts = [SNAPSHOT_MAGIC, struct.pack('<I', SNAPSHOT_VERSION), struct.pack('<I', len(meta)), meta]
    for entry in snapshot.entries:
        name = entry.name.encode('utf-8')
        values = np.ascontiguousarray(entry.values, dtype='<f8')
        parts.append(struct.pack('<I', len(name)))
        parts.append(name)
        parts.append(struct.pack('<BB', KIND_TAGS[entry.kind], values.ndim))
        parts.append(struct.pack(f'<{values.ndim}I', *values.shape))
        parts.append(values.tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise SnapshotError(
                f"{self.source}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.raw) - self.pos} left)"
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.raw)


def decode_snapshot(raw: bytes, source: str = '<bytes>') -> WeightSnapshot:
    reader = _Reader(raw, source)
    magic = reader.take(4, 'magic')
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{source}: bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
    (version,) = reader.unpack('<I', 'version')
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"{source}: unsupported snapshot version {version}")
    (meta_len,) = reader.unpack('<I', 'metadata length')
    try:
        metadata = json.loads(reader.take(meta_len, 'metadata').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SnapshotError(f"{source}: unreadable metadata: {e}") from e

    entries = []
    while not reader.done:
        (name_len,) = reader.unpack('<I', 'record name length')
        name = reader.take(name_len, 'record name').decode('utf-8')
        tag, rank = reader.unpack('<BB', f"kind/rank of {name}")
        try:
            kind = get_kind_name(tag)
        except KeyError:
            raise SnapshotError(f"{source}: unknown kind tag {tag} for {name}")
        dims = reader.unpack(f'<{rank}I', f"dims of {name}") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(reader.take(8 * count, f"values of {name}"), dtype='<f8').astype(np.float64)
        entries.append(SnapshotEntry(name, kind, values.reshape(dims)))
    return WeightSnapshot(metadata, entries)


def read_snapshot(path: str) -> WeightSnapshot:
    try:
        with open(path, 'rb') as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise SnapshotError(f"Snapshot not found: {path}")
    return decode_snapshot(raw, path)


def apply_snapshot(model: Model, snapshot: WeightSnapshot):
    """Copy snapshot values into a model of the same architecture"""
    expected = [(name, kind, t.shape) for name, kind, t in model.entries()]
    found = {e.name: e for e in snapshot.entries}
    problems = []
    for name, kind, shape in expected:
        entry = found.get(name)
        if entry is None:
            problems.append(f"{name}: missing")
        elif entry.kind != kind or entry.shape != shape:
            problems.append(f"{name}: snapshot {entry.kind}{entry.shape} vs model {kind}{shape}")
    extra = sorted(set(found) - {name for name, _, _ in expected})
    problems.extend(f"{name}: not in architecture" for name in extra)
    if problems:
        raise SnapshotError("Snapshot does not match architecture: " + "; ".join(problems))

    for layer in model.layers():
        if isinstance(layer, BatchNorm2d):
            layer.gamma.assign_(found[f"{layer.name}.gamma"].values)
            layer.beta.assign_(found[f"{layer.name}.beta"].values)
            layer.running_mean = found[f"{layer.name}.running_mean"].values.copy()
            layer.running_var = found[f"{layer.name}.running_var"].values.copy()
            if np.any(layer.running_var < 0):
                raise SnapshotError(f"{layer.name}: negative running variance")
        else:
            for name, tensor in layer.parameters():
                tensor.assign_(found[name].values)


def model_from_snapshot(snapshot: WeightSnapshot) -> Model:
    meta = snapshot.metadata
    try:
        arch = build_arch_spec(meta['arch_spec'])
        seed = int(meta.get('seed', 0))
        norm_mode = meta['norm_mode']
    except (KeyError, ConfigError) as e:
        raise SnapshotError(f"Snapshot metadata is incomplete or invalid: {e}") from e
    model = build_model(arch, seed)
    apply_snapshot(model, snapshot)
    set_norm_mode(model, norm_mode)
    return model


def save_weights(model: Model, path: str, tags: Optional[dict] = None) -> str:
    """Write an .xgw snapshot atomically; returns its SHA-256. tags (e.g. attack kind) go into the metadata"""
    raw = encode_snapshot(snapshot_of(model, tags))
    with atomic_write(path, 'wb') as fh:
        fh.write(raw)
    digest = sha256_bytes(raw)
    logger.info(f"Saved snapshot {path} ({len(raw)} bytes, sha256 {digest[:12]})")
    return digest


def load_weights(path: str) -> Model:
    model = model_from_snapshot(read_snapshot(path))
    logger.debug(f"Loaded snapshot {path} ({model.arch_spec.name}, {model.norm_mode.value})")
    return model
