"""
Report Writers
Plot-ready CSV tables, JSON report documents and run metadata
"""
import json
import logging
import os
from datetime import datetime, timezone
from importlib import metadata
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.utils.io import atomic_write

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10g'
PACKAGES = ['numpy', 'scipy', 'pandas', 'pydantic', 'python-dotenv', 'tqdm']


def write_csv(rows: Union[pd.DataFrame, Sequence[dict]], path: str,
              columns: Optional[List[str]] = None) -> str:
    """Write rows in the given order; floats use a fixed format so bodies are reproducible"""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    with atomic_write(path, 'w') as fh:
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(document: Union[BaseModel, dict, list], path: str) -> str:
    """Pydantic models via model_dump_json; plain data via json with sorted keys"""
    if isinstance(document, BaseModel):
        text = document.model_dump_json(indent=2)
    else:
        text = json.dumps(_plain(document), indent=2, sort_keys=True)
    with atomic_write(path, 'w') as fh:
        fh.write(text + '\n')
    logger.info(f"Wrote {path}")
    return path


def _plain(value):
    if isinstance(value, BaseModel):
        return value.model_dump(mode='json')
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def map_grid_frame(values: np.ndarray) -> pd.DataFrame:
    """Long-format grid: one (row, col, value) line per pixel"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"Map grid must be 2-D, got shape {values.shape}")
    rows, cols = np.indices(values.shape)
    return pd.DataFrame({'row': rows.ravel(), 'col': cols.ravel(), 'value': values.ravel()})


def write_map_csv(values, path: str) -> str:
    data = getattr(values, 'values', values)
    return write_csv(map_grid_frame(data), path)


def package_versions(packages: Iterable[str] = PACKAGES) -> Dict[str, str]:
    versions = {}
    for name in packages:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'not installed'
    return versions


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunMeta:
    """Collects what a command did and writes run_meta.json next to its outputs"""

    def __init__(self, command: str, config: Optional[dict] = None, seed: Optional[int] = None):
        self.command = command
        self.config = config or {}
        self.seed = seed
        self.seeds: Dict[str, int] = {}
        self.snapshots: Dict[str, str] = {}
        self.outputs: List[str] = []
        self.extra: dict = {}
        self.started = utc_now()

    def add_snapshot(self, path: str, sha256: str):
        self.snapshots[os.path.basename(path)] = sha256

    def add_output(self, path: str):
        self.outputs.append(os.path.basename(path))

    def document(self) -> dict:
        return {
            'command': self.command,
            'config': self.config,
            'seed': self.seed,
            'derived_seeds': self.seeds,
            'snapshots': self.snapshots,
            'outputs': sorted(self.outputs),
            'versions': package_versions(),
            'started': self.started,
            'finished': utc_now(),
            **self.extra,
        }

    def write(self, out_dir: str) -> str:
        return write_json(self.document(), os.path.join(out_dir, 'run_meta.json'))
