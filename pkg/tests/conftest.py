import os
import sys

import numpy as np
import pytest

# Add repo root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.data import gen_synthetic_shapes
from src.nn import build_model


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale end-to-end run, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


TINY_ARCH = {
    'name': 'tiny-resnet',
    'in_channels': 3,
    'image_side': 16,
    'num_classes': 4,
    'stage_widths': [4, 8],
    'blocks_per_stage': 1,
    'stem_width': 4,
}

TINY_VGG = {
    'name': 'tiny-vgg',
    'in_channels': 3,
    'image_side': 16,
    'num_classes': 4,
    'stage_widths': [4, 4, 8, 8],
    'head_hidden': 8,
}


@pytest.fixture
def tiny_arch():
    return dict(TINY_ARCH)


@pytest.fixture
def tiny_model():
    return build_model(TINY_ARCH, seed=0)


@pytest.fixture
def tiny_data():
    return gen_synthetic_shapes(n_per_class=4, class_count=4, image_side=16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_RUN = {
    'run': {'seed': 0},
    'dataset': {'kind': 'synthetic', 'class_count': 4, 'n_per_class': 3, 'test_per_class': 2, 'image_side': 16},
    'arch': {'name': 'tiny-resnet', 'stage_widths': [4, 8], 'blocks_per_stage': 1, 'stem_width': 4},
    'train': {'epochs': 1, 'batch_size': 6},
    'attack': {'epochs': 1, 'batch_size': 6, 'eval_batch_size': 4},
    'defense': {'eval_batch_size': 4},
    'explainer': {'batch_size': 4, 'inspect_samples': 2},
}


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, str):
        return f"'{value}'"
    if isinstance(value, (list, tuple)):
        return '[' + ', '.join(_toml_value(v) for v in value) + ']'
    return repr(value)


def tiny_config_text(out_dir: str, sections: dict = None, **attack) -> str:
    """TOML run file for a few-second end-to-end run; sections override whole keys per table"""
    tables = {name: dict(values) for name, values in TINY_RUN.items()}
    tables['run']['out_dir'] = out_dir
    for name, values in (sections or {}).items():
        tables.setdefault(name, {}).update(values)
    tables['attack'].update(attack)
    blocks = []
    for name, values in tables.items():
        lines = [f"[{name}]"] + [f"{key} = {_toml_value(value)}" for key, value in values.items()]
        blocks.append('\n'.join(lines))
    return '\n\n'.join(blocks) + '\n'


@pytest.fixture
def write_run_config(tmp_path):
    """Writes a run file; keyword arguments become [attack] entries, sections= overrides other tables"""
    def write(sections: dict = None, **attack) -> str:
        path = tmp_path / 'run.toml'
        path.write_text(tiny_config_text(str(tmp_path / 'out'), sections, **attack))
        return str(path)
    return write
