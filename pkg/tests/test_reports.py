import json

import numpy as np
import pandas as pd
import pytest

from src.reports import RunMeta, map_grid_frame, write_csv, write_json


def test_csv_keeps_row_order_and_float_format(tmp_path):
    path = write_csv([{'a': 1.0 / 3.0, 'b': 'x'}, {'a': 2.0, 'b': 'y'}], str(tmp_path / 'rows.csv'))
    lines = open(path).read().splitlines()
    assert lines == ['a,b', '0.3333333333,x', '2,y']


def test_json_of_numpy_values(tmp_path):
    path = write_json({'values': np.arange(3), 'n': np.int64(2)}, str(tmp_path / 'doc.json'))
    with open(path) as fh:
        assert json.load(fh) == {'n': 2, 'values': [0, 1, 2]}


def test_map_grid_frame():
    frame = map_grid_frame(np.array([[0.0, 0.5], [1.0, 0.25]]))
    assert list(frame.columns) == ['row', 'col', 'value']
    assert frame.iloc[1].tolist() == [0, 1, 0.5]
    with pytest.raises(ValueError):
        map_grid_frame(np.zeros(3))


def test_run_meta(tmp_path):
    meta = RunMeta('defend', {'run': {'seed': 1}}, seed=1)
    meta.add_snapshot('/somewhere/attacked.xgw', 'abc')
    meta.add_output(str(tmp_path / 'b.csv'))
    meta.add_output(str(tmp_path / 'a.csv'))
    meta.extra['note'] = 'x'
    with open(meta.write(str(tmp_path))) as fh:
        document = json.load(fh)
    assert document['snapshots'] == {'attacked.xgw': 'abc'}
    assert document['outputs'] == ['a.csv', 'b.csv']
    assert document['note'] == 'x'
    assert 'numpy' in document['versions']


def test_csv_from_frame(tmp_path):
    frame = pd.DataFrame({'layer': ['stem'], 'cka': [1.0]})
    path = write_csv(frame, str(tmp_path / 'frame.csv'))
    assert pd.read_csv(path).to_dict('records') == [{'layer': 'stem', 'cka': 1.0}]
