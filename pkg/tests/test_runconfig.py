import pytest

from src.attack import AttackKind
from src.errors import ConfigError
from src.explain import ExplainerId
from src.runconfig import SEED_CONSUMERS, apply_overrides, load_run_config, read_toml, validate_run_config


def test_defaults_follow_other_sections():
    config = validate_run_config({'run': {'seed': 7}, 'dataset': {'class_count': 3, 'image_side': 16}})
    assert config.arch.num_classes == 3
    assert config.arch.image_side == 16
    assert config.attack.seed == 7
    assert config.attack.kind == AttackKind.RH
    assert config.attack.target_class == 0
    assert config.attack.target_expl is not None


def test_cifar_gets_ten_classes():
    config = validate_run_config({'dataset': {'kind': 'cifar10', 'path': 'somewhere'}})
    assert config.arch.num_classes == 10


def test_explainer_section_feeds_the_attack():
    config = validate_run_config({'explainer': {'name': 'grad'}})
    assert config.explainer.name == ExplainerId.GRAD
    assert config.attack.explainer == ExplainerId.GRAD


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match='attack.bogus'):
        validate_run_config({'attack': {'bogus': 1}})
    with pytest.raises(ConfigError):
        validate_run_config({'nonsense': {}})


def test_sf_rejects_a_target_class():
    with pytest.raises(ConfigError):
        validate_run_config({'attack': {'kind': 'SF', 'target_class': 1}})
    config = validate_run_config({'attack': {'kind': 'sf'}})
    assert config.attack.target_class is None


def test_fd_gets_no_target_box():
    config = validate_run_config({'attack': {'kind': 'FD'}})
    assert config.attack.target_expl is None


def test_switching_kind_drops_forbidden_fields():
    raw = {'attack': {'kind': 'RH', 'target_class': 2}}
    merged = apply_overrides(raw, {'attack.kind': 'SF'})
    assert 'target_class' not in merged['attack']
    assert raw['attack']['target_class'] == 2
    assert validate_run_config(merged).attack.kind == AttackKind.SF


def test_seed_override_reaches_the_attack():
    raw = {'run': {'seed': 1}}
    config = validate_run_config(apply_overrides(validate_run_config(raw).source, {'run.seed': 5}))
    assert config.seed == 5 and config.attack.seed == 5


def test_overrides_ignore_unset_values():
    assert apply_overrides({'run': {'seed': 1}}, {'run.seed': None}) == {'run': {'seed': 1}}
    with pytest.raises(ConfigError):
        apply_overrides({}, {'seed': 3})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        read_toml(str(tmp_path / 'absent.toml'))


def test_malformed_file(tmp_path):
    path = tmp_path / 'bad.toml'
    path.write_text('[run\nseed = 1\n')
    with pytest.raises(ConfigError):
        read_toml(str(path))


def test_load_with_overrides(write_run_config):
    path = write_run_config()
    config = load_run_config(str(path), {'attack.epochs': 3})
    assert config.attack.epochs == 3
    assert config.dataset.n_per_class == 3
    assert config.arch.stage_widths == [4, 8]


def test_seed_table():
    table = validate_run_config({'run': {'seed': 4}}).seed_table()
    assert set(table) == set(SEED_CONSUMERS) | {'attack'}
    assert table['attack'] == 4
    assert table == validate_run_config({'run': {'seed': 4}}).seed_table()


def test_train_section_takes_a_norm_mode():
    config = validate_run_config({'train': {'norm_mode': 'FrozenBN'}})
    assert config.train.norm_mode == 'FrozenBN'
    with pytest.raises(ConfigError, match='train.norm_mode'):
        validate_run_config({'train': {'norm_mode': 'NoBN'}})
