import math

import pytest

from samlab.config import (
    LabSettings,
    config_digest,
    load_configurations,
    load_experiment_config,
    parse_values,
)
from samlab.errors import ConfigError
from samlab.utils.grouping_utils import Granularity, ScaleRule
from samlab.utils.model_utils import build_mlp
from samlab.utils.sam_utils import Implementation
from tests.conftest import write_config


def test_defaults_without_a_file():
    cfg = load_experiment_config()
    assert cfg.model.sizes == (20, 64, 64, 2)
    assert cfg.sam.K == 0
    assert cfg.sam.p == 2.0
    assert cfg.eval.epsilons == (0.05, 0.1, 0.2)
    assert cfg.eval.k == 50
    assert len(cfg.trial.etas) == 100


def test_file_values_are_typed(tmp_path):
    path = write_config(tmp_path / "x.cfg", [
        "# comment lines are ignored",
        "sam.K=3",
        "sam.p=inf",
        "sam.rule=GA_SAM",
        "sam.implementation=SINGLE_STEP",
        "sam.granularity=element",
        "model.tied=true",
        "sam.eta=none",
    ])
    cfg = load_experiment_config(path)
    assert cfg.sam.K == 3
    assert math.isinf(cfg.sam.p)
    assert cfg.sam.rule is ScaleRule.GA_SAM
    assert cfg.sam.implementation is Implementation.SINGLE_STEP
    assert cfg.sam.granularity is Granularity.ELEMENT
    assert cfg.model.tied is True
    assert cfg.sam.eta is None


def test_unknown_key_names_the_key(tmp_path):
    path = write_config(tmp_path / "x.cfg", ["sam.bogus=1"])
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(path)
    assert excinfo.value.key == "sam.bogus"
    assert str(excinfo.value).startswith("sam.bogus:")


def test_key_without_value(tmp_path):
    path = write_config(tmp_path / "x.cfg", ["sam.K"])
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(path)
    assert excinfo.value.key == "sam.K"


@pytest.mark.parametrize("key, text", [
    ("sam.K", "three"),
    ("sam.p", "1"),
    ("sam.epsilon", "nan"),
    ("sam.rule", "GA-SAM"),
    ("model.tied", "maybe"),
    ("trial.etas", "0..1:1"),
])
def test_unparseable_values(key, text):
    with pytest.raises(ConfigError) as excinfo:
        parse_values({key: text})
    assert excinfo.value.key == key


def test_invalid_section_is_reported_by_section(tmp_path):
    path = write_config(tmp_path / "x.cfg", ["sam.K=-1"])
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(path)
    assert excinfo.value.key == "sam"


def test_environment_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMLAB_TEST_EPSILON", "0.25")
    path = write_config(tmp_path / "x.cfg", ["sam.epsilon=${SAMLAB_TEST_EPSILON}"])
    assert load_experiment_config(path).sam.epsilon == 0.25


def test_unset_data_dir_falls_back_to_lab_settings(tmp_path, monkeypatch):
    monkeypatch.delenv("SAMLAB_DATA_DIR", raising=False)
    path = write_config(tmp_path / "x.cfg", ["data.path=${SAMLAB_DATA_DIR}/corpus.txt"])
    assert load_experiment_config(path).data.path == "data/corpus.txt"
    settings = LabSettings(data_dir=str(tmp_path / "d"))
    assert load_experiment_config(path, settings).data.path == str(tmp_path / "d" / "corpus.txt")


def test_environment_beats_lab_settings_in_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMLAB_DATA_DIR", "/srv/samlab")
    path = write_config(tmp_path / "x.cfg", ["data.path=${SAMLAB_DATA_DIR}/mnist"])
    assert load_experiment_config(path, LabSettings(data_dir="ignored")).data.path == "/srv/samlab/mnist"


def test_float_list_grid_and_explicit_list():
    parsed = parse_values({"trial.etas": "0.0..1.0:5", "eval.epsilons": "0.05, 0.1"})
    assert parsed["trial.etas"] == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert parsed["eval.epsilons"] == (0.05, 0.1)


def test_presets_load_by_name():
    cfg = load_experiment_config("ga-sam")
    assert cfg.sam.rule is ScaleRule.GA_SAM
    assert cfg.sam.K == 1
    assert math.isinf(cfg.sam.p)
    with pytest.raises(ConfigError):
        load_experiment_config("no-such-preset")


def test_ga_sam_preset_keeps_the_per_step_increase_small():
    cfg = load_experiment_config("ga-sam")
    n = build_mlp(cfg.model.sizes).layout.size
    assert cfg.sam.epsilon * math.sqrt(n) <= 0.05


def test_digest_is_stable_and_sensitive(tmp_path):
    path = write_config(tmp_path / "x.cfg", ["sam.K=1", "sam.epsilon=0.05"])
    first = config_digest(load_experiment_config(path))
    assert first == config_digest(load_experiment_config(path))
    other = write_config(tmp_path / "y.cfg", ["sam.K=1", "sam.epsilon=0.06"])
    assert config_digest(load_experiment_config(other)) != first
    assert len(first) == 64


def test_overrides():
    cfg = load_experiment_config().with_overrides(seed=4, directory="elsewhere", run_id="r1")
    assert cfg.model.seed == 4
    assert cfg.output.directory == "elsewhere"
    assert cfg.output.run_id == "r1"


def test_environment_settings(monkeypatch):
    monkeypatch.setenv("SAMLAB_JOBS", "3")
    monkeypatch.setenv("SAMLAB_DEBUG", "true")
    settings = load_configurations()
    assert settings == LabSettings(output_dir=settings.output_dir, log_level=settings.log_level, jobs=3,
                                   data_dir=settings.data_dir, debug=True)

    monkeypatch.setenv("SAMLAB_JOBS", "many")
    with pytest.raises(ConfigError):
        load_configurations()
