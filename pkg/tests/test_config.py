import json

import pytest

from waitpred.config import load_config, parse_config
from waitpred.errors import ConfigError
from waitpred.gbt import GbtParams
from waitpred.synth import EffectWeights, SynthConfig


def test_defaults_mirror_module_defaults():
    cfg = parse_config({})
    assert cfg.gbt.params() == GbtParams()
    sc = cfg.synth_config()
    ref = SynthConfig()
    assert sc.weights == EffectWeights()
    assert (sc.n_trips, sc.weeks, sc.hotspots, sc.grid) == (ref.n_trips, ref.weeks, ref.hotspots, ref.grid)
    assert cfg.eval.train_frac == 0.8
    assert cfg.eval.cdf_thresholds == [30, 60, 120, 180, 300]
    assert cfg.slots.windows() == ref.windows


def test_every_violation_is_listed():
    with pytest.raises(ConfigError) as info:
        parse_config({"gbt": {"num_trees": -1, "colour": "red"}, "eval": {"train_frac": 2}, "extra": 1})
    msg = str(info.value)
    assert msg.startswith("4 config violation(s)")
    for piece in ("gbt.num_trees", "gbt.colour", "eval.train_frac", "extra"):
        assert piece in msg


def test_semantic_checks():
    with pytest.raises(ConfigError):
        parse_config({"interactions": {"pre_specs": ["driver->O"]}})
    with pytest.raises(ConfigError):
        parse_config({"demand_supply": {"granularity_min": 11}})
    with pytest.raises(ConfigError):
        parse_config({"grid": {"bbox": [1, 1, 0, 2]}})


def test_resolved_json_round_trips(tmp_path):
    cfg = parse_config({"synth": {"seed": 9}})
    path = tmp_path / "c.json"
    path.write_text(cfg.resolved_json())
    assert load_config(path) == cfg
    assert json.loads(cfg.resolved_json())["synth"]["seed"] == 9


def test_unreadable_config(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")
